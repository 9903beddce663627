//! Two-rate control hierarchy: 10 Hz policy setpoints drive a 100 Hz
//! impedance law `f_r = K(x_d - x) - D·ẋ`, integrated semi-implicitly.

use crate::error::{Error, Result};

/// Inner-loop period (100 Hz).
pub const DT_INNER: f64 = 0.01;
/// Policy period (10 Hz).
pub const DT_POLICY: f64 = 0.1;
/// Inner steps per policy tick.
pub const INNER_PER_POLICY: usize = 10;

/// Diagonal impedance gains, one entry per Cartesian axis.
#[derive(Debug, Clone)]
pub struct ImpedanceParams {
    pub mass: Vec<f64>,
    pub damping: Vec<f64>,
    pub stiffness: Vec<f64>,
}

impl ImpedanceParams {
    pub fn uniform(dims: usize, mass: f64, damping: f64, stiffness: f64) -> Result<Self> {
        let p = ImpedanceParams {
            mass: vec![mass; dims],
            damping: vec![damping; dims],
            stiffness: vec![stiffness; dims],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mass.len() != self.damping.len() || self.mass.len() != self.stiffness.len() {
            return Err(Error::Dimension("impedance gain lengths differ".into()));
        }
        for v in self.mass.iter().chain(&self.damping).chain(&self.stiffness) {
            if !(*v > 0.0 && v.is_finite()) {
                return Err(Error::Contract("impedance gains must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.mass.len()
    }
}

/// Plant and setpoint state at one instant of the inner loop.
#[derive(Debug, Clone)]
pub struct ControlState {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub x_d: Vec<f64>,
    pub inner_tick: u64,
    pub outer_tick: u64,
}

impl ControlState {
    pub fn at_rest(x: Vec<f64>) -> Self {
        let d = x.len();
        ControlState { x_d: x.clone(), x, v: vec![0.0; d], inner_tick: 0, outer_tick: 0 }
    }
}

/// Shared semi-implicit Euler update: `v += f/m·dt` then `x += v·dt`.
/// Both the impedance loop and the simulator plant use this exact path.
pub fn integrate(x: &mut [f64], v: &mut [f64], total_force: &[f64], mass: &[f64], dt: f64) {
    for i in 0..x.len() {
        v[i] += total_force[i] / mass[i] * dt;
        x[i] += v[i] * dt;
    }
}

/// One 100 Hz impedance step against the state's current setpoint.
/// Returns the updated state and the commanded robot force `f_r`.
pub fn impedance_step(
    state: &ControlState,
    f_ext: &[f64],
    params: &ImpedanceParams,
) -> Result<(ControlState, Vec<f64>)> {
    let d = params.dims();
    if state.x.len() != d || f_ext.len() != d {
        return Err(Error::Dimension("impedance_step dimension mismatch".into()));
    }
    if f_ext.iter().any(|f| !f.is_finite()) {
        return Err(Error::SafetyStop("non-finite external force".into()));
    }
    let mut next = state.clone();
    let mut f_r = vec![0.0; d];
    let mut total = vec![0.0; d];
    for i in 0..d {
        f_r[i] = params.stiffness[i] * (state.x_d[i] - state.x[i]) - params.damping[i] * state.v[i];
        total[i] = f_r[i] + f_ext[i];
    }
    integrate(&mut next.x, &mut next.v, &total, &params.mass, DT_INNER);
    next.inner_tick += 1;
    Ok((next, f_r))
}

/// Linear setpoint interpolation across one policy period:
/// inner tick 0 maps to `prev`, tick 10 would map to `next`.
pub fn interpolate_setpoint(prev: &[f64], next: &[f64], inner_tick: usize) -> Result<Vec<f64>> {
    if inner_tick >= INNER_PER_POLICY {
        return Err(Error::Contract(format!(
            "inner tick {inner_tick} outside 0..{INNER_PER_POLICY}"
        )));
    }
    let a = inner_tick as f64 / INNER_PER_POLICY as f64;
    Ok(prev
        .iter()
        .zip(next)
        .map(|(p, n)| p + (n - p) * a)
        .collect())
}

/// Bridges the 10 Hz policy to the 100 Hz impedance loop.
///
/// Usage per policy tick: call [`RateBridge::on_policy_action`] (or
/// [`RateBridge::hold`] when no action arrived), then exactly
/// [`INNER_PER_POLICY`] calls of [`RateBridge::inner_step`]. The rate
/// contract is enforced, not assumed.
pub struct RateBridge {
    params: ImpedanceParams,
    prev_target: Vec<f64>,
    next_target: Vec<f64>,
    inner_in_cycle: usize,
}

impl RateBridge {
    pub fn new(initial_setpoint: Vec<f64>, params: ImpedanceParams) -> Result<Self> {
        params.validate()?;
        if initial_setpoint.len() != params.dims() {
            return Err(Error::Dimension("setpoint dimension mismatch".into()));
        }
        Ok(RateBridge {
            params,
            prev_target: initial_setpoint.clone(),
            next_target: initial_setpoint,
            inner_in_cycle: 0,
        })
    }

    pub fn target(&self) -> &[f64] {
        &self.next_target
    }

    /// Apply one policy action: the setpoint target advances by `delta`
    /// and the next ten inner steps interpolate toward it.
    pub fn on_policy_action(&mut self, delta: &[f64]) -> Result<()> {
        if self.inner_in_cycle != 0 {
            return Err(Error::Contract(format!(
                "policy action mid-cycle (inner step {}/{})",
                self.inner_in_cycle, INNER_PER_POLICY
            )));
        }
        if delta.len() != self.params.dims() {
            return Err(Error::Dimension("action dimension mismatch".into()));
        }
        self.prev_target = self.next_target.clone();
        for (t, d) in self.next_target.iter_mut().zip(delta) {
            *t += d;
        }
        Ok(())
    }

    /// Missed policy tick: hold the last setpoint (documented degradation).
    pub fn hold(&mut self) -> Result<()> {
        if self.inner_in_cycle != 0 {
            return Err(Error::Contract("hold mid-cycle".into()));
        }
        self.prev_target = self.next_target.clone();
        Ok(())
    }

    /// One 100 Hz sub-step against the interpolated setpoint.
    pub fn inner_step(
        &mut self,
        state: &ControlState,
        f_ext: &[f64],
    ) -> Result<(ControlState, Vec<f64>)> {
        if self.inner_in_cycle >= INNER_PER_POLICY {
            return Err(Error::Contract(
                "inner step without a fresh policy tick".into(),
            ));
        }
        let x_d = interpolate_setpoint(&self.prev_target, &self.next_target, self.inner_in_cycle)?;
        let mut staged = state.clone();
        staged.x_d = x_d;
        let (mut next, f_r) = impedance_step(&staged, f_ext, &self.params)?;
        self.inner_in_cycle += 1;
        if self.inner_in_cycle == INNER_PER_POLICY {
            self.inner_in_cycle = 0;
            next.outer_tick += 1;
        }
        Ok((next, f_r))
    }
}
