//! Collaboration-mode inference from the force stream.
//!
//! A hysteresis rule on the human-force magnitude: remote flips to pHRI
//! after `k` consecutive 100 Hz ticks above `f_on`; pHRI flips back
//! after `k` consecutive ticks below `f_off`. Between the thresholds
//! nothing changes, so oscillation inside the band cannot chatter.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Phri,
    Remote,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Phri => write!(f, "phri"),
            Mode::Remote => write!(f, "remote"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModeState {
    pub mode: Mode,
    pub above_count: usize,
    pub below_count: usize,
    pub f_on: f64,
    pub f_off: f64,
    pub dwell: usize,
}

impl ModeState {
    pub fn new(f_on: f64, f_off: f64, dwell: usize) -> Result<Self> {
        if !(f_on > f_off && f_off > 0.0) {
            return Err(Error::Contract("need f_on > f_off > 0".into()));
        }
        if dwell == 0 {
            return Err(Error::Contract("dwell must be >= 1".into()));
        }
        Ok(ModeState {
            mode: Mode::Remote,
            above_count: 0,
            below_count: 0,
            f_on,
            f_off,
            dwell,
        })
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Self::new(cfg.mode_f_on, cfg.mode_f_off, cfg.mode_dwell)
    }
}

/// Advance the mode state by one 100 Hz tick given the human-force
/// magnitude. Returns the updated state.
pub fn update_mode(state: &ModeState, f_h_norm: f64) -> ModeState {
    let mut next = state.clone();
    match state.mode {
        Mode::Remote => {
            next.below_count = 0;
            if f_h_norm > state.f_on {
                next.above_count += 1;
                if next.above_count >= state.dwell {
                    next.mode = Mode::Phri;
                    next.above_count = 0;
                }
            } else {
                next.above_count = 0;
            }
        }
        Mode::Phri => {
            next.above_count = 0;
            if f_h_norm < state.f_off {
                next.below_count += 1;
                if next.below_count >= state.dwell {
                    next.mode = Mode::Remote;
                    next.below_count = 0;
                }
            } else {
                next.below_count = 0;
            }
        }
    }
    next
}

/// Run the rule over a whole force-magnitude stream, returning the mode
/// at every tick (after that tick's update).
pub fn infer_modes(initial: &ModeState, f_norms: &[f64]) -> Vec<Mode> {
    let mut state = initial.clone();
    let mut out = Vec::with_capacity(f_norms.len());
    for &f in f_norms {
        state = update_mode(&state, f);
        out.push(state.mode);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_state() -> ModeState {
        ModeState::new(2.0, 0.5, 10).unwrap()
    }

    #[test]
    fn zero_force_stays_remote_forever() {
        let modes = infer_modes(&default_state(), &vec![0.0; 5000]);
        assert!(modes.iter().all(|m| *m == Mode::Remote));
    }

    #[test]
    fn step_force_switches_exactly_at_dwell() {
        // 5 N step with f_on = 2, k = 10: the switch lands on tick 10.
        let modes = infer_modes(&default_state(), &vec![5.0; 20]);
        assert!(modes[..9].iter().all(|m| *m == Mode::Remote));
        assert_eq!(modes[9], Mode::Phri, "tick 10 (index 9) flips");
        assert!(modes[9..].iter().all(|m| *m == Mode::Phri));
    }

    #[test]
    fn oscillation_inside_band_never_chatters() {
        // Alternating between the two thresholds (inclusive band edges)
        // must leave the mode constant in both directions.
        let band: Vec<f64> = (0..2000)
            .map(|i| if i % 2 == 0 { 0.5 } else { 2.0 })
            .collect();
        let modes = infer_modes(&default_state(), &band);
        assert!(modes.iter().all(|m| *m == Mode::Remote));

        let mut engaged = default_state();
        engaged.mode = Mode::Phri;
        let modes = infer_modes(&engaged, &band);
        assert!(modes.iter().all(|m| *m == Mode::Phri));
    }

    #[test]
    fn sweep_band_interior_no_switches() {
        // Any force sequence strictly inside (f_off, f_on] cannot switch
        // a remote state; strictly within [f_off, f_on) cannot switch a
        // pHRI state.
        let vals = [0.51, 0.8, 1.2, 1.7, 1.99];
        for &v in &vals {
            let modes = infer_modes(&default_state(), &vec![v; 500]);
            assert!(modes.iter().all(|m| *m == Mode::Remote), "f={v}");
        }
    }

    #[test]
    fn min_dwell_between_switches() {
        // A force trace alternating 12 ticks on / 12 ticks off produces
        // switches separated by at least the dwell.
        let mut f = Vec::new();
        for _ in 0..20 {
            f.extend(std::iter::repeat(5.0).take(12));
            f.extend(std::iter::repeat(0.0).take(12));
        }
        let modes = infer_modes(&default_state(), &f);
        let mut last_switch: Option<usize> = None;
        let mut prev = Mode::Remote;
        for (i, m) in modes.iter().enumerate() {
            if *m != prev {
                if let Some(ls) = last_switch {
                    assert!(i - ls >= 10, "switches at {ls} and {i} closer than dwell");
                }
                last_switch = Some(i);
                prev = *m;
            }
        }
        assert!(last_switch.is_some(), "expected at least one switch");
    }
}
