//! Quantitative evaluation: pHRI collaboration metrics and
//! intent-prediction errors.
//!
//! Conventions: the pHRI angle, assistance index, and mutual-assistance
//! percentage are computed only over pHRI-mode ticks; human mechanical
//! work covers the full episode. Samples where either force norm falls
//! below [`FORCE_EPS`] are excluded from the angle/index averages and
//! counted separately rather than producing NaN.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{Error, Result};
use crate::mode::Mode;

/// Forces below this norm (N) make the angle/index undefined.
pub const FORCE_EPS: f64 = 1e-6;

/// Angle between the robot and human force vectors, in degrees.
/// `None` when either norm is below [`FORCE_EPS`].
pub fn phri_angle(f_r: &[f64], f_h: &[f64]) -> Option<f64> {
    let nr = norm(f_r);
    let nh = norm(f_h);
    if nr <= FORCE_EPS || nh <= FORCE_EPS {
        return None;
    }
    let cos = (dot(f_r, f_h) / (nr * nh)).clamp(-1.0, 1.0);
    Some(cos.acos().to_degrees())
}

/// Projection of the robot force onto the human force direction (N);
/// positive exactly when the pHRI angle is acute. `None` when the human
/// force is below [`FORCE_EPS`].
pub fn assist_index(f_r: &[f64], f_h: &[f64]) -> Option<f64> {
    let nh = norm(f_h);
    if nh <= FORCE_EPS {
        return None;
    }
    Some(dot(f_r, f_h) / nh)
}

/// Fraction of valid samples with angle strictly below 90 degrees.
pub fn mutual_assist_pct(theta_deg: &[f64]) -> Result<f64> {
    if theta_deg.is_empty() {
        return Err(Error::UndefinedMetric(
            "mutual-assistance percentage of an empty stream".into(),
        ));
    }
    let assisting = theta_deg.iter().filter(|t| **t < 90.0).count();
    Ok(assisting as f64 / theta_deg.len() as f64)
}

/// Human mechanical work along the path (J): trapezoidal sum of
/// `<f_h, dx>` per 100 Hz increment. Returns the signed headline value
/// and the absolute-increment variant.
pub fn mechanical_work(f_h: &[Vec<f64>], x: &[Vec<f64>]) -> Result<(f64, f64)> {
    if f_h.len() != x.len() {
        return Err(Error::Data(format!(
            "work streams misaligned: {} force vs {} position samples",
            f_h.len(),
            x.len()
        )));
    }
    let mut signed = 0.0;
    let mut absolute = 0.0;
    for t in 1..x.len() {
        let mut inc = 0.0;
        for i in 0..x[t].len() {
            let favg = 0.5 * (f_h[t - 1][i] + f_h[t][i]);
            inc += favg * (x[t][i] - x[t - 1][i]);
        }
        signed += inc;
        absolute += inc.abs();
    }
    Ok((signed, absolute))
}

/// Per-step Euclidean position errors between a predicted and a true
/// trajectory, reported in millimetres as (mean, max).
pub fn traj_errors(predicted: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<(f64, f64)> {
    if predicted.len() != truth.len() {
        return Err(Error::Data(format!(
            "trajectory lengths differ: {} vs {}",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Data("empty trajectory".into()));
    }
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for (p, t) in predicted.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::Data("trajectory point dims differ".into()));
        }
        let e = p
            .iter()
            .zip(t)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            * 1000.0;
        sum += e;
        max = max.max(e);
    }
    Ok((sum / predicted.len() as f64, max))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuccessStats {
    pub successes: usize,
    pub n: usize,
    pub rate: f64,
    /// Exact (Clopper-Pearson) 95% binomial interval.
    pub lo95: f64,
    pub hi95: f64,
}

/// Success rate with an exact 95% binomial interval.
pub fn success_rate(outcomes: &[bool]) -> Result<SuccessStats> {
    let n = outcomes.len();
    if n == 0 {
        return Err(Error::UndefinedMetric("success rate of zero rollouts".into()));
    }
    let x = outcomes.iter().filter(|s| **s).count();
    let lo95 = if x == 0 { 0.0 } else { beta_quantile(x as f64, (n - x + 1) as f64, 0.025)? };
    let hi95 = if x == n { 1.0 } else { beta_quantile((x + 1) as f64, (n - x) as f64, 0.975)? };
    Ok(SuccessStats { successes: x, n, rate: x as f64 / n as f64, lo95, hi95 })
}

/// Beta quantile by bisection on the regularized incomplete beta CDF.
/// The library's generic inverse is only ~1e-5 accurate; the exact
/// interval test wants full float precision.
fn beta_quantile(a: f64, b: f64, p: f64) -> Result<f64> {
    let dist = Beta::new(a, b).map_err(|e| Error::Numeric(format!("beta: {e}")))?;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if dist.cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Per-episode force/motion aggregates; combine across rollouts with
/// [`PhriAggregate::merge`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PhriAggregate {
    pub theta_sum: f64,
    pub assist_sum: f64,
    pub assisting_count: usize,
    pub valid_samples: usize,
    pub excluded_samples: usize,
    pub work_signed: f64,
    pub work_abs: f64,
}

impl PhriAggregate {
    pub fn merge(&mut self, other: &PhriAggregate) {
        self.theta_sum += other.theta_sum;
        self.assist_sum += other.assist_sum;
        self.assisting_count += other.assisting_count;
        self.valid_samples += other.valid_samples;
        self.excluded_samples += other.excluded_samples;
        self.work_signed += other.work_signed;
        self.work_abs += other.work_abs;
    }

    pub fn theta_avg(&self) -> Option<f64> {
        (self.valid_samples > 0).then(|| self.theta_sum / self.valid_samples as f64)
    }

    pub fn assist_avg(&self) -> Option<f64> {
        (self.valid_samples > 0).then(|| self.assist_sum / self.valid_samples as f64)
    }

    pub fn mutual_pct(&self) -> Option<f64> {
        (self.valid_samples > 0).then(|| self.assisting_count as f64 / self.valid_samples as f64)
    }
}

/// Evaluate the pHRI metrics over aligned 100 Hz streams of one episode.
/// Angle/index/percentage samples are drawn from pHRI-mode ticks only;
/// work integrates over the whole episode.
pub fn evaluate_phri_streams(
    f_r: &[Vec<f64>],
    f_h: &[Vec<f64>],
    x: &[Vec<f64>],
    modes: &[Mode],
) -> Result<PhriAggregate> {
    if f_r.len() != f_h.len() || f_r.len() != x.len() || f_r.len() != modes.len() {
        return Err(Error::Data("pHRI metric streams misaligned".into()));
    }
    let mut agg = PhriAggregate::default();
    for t in 0..f_r.len() {
        if modes[t] != Mode::Phri {
            continue;
        }
        match (phri_angle(&f_r[t], &f_h[t]), assist_index(&f_r[t], &f_h[t])) {
            (Some(theta), Some(assist)) => {
                agg.theta_sum += theta;
                agg.assist_sum += assist;
                if theta < 90.0 {
                    agg.assisting_count += 1;
                }
                agg.valid_samples += 1;
            }
            _ => {
                agg.excluded_samples += 1;
            }
        }
    }
    let (signed, absolute) = mechanical_work(f_h, x)?;
    agg.work_signed = signed;
    agg.work_abs = absolute;
    Ok(agg)
}

/// Headline numbers for one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub theta_avg_deg: Option<f64>,
    pub assist_avg_n: Option<f64>,
    pub mutual_pct: Option<f64>,
    pub work_signed_j: f64,
    pub work_abs_j: f64,
    pub e_avg_mm: Option<f64>,
    pub e_max_mm: Option<f64>,
    pub success: Option<SuccessStats>,
    pub valid_force_samples: usize,
    pub excluded_force_samples: usize,
    pub n_prediction_windows: usize,
}

impl MetricReport {
    pub fn from_parts(
        agg: &PhriAggregate,
        e: Option<(f64, f64)>,
        n_windows: usize,
        success: Option<SuccessStats>,
    ) -> Self {
        MetricReport {
            theta_avg_deg: agg.theta_avg(),
            assist_avg_n: agg.assist_avg(),
            mutual_pct: agg.mutual_pct(),
            work_signed_j: agg.work_signed,
            work_abs_j: agg.work_abs,
            e_avg_mm: e.map(|v| v.0),
            e_max_mm: e.map(|v| v.1),
            success,
            valid_force_samples: agg.valid_samples,
            excluded_force_samples: agg.excluded_samples,
            n_prediction_windows: n_windows,
        }
    }

    /// Aligned-text rendering of the headline columns.
    pub fn to_table(&self) -> String {
        fn opt(v: Option<f64>, unit: &str) -> String {
            match v {
                Some(x) => format!("{x:.3} {unit}"),
                None => "n/a".to_string(),
            }
        }
        let mut rows: Vec<(String, String)> = vec![
            ("theta_avg".into(), opt(self.theta_avg_deg, "deg")),
            ("I_ASST_avg".into(), opt(self.assist_avg_n, "N")),
            ("mu".into(), opt(self.mutual_pct, "")),
            ("W_signed".into(), format!("{:.4} J", self.work_signed_j)),
            ("W_abs".into(), format!("{:.4} J", self.work_abs_j)),
            ("e_avg".into(), opt(self.e_avg_mm, "mm")),
            ("e_max".into(), opt(self.e_max_mm, "mm")),
        ];
        if let Some(s) = &self.success {
            rows.push((
                "success".into(),
                format!("{:.2} [{:.3}, {:.3}] ({}/{})", s.rate, s.lo95, s.hi95, s.successes, s.n),
            ));
        }
        rows.push((
            "force_samples".into(),
            format!("{} valid, {} excluded", self.valid_force_samples, self.excluded_force_samples),
        ));
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:width$}  {v}\n"));
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
