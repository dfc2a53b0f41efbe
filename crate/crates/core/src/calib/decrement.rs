use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::CalibError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecrementFit {
    /// Mean logarithmic decrement per cycle.
    pub delta: f64,
    pub zeta: f64,
    /// Undamped natural frequency [rad/s].
    pub omega_n: f64,
    /// Refined peak times and values.
    pub peaks: Vec<(f64, f64)>,
}

/// Vertex of the parabola through three equally spaced samples.
fn refine_peak(t: &[f64], x: &[f64], k: usize) -> (f64, f64) {
    let (a, b, c) = (x[k - 1], x[k], x[k + 1]);
    let den = a - 2.0 * b + c;
    if den == 0.0 {
        return (t[k], b);
    }
    let off = 0.5 * (a - c) / den;
    let h = 0.5 * (t[k + 1] - t[k - 1]);
    (t[k] + off * h, b - 0.25 * (a - c) * off)
}

/// Damping ratio and natural frequency of a free oscillation about zero from
/// successive positive peaks. The signal must already be measured relative
/// to its equilibrium.
pub fn log_decrement_fit(t: &[f64], x: &[f64]) -> Result<DecrementFit, CalibError> {
    if t.len() != x.len() {
        return Err(CalibError::InvalidProblem(format!(
            "{} time stamps but {} values",
            t.len(),
            x.len()
        )));
    }
    let mut peaks = Vec::new();
    for k in 1..x.len().saturating_sub(1) {
        if x[k] > 0.0 && x[k] > x[k - 1] && x[k] >= x[k + 1] {
            peaks.push(refine_peak(t, x, k));
        }
    }
    if peaks.len() < 3 {
        return Err(CalibError::InsufficientPeaks(peaks.len()));
    }
    let m = (peaks.len() - 1) as f64;
    let delta = peaks.windows(2).map(|w| (w[0].1 / w[1].1).ln()).sum::<f64>() / m;
    let zeta = delta / (TAU * TAU + delta * delta).sqrt();
    let period = (peaks[peaks.len() - 1].0 - peaks[0].0) / m;
    let omega_d = TAU / period;
    let omega_n = omega_d / (1.0 - zeta * zeta).sqrt();
    Ok(DecrementFit {
        delta,
        zeta,
        omega_n,
        peaks,
    })
}

/// Joint stiffness and damping `(k, c)` of a rotational oscillator with the
/// given effective inertia about the joint.
pub fn joint_constants_from_decrement(fit: &DecrementFit, inertia: f64) -> (f64, f64) {
    let k = inertia * fit.omega_n * fit.omega_n;
    let c = 2.0 * fit.zeta * inertia * fit.omega_n;
    (k, c)
}
