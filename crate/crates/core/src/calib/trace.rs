use std::io::{Read, Write};

use serde::Deserialize;

use super::CalibError;
use crate::engines::{JointTorques, Sample, SolverDiagnostics, Trajectory};
use crate::fmt::fmt_sig;
use crate::gait::GaitSpec;
use crate::metrics::{all_cycle_metrics, CycleMetrics};
use crate::model::{wheel_velocities, Coords, Rates, RobotParams};

/// Planar state trace as recorded by motion capture.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredTrace {
    pub t: Vec<f64>,
    pub q: Vec<Coords>,
    /// Commanded gait, when known.
    pub gait: Option<GaitSpec>,
}

#[derive(Deserialize)]
struct TraceRow {
    t: f64,
    x: f64,
    y: f64,
    theta: f64,
    phi1: f64,
    phi2: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn unwrap_angles(v: &mut [f64]) {
    use std::f64::consts::{PI, TAU};
    for k in 1..v.len() {
        let mut d = v[k] - v[k - 1];
        while d > PI {
            d -= TAU;
            v[k] -= TAU;
        }
        while d < -PI {
            d += TAU;
            v[k] += TAU;
        }
    }
}

impl MeasuredTrace {
    /// Validated trace: at least 3 samples, finite values, strictly increasing
    /// times and no gap larger than three median intervals.
    pub fn new(t: Vec<f64>, q: Vec<Coords>, gait: Option<GaitSpec>) -> Result<Self, CalibError> {
        if t.len() != q.len() {
            return Err(CalibError::InvalidProblem(format!(
                "{} time stamps but {} states",
                t.len(),
                q.len()
            )));
        }
        if t.len() < 3 {
            return Err(CalibError::TooShort(t.len()));
        }
        for (k, (tk, qk)) in t.iter().zip(&q).enumerate() {
            if !tk.is_finite() || !qk.is_finite() {
                return Err(CalibError::NonFinite { index: k });
            }
        }
        for k in 1..t.len() {
            if t[k] <= t[k - 1] {
                return Err(CalibError::NonIncreasingTime { index: k });
            }
        }
        let nominal = median(t.windows(2).map(|w| w[1] - w[0]).collect());
        for k in 1..t.len() {
            let dt = t[k] - t[k - 1];
            if dt > 3.0 * nominal {
                return Err(CalibError::Gap { index: k, dt, nominal });
            }
        }
        Ok(Self { t, q, gait })
    }

    /// Read a CSV with header `t, x, y, theta, phi1, phi2` (SI units, radians).
    /// The heading angle is unwrapped.
    pub fn from_csv<R: Read>(input: R, gait: Option<GaitSpec>) -> Result<Self, CalibError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let mut t = Vec::new();
        let mut q = Vec::new();
        for row in rdr.deserialize() {
            let r: TraceRow = row?;
            t.push(r.t);
            q.push(Coords::new(r.x, r.y, r.theta, r.phi1, r.phi2));
        }
        let mut theta: Vec<f64> = q.iter().map(|c| c.theta).collect();
        unwrap_angles(&mut theta);
        for (c, th) in q.iter_mut().zip(theta) {
            c.theta = th;
        }
        Self::new(t, q, gait)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), CalibError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x", "y", "theta", "phi1", "phi2"])?;
        for (t, q) in self.t.iter().zip(&self.q) {
            let mut row = vec![fmt_sig(*t)];
            row.extend(q.to_array().iter().map(|v| fmt_sig(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Sample a simulated trajectory at a fixed rate, as a motion-capture system
/// would.
pub fn resample_trajectory(traj: &Trajectory, rate_hz: f64, gait: Option<GaitSpec>) -> Result<MeasuredTrace, CalibError> {
    let (Some(t0), Some(t1)) = (traj.start_time(), traj.end_time()) else {
        return Err(CalibError::TooShort(0));
    };
    let n = ((t1 - t0) * rate_hz).floor() as usize + 1;
    let mut t = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    for k in 0..n {
        let tk = t0 + k as f64 / rate_hz;
        if let Some((qk, _)) = traj.interpolate(tk) {
            t.push(tk);
            q.push(qk);
        }
    }
    MeasuredTrace::new(t, q, gait)
}

/// Centered moving average with an odd window; near the ends the window
/// shrinks symmetrically so that it stays centered.
pub fn smooth_trace(trace: &MeasuredTrace, window: usize) -> Result<MeasuredTrace, CalibError> {
    let n = trace.len();
    if window == 0 || window.is_multiple_of(2) || window > n {
        return Err(CalibError::WindowTooLarge { window, len: n });
    }
    let half = window / 2;
    let cols: Vec<Vec<f64>> = (0..5).map(|i| trace.q.iter().map(|c| c.to_array()[i]).collect()).collect();
    let mut prefix = vec![vec![0.0; n + 1]; 5];
    for (i, col) in cols.iter().enumerate() {
        for k in 0..n {
            prefix[i][k + 1] = prefix[i][k] + col[k];
        }
    }
    let q = (0..n)
        .map(|k| {
            let r = half.min(k).min(n - 1 - k);
            let (a, b) = (k - r, k + r + 1);
            let avg = |i: usize| {
                if r == 0 {
                    cols[i][k]
                } else {
                    (prefix[i][b] - prefix[i][a]) / (b - a) as f64
                }
            };
            Coords::new(avg(0), avg(1), avg(2), avg(3), avg(4))
        })
        .collect();
    Ok(MeasuredTrace {
        t: trace.t.clone(),
        q,
        gait: trace.gait,
    })
}

/// Rates by central differences (one-sided at the ends), with wheel roll and
/// skid velocities attached.
pub fn trace_trajectory(trace: &MeasuredTrace, p: &RobotParams) -> Trajectory {
    let n = trace.len();
    let samples = (0..n)
        .map(|k| {
            let (a, b) = (k.saturating_sub(1), (k + 1).min(n - 1));
            let dt = trace.t[b] - trace.t[a];
            let (qa, qb) = (trace.q[a].to_array(), trace.q[b].to_array());
            let r: Vec<f64> = (0..5).map(|i| (qb[i] - qa[i]) / dt).collect();
            let q = trace.q[k];
            let qd = Rates::new(r[0], r[1], r[2], r[3], r[4]);
            let (v_par, v_perp) = wheel_velocities(&q, &qd, p);
            Sample {
                t: trace.t[k],
                q,
                qd,
                lambda: None,
                tau: JointTorques::default(),
                v_par,
                v_perp,
            }
        })
        .collect();
    Trajectory {
        params: *p,
        samples,
        diagnostics: SolverDiagnostics::default(),
    }
}

/// Gait actually realized in the trace: mean values as midranges and
/// amplitudes as half-ranges of the joint angles, frequency and mode taken
/// from the commanded gait.
pub fn realized_gait(trace: &MeasuredTrace, commanded: &GaitSpec) -> GaitSpec {
    let range = |f: fn(&Coords) -> f64| {
        trace
            .q
            .iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (lo1, hi1) = range(|c| c.phi1);
    let (lo2, hi2) = range(|c| c.phi2);
    let mut g = *commanded;
    g.gamma2 = 0.5 * (lo2 + hi2);
    g.alpha2 = 0.5 * (hi2 - lo2);
    if g.mode == crate::engines::Actuation::Kinematic {
        g.gamma1 = 0.5 * (lo1 + hi1);
        g.alpha1 = 0.5 * (hi1 - lo1);
    }
    g
}

/// Per-cycle metrics of a measured trace, using the same conventions as
/// for simulated trajectories. Cycles start at downward crossings of the
/// realized mean of `phi2`.
pub fn trace_metrics(trace: &MeasuredTrace, gait: &GaitSpec, p: &RobotParams) -> Result<Vec<CycleMetrics>, CalibError> {
    let traj = trace_trajectory(trace, p);
    let g = realized_gait(trace, gait);
    let detect = GaitSpec { gamma2: g.gamma2, ..*gait };
    Ok(all_cycle_metrics(&traj, &detect)?)
}
