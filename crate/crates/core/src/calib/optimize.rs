use serde::{Deserialize, Serialize};

use super::objective::{objective_detailed, FitProblem, FreeParam, RecordResidual};
use super::CalibError;
use crate::model::RobotParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadOpts {
    pub max_evals: usize,
    /// Stop when the simplex spread in J falls below this fraction of
    /// `max(|J_best|, 1)`.
    pub ftol: f64,
    /// Initial simplex edge in normalized coordinates (fraction of each bound range).
    pub initial_step: f64,
}

impl Default for NelderMeadOpts {
    fn default() -> Self {
        Self {
            max_evals: 200,
            ftol: 1e-3,
            initial_step: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub params: RobotParams,
    pub free: Vec<FreeParam>,
    pub initial_values: Vec<f64>,
    pub values: Vec<f64>,
    pub best_j: f64,
    /// Best objective after the initial evaluation and after each iteration.
    pub j_history: Vec<f64>,
    pub evaluations: usize,
    pub converged: bool,
    pub residuals: Vec<RecordResidual>,
}

struct Evaluator<'a> {
    problem: &'a FitProblem,
    base: RobotParams,
    evals: usize,
    max: usize,
    best: (f64, Vec<f64>, Vec<RecordResidual>),
}

impl Evaluator<'_> {
    fn to_values(&self, u: &[f64]) -> Vec<f64> {
        self.problem
            .free
            .iter()
            .zip(u)
            .map(|(f, &ui)| f.lower + ui.clamp(0.0, 1.0) * (f.upper - f.lower))
            .collect()
    }

    fn eval(&mut self, u: &[f64]) -> Option<f64> {
        if self.evals >= self.max {
            return None;
        }
        self.evals += 1;
        let values = self.to_values(u);
        let (j, res) = objective_detailed(self.problem, &self.problem.apply(&self.base, &values));
        if j < self.best.0 {
            self.best = (j, u.to_vec(), res);
        }
        Some(j)
    }
}

fn clamp_unit(u: &mut [f64]) {
    u.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn combine(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    // a + t (b - a), kept inside the unit box.
    let mut out: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect();
    clamp_unit(&mut out);
    out
}

/// Bounded Nelder-Mead search in coordinates normalized to the unit box.
/// Candidates are projected onto the bounds, so every evaluated point is
/// feasible.
pub fn fit(problem: &FitProblem, initial: &RobotParams, opts: NelderMeadOpts) -> Result<FitReport, CalibError> {
    problem.validate()?;
    let x0 = problem.values(initial);
    for (f, &v) in problem.free.iter().zip(&x0) {
        if !(v >= f.lower && v <= f.upper) {
            return Err(CalibError::GuessOutOfBounds {
                name: f.id.name(),
                value: v,
                lower: f.lower,
                upper: f.upper,
            });
        }
    }
    if opts.max_evals == 0 {
        return Err(CalibError::InvalidProblem("evaluation budget must be >= 1".into()));
    }
    let n = x0.len();
    let u0: Vec<f64> = problem
        .free
        .iter()
        .zip(&x0)
        .map(|(f, v)| (v - f.lower) / (f.upper - f.lower))
        .collect();
    let mut ev = Evaluator {
        problem,
        base: *initial,
        evals: 0,
        max: opts.max_evals,
        best: (f64::INFINITY, u0.clone(), Vec::new()),
    };

    let finish = |ev: Evaluator, history: Vec<f64>, converged: bool| {
        let (best_j, u, residuals) = ev.best.clone();
        let values = ev.to_values(&u);
        let report = FitReport {
            params: problem.apply(initial, &values),
            free: problem.free.clone(),
            initial_values: x0.clone(),
            values,
            best_j,
            j_history: history,
            evaluations: ev.evals,
            converged,
            residuals,
        };
        if converged {
            Ok(report)
        } else {
            Err(CalibError::BudgetExhausted(Box::new(report)))
        }
    };

    let f0 = ev.eval(&u0).expect("budget >= 1");
    let mut history = vec![f0];
    if f0 == 0.0 {
        return finish(ev, history, true);
    }

    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(u0.clone(), f0)];
    for i in 0..n {
        let mut u = u0.clone();
        u[i] += if u[i] + opts.initial_step <= 1.0 {
            opts.initial_step
        } else {
            -opts.initial_step
        };
        match ev.eval(&u) {
            Some(f) => simplex.push((u, f)),
            None => return finish(ev, history, false),
        }
    }

    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        history.push(best);
        let diameter = simplex[1..]
            .iter()
            .map(|(u, _)| u.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if best == 0.0 || worst - best <= opts.ftol * best.abs().max(1.0) || diameter < 1e-10 {
            return finish(ev, history, true);
        }

        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|(u, _)| u[k]).sum::<f64>() / n as f64)
            .collect();
        let worst_u = simplex[n].0.clone();
        let reflected = combine(&centroid, &worst_u, -1.0);
        let Some(fr) = ev.eval(&reflected) else {
            return finish(ev, history, false);
        };
        if fr < simplex[0].1 {
            let expanded = combine(&centroid, &worst_u, -2.0);
            let Some(fe) = ev.eval(&expanded) else {
                return finish(ev, history, false);
            };
            simplex[n] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (reflected, fr);
            continue;
        }
        let (contracted, outside) = if fr < simplex[n].1 {
            (combine(&centroid, &reflected, 0.5), true)
        } else {
            (combine(&centroid, &worst_u, 0.5), false)
        };
        let Some(fc) = ev.eval(&contracted) else {
            return finish(ev, history, false);
        };
        let accept = if outside { fc <= fr } else { fc < simplex[n].1 };
        if accept {
            simplex[n] = (contracted, fc);
            continue;
        }
        let anchor = simplex[0].0.clone();
        for entry in simplex.iter_mut().skip(1) {
            let u = combine(&anchor, &entry.0, 0.5);
            let Some(f) = ev.eval(&u) else {
                return finish(ev, history, false);
            };
            *entry = (u, f);
        }
    }
}
