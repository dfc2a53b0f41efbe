mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use trilink_core::calib::{
    fit, read_records, smooth_trace, trace_metrics, CalibError, FitProblem, FitReport, MeasuredTrace,
    NelderMeadOpts, RecordResidual,
};
use trilink_core::engines::simulate;
use trilink_core::metrics::{all_cycle_metrics, write_cycle_csv, CycleMetrics};
use trilink_core::model::{ParamPreset, RobotParams};
use trilink_core::sweep::{frequency_sweep, SweepError, SweepSpec};

use config::{load_json, GaitConfig, ParamsConfig, RunConfig};

#[derive(Parser)]
#[command(name = "trilink", version, about = "Simulate and calibrate a three-link wheeled snake robot")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one run and write the trajectory plus per-cycle metrics.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Trajectory CSV (defaults to `output.trajectory` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-cycle metrics CSV (defaults to `<out>.metrics.csv`).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Steady-state metrics over a list of frequencies.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `start:step:stop` (inclusive) or a comma-separated list, in rad/s.
        #[arg(long)]
        omegas: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit dissipation parameters to experiment records.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        records: PathBuf,
        /// Comma-separated parameter names, e.g. `cS0,cS1,cS2`.
        #[arg(long, value_delimiter = ',')]
        free: Vec<String>,
        #[arg(long)]
        max_evals: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-cycle metrics from a measured trace.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        /// Sidecar JSON with the commanded gait (defaults to the trace path with `.json`).
        #[arg(long)]
        meta: Option<PathBuf>,
        /// Moving-average window in samples (odd).
        #[arg(long, default_value_t = 1)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a parameter preset.
    Params {
        #[arg(long)]
        table: String,
        #[arg(long, default_value = "simulation")]
        variant: String,
        /// Emit a JSON `params` block instead of a table.
        #[arg(long)]
        json: bool,
    },
}

/// Write through a temporary file in the same directory so a failed run
/// never leaves a truncated output behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn run_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn cycle_rows(id: &str, ms: &[CycleMetrics]) -> Vec<(String, usize, CycleMetrics)> {
    ms.iter().enumerate().map(|(k, m)| (id.to_string(), k, *m)).collect()
}

fn cmd_simulate(config: &Path, out: Option<PathBuf>, metrics: Option<PathBuf>) -> Result<()> {
    let rc = RunConfig::load(config)?;
    let out = out
        .or_else(|| rc.output.trajectory.as_ref().map(PathBuf::from))
        .ok_or_else(|| anyhow!("no output path (`--out` or `output.trajectory`)"))?;
    let metrics = metrics.or_else(|| rc.output.metrics.as_ref().map(PathBuf::from)).unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".metrics.csv");
        PathBuf::from(p)
    });
    let cfg = rc.model.resolve();
    let gait = rc.gait.resolve(None)?;
    let params = rc.params.resolve(Some(&gait))?;
    let opts = rc.solver.resolve()?;
    let t_end = rc.end_time(&gait, &opts)?;
    let traj = simulate(cfg, gait, params, t_end, opts).context("simulation failed")?;
    let ms = all_cycle_metrics(&traj, &gait).unwrap_or_default();

    let mut traj_buf = Vec::new();
    traj.write_csv(&mut traj_buf)?;
    let mut m_buf = Vec::new();
    write_cycle_csv(&mut m_buf, &cycle_rows(&run_id(config), &ms))?;
    write_atomic(&out, &traj_buf)?;
    write_atomic(&metrics, &m_buf)?;
    eprintln!(
        "{}: {} samples, {} complete cycles{}",
        cfg.label(),
        traj.len(),
        ms.len(),
        ms.last()
            .map(|m| format!(", last d = {:.3} mm, dtheta = {:.3} deg", m.d * 1e3, m.dtheta.to_degrees()))
            .unwrap_or_default()
    );
    Ok(())
}

fn parse_omegas(s: &str) -> Result<Vec<f64>> {
    let num = |t: &str| t.trim().parse::<f64>().with_context(|| format!("invalid number {t:?} in `--omegas`"));
    let parts: Vec<&str> = s.split(':').collect();
    match parts.len() {
        1 => s.split(',').map(num).collect(),
        3 => {
            let (a, step, b) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
            if !(step > 0.0 && b >= a) {
                bail!("`--omegas` range needs step > 0 and stop >= start");
            }
            let n = ((b - a) / step + 1e-9).floor() as usize;
            Ok((0..=n).map(|k| a + k as f64 * step).collect())
        }
        _ => bail!("`--omegas` must be `start:step:stop` or a comma-separated list"),
    }
}

fn cmd_sweep(config: &Path, omegas: Option<String>, out: &Path) -> Result<()> {
    let rc = RunConfig::load(config)?;
    let omegas = match (omegas, &rc.sweep.omegas_rad_s) {
        (Some(s), _) => parse_omegas(&s)?,
        (None, Some(v)) => v.clone(),
        (None, None) => bail!("no frequencies (`--omegas` or `sweep.omegas_rad_s`)"),
    };
    let cfg = rc.model.resolve();
    let gait = rc.gait.resolve(Some(1.0))?;
    let params = rc.params.resolve(Some(&gait))?;
    let mut spec = SweepSpec::new(omegas, cfg, gait);
    spec.tol = rc.sweep.tol();
    spec.max_cycles = rc.sweep.max_cycles();
    spec.solver = rc.solver.resolve()?;
    let result = frequency_sweep(&spec, params)?;
    let mut buf = Vec::new();
    result.write_csv(&mut buf)?;
    write_atomic(out, &buf)?;
    let failed: Vec<String> = result
        .rows
        .iter()
        .filter_map(|r| match &r.outcome {
            Err(e) if !matches!(e, SweepError::NotConverged(_)) => Some(format!("omega = {}: {e}", r.omega)),
            _ => None,
        })
        .collect();
    if !failed.is_empty() {
        bail!("{} of {} frequencies failed:\n  {}", failed.len(), result.rows.len(), failed.join("\n  "));
    }
    Ok(())
}

#[derive(Serialize)]
struct FitJson<'a> {
    converged: bool,
    evaluations: usize,
    best_j: f64,
    j_history: &'a [f64],
    fitted: Vec<FittedValue>,
    per_record: &'a [RecordResidual],
    params: ParamsConfig,
}

#[derive(Serialize)]
struct FittedValue {
    name: &'static str,
    initial: f64,
    value: f64,
    lower: f64,
    upper: f64,
}

fn fit_json(r: &FitReport) -> FitJson<'_> {
    FitJson {
        converged: r.converged,
        evaluations: r.evaluations,
        best_j: r.best_j,
        j_history: &r.j_history,
        fitted: r
            .free
            .iter()
            .zip(&r.initial_values)
            .zip(&r.values)
            .map(|((f, i), v)| FittedValue {
                name: f.id.name(),
                initial: *i,
                value: *v,
                lower: f.lower,
                upper: f.upper,
            })
            .collect(),
        per_record: &r.residuals,
        params: ParamsConfig::from_params(&r.params),
    }
}

fn cmd_fit(config: &Path, records: &Path, free: &[String], max_evals: Option<usize>, out: &Path) -> Result<()> {
    let rc = RunConfig::load(config)?;
    let cfg = rc.model.resolve();
    let gait = rc.gait.resolve(Some(1.0))?;
    let initial = rc.params.resolve(Some(&gait))?;
    let file = std::fs::File::open(records).with_context(|| format!("cannot read {}", records.display()))?;
    let recs = read_records(file).with_context(|| format!("invalid records {}", records.display()))?;
    let mut problem = FitProblem::new(
        rc.fit.free_params(free, &initial)?,
        rc.fit.weights(&cfg, &gait)?,
        cfg,
        gait,
        recs,
    );
    problem.solver = rc.solver.resolve()?;
    problem.tol = rc.sweep.tol();
    problem.max_cycles = rc.sweep.max_cycles();
    let opts = NelderMeadOpts {
        max_evals: max_evals.or(rc.fit.max_evals).unwrap_or(NelderMeadOpts::default().max_evals),
        ..Default::default()
    };
    let report = match fit(&problem, &initial, opts) {
        Ok(r) => r,
        Err(CalibError::BudgetExhausted(r)) => {
            eprintln!("warning: evaluation budget exhausted, reporting best parameters found");
            *r
        }
        Err(e) => return Err(e.into()),
    };
    let mut buf = serde_json::to_vec_pretty(&fit_json(&report))?;
    buf.push(b'\n');
    write_atomic(out, &buf)?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceMeta {
    gait: GaitConfig,
    #[serde(default)]
    params: Option<ParamsConfig>,
}

fn cmd_analyze(trace: &Path, meta: Option<PathBuf>, window: usize, out: &Path) -> Result<()> {
    let meta_path = meta.unwrap_or_else(|| trace.with_extension("json"));
    let meta: TraceMeta = load_json(&meta_path)?;
    let gait = meta.gait.resolve(None)?;
    let params = match &meta.params {
        Some(p) => p.resolve(Some(&gait))?,
        None => RobotParams::preset(ParamPreset::Table1Simulation),
    };
    let file = std::fs::File::open(trace).with_context(|| format!("cannot read {}", trace.display()))?;
    let raw = MeasuredTrace::from_csv(file, Some(gait)).with_context(|| format!("invalid trace {}", trace.display()))?;
    let smoothed = smooth_trace(&raw, window).context("invalid `--window`")?;
    let ms = trace_metrics(&smoothed, &gait, &params)?;
    let mut buf = Vec::new();
    write_cycle_csv(&mut buf, &cycle_rows(&run_id(trace), &ms))?;
    write_atomic(out, &buf)?;
    Ok(())
}

fn cmd_params(table: &str, variant: &str, json: bool) -> Result<()> {
    let preset = ParamPreset::from_table(table, variant)
        .ok_or_else(|| anyhow!("unknown preset `--table {table} --variant {variant}`"))?;
    let p = RobotParams::preset(preset);
    let mut out = std::io::stdout().lock();
    if json {
        serde_json::to_writer_pretty(&mut out, &ParamsConfig::from_params(&p))?;
        writeln!(out)?;
        return Ok(());
    }
    let rows = [
        ("m0", p.m0, "kg"),
        ("m1", p.m1, "kg"),
        ("m2", p.m2, "kg"),
        ("I0", p.i0, "kg m^2"),
        ("I1", p.i1, "kg m^2"),
        ("I2", p.i2, "kg m^2"),
        ("h", p.h, "m"),
        ("l", p.l, "m"),
        ("b", p.b, "m"),
        ("cR0", p.c_roll[0], "kg/s"),
        ("cR1", p.c_roll[1], "kg/s"),
        ("cR2", p.c_roll[2], "kg/s"),
        ("cS0", p.c_skid[0], "N s/m"),
        ("cS1", p.c_skid[1], "N s/m"),
        ("cS2", p.c_skid[2], "N s/m"),
        ("k_tau", p.k_tau, "N m/rad"),
        ("c_tau", p.c_tau, "N m s/rad"),
    ];
    writeln!(out, "# {}", preset.name())?;
    for (name, v, unit) in rows {
        writeln!(out, "{name:<6} {v:>10} {unit}")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Simulate { config, out, metrics } => cmd_simulate(&config, out, metrics),
        Command::Sweep { config, omegas, out } => cmd_sweep(&config, omegas, &out),
        Command::Fit {
            config,
            records,
            free,
            max_evals,
            out,
        } => cmd_fit(&config, &records, &free, max_evals, &out),
        Command::Analyze {
            trace,
            meta,
            window,
            out,
        } => cmd_analyze(&trace, meta, window, &out),
        Command::Params { table, variant, json } => cmd_params(&table, &variant, json),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
