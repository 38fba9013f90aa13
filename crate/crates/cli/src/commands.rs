//! Subcommand implementations. Workers only compute; every file is written
//! by the calling thread after the workers return.

use std::fmt::Write as _;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use nbafl_core::audit::{self, AuditReport, SelfTestReport};
use nbafl_core::bounds::{bound_row, corrected_bound, original_bound, BoundVariant};
use nbafl_core::flsim::{self, csv as trajectory_csv, Trajectory};
use nbafl_core::noise::{compare_moments, MomentComparison};

use crate::config::{ExperimentConfig, Resolved, ResolvedSummary};
use crate::error::CliError;
use crate::output::{to_json, write_file};

/// Number of independent Monte-Carlo streams; fixed so results do not depend
/// on the worker count.
const MC_STREAMS: u64 = 64;

#[derive(Debug, Clone)]
pub struct Context {
    pub out_dir: PathBuf,
    pub workers: Option<usize>,
}

impl Context {
    fn pool(&self) -> Result<rayon::ThreadPool, CliError> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.workers {
            builder = builder.num_threads(n.max(1));
        }
        builder.build().map_err(|e| CliError::Config(format!("workers: {e}")))
    }
}

/// `name.ext` for a plain run, `name_<label>_<fingerprint>.ext` for a sweep point.
pub fn point_file(name: &str, ext: &str, label: Option<&str>, fingerprint: &str) -> String {
    match label {
        None => format!("{name}.{ext}"),
        Some(label) => format!("{name}_{label}_{fingerprint}.{ext}"),
    }
}

pub const BOUNDS_HEADER: &str =
    "t,original_thm2,corrected_closed,corrected_unrolled_eq6,corrected_unrolled_eq3,erroneous_eq5_unrolled";

/// The bound table for `t = 0..=t_max`, one row per horizon.
pub fn bounds_csv(resolved: &Resolved, t_max: u64) -> Result<String, CliError> {
    let mut out = String::new();
    writeln!(out, "{}{}", trajectory_csv::FINGERPRINT_PREFIX, resolved.fingerprint).unwrap();
    writeln!(out, "{BOUNDS_HEADER}").unwrap();
    for t in 0..=t_max {
        let row = bound_row(t, &resolved.constants, &resolved.privacy)
            .map_err(|e| CliError::from(e).with_context(&format!("bounds row t={t}")))?;
        write!(out, "{t}").unwrap();
        for variant in BoundVariant::ALL {
            write!(out, ",{}", trajectory_csv::format_real(row.get(variant))).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn cmd_bounds(config: &ExperimentConfig, ctx: &Context, t_max: Option<u64>) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    for (label, point) in config.points()? {
        let resolved = Resolved::new(&point)?;
        let t_max = t_max.unwrap_or(resolved.privacy.rounds);
        let path = ctx.out_dir.join(point_file("bounds", "csv", label.as_deref(), &resolved.fingerprint));
        write_file(&path, &bounds_csv(&resolved, t_max)?)?;
        written.push(path);
    }
    Ok(written)
}

/// Runs every configured seed on the pool and checks the clipping invariant.
pub fn simulate_point(resolved: &Resolved, pool: &rayon::ThreadPool) -> Result<Vec<Trajectory>, CliError> {
    let trajectories = pool.install(|| {
        flsim::run_seeds(
            &resolved.problem,
            &resolved.privacy,
            &resolved.noise,
            &resolved.train,
            &resolved.config.seeds,
            &resolved.fingerprint,
        )
    })?;
    let clip = resolved.privacy.clip;
    for t in &trajectories {
        if let Some((round, norm)) = t.max_upload_norms.iter().enumerate().find(|(_, &n)| n > clip) {
            return Err(CliError::compute(nbafl_core::Error::Domain(format!(
                "seed {}: upload norm {norm} exceeds C = {clip} in round {}",
                t.seed,
                round + 1
            ))));
        }
    }
    Ok(trajectories)
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    final_gap: f64,
    gradient_divergence_estimate: f64,
}

#[derive(Serialize)]
struct SimulationSummary {
    resolved: ResolvedSummary,
    mean_final_gap: f64,
    seeds: Vec<SeedSummary>,
}

fn mean_final_gap(trajectories: &[Trajectory]) -> f64 {
    trajectories.iter().map(|t| t.final_gap()).sum::<f64>() / trajectories.len() as f64
}

fn simulation_summary(resolved: &Resolved, trajectories: &[Trajectory]) -> String {
    to_json(&SimulationSummary {
        resolved: resolved.summary(),
        mean_final_gap: mean_final_gap(trajectories),
        seeds: trajectories
            .iter()
            .map(|t| SeedSummary {
                seed: t.seed,
                final_gap: t.final_gap(),
                gradient_divergence_estimate: t.divergence_estimate,
            })
            .collect(),
    })
}

pub fn cmd_simulate(config: &ExperimentConfig, ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let pool = ctx.pool()?;
    let mut written = Vec::new();
    for (label, point) in config.points()? {
        let resolved = Resolved::new(&point)?;
        let trajectories = simulate_point(&resolved, &pool)?;
        let fp = &resolved.fingerprint;
        let path = ctx.out_dir.join(point_file("trajectory", "csv", label.as_deref(), fp));
        write_file(&path, &trajectory_csv::to_string(fp, &trajectories))?;
        written.push(path);
        if label.is_none() {
            for t in &trajectories {
                let path = ctx.out_dir.join("seeds").join(format!("trajectory_seed{}.csv", t.seed));
                write_file(&path, &trajectory_csv::to_string(fp, std::slice::from_ref(t)))?;
                written.push(path);
            }
        }
        let path = ctx.out_dir.join(point_file("summary", "json", label.as_deref(), fp));
        write_file(&path, &simulation_summary(&resolved, &trajectories))?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_trajectory_file(path: &Path) -> Result<(String, Vec<Trajectory>), CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::Io(format!("cannot open {}: {e}", path.display())))?;
    trajectory_csv::read_trajectories(BufReader::new(file))
        .map_err(|e| CliError::from(e).with_context(&path.display().to_string()))
}

/// Reads and merges trajectory files, refusing any whose fingerprint differs
/// from the config's.
pub fn load_trajectories(paths: &[PathBuf], fingerprint: &str) -> Result<Vec<Trajectory>, CliError> {
    let mut sets = Vec::with_capacity(paths.len());
    for path in paths {
        let (found, trajectories) = read_trajectory_file(path)?;
        if found != fingerprint {
            return Err(CliError::Config(format!(
                "{}: config fingerprint mismatch: expected {fingerprint}, found {found}",
                path.display()
            )));
        }
        sets.push(trajectories);
    }
    Ok(flsim::merge_trajectories(sets)?)
}

pub fn audit_report(resolved: &Resolved, trajectories: &[Trajectory]) -> Result<AuditReport, CliError> {
    Ok(audit::audit(
        trajectories,
        &resolved.constants,
        &resolved.privacy,
        resolved.assumptions.l,
        &resolved.fingerprint,
    )?)
}

/// Audits the given trajectory files, or each point's default trajectory file
/// in the output directory when none are given.
pub fn cmd_audit(config: &ExperimentConfig, ctx: &Context, files: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let points = config.points()?;
    if !files.is_empty() && points.len() > 1 {
        return Err(CliError::Config(
            "--trajectories cannot be combined with a sweep config; audit one sweep point at a time".into(),
        ));
    }
    let mut written = Vec::new();
    for (label, point) in points {
        let resolved = Resolved::new(&point)?;
        let fp = &resolved.fingerprint;
        let inputs = if files.is_empty() {
            vec![ctx.out_dir.join(point_file("trajectory", "csv", label.as_deref(), fp))]
        } else {
            files.to_vec()
        };
        let trajectories = load_trajectories(&inputs, fp)?;
        let report = audit_report(&resolved, &trajectories)?;
        let path = ctx.out_dir.join(point_file("audit", "json", label.as_deref(), fp));
        write_file(&path, &to_json(&report))?;
        written.push(path);
    }
    Ok(written)
}

pub fn cmd_self_test(ctx: &Context, seed: u64) -> Result<(PathBuf, SelfTestReport), CliError> {
    let report = audit::run_self_test(&mut ChaCha8Rng::seed_from_u64(seed))?;
    let path = ctx.out_dir.join("audit_self_test.json");
    write_file(&path, &to_json(&report))?;
    Ok((path, report))
}

#[derive(Serialize)]
struct NoiseMomentsOutput {
    config_fingerprint: String,
    #[serde(flatten)]
    comparison: MomentComparison,
}

pub fn noise_moments(resolved: &Resolved, samples: u64, seed: u64) -> Result<MomentComparison, CliError> {
    Ok(compare_moments(
        &resolved.constants,
        &resolved.privacy,
        &resolved.noise,
        &resolved.problem.weights,
        samples,
        seed,
        MC_STREAMS,
    )?)
}

/// JSON text for the `noise-moments` subcommand. A sweep in the config is
/// ignored.
pub fn cmd_noise_moments(config: &ExperimentConfig, ctx: &Context, samples: u64, seed: u64) -> Result<String, CliError> {
    let mut base = config.clone();
    base.sweep = None;
    let resolved = Resolved::new(&base)?;
    let comparison = ctx.pool()?.install(|| noise_moments(&resolved, samples, seed))?;
    Ok(to_json(&NoiseMomentsOutput { config_fingerprint: resolved.fingerprint.clone(), comparison }))
}

pub const SWEEP_HEADER: &str = "param,value,fingerprint,mean_final_gap,original_bound_T,corrected_bound_T";

/// Simulates, bounds and audits every sweep point in config order. Point
/// outputs go to `sweep/<label>_<fingerprint>/`.
pub fn cmd_sweep(config: &ExperimentConfig, ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("sweep: the config has no sweep section".into()))?;
    let pool = ctx.pool()?;
    let mut summary = String::new();
    writeln!(summary, "{}{}", trajectory_csv::FINGERPRINT_PREFIX, config.fingerprint()).unwrap();
    writeln!(summary, "{SWEEP_HEADER}").unwrap();
    let mut written = Vec::new();

    for (&value, (label, point)) in sweep.values.iter().zip(config.points()?) {
        let label = label.expect("sweep points are labelled");
        let resolved = Resolved::new(&point)?;
        let fp = resolved.fingerprint.clone();
        let dir = ctx.out_dir.join("sweep").join(format!("{label}_{fp}"));
        log::info!("sweep point {label} ({fp})");

        let trajectories = simulate_point(&resolved, &pool)?;
        let report = audit_report(&resolved, &trajectories)?;
        let bounds = bounds_csv(&resolved, resolved.privacy.rounds)?;
        for (name, contents) in [
            ("trajectory.csv", trajectory_csv::to_string(&fp, &trajectories)),
            ("bounds.csv", bounds),
            ("audit.json", to_json(&report)),
            ("summary.json", simulation_summary(&resolved, &trajectories)),
        ] {
            let path = dir.join(name);
            write_file(&path, &contents)?;
            written.push(path);
        }

        let rounds = resolved.privacy.rounds;
        let original = original_bound(rounds, &resolved.constants, &resolved.privacy)?;
        let corrected = corrected_bound(rounds, &resolved.constants, &resolved.privacy)?;
        writeln!(
            summary,
            "{},{},{fp},{},{},{}",
            sweep.param.name(),
            trajectory_csv::format_real(value),
            trajectory_csv::format_real(mean_final_gap(&trajectories)),
            trajectory_csv::format_real(original),
            trajectory_csv::format_real(corrected),
        )
        .unwrap();
    }
    let path = ctx.out_dir.join("sweep_summary.csv");
    write_file(&path, &summary)?;
    written.push(path);
    Ok(written)
}
