use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::problem::Problem;
use crate::constants::PrivacyConfig;
use crate::error::{domain, Error, Result};
use crate::noise::{sample_scaled, NoiseModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub lr: f64,
    pub local_epochs: usize,
}

impl TrainOptions {
    /// One local epoch with step `1/rho`.
    pub fn for_problem(problem: &Problem) -> Self {
        Self { lr: 1.0 / problem.certified.rho, local_epochs: 1 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(domain(format!("lr must be finite and > 0, got {}", self.lr)));
        }
        if self.local_epochs == 0 {
            return Err(domain("local_epochs must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FLState {
    pub round: u64,
    pub global_model: DVector<f64>,
    /// Clipped (pre-noise) uploads of the last round.
    pub client_models: Vec<DVector<f64>>,
    rng: ChaCha8Rng,
}

impl FLState {
    pub fn new(problem: &Problem, seed: u64) -> Self {
        Self {
            round: 0,
            global_model: problem.initial_model.clone(),
            client_models: vec![problem.initial_model.clone(); problem.n_clients()],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub state: FLState,
    /// `Σ p_i n_i`, the perturbation that entered the new global model.
    pub aggregate_noise: DVector<f64>,
    /// Norms of the clipped uploads before noise was added.
    pub upload_norms: Vec<f64>,
}

/// Projects onto the closed ball of radius `clip`.
pub fn clip_to_ball(w: DVector<f64>, clip: f64) -> DVector<f64> {
    let norm = w.norm();
    if norm <= clip {
        return w;
    }
    let mut scaled = w * (clip / norm);
    while scaled.norm() > clip {
        scaled *= 1.0 - f64::EPSILON;
    }
    scaled
}

fn check_finite(v: &DVector<f64>, round: u64, what: impl FnOnce() -> String) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { round, detail: what() })
    }
}

/// One round of noising before aggregation: local gradient descent from the
/// global model, projection onto the `C`-ball, Gaussian perturbation, and
/// weighted averaging.
pub fn nbafl_round(
    state: &FLState,
    problem: &Problem,
    p: &PrivacyConfig,
    noise: &NoiseModel,
    opts: &TrainOptions,
) -> Result<RoundOutcome> {
    opts.validate()?;
    if noise.dim != problem.dim {
        return Err(domain(format!("noise dimension {} differs from model dimension {}", noise.dim, problem.dim)));
    }
    let round = state.round + 1;
    let mut rng = state.rng.clone();
    let upload_std = noise.upload_std(&problem.weights);

    let mut uploads = Vec::with_capacity(problem.n_clients());
    let mut aggregate_noise = DVector::zeros(problem.dim);
    let mut global = DVector::zeros(problem.dim);
    for (i, weight) in problem.weights.iter().enumerate() {
        let mut w = state.global_model.clone();
        for _ in 0..opts.local_epochs {
            let g = problem.client_grad(i, &w);
            w.axpy(-opts.lr, &g, 1.0);
        }
        check_finite(&w, round, || format!("client {i} diverged during local training"))?;
        let clipped = clip_to_ball(w, p.clip);
        global.axpy(*weight, &clipped, 1.0);
        if upload_std > 0.0 {
            let n = sample_scaled(upload_std, problem.dim, &mut rng);
            aggregate_noise.axpy(*weight, &n, 1.0);
        }
        uploads.push(clipped);
    }
    global += &aggregate_noise;
    check_finite(&global, round, || "aggregated global model".to_string())?;

    let upload_norms = uploads.iter().map(|u| u.norm()).collect();
    Ok(RoundOutcome {
        state: FLState { round, global_model: global, client_models: uploads, rng },
        aggregate_noise,
        upload_norms,
    })
}

/// Quantities recorded for the global model `w̃ᵗ`.
///
/// `noise_norm`, `noise_sq_norm` and `increment` describe the transition to
/// `w̃ᵗ⁺¹` and are absent on the final record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub round: u64,
    pub loss_gap: f64,
    pub grad_norm: f64,
    pub noise_norm: Option<f64>,
    pub noise_sq_norm: Option<f64>,
    pub increment: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    pub fingerprint: String,
    pub records: Vec<TrajectoryRecord>,
    /// Largest clipped-upload norm per round. Not serialized to CSV.
    #[serde(default)]
    pub max_upload_norms: Vec<f64>,
    /// Largest `max_i ‖∇F_i − ∇F‖` seen along the run. Not serialized to CSV.
    #[serde(default)]
    pub divergence_estimate: f64,
}

impl Trajectory {
    pub fn with_fingerprint(mut self, fingerprint: impl Into<String>) -> Self {
        self.fingerprint = fingerprint.into();
        self
    }

    pub fn final_gap(&self) -> f64 {
        self.records.last().map(|r| r.loss_gap).unwrap_or(f64::NAN)
    }

    /// Number of completed rounds.
    pub fn rounds(&self) -> u64 {
        self.records.len().saturating_sub(1) as u64
    }
}

pub fn run_training(
    problem: &Problem,
    p: &PrivacyConfig,
    noise: &NoiseModel,
    opts: &TrainOptions,
    seed: u64,
) -> Result<Trajectory> {
    p.validate()?;
    let mut state = FLState::new(problem, seed);
    let mut records = Vec::with_capacity(p.rounds as usize + 1);
    let mut max_upload_norms = Vec::with_capacity(p.rounds as usize);
    let mut divergence_estimate = problem.gradient_divergence(&state.global_model);

    let mut gap = problem.loss_gap(&state.global_model);
    let mut grad_norm = problem.grad(&state.global_model).norm();
    for t in 0..p.rounds {
        let outcome = nbafl_round(&state, problem, p, noise, opts)?;
        let next_gap = problem.loss_gap(&outcome.state.global_model);
        let noise_sq = outcome.aggregate_noise.norm_squared();
        records.push(TrajectoryRecord {
            round: t,
            loss_gap: gap,
            grad_norm,
            noise_norm: Some(noise_sq.sqrt()),
            noise_sq_norm: Some(noise_sq),
            increment: Some(next_gap - gap),
        });
        max_upload_norms.push(outcome.upload_norms.iter().copied().fold(0.0, f64::max));
        state = outcome.state;
        gap = next_gap;
        grad_norm = problem.grad(&state.global_model).norm();
        divergence_estimate = divergence_estimate.max(problem.gradient_divergence(&state.global_model));
    }
    records.push(TrajectoryRecord {
        round: p.rounds,
        loss_gap: gap,
        grad_norm,
        noise_norm: None,
        noise_sq_norm: None,
        increment: None,
    });
    log::debug!("seed {seed}: final gap {gap:e}");
    Ok(Trajectory { seed, fingerprint: String::new(), records, max_upload_norms, divergence_estimate })
}

/// Runs every seed on the current rayon pool. Output is ordered by seed
/// position, independent of scheduling.
pub fn run_seeds(
    problem: &Problem,
    p: &PrivacyConfig,
    noise: &NoiseModel,
    opts: &TrainOptions,
    seeds: &[u64],
    fingerprint: &str,
) -> Result<Vec<Trajectory>> {
    seeds
        .par_iter()
        .map(|&seed| run_training(problem, p, noise, opts, seed).map(|t| t.with_fingerprint(fingerprint)))
        .collect()
}

/// Clip radius equal to `factor` times the largest model norm (local or
/// global) seen on a noiseless, unclipped run of `rounds` rounds.
pub fn calibrate_clip_radius(problem: &Problem, rounds: u64, opts: &TrainOptions, factor: f64) -> Result<f64> {
    opts.validate()?;
    let p = PrivacyConfig {
        epsilon: 1.0,
        delta: None,
        c: 0.0,
        clip: f64::INFINITY,
        m: 1,
        n_clients: problem.n_clients() as u64,
        rounds: rounds.max(1),
    };
    let noise = NoiseModel::disabled(Default::default(), problem.dim);
    let mut state = FLState::new(problem, 0);
    let mut envelope = state.global_model.norm();
    for _ in 0..p.rounds {
        let outcome = nbafl_round(&state, problem, &p, &noise, opts)?;
        envelope = outcome.upload_norms.iter().copied().fold(envelope, f64::max);
        envelope = envelope.max(outcome.state.global_model.norm());
        state = outcome.state;
    }
    Ok(if envelope > 0.0 { factor * envelope } else { 1.0 })
}

/// Merges trajectory sets into one seed-ordered list. Fails on duplicate
/// seeds or on mixed fingerprints.
pub fn merge_trajectories(sets: impl IntoIterator<Item = Vec<Trajectory>>) -> Result<Vec<Trajectory>> {
    let mut all: Vec<Trajectory> = sets.into_iter().flatten().collect();
    all.sort_by_key(|t| t.seed);
    if let Some(first) = all.first() {
        if let Some(other) = all.iter().find(|t| t.fingerprint != first.fingerprint) {
            return Err(Error::FingerprintMismatch {
                expected: first.fingerprint.clone(),
                found: other.fingerprint.clone(),
            });
        }
    }
    if let Some(w) = all.windows(2).find(|w| w[0].seed == w[1].seed) {
        return Err(domain(format!("duplicate seed {} in merged trajectories", w[0].seed)));
    }
    Ok(all)
}

/// Seed-averaged loss gap per round. All trajectories must have equal length.
pub fn mean_gap_per_round(trajectories: &[Trajectory]) -> Result<Vec<f64>> {
    let len = trajectories
        .first()
        .map(|t| t.records.len())
        .ok_or_else(|| Error::EmptySamples("no trajectories".into()))?;
    if trajectories.iter().any(|t| t.records.len() != len) {
        return Err(domain("trajectories have different lengths"));
    }
    let n = trajectories.len() as f64;
    Ok((0..len)
        .map(|i| trajectories.iter().map(|t| t.records[i].loss_gap).sum::<f64>() / n)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flsim::problem::make_quadratic;
    use crate::noise::NoiseKind;

    fn privacy(rounds: u64, clip: f64) -> PrivacyConfig {
        PrivacyConfig { epsilon: 1.0, delta: None, c: 1.0, clip, m: 50, n_clients: 4, rounds }
    }

    fn problem() -> Problem {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        make_quadratic(4, 4, 1.0, 0.5, 2.0, &mut rng)
            .unwrap()
            .with_initial_model(DVector::from_element(4, 1.5))
            .unwrap()
    }

    #[test]
    fn clipping_projects() {
        let w = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(clip_to_ball(w.clone(), 10.0), w);
        let c = clip_to_ball(w, 1.0);
        assert!(c.norm() <= 1.0 && (c.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn noiseless_step_decreases_gap() {
        let prob = problem();
        let p = privacy(1, f64::INFINITY);
        let noise = NoiseModel::disabled(NoiseKind::AggregateMatched, 4);
        let state = FLState::new(&prob, 1);
        let out = nbafl_round(&state, &prob, &p, &noise, &TrainOptions::for_problem(&prob)).unwrap();
        assert!(prob.loss_gap(&out.state.global_model) < prob.loss_gap(&state.global_model));
        assert_eq!(out.state.round, 1);
        assert_eq!(out.aggregate_noise, DVector::zeros(4));
    }

    #[test]
    fn large_clip_is_identity() {
        let prob = problem();
        let noise = NoiseModel::disabled(NoiseKind::AggregateMatched, 4);
        let opts = TrainOptions::for_problem(&prob);
        let state = FLState::new(&prob, 1);
        let free = nbafl_round(&state, &prob, &privacy(1, f64::INFINITY), &noise, &opts).unwrap();
        let wide = nbafl_round(&state, &prob, &privacy(1, 1e6), &noise, &opts).unwrap();
        assert_eq!(free.state.global_model, wide.state.global_model);
    }

    #[test]
    fn round_is_deterministic() {
        let prob = problem();
        let noise = NoiseModel::new(NoiseKind::PerClient, 0.3, 4).unwrap();
        let opts = TrainOptions::for_problem(&prob);
        let state = FLState::new(&prob, 99);
        let a = nbafl_round(&state, &prob, &privacy(3, 1.0), &noise, &opts).unwrap();
        let b = nbafl_round(&state, &prob, &privacy(3, 1.0), &noise, &opts).unwrap();
        assert_eq!(a, b);
        assert!(a.upload_norms.iter().all(|&n| n <= 1.0));
    }

    #[test]
    fn single_round_trajectory() {
        let prob = problem();
        let noise = NoiseModel::disabled(NoiseKind::AggregateMatched, 4);
        let traj = run_training(&prob, &privacy(1, f64::INFINITY), &noise, &TrainOptions::for_problem(&prob), 3).unwrap();
        assert_eq!(traj.records.len(), 2);
        assert!(traj.records[1].loss_gap < traj.records[0].loss_gap);
        assert!(traj.records[1].increment.is_none());
        assert_eq!(traj.records[0].noise_norm, Some(0.0));
    }

    #[test]
    fn noiseless_run_is_monotone() {
        let prob = problem();
        let noise = NoiseModel::disabled(NoiseKind::AggregateMatched, 4);
        let traj = run_training(&prob, &privacy(30, f64::INFINITY), &noise, &TrainOptions::for_problem(&prob), 3).unwrap();
        assert!(traj.records.windows(2).all(|w| w[1].loss_gap <= w[0].loss_gap));
    }

    #[test]
    fn divergence_detected() {
        let prob = problem();
        let noise = NoiseModel::disabled(NoiseKind::AggregateMatched, 4);
        let opts = TrainOptions { lr: 1e200, local_epochs: 3 };
        let err = run_training(&prob, &privacy(5, f64::INFINITY), &noise, &opts, 0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn merge_is_order_independent() {
        let prob = problem();
        let noise = NoiseModel::new(NoiseKind::AggregateMatched, 0.1, 4).unwrap();
        let opts = TrainOptions::for_problem(&prob);
        let p = privacy(4, 2.0);
        let a = run_seeds(&prob, &p, &noise, &opts, &[1, 2], "fp").unwrap();
        let b = run_seeds(&prob, &p, &noise, &opts, &[3], "fp").unwrap();
        let ab = merge_trajectories([a.clone(), b.clone()]).unwrap();
        let ba = merge_trajectories([b, a.clone()]).unwrap();
        assert_eq!(ab, ba);
        assert!(merge_trajectories([a.clone(), a]).is_err());
        let other = run_seeds(&prob, &p, &noise, &opts, &[9], "other").unwrap();
        assert!(matches!(merge_trajectories([ab, other]), Err(Error::FingerprintMismatch { .. })));
    }

    #[test]
    fn calibration_scales_envelope() {
        let prob = problem();
        let opts = TrainOptions::for_problem(&prob);
        let c = calibrate_clip_radius(&prob, 10, &opts, 1.5).unwrap();
        assert!(c >= 1.5 * prob.initial_model.norm());
    }
}
