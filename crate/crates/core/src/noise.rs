//! Gaussian uplink noise and reference values for its norm moments.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::bounds::{paper_noise_moments, NoiseMoments};
use crate::constants::{DerivedConstants, PrivacyConfig};
use crate::error::{domain, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Every client perturbs its upload with `σ_u = c Δs T / ε` per coordinate.
    PerClient,
    /// The aggregate perturbation has per-coordinate std chosen so that
    /// `E‖n‖²` equals the modelled second moment exactly.
    #[default]
    AggregateMatched,
}

/// Gaussian noise source.
///
/// For [`NoiseKind::PerClient`] `per_coord_std` is the std of one client's
/// upload noise; for [`NoiseKind::AggregateMatched`] it is the std of the
/// aggregated noise vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub per_coord_std: f64,
    pub dim: usize,
}

impl NoiseModel {
    pub fn new(kind: NoiseKind, per_coord_std: f64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(domain("noise dimension must be >= 1"));
        }
        if !(per_coord_std.is_finite() && per_coord_std >= 0.0) {
            return Err(domain(format!("noise std must be finite and >= 0, got {per_coord_std}")));
        }
        Ok(Self { kind, per_coord_std, dim })
    }

    pub fn disabled(kind: NoiseKind, dim: usize) -> Self {
        Self { kind, per_coord_std: 0.0, dim: dim.max(1) }
    }

    pub fn is_disabled(&self) -> bool {
        self.per_coord_std == 0.0
    }

    /// Std each client adds to its upload so that the aggregate matches the
    /// model, given aggregation weights.
    pub fn upload_std(&self, weights: &[f64]) -> f64 {
        match self.kind {
            NoiseKind::PerClient => self.per_coord_std,
            NoiseKind::AggregateMatched => {
                let norm = weight_norm(weights);
                if norm == 0.0 {
                    0.0
                } else {
                    self.per_coord_std / norm
                }
            }
        }
    }

    /// Per-coordinate std of `Σ p_i n_i`.
    pub fn aggregate_std(&self, weights: &[f64]) -> f64 {
        match self.kind {
            NoiseKind::PerClient => self.per_coord_std * weight_norm(weights),
            NoiseKind::AggregateMatched => self.per_coord_std,
        }
    }

    /// The model of the aggregated noise vector itself.
    pub fn aggregate(&self, weights: &[f64]) -> NoiseModel {
        NoiseModel {
            kind: NoiseKind::AggregateMatched,
            per_coord_std: self.aggregate_std(weights),
            dim: self.dim,
        }
    }
}

fn weight_norm(weights: &[f64]) -> f64 {
    weights.iter().map(|w| w * w).sum::<f64>().sqrt()
}

pub fn make_noise_model(kind: NoiseKind, d: &DerivedConstants, p: &PrivacyConfig, dim: usize) -> Result<NoiseModel> {
    if dim == 0 {
        return Err(domain("noise dimension must be >= 1"));
    }
    let std = match kind {
        NoiseKind::PerClient => d.sigma_agg,
        NoiseKind::AggregateMatched => d.sigma_agg * (p.n_clients as f64 / dim as f64).sqrt(),
    };
    NoiseModel::new(kind, std, dim)
}

/// Draws one vector with i.i.d. `N(0, per_coord_std²)` coordinates.
pub fn sample_noise<R: Rng + ?Sized>(model: &NoiseModel, rng: &mut R) -> DVector<f64> {
    if model.is_disabled() {
        return DVector::zeros(model.dim);
    }
    sample_scaled(model.per_coord_std, model.dim, rng)
}

pub(crate) fn sample_scaled<R: Rng + ?Sized>(std: f64, dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        std * z
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMoments {
    pub mean_norm: f64,
    pub mean_sq_norm: f64,
    pub sample_count: u64,
    pub std_error_mean_norm: f64,
}

/// Running sums of `‖n‖` and `‖n‖²`; merging is associative.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct MomentSums {
    count: u64,
    sum_norm: f64,
    sum_sq_norm: f64,
}

impl MomentSums {
    fn push(&mut self, norm: f64) {
        self.count += 1;
        self.sum_norm += norm;
        self.sum_sq_norm += norm * norm;
    }

    fn merge(self, other: MomentSums) -> MomentSums {
        MomentSums {
            count: self.count + other.count,
            sum_norm: self.sum_norm + other.sum_norm,
            sum_sq_norm: self.sum_sq_norm + other.sum_sq_norm,
        }
    }

    fn finish(self) -> EmpiricalMoments {
        let n = self.count as f64;
        let mean_norm = self.sum_norm / n;
        // Jensen holds exactly in real arithmetic; clamp the rounding.
        let mean_sq_norm = (self.sum_sq_norm / n).max(mean_norm * mean_norm);
        let std_error_mean_norm = if self.count > 1 {
            let var = ((self.sum_sq_norm - n * mean_norm * mean_norm) / (n - 1.0)).max(0.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        EmpiricalMoments { mean_norm, mean_sq_norm, sample_count: self.count, std_error_mean_norm }
    }
}

pub fn mc_moments<R: Rng + ?Sized>(model: &NoiseModel, samples: u64, rng: &mut R) -> Result<EmpiricalMoments> {
    if samples == 0 {
        return Err(domain("mc_moments needs at least one sample"));
    }
    let mut sums = MomentSums::default();
    for _ in 0..samples {
        sums.push(sample_noise(model, rng).norm());
    }
    Ok(sums.finish())
}

/// Monte-Carlo moments split over `chunks` independent ChaCha streams of the
/// same seed. The result depends on `(seed, samples, chunks)` only, not on the
/// thread count.
pub fn mc_moments_parallel(model: &NoiseModel, samples: u64, seed: u64, chunks: u64) -> Result<EmpiricalMoments> {
    if samples == 0 {
        return Err(domain("mc_moments needs at least one sample"));
    }
    let chunks = chunks.clamp(1, samples);
    let base = samples / chunks;
    let extra = samples % chunks;
    let sums = (0..chunks)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i);
            let count = base + u64::from(i < extra);
            let mut sums = MomentSums::default();
            for _ in 0..count {
                sums.push(sample_noise(model, &mut rng).norm());
            }
            sums
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(MomentSums::default(), MomentSums::merge);
    Ok(sums.finish())
}

/// Exact `E‖n‖` for `n ~ N(0, σ² I_dim)`: `σ √2 Γ((dim+1)/2) / Γ(dim/2)`.
pub fn exact_norm_mean(dim: usize, sigma: f64) -> Result<f64> {
    if dim == 0 {
        return Err(domain("dimension must be >= 1"));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(domain(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(0.0);
    }
    let k = dim as f64;
    let ratio = (ln_gamma((k + 1.0) / 2.0) - ln_gamma(k / 2.0)).exp();
    Ok(sigma * std::f64::consts::SQRT_2 * ratio)
}

/// Closed-form moments of a noise model's aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticMoments {
    pub mean_norm: f64,
    pub mean_sq_norm: f64,
    pub per_coord_std: f64,
    pub dim: usize,
}

/// Signed `paper_model − reference`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentDiscrepancy {
    pub mean_norm: f64,
    pub mean_sq_norm: f64,
    pub mean_norm_vs_monte_carlo: f64,
    pub mean_sq_norm_vs_monte_carlo: f64,
}

/// Side-by-side report of the modelled, simulated and exact moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentComparison {
    pub paper_model: NoiseMoments,
    pub monte_carlo: EmpiricalMoments,
    pub exact_analytic: AnalyticMoments,
    pub discrepancy: MomentDiscrepancy,
}

pub fn compare_moments(
    d: &DerivedConstants,
    p: &PrivacyConfig,
    model: &NoiseModel,
    weights: &[f64],
    samples: u64,
    seed: u64,
    chunks: u64,
) -> Result<MomentComparison> {
    let paper_model = paper_noise_moments(d, p);
    let aggregate = model.aggregate(weights);
    let monte_carlo = mc_moments_parallel(&aggregate, samples, seed, chunks)?;
    let sigma = aggregate.per_coord_std;
    let exact_analytic = AnalyticMoments {
        mean_norm: exact_norm_mean(aggregate.dim, sigma)?,
        mean_sq_norm: aggregate.dim as f64 * sigma * sigma,
        per_coord_std: sigma,
        dim: aggregate.dim,
    };
    let discrepancy = MomentDiscrepancy {
        mean_norm: paper_model.mean_norm - exact_analytic.mean_norm,
        mean_sq_norm: paper_model.mean_sq_norm - exact_analytic.mean_sq_norm,
        mean_norm_vs_monte_carlo: paper_model.mean_norm - monte_carlo.mean_norm,
        mean_sq_norm_vs_monte_carlo: paper_model.mean_sq_norm - monte_carlo.mean_sq_norm,
    };
    Ok(MomentComparison { paper_model, monte_carlo, exact_analytic, discrepancy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{derive_constants, AssumptionParams, Lambda1Variant};
    use std::f64::consts::{FRAC_2_PI, PI};

    fn setup() -> (DerivedConstants, PrivacyConfig) {
        let p = PrivacyConfig { epsilon: 1.0, delta: None, c: 1.0, clip: 1.0, m: 10, n_clients: 5, rounds: 10 };
        let a = AssumptionParams::new(1.0, 1.0, 2.0, 2.0, 1.0).unwrap();
        (derive_constants(&a, &p, 1.0, Lambda1Variant::Corrected).unwrap(), p)
    }

    #[test]
    fn aggregate_matched_reference() {
        let (d, p) = setup();
        let model = make_noise_model(NoiseKind::AggregateMatched, &d, &p, 5).unwrap();
        assert!((model.per_coord_std - 0.4).abs() < 1e-15);
        let sq = model.dim as f64 * model.per_coord_std.powi(2);
        assert!((sq - 0.8).abs() < 1e-12);
        assert!((sq - paper_noise_moments(&d, &p).mean_sq_norm).abs() < 1e-12);
        // N == dim: sqrt(N/dim) = 1
        assert_eq!(model.per_coord_std, d.sigma_agg);
    }

    #[test]
    fn per_client_aggregate_std() {
        let (d, p) = setup();
        let model = make_noise_model(NoiseKind::PerClient, &d, &p, 3).unwrap();
        let weights = [0.2; 5];
        assert!((model.aggregate_std(&weights) - d.sigma_agg / 5f64.sqrt()).abs() < 1e-15);
        let matched = make_noise_model(NoiseKind::AggregateMatched, &d, &p, 3).unwrap();
        let upload = matched.upload_std(&weights);
        assert!((upload * weight_norm(&weights) - matched.per_coord_std).abs() < 1e-15);
    }

    #[test]
    fn disabled_noise_is_zero() {
        let model = NoiseModel::disabled(NoiseKind::AggregateMatched, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_noise(&model, &mut rng), DVector::zeros(4));
        let m = mc_moments(&model, 10, &mut rng).unwrap();
        assert_eq!((m.mean_norm, m.mean_sq_norm), (0.0, 0.0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let model = NoiseModel::new(NoiseKind::PerClient, 0.7, 6).unwrap();
        let a = sample_noise(&model, &mut ChaCha8Rng::seed_from_u64(42));
        let b = sample_noise(&model, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn exact_mean_small_dims() {
        assert!((exact_norm_mean(1, 2.0).unwrap() - 2.0 * FRAC_2_PI.sqrt()).abs() < 1e-13);
        assert!((exact_norm_mean(2, 1.5).unwrap() - 1.5 * (PI / 2.0).sqrt()).abs() < 1e-13);
        assert_eq!(exact_norm_mean(7, 0.0).unwrap(), 0.0);
        assert!(exact_norm_mean(0, 1.0).is_err());
    }

    #[test]
    fn empirical_folded_normal() {
        let model = NoiseModel::new(NoiseKind::AggregateMatched, 1.0, 1).unwrap();
        let m = mc_moments(&model, 200_000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let target = FRAC_2_PI.sqrt();
        assert!((m.mean_norm - target).abs() < 3.0 * m.std_error_mean_norm + 1e-3);
        assert!(m.mean_norm * m.mean_norm <= m.mean_sq_norm);
    }

    #[test]
    fn parallel_moments_independent_of_threads() {
        let model = NoiseModel::new(NoiseKind::AggregateMatched, 0.5, 3).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let single = pool.install(|| mc_moments_parallel(&model, 10_001, 9, 8).unwrap());
        let multi = mc_moments_parallel(&model, 10_001, 9, 8).unwrap();
        assert_eq!(single, multi);
        assert_eq!(multi.sample_count, 10_001);
    }

    #[test]
    fn rejects_zero_samples() {
        let model = NoiseModel::new(NoiseKind::AggregateMatched, 0.5, 3).unwrap();
        assert!(mc_moments(&model, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(mc_moments_parallel(&model, 0, 0, 4).is_err());
    }
}
