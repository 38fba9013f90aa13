//! Analysis parameters and the constants derived from them.
//!
//! Everything here is a pure function of its arguments. The bounds in
//! [`crate::bounds`] read only [`DerivedConstants`] and [`PrivacyConfig`].

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Distance from `P = 1` below which the geometric bound is treated as singular.
pub const SINGULARITY_TOLERANCE: f64 = 1e-12;

/// Loss-landscape constants of the convergence analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionParams {
    /// Smoothness (Lipschitz-gradient) constant.
    pub rho: f64,
    /// Bound on the divergence between local and global gradients.
    #[serde(rename = "B")]
    pub b: f64,
    pub mu: f64,
    /// Polyak-Lojasiewicz constant.
    pub l: f64,
    /// Upper bound on the global gradient norm.
    pub beta: f64,
}

impl AssumptionParams {
    pub fn new(rho: f64, b: f64, mu: f64, l: f64, beta: f64) -> Result<Self> {
        let params = Self { rho, b, mu, l, beta };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("rho", self.rho),
            ("B", self.b),
            ("mu", self.mu),
            ("l", self.l),
            ("beta", self.beta),
        ];
        for (name, value) in fields {
            if !value.is_finite() {
                return Err(domain(format!("{name} must be finite, got {value}")));
            }
        }
        for (name, value) in [("rho", self.rho), ("mu", self.mu), ("l", self.l)] {
            if value <= 0.0 {
                return Err(domain(format!("{name} must be > 0, got {value}")));
            }
        }
        for (name, value) in [("B", self.b), ("beta", self.beta)] {
            if value < 0.0 {
                return Err(domain(format!("{name} must be >= 0, got {value}")));
            }
        }
        Ok(())
    }
}

/// Privacy and federation parameters.
///
/// `c = 0` is accepted and describes a noiseless run: every noise scale and
/// every noise-driven bound term collapses to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyConfig {
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Noise-scale constant of the Gaussian mechanism.
    pub c: f64,
    /// Clipping radius applied to every uploaded model.
    #[serde(rename = "C")]
    pub clip: f64,
    /// Minimum per-client dataset size.
    pub m: u64,
    /// Number of clients.
    #[serde(rename = "N")]
    pub n_clients: u64,
    /// Total number of aggregation rounds.
    #[serde(rename = "T")]
    pub rounds: u64,
}

impl PrivacyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(domain(format!("epsilon must be finite and > 0, got {}", self.epsilon)));
        }
        if !(self.c.is_finite() && self.c >= 0.0) {
            return Err(domain(format!("c must be finite and >= 0, got {}", self.c)));
        }
        // C = +inf is allowed: it disables clipping.
        if self.clip.is_nan() || self.clip <= 0.0 {
            return Err(domain(format!("C must be > 0, got {}", self.clip)));
        }
        if self.m == 0 {
            return Err(domain("m must be >= 1"));
        }
        if self.n_clients == 0 {
            return Err(domain("N must be >= 1"));
        }
        if self.rounds == 0 {
            return Err(domain("T must be >= 1"));
        }
        if let Some(delta) = self.delta {
            if !(delta > 0.0 && delta < 1.0) {
                return Err(domain(format!("delta must lie in (0, 1), got {delta}")));
            }
        }
        Ok(())
    }
}

/// Which formula to use for `lambda1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lambda1Variant {
    /// `1 + rho*B/mu`
    #[default]
    Corrected,
    /// `1/mu + rho*B/mu`, the misprinted leading term.
    OriginalTypo,
}

/// Constants consumed by the bound evaluators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivedConstants {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Contraction factor `1 + 2 l lambda2`.
    pub p: f64,
    /// Sensitivity `2C / (m N)`.
    pub delta_s: f64,
    /// Per-coordinate uplink noise scale `delta_s * T * c / epsilon`. The
    /// aggregate-matched noise model rescales it by `sqrt(N / dim)`.
    pub sigma_agg: f64,
    /// Geometric-bound constants. `None` when `|1 - P|` is below
    /// [`SINGULARITY_TOLERANCE`].
    pub k0_orig: Option<f64>,
    pub k1_orig: Option<f64>,
    pub k0_corr: f64,
    pub k1_corr: f64,
    pub k2_corr: f64,
    /// Initial optimality gap.
    pub theta: f64,
    /// Gradient-norm bound carried through for the per-round recursions.
    pub beta: f64,
}

pub fn sensitivity(clip: f64, m: u64, n_clients: u64) -> Result<f64> {
    if clip.is_nan() || clip <= 0.0 {
        return Err(domain(format!("C must be > 0, got {clip}")));
    }
    if m == 0 || n_clients == 0 {
        return Err(domain("m and N must be >= 1"));
    }
    Ok(2.0 * clip / (m as f64 * n_clients as f64))
}

/// Standard Gaussian-mechanism constant `sqrt(2 ln(1.25 / delta))`.
pub fn derive_c_from_delta(delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok((2.0 * (1.25 / delta).ln()).sqrt())
}

pub fn derive_constants(
    a: &AssumptionParams,
    p: &PrivacyConfig,
    theta: f64,
    variant: Lambda1Variant,
) -> Result<DerivedConstants> {
    a.validate()?;
    p.validate()?;
    if !(theta.is_finite() && theta >= 0.0) {
        return Err(domain(format!("theta must be finite and >= 0, got {theta}")));
    }

    let AssumptionParams { rho, b, mu, l, beta } = *a;
    let lambda0 = rho / 2.0;
    let lambda1 = match variant {
        Lambda1Variant::Corrected => 1.0 + rho * b / mu,
        Lambda1Variant::OriginalTypo => 1.0 / mu + rho * b / mu,
    };
    // Both rho*B/mu^2 shaped terms are kept as written.
    let lambda2 = -1.0 / mu + rho * b / (mu * mu) + rho * b / (2.0 * mu * mu);
    let contraction = 1.0 + 2.0 * l * lambda2;

    let m = p.m as f64;
    let n = p.n_clients as f64;
    let delta_s = sensitivity(p.clip, p.m, p.n_clients)?;
    let sigma_agg = delta_s * p.rounds as f64 * p.c / p.epsilon;
    let root = (2.0 / (n * std::f64::consts::PI)).sqrt();

    let one_minus_p = 1.0 - contraction;
    let (k0_orig, k1_orig) = if one_minus_p.abs() < SINGULARITY_TOLERANCE {
        (None, None)
    } else {
        (
            Some(lambda0 * p.clip * p.clip * p.c * p.c / (m * m * one_minus_p * n)),
            Some(lambda1 * beta * p.clip * p.c / (m * one_minus_p) * root),
        )
    };

    Ok(DerivedConstants {
        lambda0,
        lambda1,
        lambda2,
        p: contraction,
        delta_s,
        sigma_agg,
        k0_orig,
        k1_orig,
        k0_corr: 4.0 * lambda0 * p.clip * p.clip * p.c * p.c / (m * m * n),
        k1_corr: (2.0 * lambda1 * beta * p.clip * p.c / m) * root,
        k2_corr: lambda2 * beta * beta,
        theta,
        beta,
    })
}
