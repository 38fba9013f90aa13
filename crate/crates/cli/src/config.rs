//! Experiment configuration: JSON schema, validation and resolution into the
//! concrete objects the core library consumes.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nbafl_core::constants::{
    derive_c_from_delta, derive_constants, AssumptionParams, DerivedConstants, Lambda1Variant, PrivacyConfig,
};
use nbafl_core::flsim::{calibrate_clip_radius, make_logistic, make_quadratic, sphere_point, Problem, TrainOptions};
use nbafl_core::noise::{make_noise_model, NoiseKind, NoiseModel};

use crate::error::CliError;

/// Analysis constants. `rho`, `l` and `beta` default to the values certified
/// for the generated problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssumptionSpec {
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(rename = "B", default)]
    pub b: f64,
    pub mu: f64,
    #[serde(default)]
    pub l: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySpec {
    pub epsilon: f64,
    #[serde(default)]
    pub delta: Option<f64>,
    /// Derived from `delta` when absent.
    #[serde(default)]
    pub c: Option<f64>,
    /// Calibrated from a noiseless run when absent.
    #[serde(rename = "C", default)]
    pub clip: Option<f64>,
    pub m: u64,
    #[serde(rename = "N")]
    pub n_clients: u64,
    #[serde(rename = "T")]
    pub rounds: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    Quadratic {
        dim: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        curvature_min: f64,
        curvature_max: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_init_norm")]
        init_norm: f64,
    },
    /// Uses `privacy.m` samples per client.
    Logistic {
        dim: usize,
        l2_reg: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_init_norm")]
        init_norm: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "epsilon")]
    Epsilon,
    #[serde(rename = "T")]
    Rounds,
    #[serde(rename = "N")]
    Clients,
    #[serde(rename = "C")]
    Clip,
    #[serde(rename = "c")]
    NoiseScale,
    #[serde(rename = "m")]
    DatasetSize,
    #[serde(rename = "local_epochs")]
    LocalEpochs,
    #[serde(rename = "lr")]
    LearningRate,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Epsilon => "epsilon",
            SweepParam::Rounds => "T",
            SweepParam::Clients => "N",
            SweepParam::Clip => "C",
            SweepParam::NoiseScale => "c",
            SweepParam::DatasetSize => "m",
            SweepParam::LocalEpochs => "local_epochs",
            SweepParam::LearningRate => "lr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub assumptions: AssumptionSpec,
    pub privacy: PrivacySpec,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub noise: NoiseKind,
    /// Defaults to `1 / rho` of the problem certificate.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub lambda1_variant: Lambda1Variant,
    /// Initial optimality gap; measured at the initial model when absent.
    #[serde(default)]
    pub theta: Option<f64>,
    /// `C = factor × noiseless model-norm envelope` when `privacy.C` is absent.
    #[serde(default = "default_clip_factor")]
    pub clip_calibration_factor: f64,
}

fn default_spread() -> f64 {
    1.0
}
fn default_init_norm() -> f64 {
    2.0
}
fn default_local_epochs() -> usize {
    1
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_clip_factor() -> f64 {
    1.5
}

fn field(path: &str, message: impl Into<String>) -> CliError {
    CliError::Config(format!("{path}: {}", message.into()))
}

fn positive(path: &str, x: f64) -> Result<(), CliError> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(field(path, format!("must be finite and > 0, got {x}")))
    }
}

fn nonnegative(path: &str, x: f64) -> Result<(), CliError> {
    if x.is_finite() && x >= 0.0 {
        Ok(())
    } else {
        Err(field(path, format!("must be finite and >= 0, got {x}")))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks every field; errors name the offending field path.
    pub fn validate(&self) -> Result<(), CliError> {
        let a = &self.assumptions;
        if let Some(rho) = a.rho {
            positive("assumptions.rho", rho)?;
        }
        nonnegative("assumptions.B", a.b)?;
        positive("assumptions.mu", a.mu)?;
        if let Some(l) = a.l {
            positive("assumptions.l", l)?;
        }
        if let Some(beta) = a.beta {
            nonnegative("assumptions.beta", beta)?;
        }

        let p = &self.privacy;
        positive("privacy.epsilon", p.epsilon)?;
        if let Some(delta) = p.delta {
            if !(delta > 0.0 && delta < 1.0) {
                return Err(field("privacy.delta", format!("must lie in (0, 1), got {delta}")));
            }
        }
        match p.c {
            Some(c) => nonnegative("privacy.c", c)?,
            None if p.delta.is_none() => return Err(field("privacy.c", "required unless privacy.delta is set")),
            None => {}
        }
        if let Some(clip) = p.clip {
            positive("privacy.C", clip)?;
        }
        for (path, v) in [("privacy.m", p.m), ("privacy.N", p.n_clients), ("privacy.T", p.rounds)] {
            if v == 0 {
                return Err(field(path, "must be >= 1"));
            }
        }

        match &self.problem {
            ProblemSpec::Quadratic { dim, spread, curvature_min, curvature_max, init_norm, .. } => {
                if *dim == 0 {
                    return Err(field("problem.dim", "must be >= 1"));
                }
                nonnegative("problem.spread", *spread)?;
                positive("problem.curvature_min", *curvature_min)?;
                positive("problem.curvature_max", *curvature_max)?;
                if curvature_min > curvature_max {
                    return Err(field("problem.curvature_max", "must be >= problem.curvature_min"));
                }
                if *dim == 1 && curvature_min != curvature_max {
                    return Err(field("problem.curvature_max", "must equal curvature_min when dim = 1"));
                }
                nonnegative("problem.init_norm", *init_norm)?;
            }
            ProblemSpec::Logistic { dim, l2_reg, init_norm, .. } => {
                if *dim == 0 {
                    return Err(field("problem.dim", "must be >= 1"));
                }
                positive("problem.l2_reg", *l2_reg)?;
                nonnegative("problem.init_norm", *init_norm)?;
            }
        }

        if let Some(lr) = self.lr {
            positive("lr", lr)?;
        }
        if self.local_epochs == 0 {
            return Err(field("local_epochs", "must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(field("seeds", "must list at least one seed"));
        }
        if let Some(theta) = self.theta {
            nonnegative("theta", theta)?;
        }
        positive("clip_calibration_factor", self.clip_calibration_factor)?;

        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(field("sweep.values", "must list at least one value"));
            }
            for (i, &v) in sweep.values.iter().enumerate() {
                self.at_sweep_point(sweep.param, v)
                    .and_then(|c| c.validate())
                    .map_err(|e| CliError::Config(format!("sweep.values[{i}]: {}", e.message())))?;
            }
        }
        Ok(())
    }

    /// Copy of the config with one parameter replaced and the sweep removed.
    pub fn at_sweep_point(&self, param: SweepParam, value: f64) -> Result<Self, CliError> {
        let mut cfg = self.clone();
        cfg.sweep = None;
        let as_count = |path: &str| -> Result<u64, CliError> {
            if value.fract() == 0.0 && value >= 1.0 && value <= u32::MAX as f64 {
                Ok(value as u64)
            } else {
                Err(field(path, format!("must be an integer >= 1, got {value}")))
            }
        };
        match param {
            SweepParam::Epsilon => cfg.privacy.epsilon = value,
            SweepParam::Rounds => cfg.privacy.rounds = as_count("privacy.T")?,
            SweepParam::Clients => cfg.privacy.n_clients = as_count("privacy.N")?,
            SweepParam::Clip => cfg.privacy.clip = Some(value),
            SweepParam::NoiseScale => cfg.privacy.c = Some(value),
            SweepParam::DatasetSize => cfg.privacy.m = as_count("privacy.m")?,
            SweepParam::LocalEpochs => cfg.local_epochs = as_count("local_epochs")? as usize,
            SweepParam::LearningRate => cfg.lr = Some(value),
        }
        Ok(cfg)
    }

    /// Sweep points in config order, or the config itself when no sweep is set.
    pub fn points(&self) -> Result<Vec<(Option<String>, ExperimentConfig)>, CliError> {
        match &self.sweep {
            None => Ok(vec![(None, self.clone())]),
            Some(sweep) => sweep
                .values
                .iter()
                .map(|&v| {
                    let cfg = self.at_sweep_point(sweep.param, v)?;
                    Ok((Some(format!("{}-{}", sweep.param.name(), v)), cfg))
                })
                .collect(),
        }
    }

    /// Stable hash of the canonical JSON form, ignoring `seeds`, `sweep` and
    /// `output_dir`. Object keys are sorted, so field order in the input file
    /// does not matter.
    pub fn fingerprint(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            for key in ["seeds", "sweep", "output_dir"] {
                obj.remove(key);
            }
        }
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A config with every default filled in.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub fingerprint: String,
    pub problem: Problem,
    pub assumptions: AssumptionParams,
    pub privacy: PrivacyConfig,
    pub constants: DerivedConstants,
    pub noise: NoiseModel,
    pub train: TrainOptions,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedSummary {
    pub fingerprint: String,
    pub assumptions: AssumptionParams,
    pub privacy: PrivacyConfig,
    pub constants: DerivedConstants,
    pub noise: NoiseModel,
    pub train: TrainOptions,
    pub certified: nbafl_core::flsim::Certificate,
}

impl Resolved {
    pub fn new(config: &ExperimentConfig) -> Result<Self, CliError> {
        config.validate()?;
        let fingerprint = config.fingerprint();
        let p = &config.privacy;

        let problem = match &config.problem {
            ProblemSpec::Quadratic { dim, spread, curvature_min, curvature_max, seed, init_norm } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let problem =
                    make_quadratic(*dim, p.n_clients as usize, *spread, *curvature_min, *curvature_max, &mut rng)?;
                let init = sphere_point(*dim, *init_norm, &mut rng);
                problem.with_initial_model(init)?
            }
            ProblemSpec::Logistic { dim, l2_reg, seed, init_norm } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let problem = make_logistic(p.m as usize, *dim, p.n_clients as usize, *l2_reg, &mut rng)?;
                let init = &problem.w_star + sphere_point(*dim, *init_norm, &mut rng);
                problem.with_initial_model(init)?
            }
        };
        let train = TrainOptions { lr: config.lr.unwrap_or(1.0 / problem.certified.rho), local_epochs: config.local_epochs };

        let clip = match p.clip {
            Some(c) => c,
            None => calibrate_clip_radius(&problem, p.rounds, &train, config.clip_calibration_factor)?,
        };
        let c = match (p.c, p.delta) {
            (Some(c), _) => c,
            (None, Some(delta)) => derive_c_from_delta(delta)?,
            (None, None) => return Err(field("privacy.c", "required unless privacy.delta is set")),
        };
        let privacy = PrivacyConfig {
            epsilon: p.epsilon,
            delta: p.delta,
            c,
            clip,
            m: p.m,
            n_clients: p.n_clients,
            rounds: p.rounds,
        };
        privacy.validate()?;

        let a = &config.assumptions;
        let assumptions = AssumptionParams::new(
            a.rho.unwrap_or(problem.certified.rho),
            a.b,
            a.mu,
            a.l.unwrap_or(problem.certified.l),
            a.beta.unwrap_or(problem.certified.beta(clip)),
        )?;
        let theta = match config.theta {
            Some(t) => t,
            None => problem.loss_gap(&problem.initial_model),
        };
        let constants = derive_constants(&assumptions, &privacy, theta, config.lambda1_variant)?;
        let noise = make_noise_model(config.noise, &constants, &privacy, problem.dim)?;
        Ok(Self { config: config.clone(), fingerprint, problem, assumptions, privacy, constants, noise, train })
    }

    pub fn summary(&self) -> ResolvedSummary {
        ResolvedSummary {
            fingerprint: self.fingerprint.clone(),
            assumptions: self.assumptions,
            privacy: self.privacy,
            constants: self.constants,
            noise: self.noise,
            train: self.train,
            certified: self.problem.certified,
        }
    }

    pub fn initial_model(&self) -> &DVector<f64> {
        &self.problem.initial_model
    }
}
