use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::constants::AssumptionParams;
use crate::error::{domain, Error, Result};

/// Gradient-norm tolerance for the logistic optimum solve.
pub const OPTIMUM_TOLERANCE: f64 = 1e-10;
const OPTIMUM_MAX_ITERATIONS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Quadratic,
    Logistic,
}

/// Constants certified for a problem instance.
///
/// The gradient-norm bound depends on the clipping radius: for any model of
/// norm at most `C`, `‖∇F(w)‖ ≤ beta_slope · C + beta_intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub rho: f64,
    pub l: f64,
    pub beta_slope: f64,
    pub beta_intercept: f64,
}

impl Certificate {
    pub fn beta(&self, clip: f64) -> f64 {
        self.beta_slope * clip + self.beta_intercept
    }

    /// Assumption set using the certified `rho`, `l` and `beta(clip)`.
    pub fn assumptions(&self, b: f64, mu: f64, clip: f64) -> Result<AssumptionParams> {
        AssumptionParams::new(self.rho, b, mu, self.l, self.beta(clip))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticClient {
    /// One sample per row.
    pub features: DMatrix<f64>,
    /// Labels in `{-1, +1}`.
    pub labels: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
enum Objective {
    /// `F_i(w) = ½ (w − a_i)ᵀ A (w − a_i)` with shared `A`.
    Quadratic { curvature: DMatrix<f64>, centers: Vec<DVector<f64>> },
    /// Mean logistic loss plus `½ λ ‖w‖²` per client.
    Logistic { clients: Vec<LogisticClient>, l2_reg: f64 },
}

/// A federated objective `F = Σ p_i F_i` with a certified optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub kind: ProblemKind,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub w_star: DVector<f64>,
    pub f_star: f64,
    pub certified: Certificate,
    /// Starting global model of every run.
    pub initial_model: DVector<f64>,
    objective: Objective,
}

impl Problem {
    /// Quadratic problem with explicit curvature and client centers.
    pub fn quadratic(curvature: DMatrix<f64>, centers: Vec<DVector<f64>>) -> Result<Self> {
        let dim = curvature.nrows();
        if dim == 0 || curvature.ncols() != dim {
            return Err(domain("curvature must be a non-empty square matrix"));
        }
        if centers.is_empty() || centers.iter().any(|a| a.len() != dim) {
            return Err(domain("need at least one client center of matching dimension"));
        }
        if (&curvature - curvature.transpose()).amax() > 1e-12 * curvature.amax().max(1.0) {
            return Err(domain("curvature must be symmetric"));
        }
        let eig = curvature.clone().symmetric_eigen();
        let min = eig.eigenvalues.min();
        let max = eig.eigenvalues.max();
        if min.is_nan() || min <= 0.0 {
            return Err(domain(format!("curvature must be positive definite, smallest eigenvalue {min}")));
        }
        Ok(Self::quadratic_certified(curvature, centers, min, max))
    }

    fn quadratic_certified(curvature: DMatrix<f64>, centers: Vec<DVector<f64>>, l: f64, rho: f64) -> Self {
        let dim = curvature.nrows();
        let n = centers.len();
        let weights = vec![1.0 / n as f64; n];
        let mut w_star = DVector::zeros(dim);
        for (a, p) in centers.iter().zip(&weights) {
            w_star.axpy(*p, a, 1.0);
        }
        let f_star = centers
            .iter()
            .zip(&weights)
            .map(|(a, p)| p * quad_form(&curvature, &(a - &w_star)))
            .sum();
        let max_center = centers.iter().map(|a| a.norm()).fold(0.0, f64::max);
        Self {
            kind: ProblemKind::Quadratic,
            dim,
            weights,
            w_star,
            f_star,
            certified: Certificate { rho, l, beta_slope: rho, beta_intercept: rho * max_center },
            initial_model: DVector::zeros(dim),
            objective: Objective::Quadratic { curvature, centers },
        }
    }

    /// Regularised logistic regression; the optimum is found by full-batch
    /// gradient descent with step `1/rho`.
    pub fn logistic(clients: Vec<LogisticClient>, l2_reg: f64) -> Result<Self> {
        if !(l2_reg.is_finite() && l2_reg > 0.0) {
            return Err(domain(format!("l2_reg must be > 0, got {l2_reg}")));
        }
        let dim = clients.first().map(|c| c.features.ncols()).unwrap_or(0);
        if dim == 0 {
            return Err(domain("need at least one client with at least one feature"));
        }
        for c in &clients {
            if c.features.ncols() != dim || c.features.nrows() == 0 || c.labels.len() != c.features.nrows() {
                return Err(domain("every client needs a non-empty, consistently shaped dataset"));
            }
        }
        let total: usize = clients.iter().map(|c| c.features.nrows()).sum();
        let weights: Vec<f64> = clients.iter().map(|c| c.features.nrows() as f64 / total as f64).collect();

        let mut second_moment = DMatrix::zeros(dim, dim);
        for (c, p) in clients.iter().zip(&weights) {
            let gram = c.features.transpose() * &c.features;
            second_moment += gram * (p / c.features.nrows() as f64);
        }
        let top = second_moment.symmetric_eigen().eigenvalues.max().max(0.0);
        let rho = 0.25 * top + l2_reg;
        let max_feature = clients
            .iter()
            .flat_map(|c| c.features.row_iter().map(|r| r.norm()).collect::<Vec<_>>())
            .fold(0.0, f64::max);

        let mut problem = Self {
            kind: ProblemKind::Logistic,
            dim,
            weights,
            w_star: DVector::zeros(dim),
            f_star: 0.0,
            certified: Certificate { rho, l: l2_reg, beta_slope: l2_reg, beta_intercept: max_feature },
            initial_model: DVector::zeros(dim),
            objective: Objective::Logistic { clients, l2_reg },
        };

        let mut w = DVector::zeros(dim);
        let mut iterations = 0;
        loop {
            let g = problem.grad(&w);
            let gn = g.norm();
            if gn < OPTIMUM_TOLERANCE {
                break;
            }
            if iterations >= OPTIMUM_MAX_ITERATIONS || !gn.is_finite() {
                return Err(Error::NoConvergence { iterations, grad_norm: gn });
            }
            w.axpy(-1.0 / rho, &g, 1.0);
            iterations += 1;
        }
        problem.f_star = problem.loss(&w);
        problem.w_star = w;
        Ok(problem)
    }

    pub fn with_initial_model(mut self, w: DVector<f64>) -> Result<Self> {
        if w.len() != self.dim || !w.iter().all(|x| x.is_finite()) {
            return Err(domain("initial model must be finite with matching dimension"));
        }
        self.initial_model = w;
        Ok(self)
    }

    pub fn n_clients(&self) -> usize {
        self.weights.len()
    }

    /// Number of samples held by each client (1 for quadratic clients).
    pub fn client_sizes(&self) -> Vec<usize> {
        match &self.objective {
            Objective::Quadratic { centers, .. } => vec![1; centers.len()],
            Objective::Logistic { clients, .. } => clients.iter().map(|c| c.features.nrows()).collect(),
        }
    }

    pub fn curvature(&self) -> Option<&DMatrix<f64>> {
        match &self.objective {
            Objective::Quadratic { curvature, .. } => Some(curvature),
            Objective::Logistic { .. } => None,
        }
    }

    pub fn client_loss(&self, i: usize, w: &DVector<f64>) -> f64 {
        match &self.objective {
            Objective::Quadratic { curvature, centers } => quad_form(curvature, &(w - &centers[i])),
            Objective::Logistic { clients, l2_reg } => {
                let c = &clients[i];
                let margins = &c.features * w;
                let data: f64 = margins
                    .iter()
                    .zip(c.labels.iter())
                    .map(|(z, y)| softplus(-y * z))
                    .sum::<f64>()
                    / c.features.nrows() as f64;
                data + 0.5 * l2_reg * w.norm_squared()
            }
        }
    }

    pub fn client_grad(&self, i: usize, w: &DVector<f64>) -> DVector<f64> {
        match &self.objective {
            Objective::Quadratic { curvature, centers } => curvature * (w - &centers[i]),
            Objective::Logistic { clients, l2_reg } => {
                let c = &clients[i];
                let margins = &c.features * w;
                let coeffs = DVector::from_iterator(
                    margins.len(),
                    margins.iter().zip(c.labels.iter()).map(|(z, y)| -y * sigmoid(-y * z)),
                );
                c.features.tr_mul(&coeffs) / c.features.nrows() as f64 + w * *l2_reg
            }
        }
    }

    pub fn loss(&self, w: &DVector<f64>) -> f64 {
        match &self.objective {
            Objective::Quadratic { curvature, .. } => quad_form(curvature, &(w - &self.w_star)) + self.f_star,
            Objective::Logistic { .. } => {
                (0..self.n_clients()).map(|i| self.weights[i] * self.client_loss(i, w)).sum()
            }
        }
    }

    pub fn grad(&self, w: &DVector<f64>) -> DVector<f64> {
        match &self.objective {
            Objective::Quadratic { curvature, .. } => curvature * (w - &self.w_star),
            Objective::Logistic { .. } => {
                let mut g = DVector::zeros(self.dim);
                for i in 0..self.n_clients() {
                    g.axpy(self.weights[i], &self.client_grad(i, w), 1.0);
                }
                g
            }
        }
    }

    /// `F(w) − F*`, computed without cancellation for quadratics.
    pub fn loss_gap(&self, w: &DVector<f64>) -> f64 {
        match &self.objective {
            Objective::Quadratic { curvature, .. } => quad_form(curvature, &(w - &self.w_star)),
            // The solved optimum is exact to ~1e-20 in loss; clamp the rounding.
            Objective::Logistic { .. } => (self.loss(w) - self.f_star).max(0.0),
        }
    }

    /// `max_i ‖∇F_i(w) − ∇F(w)‖`.
    pub fn gradient_divergence(&self, w: &DVector<f64>) -> f64 {
        let g = self.grad(w);
        (0..self.n_clients())
            .map(|i| (self.client_grad(i, w) - &g).norm())
            .fold(0.0, f64::max)
    }
}

fn quad_form(a: &DMatrix<f64>, e: &DVector<f64>) -> f64 {
    0.5 * e.dot(&(a * e))
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn gaussian_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Uniform draw from the ball of the given radius.
fn ball_point<R: Rng + ?Sized>(dim: usize, radius: f64, rng: &mut R) -> DVector<f64> {
    if radius == 0.0 {
        return DVector::zeros(dim);
    }
    let mut dir = gaussian_vector(dim, rng);
    while dir.norm() == 0.0 {
        dir = gaussian_vector(dim, rng);
    }
    let u: f64 = rng.random();
    dir.normalize() * (radius * u.powf(1.0 / dim as f64))
}

/// Uniform direction scaled to the given norm.
pub fn sphere_point<R: Rng + ?Sized>(dim: usize, radius: f64, rng: &mut R) -> DVector<f64> {
    if radius == 0.0 {
        return DVector::zeros(dim);
    }
    let mut dir = gaussian_vector(dim, rng);
    while dir.norm() == 0.0 {
        dir = gaussian_vector(dim, rng);
    }
    dir.normalize() * radius
}

/// Strongly convex quadratic clients sharing one curvature matrix whose
/// spectrum spans `[curvature_min, curvature_max]`.
///
/// The certificate is exact: `rho = curvature_max`, `l = curvature_min`.
pub fn make_quadratic<R: Rng + ?Sized>(
    dim: usize,
    n_clients: usize,
    spread: f64,
    curvature_min: f64,
    curvature_max: f64,
    rng: &mut R,
) -> Result<Problem> {
    if dim == 0 || n_clients == 0 {
        return Err(domain("dim and n_clients must be >= 1"));
    }
    if !(curvature_min.is_finite() && curvature_max.is_finite() && curvature_min > 0.0 && curvature_min <= curvature_max) {
        return Err(domain(format!(
            "need 0 < curvature_min <= curvature_max, got [{curvature_min}, {curvature_max}]"
        )));
    }
    if dim == 1 && curvature_min != curvature_max {
        return Err(domain("a one-dimensional quadratic has a single curvature; set curvature_min = curvature_max"));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(domain(format!("spread must be finite and >= 0, got {spread}")));
    }

    let curvature = if curvature_min == curvature_max {
        DMatrix::identity(dim, dim) * curvature_min
    } else {
        let eigenvalues = DVector::from_fn(dim, |k, _| {
            curvature_min + (curvature_max - curvature_min) * k as f64 / (dim - 1) as f64
        });
        let basis = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q();
        let a = &basis * DMatrix::from_diagonal(&eigenvalues) * basis.transpose();
        (&a + a.transpose()) * 0.5
    };
    let centers = (0..n_clients).map(|_| ball_point(dim, spread, rng)).collect();
    Ok(Problem::quadratic_certified(curvature, centers, curvature_min, curvature_max))
}

/// Synthetic logistic-regression clients. Labels follow a shared linear rule
/// with label noise, and each client's features are shifted by a
/// client-specific offset.
pub fn make_logistic<R: Rng + ?Sized>(
    n_samples_per_client: usize,
    dim: usize,
    n_clients: usize,
    l2_reg: f64,
    rng: &mut R,
) -> Result<Problem> {
    if n_samples_per_client == 0 || dim == 0 || n_clients == 0 {
        return Err(domain("n_samples_per_client, dim and n_clients must be >= 1"));
    }
    let truth = sphere_point(dim, 2.0, rng);
    let clients = (0..n_clients)
        .map(|_| {
            let shift = gaussian_vector(dim, rng) * 0.5;
            let features = DMatrix::from_fn(n_samples_per_client, dim, |_, j| {
                shift[j] + rng.sample::<f64, _>(StandardNormal)
            });
            let labels = DVector::from_fn(n_samples_per_client, |r, _| {
                let score = features.row(r).transpose().dot(&truth) + 0.5 * rng.sample::<f64, _>(StandardNormal);
                if score >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            });
            LogisticClient { features, labels }
        })
        .collect();
    Problem::logistic(clients, l2_reg)
}
