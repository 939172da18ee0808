//! Local cost models and their gradients.
//!
//! Each node owns a cost of the form `J_l(w) = E Q(w; data)`, and only ever
//! sees noisy draws of that data. A model therefore exposes two gradient
//! routes: the exact gradient of the expected cost, and a stochastic gradient
//! evaluated on one data sample. Their difference is the gradient noise
//!
//! ```text
//! v(w) = grad_hat J(w) - grad J(w),    E[v(w) | past] = 0,
//! E ||v(w)||^2 <= alpha ||w_opt - w||^2 + sigma_v^2,
//! ```
//!
//! and every model reports constants `(alpha, sigma_v^2)` that make the bound
//! hold with `w_opt` the model's data-generator target.
//!
//! Sampling is split in two: [`CostModel::draw_sample`] consumes randomness,
//! [`CostModel::sample_gradient`] evaluates a drawn sample at any point. The
//! split matters because cooperating strategies evaluate a neighbor's
//! gradient at their own iterate: one sample per (node, time) is drawn and
//! then evaluated at as many points as the network needs, which also keeps
//! paired strategy comparisons on identical data.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("minimizer search did not converge within {iterations} iterations (gradient norm {grad_norm:e})")]
    MinimizerNotConverged { iterations: usize, grad_norm: f64 },
    #[error("cost list is empty")]
    NoCosts,
    #[error("cost dimensions disagree: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// One data draw. Regression models observe a regressor block and a response
/// vector; range models observe a single noisy squared distance.
#[derive(Clone, Debug)]
pub enum CostSample {
    Regression { u: DMatrix<f64>, d: DVector<f64> },
    Range { d: f64 },
}

/// Eigenvalue bounds for the cost Hessian over the relevant region. When
/// `non_convex` is set the bounds are empirical (sampled), not global
/// guarantees, and `lambda_min` may be negative.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct HessianBounds {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub non_convex: bool,
}

/// Constants of the relative-noise bound
/// `E ||v(w)||^2 <= alpha ||w_opt - w||^2 + sigma_v2`.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct NoiseMoments {
    pub alpha: f64,
    pub sigma_v2: f64,
}

pub trait CostModel {
    fn dim(&self) -> usize;

    /// Exact expected cost.
    fn value(&self, w: &DVector<f64>) -> f64;

    /// Gradient of the expected cost.
    fn gradient(&self, w: &DVector<f64>) -> DVector<f64>;

    /// Hessian of the expected cost.
    fn hessian(&self, w: &DVector<f64>) -> DMatrix<f64>;

    /// Draw one data sample. The draw order is fixed, so equal streams yield
    /// equal samples.
    fn draw_sample(&self, rng: &mut ChaCha12Rng) -> CostSample;

    /// Stochastic gradient of the drawn sample evaluated at `w`.
    ///
    /// Panics if the sample variant does not belong to this model.
    fn sample_gradient(&self, sample: &CostSample, w: &DVector<f64>) -> DVector<f64>;

    /// Draw-and-evaluate convenience.
    fn stochastic_gradient(&self, w: &DVector<f64>, rng: &mut ChaCha12Rng) -> DVector<f64> {
        let sample = self.draw_sample(rng);
        self.sample_gradient(&sample, w)
    }

    fn hessian_bounds(&self) -> HessianBounds;

    fn noise_moments(&self) -> NoiseMoments;

    /// Analytic gradient-noise covariance `E v(w) v(w)^T` when the model has
    /// one in closed form.
    fn noise_covariance_at(&self, w: &DVector<f64>) -> Option<DMatrix<f64>>;

    /// The data-generator target. It is the cost minimizer for the plain
    /// quadratic and localization models; a regularized cost is minimized
    /// elsewhere.
    fn minimizer_hint(&self) -> Option<DVector<f64>>;
}

/// Shared data generator for the regression costs: responses
/// `d = U w_true + z` with `U` a `rows x dim` matrix of independent
/// unit-variance Gaussian entries and `z` Gaussian with standard deviation
/// `noise_std` per row.
#[derive(Clone, Debug)]
pub struct LinearModelData {
    pub w_true: DVector<f64>,
    pub rows: usize,
    pub noise_std: f64,
}

impl LinearModelData {
    pub fn dim(&self) -> usize {
        self.w_true.len()
    }

    /// `U` is filled row by row, then one response noise per row.
    fn draw(&self, rng: &mut ChaCha12Rng) -> CostSample {
        let (k, m) = (self.rows, self.dim());
        let mut u = DMatrix::zeros(k, m);
        for r in 0..k {
            for c in 0..m {
                u[(r, c)] = StandardNormal.sample(rng);
            }
        }
        let mut d = DVector::zeros(k);
        for r in 0..k {
            let noise: f64 = StandardNormal.sample(rng);
            d[r] = u.row(r).transpose().dot(&self.w_true) + self.noise_std * noise;
        }
        CostSample::Regression { u, d }
    }

    /// `2 U^T (U w - d)`.
    fn sample_gradient(&self, sample: &CostSample, w: &DVector<f64>) -> DVector<f64> {
        match sample {
            CostSample::Regression { u, d } => {
                let residual = u * w - d;
                2.0 * u.transpose() * residual
            }
            other => panic!("regression cost got incompatible sample {other:?}"),
        }
    }

    /// With unit-variance regressors, `E U^T U = rows * I`, so the gradient
    /// noise obeys
    /// `E ||v(w)||^2 = 4 rows (dim + 1) ||w - w_true||^2 + 4 noise_std^2 rows dim`
    /// with equality; both constants come from the Gaussian fourth moment.
    fn noise_moments(&self) -> NoiseMoments {
        let (k, m) = (self.rows as f64, self.dim() as f64);
        NoiseMoments {
            alpha: 4.0 * k * (m + 1.0),
            sigma_v2: 4.0 * self.noise_std.powi(2) * k * m,
        }
    }

    /// `E v v^T = 4 rows (delta delta^T + ||delta||^2 I) + 4 noise_std^2 rows I`
    /// with `delta = w - w_true`.
    fn noise_covariance_at(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let k = self.rows as f64;
        let delta = w - &self.w_true;
        let m = self.dim();
        let eye = DMatrix::identity(m, m);
        4.0 * k * (&delta * delta.transpose() + delta.norm_squared() * &eye)
            + 4.0 * self.noise_std.powi(2) * k * eye
    }
}

/// Mean-square-error regression cost
/// `J(w) = E ||d - U w||^2 = rows ||w - w_true||^2 + rows noise_std^2`.
#[derive(Clone, Debug)]
pub struct QuadraticCost {
    pub data: LinearModelData,
}

impl CostModel for QuadraticCost {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn value(&self, w: &DVector<f64>) -> f64 {
        let k = self.data.rows as f64;
        k * ((w - &self.data.w_true).norm_squared() + self.data.noise_std.powi(2))
    }

    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        2.0 * self.data.rows as f64 * (w - &self.data.w_true)
    }

    fn hessian(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let m = self.dim();
        let _ = w;
        DMatrix::identity(m, m) * (2.0 * self.data.rows as f64)
    }

    fn draw_sample(&self, rng: &mut ChaCha12Rng) -> CostSample {
        self.data.draw(rng)
    }

    fn sample_gradient(&self, sample: &CostSample, w: &DVector<f64>) -> DVector<f64> {
        self.data.sample_gradient(sample, w)
    }

    fn hessian_bounds(&self) -> HessianBounds {
        let lambda = 2.0 * self.data.rows as f64;
        HessianBounds {
            lambda_min: lambda,
            lambda_max: lambda,
            non_convex: false,
        }
    }

    fn noise_moments(&self) -> NoiseMoments {
        self.data.noise_moments()
    }

    fn noise_covariance_at(&self, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.data.noise_covariance_at(w))
    }

    fn minimizer_hint(&self) -> Option<DVector<f64>> {
        Some(self.data.w_true.clone())
    }
}

/// Twice-differentiable stand-in for the l1 norm:
/// `sum_m sqrt(w_m^2 + epsilon^2)`, within `dim * epsilon` of `||w||_1`.
pub fn smooth_l1(w: &DVector<f64>, epsilon: f64) -> f64 {
    w.iter().map(|&x| (x * x + epsilon * epsilon).sqrt()).sum()
}

/// Gradient of [`smooth_l1`]: entries `w_m / sqrt(w_m^2 + epsilon^2)`.
pub fn smooth_l1_gradient(w: &DVector<f64>, epsilon: f64) -> DVector<f64> {
    w.map(|x| x / (x * x + epsilon * epsilon).sqrt())
}

/// Regression cost with a sparsity penalty shared across the network:
/// `J(w) = E ||d - U w||^2 + (rho / n_nodes_total) * smooth_l1(w)`.
///
/// The penalty of the aggregate cost is `rho * smooth_l1`, so each of the
/// `n_nodes_total` local copies carries an equal share.
#[derive(Clone, Debug)]
pub struct SparseRegCost {
    pub data: LinearModelData,
    pub rho: f64,
    pub epsilon: f64,
    pub n_nodes_total: usize,
}

impl SparseRegCost {
    fn penalty_scale(&self) -> f64 {
        self.rho / self.n_nodes_total as f64
    }
}

impl CostModel for SparseRegCost {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn value(&self, w: &DVector<f64>) -> f64 {
        let k = self.data.rows as f64;
        let quad = k * ((w - &self.data.w_true).norm_squared() + self.data.noise_std.powi(2));
        quad + self.penalty_scale() * smooth_l1(w, self.epsilon)
    }

    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        let mut g = 2.0 * self.data.rows as f64 * (w - &self.data.w_true);
        if self.rho != 0.0 {
            g += self.penalty_scale() * smooth_l1_gradient(w, self.epsilon);
        }
        g
    }

    fn hessian(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let m = self.dim();
        let mut h = DMatrix::identity(m, m) * (2.0 * self.data.rows as f64);
        if self.rho != 0.0 {
            let scale = self.penalty_scale();
            let e2 = self.epsilon * self.epsilon;
            for i in 0..m {
                h[(i, i)] += scale * e2 / (w[i] * w[i] + e2).powf(1.5);
            }
        }
        h
    }

    fn draw_sample(&self, rng: &mut ChaCha12Rng) -> CostSample {
        self.data.draw(rng)
    }

    fn sample_gradient(&self, sample: &CostSample, w: &DVector<f64>) -> DVector<f64> {
        let mut g = self.data.sample_gradient(sample, w);
        if self.rho != 0.0 {
            g += self.penalty_scale() * smooth_l1_gradient(w, self.epsilon);
        }
        g
    }

    /// The penalty curvature peaks at the origin with value
    /// `penalty_scale / epsilon`, and it never subtracts curvature.
    fn hessian_bounds(&self) -> HessianBounds {
        let lambda = 2.0 * self.data.rows as f64;
        HessianBounds {
            lambda_min: lambda,
            lambda_max: lambda + self.penalty_scale() / self.epsilon,
            non_convex: false,
        }
    }

    /// The penalty is deterministic, so the gradient noise is exactly the
    /// quadratic model's.
    fn noise_moments(&self) -> NoiseMoments {
        self.data.noise_moments()
    }

    fn noise_covariance_at(&self, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.data.noise_covariance_at(w))
    }

    fn minimizer_hint(&self) -> Option<DVector<f64>> {
        Some(self.data.w_true.clone())
    }
}

/// Range-based planar localization. The node at `anchor` observes noisy
/// squared distances to a target,
/// `d = ||target - anchor||^2 + z`, and minimizes
/// `J(w) = (1/4) E |d - ||w - anchor||^2|^2`.
///
/// The exact cost is minimized on the whole circle around the anchor through
/// the target, so one node alone cannot localize; cooperation resolves the
/// ambiguity.
#[derive(Clone, Debug)]
pub struct LocalizationCost {
    pub anchor: DVector<f64>,
    pub noise_std: f64,
    pub target: DVector<f64>,
}

impl LocalizationCost {
    pub fn new(anchor: [f64; 2], noise_std: f64, target: [f64; 2]) -> LocalizationCost {
        LocalizationCost {
            anchor: DVector::from_column_slice(&anchor),
            noise_std,
            target: DVector::from_column_slice(&target),
        }
    }

    /// Mean observation `E d = ||target - anchor||^2`.
    fn mean_range(&self) -> f64 {
        (&self.target - &self.anchor).norm_squared()
    }

    /// Move the target; the data generator and the exact cost follow.
    pub fn set_target(&mut self, target: &DVector<f64>) {
        self.target.copy_from(target);
    }
}

impl CostModel for LocalizationCost {
    fn dim(&self) -> usize {
        self.anchor.len()
    }

    fn value(&self, w: &DVector<f64>) -> f64 {
        let gap = self.mean_range() - (w - &self.anchor).norm_squared();
        0.25 * (gap * gap + self.noise_std.powi(2))
    }

    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        let r = w - &self.anchor;
        (r.norm_squared() - self.mean_range()) * r
    }

    fn hessian(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let r = w - &self.anchor;
        let m = self.dim();
        2.0 * &r * r.transpose()
            + (r.norm_squared() - self.mean_range()) * DMatrix::identity(m, m)
    }

    fn draw_sample(&self, rng: &mut ChaCha12Rng) -> CostSample {
        let noise: f64 = StandardNormal.sample(rng);
        CostSample::Range {
            d: self.mean_range() + self.noise_std * noise,
        }
    }

    fn sample_gradient(&self, sample: &CostSample, w: &DVector<f64>) -> DVector<f64> {
        match sample {
            CostSample::Range { d } => {
                let r = w - &self.anchor;
                (r.norm_squared() - d) * r
            }
            other => panic!("localization cost got incompatible sample {other:?}"),
        }
    }

    /// The Hessian has eigenvalues `3||r||^2 - E d` and `||r||^2 - E d`
    /// (`r = w - anchor`), so the cost is non-convex: inside the range circle
    /// through the target the second eigenvalue is negative. The bounds
    /// reported here are empirical extremes over a grid covering the
    /// anchor/target bounding box inflated by one unit.
    fn hessian_bounds(&self) -> HessianBounds {
        let mean_range = self.mean_range();
        let grid = 41;
        let axis = |i: usize| {
            let a = self.anchor[i].min(self.target[i]) - 1.0;
            let b = self.anchor[i].max(self.target[i]) + 1.0;
            (0..grid).map(move |g| a + (b - a) * g as f64 / (grid - 1) as f64)
        };
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for x in axis(0) {
            for y in axis(1) {
                let r2 = (x - self.anchor[0]).powi(2) + (y - self.anchor[1]).powi(2);
                lo = lo.min(r2 - mean_range);
                hi = hi.max(3.0 * r2 - mean_range);
            }
        }
        HessianBounds {
            lambda_min: lo,
            lambda_max: hi,
            non_convex: lo < 0.0,
        }
    }

    /// `v(w) = -z (w - anchor)`, so
    /// `E ||v||^2 = noise_std^2 ||w - anchor||^2
    ///           <= 2 noise_std^2 ||w - target||^2 + 2 noise_std^2 ||target - anchor||^2`.
    fn noise_moments(&self) -> NoiseMoments {
        let s2 = self.noise_std.powi(2);
        NoiseMoments {
            alpha: 2.0 * s2,
            sigma_v2: 2.0 * s2 * self.mean_range(),
        }
    }

    fn noise_covariance_at(&self, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        let r = w - &self.anchor;
        Some(self.noise_std.powi(2) * &r * r.transpose())
    }

    fn minimizer_hint(&self) -> Option<DVector<f64>> {
        Some(self.target.clone())
    }
}

/// Homogeneous node cost used by the experiment harness.
#[derive(Clone, Debug)]
pub enum NodeCost {
    Quadratic(QuadraticCost),
    Sparse(SparseRegCost),
    Localization(LocalizationCost),
}

impl NodeCost {
    /// Move the generating target; only range costs track a moving target.
    pub fn set_target(&mut self, target: &DVector<f64>) {
        match self {
            NodeCost::Localization(c) => c.set_target(target),
            _ => panic!("only range costs have a movable target"),
        }
    }
}

macro_rules! delegate {
    ($self:ident, $inner:ident => $body:expr) => {
        match $self {
            NodeCost::Quadratic($inner) => $body,
            NodeCost::Sparse($inner) => $body,
            NodeCost::Localization($inner) => $body,
        }
    };
}

impl CostModel for NodeCost {
    fn dim(&self) -> usize {
        delegate!(self, c => c.dim())
    }
    fn value(&self, w: &DVector<f64>) -> f64 {
        delegate!(self, c => c.value(w))
    }
    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        delegate!(self, c => c.gradient(w))
    }
    fn hessian(&self, w: &DVector<f64>) -> DMatrix<f64> {
        delegate!(self, c => c.hessian(w))
    }
    fn draw_sample(&self, rng: &mut ChaCha12Rng) -> CostSample {
        delegate!(self, c => c.draw_sample(rng))
    }
    fn sample_gradient(&self, sample: &CostSample, w: &DVector<f64>) -> DVector<f64> {
        delegate!(self, c => c.sample_gradient(sample, w))
    }
    fn hessian_bounds(&self) -> HessianBounds {
        delegate!(self, c => c.hessian_bounds())
    }
    fn noise_moments(&self) -> NoiseMoments {
        delegate!(self, c => c.noise_moments())
    }
    fn noise_covariance_at(&self, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        delegate!(self, c => c.noise_covariance_at(w))
    }
    fn minimizer_hint(&self) -> Option<DVector<f64>> {
        delegate!(self, c => c.minimizer_hint())
    }
}

/// Tolerance on the aggregate gradient norm at the reported minimizer.
pub const MINIMIZER_GRAD_TOL: f64 = 1e-10;
const MINIMIZER_MAX_ITERS: usize = 1_000_000;

/// Minimize the aggregate exact cost `sum_l J_l(w)` by gradient descent at
/// the fixed step `1 / sum_l lambda_max_l`, starting from the mean of the
/// models' hints. The step never consults function values: sufficient-
/// decrease tests stop resolving once the per-step decrease `~step ||g||^2`
/// falls below the value's floating-point resolution, long before the
/// gradient itself reaches the tolerance. Converges to the non-trivially-
/// biased optimum of regularized costs; for the plain quadratic it recovers
/// the generator target.
pub fn global_minimizer<C: CostModel>(costs: &[C]) -> Result<DVector<f64>, CostError> {
    if costs.is_empty() {
        return Err(CostError::NoCosts);
    }
    let m = costs[0].dim();
    for c in costs {
        if c.dim() != m {
            return Err(CostError::DimensionMismatch(m, c.dim()));
        }
    }

    let mut w = DVector::zeros(m);
    let mut hints = 0usize;
    for c in costs {
        if let Some(h) = c.minimizer_hint() {
            w += h;
            hints += 1;
        }
    }
    if hints > 0 {
        w /= hints as f64;
    }

    let lipschitz: f64 = costs
        .iter()
        .map(|c| c.hessian_bounds().lambda_max.abs())
        .sum();
    let step = if lipschitz > 0.0 { 1.0 / lipschitz } else { 1.0 };

    let mut g = DVector::zeros(m);
    for iteration in 0..MINIMIZER_MAX_ITERS {
        g.fill(0.0);
        for c in costs {
            g += c.gradient(&w);
        }
        let g_norm = g.norm();
        if g_norm <= MINIMIZER_GRAD_TOL {
            return Ok(w);
        }
        if !g_norm.is_finite() {
            return Err(CostError::MinimizerNotConverged {
                iterations: iteration,
                grad_norm: g_norm,
            });
        }
        w.axpy(-step, &g, 1.0);
    }
    let mut g = DVector::zeros(m);
    for c in costs {
        g += c.gradient(&w);
    }
    let g_norm = g.norm();
    if g_norm <= MINIMIZER_GRAD_TOL {
        Ok(w)
    } else {
        Err(CostError::MinimizerNotConverged {
            iterations: MINIMIZER_MAX_ITERS,
            grad_norm: g_norm,
        })
    }
}
