//! Mean-square performance predictions for the general diffusion step.
//!
//! Everything here analyzes the error recursion around a common minimizer
//! `w_opt`. With per-node error `w_tilde_k = w_opt - w_k`, constant local
//! Hessians `H_l`, and gradient noise of covariance `R_v`, the stacked error
//! obeys
//!
//! ```text
//! w_tilde' = B w_tilde + A2' M v,
//! B = A2' (I - M D) A1',    D = blockdiag_k( sum_l s[l][k] H_l ),
//! A1' = kron(p1', I_M),     A2' = kron(p2', I_M),   M = kron(diag(mu), I_M),
//! ```
//!
//! where `'` denotes transpose. The steady-state error covariance `W` solves
//! the discrete Lyapunov equation `W = B W B' + A2' M R_v M A2`, vectorized
//! as `(I - F)' vec(W) = vec(A2' M R_v M A2)` with `F = kron(B', B')`. The
//! per-node mean-square error is the trace of the corresponding diagonal
//! block of `W`.
//!
//! Coarser per-node bounds avoid the full recursion. With mixed curvature
//! extremes `sigma_k = sum_l s[l][k] lambda_l` and relative-noise bound
//! `E ||v||^2 <= alpha ||w_tilde||^2 + sigma_v^2`, the per-node contraction
//! factor is `gamma_k = max |1 - mu_k sigma_k|` and mean-square stability
//! holds whenever `gamma_k^2 + mu_k^2 alpha ||S||_1^2 < 1`, which bounds the
//! worst node's steady-state error explicitly.
//!
//! Exact evaluation materializes `F`, which has `(N M)^2` rows; it is capped
//! at [`MAX_STATE_DIM`] for the state dimension `N M` to keep the solve and
//! its spectral diagnostics tractable.

use nalgebra::linalg::Schur;
use nalgebra::{Complex, DMatrix, DVector};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use thiserror::Error;

use crate::costs::{CostModel, HessianBounds};
use crate::graph::CombinationMatrices;

/// Largest state dimension `N * M` for which the exact steady-state solve is
/// attempted; `F` then has `(N M)^2 = 10^4` rows and the dense solve is
/// already at the limit of patience.
pub const MAX_STATE_DIM: usize = 100;

/// Tolerance for the internal consistency check `rho(F) = rho(B)^2`.
pub const SPECTRAL_IDENTITY_TOL: f64 = 1e-10;

/// Conditioning threshold for the steady-state solve: reciprocal square root
/// of machine epsilon, beyond which half the mantissa is gone.
pub fn conditioning_limit() -> f64 {
    1.0 / f64::EPSILON.sqrt()
}

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("node {node}: mixed curvature lower bound {sigma_min} is not positive; per-node step bounds need strictly convex local mixtures")]
    NonPositiveCurvature { node: usize, sigma_min: f64 },
    #[error("node {node}: mean-square contraction factor {value} >= 1 at the given step size")]
    StepTooLarge { node: usize, value: f64 },
    #[error("state dimension {state_dim} exceeds the exact-evaluation cap {cap}")]
    TooLarge { state_dim: usize, cap: usize },
    #[error("mean-error dynamics are unstable: spectral radius {rho} >= 1")]
    Unstable { rho: f64 },
    #[error("steady-state solve is ill-conditioned: eigenvalue margin {margin:.3e} to 1 gives estimated condition {cond:.3e}")]
    IllConditioned { margin: f64, cond: f64 },
    #[error("spectral identity violated: rho(F) = {rho_f} but rho(B)^2 = {rho_b_sq}")]
    SpectralIdentity { rho_f: f64, rho_b_sq: f64 },
    #[error("matrix is not block-diagonal: block ({row}, {col}) is nonzero")]
    NotBlockDiagonal { row: usize, col: usize },
    #[error("eigenvalue iteration stalled on a {n}x{n} matrix with a highly repeated spectrum")]
    EigenStalled { n: usize },
}

/// Extremes of the curvature each node sees after gradient mixing.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CurvatureMix {
    pub min: f64,
    pub max: f64,
}

/// Max column sum of `s`: the scaling the gradient-exchange matrix applies
/// to noise second moments. One for any column-stochastic matrix.
pub fn s_norm1(cm: &CombinationMatrices) -> f64 {
    (0..cm.s.ncols())
        .map(|k| cm.s.column(k).iter().map(|x| x.abs()).sum())
        .fold(0.0, f64::max)
}

/// Per-node curvature mixes `sigma_k = sum_l s[l][k] lambda_l`. Fails on the
/// first node whose mixed lower bound is not strictly positive.
pub fn sigma_minmax(
    cm: &CombinationMatrices,
    bounds: &[HessianBounds],
) -> Result<Vec<CurvatureMix>, TheoryError> {
    let n = cm.n_nodes();
    assert_eq!(bounds.len(), n, "one curvature bound per node");
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut mix = CurvatureMix { min: 0.0, max: 0.0 };
        for l in 0..n {
            mix.min += cm.s[(l, k)] * bounds[l].lambda_min;
            mix.max += cm.s[(l, k)] * bounds[l].lambda_max;
        }
        if mix.min <= 0.0 {
            return Err(TheoryError::NonPositiveCurvature {
                node: k,
                sigma_min: mix.min,
            });
        }
        out.push(mix);
    }
    Ok(out)
}

/// Largest step size for which node `k` contracts in the mean square:
///
/// ```text
/// mu_k < min( 2 sigma_max / (sigma_max^2 + alpha ||S||_1^2),
///             2 sigma_min / (sigma_min^2 + alpha ||S||_1^2) ).
/// ```
///
/// Both endpoints matter because the quadratic `gamma^2 + mu^2 alpha ||S||_1^2`
/// can exit the unit interval through either curvature extreme.
pub fn stable_step_bound(mix: CurvatureMix, alpha: f64, s_norm1: f64) -> f64 {
    let cap = |sigma: f64| 2.0 * sigma / (sigma * sigma + alpha * s_norm1 * s_norm1);
    cap(mix.max).min(cap(mix.min))
}

/// Mean-error contraction factor `gamma_k = max |1 - mu_k sigma_k|` over the
/// curvature extremes.
pub fn gamma_factor(mix: CurvatureMix, mu: f64) -> f64 {
    (1.0 - mu * mix.max).abs().max((1.0 - mu * mix.min).abs())
}

/// Closed-form bound on the worst node's steady-state mean-square error.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct WorstNodeBound {
    /// `(max_k mu_k^2) ||S||_1^2 sigma_v^2 / (1 - max_k (gamma_k^2 + mu_k^2 alpha ||S||_1^2))`.
    pub bound: f64,
    /// First-order small-step simplification
    /// `||S||_1^2 sigma_v^2 mu_max^2 / (2 mu_min min_k sigma_min)`.
    pub small_step: f64,
}

/// Evaluate the worst-node bound at the given step sizes; errors if any node
/// fails the mean-square contraction test.
pub fn worst_node_mse_bound(
    sigma: &[CurvatureMix],
    mu: &DVector<f64>,
    alpha: f64,
    s_norm1: f64,
    sigma_v2: f64,
) -> Result<WorstNodeBound, TheoryError> {
    assert_eq!(sigma.len(), mu.len(), "one step size per node");
    let s2 = s_norm1 * s_norm1;
    let mut worst_contraction = 0.0f64;
    let mut worst_node = 0;
    for (k, mix) in sigma.iter().enumerate() {
        let gamma = gamma_factor(*mix, mu[k]);
        let contraction = gamma * gamma + mu[k] * mu[k] * alpha * s2;
        if contraction > worst_contraction {
            worst_contraction = contraction;
            worst_node = k;
        }
    }
    if worst_contraction >= 1.0 {
        return Err(TheoryError::StepTooLarge {
            node: worst_node,
            value: worst_contraction,
        });
    }
    let mu_max = mu.iter().copied().fold(0.0f64, f64::max);
    let mu_min = mu.iter().copied().fold(f64::INFINITY, f64::min);
    let sigma_min = sigma.iter().map(|m| m.min).fold(f64::INFINITY, f64::min);
    Ok(WorstNodeBound {
        bound: mu_max * mu_max * s2 * sigma_v2 / (1.0 - worst_contraction),
        small_step: s2 * sigma_v2 * mu_max * mu_max / (2.0 * mu_min * sigma_min),
    })
}

/// Block-diagonal mixed-curvature matrix: block `k` is `sum_l s[l][k] H_l`.
pub fn d_infinity(cm: &CombinationMatrices, hessians: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = cm.n_nodes();
    assert_eq!(hessians.len(), n, "one Hessian per node");
    let m = hessians[0].nrows();
    let mut d = DMatrix::zeros(n * m, n * m);
    for k in 0..n {
        let mut block = DMatrix::zeros(m, m);
        for l in 0..n {
            let coef = cm.s[(l, k)];
            if coef != 0.0 {
                block += coef * &hessians[l];
            }
        }
        d.view_mut((k * m, k * m), (m, m)).copy_from(&block);
    }
    d
}

/// Mean-error transition matrix `B = A2' (I - M D) A1'`.
pub fn b_matrix(cm: &CombinationMatrices, d_inf: &DMatrix<f64>) -> DMatrix<f64> {
    let n = cm.n_nodes();
    let state = d_inf.nrows();
    assert_eq!(state % n, 0, "state dimension divides into node blocks");
    let m = state / n;
    let eye_m = DMatrix::<f64>::identity(m, m);
    let a1t = cm.p1.transpose().kronecker(&eye_m);
    let a2t = cm.p2.transpose().kronecker(&eye_m);
    let mu_blocks = DMatrix::from_diagonal(&cm.mu).kronecker(&eye_m);
    let eye = DMatrix::<f64>::identity(state, state);
    &a2t * (eye - mu_blocks * d_inf) * &a1t
}

/// Error-covariance transition matrix `F = kron(B', B')`.
pub fn f_matrix(b: &DMatrix<f64>) -> DMatrix<f64> {
    let bt = b.transpose();
    bt.kronecker(&bt)
}

/// Eigenvalues via a Schur decomposition with a hard iteration cap.
///
/// The unbounded QR iteration fails to deflate eigenvalue clusters of high
/// multiplicity, the spectrum every Kronecker-with-identity transition matrix
/// has, and then loops forever. The cap turns that stall into `None` so
/// callers can switch to a structured route instead of hanging.
pub fn bounded_eigenvalues(mat: &DMatrix<f64>) -> Option<Vec<Complex<f64>>> {
    let budget = 50 * mat.nrows() + 2000;
    Schur::try_new(mat.clone(), f64::EPSILON, budget)
        .map(|schur| schur.complex_eigenvalues().iter().copied().collect())
}

/// Largest eigenvalue magnitude, or `None` when the bounded iteration stalls.
pub fn spectral_radius(mat: &DMatrix<f64>) -> Option<f64> {
    bounded_eigenvalues(mat).map(|eigs| eigs.iter().map(|c| c.norm()).fold(0.0, f64::max))
}

/// The factor `X` when `mat = kron(X, I_b)` elementwise within a strict
/// relative tolerance, else `None`.
///
/// Transition matrices have this shape whenever `I - M D` is block-scalar,
/// which holds for every cost whose Hessian at the expansion point is a
/// multiple of the identity; quadratic-data models all qualify. The shape
/// matters because it repeats each eigenvalue of `X` exactly `b` times and
/// the QR iteration stalls on those clusters, while `X` itself carries the
/// same distinct eigenvalues without the repetition.
pub fn kron_identity_factor(mat: &DMatrix<f64>, b: usize) -> Option<DMatrix<f64>> {
    let n = mat.nrows();
    if b < 2 || mat.ncols() != n || n % b != 0 {
        return None;
    }
    let blocks = n / b;
    let scale = mat.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tol = 1e-12 * (1.0 + scale);
    let mut x = DMatrix::<f64>::zeros(blocks, blocks);
    for bl in 0..blocks {
        for bk in 0..blocks {
            let block = mat.view((bl * b, bk * b), (b, b));
            let c = block.diagonal().mean();
            for i in 0..b {
                for j in 0..b {
                    let want = if i == j { c } else { 0.0 };
                    if (block[(i, j)] - want).abs() > tol {
                        return None;
                    }
                }
            }
            x[(bl, bk)] = c;
        }
    }
    Some(x)
}

/// Eigenvalues of a transition matrix with node-block size `m`: the exact
/// Kronecker reduction when the structure is present, the bounded direct
/// iteration otherwise. The flag is true when the values came from the
/// direct route on the full matrix.
fn transition_eigenvalues(
    b: &DMatrix<f64>,
    m: usize,
) -> Result<(Vec<Complex<f64>>, bool), TheoryError> {
    if let Some(x) = kron_identity_factor(b, m) {
        let eigs = bounded_eigenvalues(&x).ok_or(TheoryError::EigenStalled { n: x.nrows() })?;
        return Ok((eigs, false));
    }
    let eigs = bounded_eigenvalues(b).ok_or(TheoryError::EigenStalled { n: b.nrows() })?;
    Ok((eigs, true))
}

/// True when the mean-error recursion forgets its initial condition
/// (`rho(B) < 1` strictly), `None` when the radius could not be computed.
pub fn mean_error_dynamics_check(b: &DMatrix<f64>) -> Option<bool> {
    spectral_radius(b).map(|rho| rho < 1.0)
}

/// Gradient-noise covariance of the stacked, `s`-mixed noise:
/// block `(k, k')` is `sum_l s[l][k] s[l][k'] R_l` because all nodes reuse
/// node `l`'s sample within one iteration.
pub fn rv_matrix(cm: &CombinationMatrices, covs: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = cm.n_nodes();
    assert_eq!(covs.len(), n, "one noise covariance per node");
    let m = covs[0].nrows();
    let mut rv = DMatrix::zeros(n * m, n * m);
    for k in 0..n {
        for kp in 0..n {
            let mut block = DMatrix::zeros(m, m);
            for l in 0..n {
                let coef = cm.s[(l, k)] * cm.s[(l, kp)];
                if coef != 0.0 {
                    block += coef * &covs[l];
                }
            }
            rv.view_mut((k * m, kp * m), (m, m)).copy_from(&block);
        }
    }
    rv
}

/// Stacked-noise covariance estimated from the model itself.
#[derive(Clone, Debug)]
pub struct RvEstimate {
    /// Symmetrized Monte Carlo estimate of `E g g'` for the stacked,
    /// `s`-mixed gradient noise evaluated at the expansion point.
    pub mc: DMatrix<f64>,
    /// Closed-form value via [`rv_matrix`], when every cost supplies its
    /// per-node noise covariance.
    pub analytic: Option<DMatrix<f64>>,
}

/// Estimate the stacked mixed-noise covariance at `w_opt` by drawing
/// `n_samples` synchronous sample sets, one per node per draw, from the
/// given streams. The analytic route rides along for cross-checking.
pub fn rv_from_model<C: CostModel>(
    costs: &[C],
    w_opt: &DVector<f64>,
    cm: &CombinationMatrices,
    n_samples: usize,
    rngs: &mut [ChaCha12Rng],
) -> RvEstimate {
    assert!(n_samples >= 1);
    let n = costs.len();
    assert_eq!(cm.n_nodes(), n, "one cost per node");
    assert_eq!(rngs.len(), n, "one stream per node");
    let m = costs[0].dim();

    let exact: Vec<DVector<f64>> = costs.iter().map(|c| c.gradient(w_opt)).collect();
    let mut acc = DMatrix::<f64>::zeros(n * m, n * m);
    let mut stacked = DVector::<f64>::zeros(n * m);
    for _ in 0..n_samples {
        let noises: Vec<DVector<f64>> = costs
            .iter()
            .zip(rngs.iter_mut())
            .zip(exact.iter())
            .map(|((cost, rng), g)| {
                let sample = cost.draw_sample(rng);
                cost.sample_gradient(&sample, w_opt) - g
            })
            .collect();
        stacked.fill(0.0);
        for k in 0..n {
            let mut block = stacked.rows_mut(k * m, m);
            for (l, noise) in noises.iter().enumerate() {
                let coef = cm.s[(l, k)];
                if coef != 0.0 {
                    block.axpy(coef, noise, 1.0);
                }
            }
        }
        acc.ger(1.0, &stacked, &stacked, 1.0);
    }
    acc /= n_samples as f64;
    let mc = (&acc + acc.transpose()) * 0.5;

    let analytic = costs
        .iter()
        .map(|c| c.noise_covariance_at(w_opt))
        .collect::<Option<Vec<_>>>()
        .map(|covs| rv_matrix(cm, &covs));
    RvEstimate { mc, analytic }
}

/// Max per-block Euclidean norm of a stacked vector.
pub fn block_max_norm_vec(x: &DVector<f64>, m: usize) -> f64 {
    assert!(m > 0 && x.len() % m == 0, "length divides into blocks");
    (0..x.len() / m)
        .map(|k| x.rows(k * m, m).norm())
        .fold(0.0, f64::max)
}

/// Max per-block spectral norm of a block-diagonal matrix; any nonzero
/// off-diagonal block is an error because the norm is only submultiplicative
/// and compatible with [`block_max_norm_vec`] on that structure.
pub fn block_max_norm_mat(a: &DMatrix<f64>, m: usize) -> Result<f64, TheoryError> {
    assert!(m > 0 && a.nrows() == a.ncols() && a.nrows() % m == 0);
    let n = a.nrows() / m;
    for bi in 0..n {
        for bj in 0..n {
            if bi != bj && a.view((bi * m, bj * m), (m, m)).iter().any(|&x| x != 0.0) {
                return Err(TheoryError::NotBlockDiagonal { row: bi, col: bj });
            }
        }
    }
    let mut worst = 0.0f64;
    for k in 0..n {
        let block = a.view((k * m, k * m), (m, m)).clone_owned();
        let top = block
            .singular_values()
            .iter()
            .copied()
            .fold(0.0, f64::max);
        worst = worst.max(top);
    }
    Ok(worst)
}

/// Exact steady-state mean-square errors from the vectorized Lyapunov solve.
#[derive(Clone, Debug, Serialize)]
pub struct SteadyState {
    /// `E ||w_opt - w_k||^2` in steady state, one entry per node.
    pub per_node: Vec<f64>,
    /// Network average, computed from the covariance trace rather than by
    /// averaging `per_node`.
    pub network: f64,
    pub b_rho: f64,
    pub f_rho: f64,
    /// True when `f_rho` was computed from the assembled covariance
    /// transition matrix, so that `rho(F) = rho(B)^2` acted as a live
    /// consistency check. False when the repeated-spectrum stall forced the
    /// exact product-law value `rho(B)^2` instead.
    pub f_rho_measured: bool,
}

/// Solve `(I - F)' vec(W) = vec(A2' M R_v M A2)` and read node mean-square
/// errors off the diagonal blocks of `W`. `rv` is the full stacked-noise
/// covariance, whether from [`rv_matrix`] or a Monte Carlo estimate.
pub fn steady_state_mse(
    cm: &CombinationMatrices,
    d_inf: &DMatrix<f64>,
    rv: &DMatrix<f64>,
) -> Result<SteadyState, TheoryError> {
    let n = cm.n_nodes();
    let state = d_inf.nrows();
    assert_eq!(state % n, 0, "state dimension divides into node blocks");
    assert_eq!(rv.nrows(), state, "noise covariance sized to the state");
    let m = state / n;
    if state > MAX_STATE_DIM {
        return Err(TheoryError::TooLarge {
            state_dim: state,
            cap: MAX_STATE_DIM,
        });
    }

    let b = b_matrix(cm, d_inf);
    let (b_eigs, b_direct) = transition_eigenvalues(&b, m)?;
    let b_rho = b_eigs.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if b_rho >= 1.0 {
        return Err(TheoryError::Unstable { rho: b_rho });
    }

    // eig(F) is exactly the pairwise products of eig(B). F is still measured
    // directly when B had no Kronecker structure, both to keep the product
    // law an observable consistency check and to catch assembly bugs; with
    // the structure present the direct iteration is known to stall, so the
    // product set is used outright.
    let f = f_matrix(&b);
    let product_eigs = || {
        let mut out = Vec::with_capacity(b_eigs.len() * b_eigs.len());
        for &li in &b_eigs {
            for &lj in &b_eigs {
                out.push(li * lj);
            }
        }
        out
    };
    let (f_eigs, f_rho_measured) = if b_direct {
        match bounded_eigenvalues(&f) {
            Some(eigs) => (eigs, true),
            None => (product_eigs(), false),
        }
    } else {
        (product_eigs(), false)
    };
    let f_rho = f_eigs.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let b_rho_sq = b_rho * b_rho;
    if f_rho_measured && (f_rho - b_rho_sq).abs() > SPECTRAL_IDENTITY_TOL * b_rho_sq.max(1.0) {
        return Err(TheoryError::SpectralIdentity {
            rho_f: f_rho,
            rho_b_sq: b_rho_sq,
        });
    }
    if f_rho >= 1.0 {
        return Err(TheoryError::Unstable { rho: f_rho });
    }
    let margin = f_eigs
        .iter()
        .map(|c| (nalgebra::Complex::new(1.0, 0.0) - c).norm())
        .fold(f64::INFINITY, f64::min);
    let cond = (1.0 + f_rho) / margin;
    if cond > conditioning_limit() {
        return Err(TheoryError::IllConditioned { margin, cond });
    }

    let eye_m = DMatrix::<f64>::identity(m, m);
    let a2t = cm.p2.transpose().kronecker(&eye_m);
    let mu_blocks = DMatrix::from_diagonal(&cm.mu).kronecker(&eye_m);
    let y = &a2t * &mu_blocks * rv * &mu_blocks * a2t.transpose();
    let rbar = DVector::from_column_slice(y.as_slice());

    let system = (DMatrix::<f64>::identity(state * state, state * state) - &f).transpose();
    let z = system
        .lu()
        .solve(&rbar)
        .ok_or(TheoryError::IllConditioned { margin, cond })?;

    // z is vec(W) column-major: entry (i, j) of W sits at j * state + i.
    let mut per_node = Vec::with_capacity(n);
    for k in 0..n {
        let mse: f64 = (0..m).map(|j| z[(k * m + j) * state + (k * m + j)]).sum();
        per_node.push(mse);
    }
    let trace: f64 = (0..state).map(|i| z[i * state + i]).sum();
    Ok(SteadyState {
        per_node,
        network: trace / n as f64,
        b_rho,
        f_rho,
        f_rho_measured,
    })
}

/// Everything the analysis can say about one configuration, with failure
/// modes recorded as messages instead of aborting the parts that still work.
#[derive(Clone, Debug, Serialize)]
pub struct TheoryReport {
    pub n_nodes: usize,
    pub dim: usize,
    pub s_norm1: f64,
    /// Relative gradient-noise factor, maxed over nodes.
    pub alpha: f64,
    /// Absolute gradient-noise floor, maxed over nodes.
    pub sigma_v2: f64,
    /// Some local cost is not convex everywhere; curvature-based bounds are
    /// then unavailable even when the exact solve still works.
    pub non_convex: bool,
    pub sigma: Option<Vec<CurvatureMix>>,
    pub sigma_error: Option<String>,
    pub stable_step_bounds: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub worst_node_bound: Option<WorstNodeBound>,
    pub worst_node_error: Option<String>,
    pub mean_dynamics_stable: bool,
    /// Spectral radius of the mean-error transition matrix, absent in the
    /// rare case where neither eigenvalue route converged.
    pub b_rho: Option<f64>,
    pub steady_state: Option<SteadyState>,
    pub steady_state_error: Option<String>,
}

/// Assemble the full report for one network of costs around `w_opt`.
pub fn report<C: CostModel>(
    cm: &CombinationMatrices,
    costs: &[C],
    w_opt: &DVector<f64>,
) -> TheoryReport {
    let n = cm.n_nodes();
    assert_eq!(costs.len(), n, "one cost per node");
    let dim = costs[0].dim();

    let bounds: Vec<HessianBounds> = costs.iter().map(|c| c.hessian_bounds()).collect();
    let non_convex = bounds.iter().any(|b| b.non_convex);
    let alpha = costs
        .iter()
        .map(|c| c.noise_moments().alpha)
        .fold(0.0f64, f64::max);
    let sigma_v2 = costs
        .iter()
        .map(|c| c.noise_moments().sigma_v2)
        .fold(0.0f64, f64::max);
    let s1 = s_norm1(cm);

    let (sigma, sigma_error) = match sigma_minmax(cm, &bounds) {
        Ok(s) => (Some(s), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let stable_step_bounds = sigma
        .as_ref()
        .map(|s| s.iter().map(|m| stable_step_bound(*m, alpha, s1)).collect());
    let gamma = sigma.as_ref().map(|s| {
        s.iter()
            .zip(cm.mu.iter())
            .map(|(m, &mu)| gamma_factor(*m, mu))
            .collect()
    });
    let (worst_node_bound, worst_node_error) = match sigma
        .as_ref()
        .map(|s| worst_node_mse_bound(s, &cm.mu, alpha, s1, sigma_v2))
    {
        Some(Ok(b)) => (Some(b), None),
        Some(Err(e)) => (None, Some(e.to_string())),
        None => (None, None),
    };

    let hessians: Vec<DMatrix<f64>> = costs.iter().map(|c| c.hessian(w_opt)).collect();
    let d_inf = d_infinity(cm, &hessians);
    let b = b_matrix(cm, &d_inf);
    let b_rho = transition_eigenvalues(&b, dim)
        .ok()
        .map(|(eigs, _)| eigs.iter().map(|c| c.norm()).fold(0.0, f64::max));

    let covs: Option<Vec<DMatrix<f64>>> =
        costs.iter().map(|c| c.noise_covariance_at(w_opt)).collect();
    let (steady_state, steady_state_error) = match covs {
        Some(covs) => {
            let rv = rv_matrix(cm, &covs);
            match steady_state_mse(cm, &d_inf, &rv) {
                Ok(s) => (Some(s), None),
                Err(e) => (None, Some(e.to_string())),
            }
        }
        None => (
            None,
            Some("no closed-form gradient-noise covariance for this cost".to_string()),
        ),
    };

    TheoryReport {
        n_nodes: n,
        dim,
        s_norm1: s1,
        alpha,
        sigma_v2,
        non_convex,
        sigma,
        sigma_error,
        stable_step_bounds,
        gamma,
        worst_node_bound,
        worst_node_error,
        mean_dynamics_stable: matches!(b_rho, Some(rho) if rho < 1.0),
        b_rho,
        steady_state,
        steady_state_error,
    }
}
