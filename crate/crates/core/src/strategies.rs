//! Synchronous distributed update rules.
//!
//! All cooperative rules are instances of one general diffusion step over the
//! weight matrices `(p1, p2, s)` of a [`CombinationMatrices`] triple:
//!
//! ```text
//! phi_k = sum_l p1[l][k] w_l                                  (pre-combine)
//! psi_k = phi_k - mu_k * sum_l s[l][k] grad_hat J_l(phi_k)    (adapt)
//! w_k'  = sum_l p2[l][k] psi_l                                (post-combine)
//! ```
//!
//! Adapt-then-combine uses `(I, a, c)`, combine-then-adapt uses `(a, I, c)`,
//! and `(I, I, I)` removes cooperation entirely. The consensus update is not
//! a special case: it combines and adapts in the same step, with the gradient
//! evaluated at the *pre-combination* iterate `w_{k,i-1}`, whereas
//! combine-then-adapt evaluates it at the combined iterate `phi_k`. The
//! incremental rule passes a single estimate around the cycle `1..N` instead,
//! one gradient step per node per cycle.
//!
//! Every stochastic-gradient variant consumes exactly one data sample per
//! node per iteration, drawn by the caller via [`draw_samples`]; neighbors
//! evaluate that shared sample at their own points. Strategies rerun on
//! re-derived streams therefore see identical data.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::costs::{CostModel, CostSample};
use crate::graph::CombinationMatrices;

#[derive(Debug, Error)]
pub enum StepError {
    #[error("estimates diverged: non-finite value produced at iteration {iteration}")]
    Diverged { iteration: usize },
}

/// Where gradients come from during a step.
#[derive(Clone, Copy)]
pub enum GradientInput<'a> {
    /// Exact gradients of the expected costs.
    Exact,
    /// One pre-drawn sample per node; `samples[l]` belongs to node `l`.
    Samples(&'a [CostSample]),
}

impl GradientInput<'_> {
    fn gradient<C: CostModel>(&self, costs: &[C], l: usize, at: &DVector<f64>) -> DVector<f64> {
        match self {
            GradientInput::Exact => costs[l].gradient(at),
            GradientInput::Samples(samples) => costs[l].sample_gradient(&samples[l], at),
        }
    }
}

/// Draw this iteration's sample for every node, each from its own stream.
pub fn draw_samples<C: CostModel>(costs: &[C], rngs: &mut [ChaCha12Rng]) -> Vec<CostSample> {
    assert_eq!(costs.len(), rngs.len());
    costs
        .iter()
        .zip(rngs.iter_mut())
        .map(|(c, r)| c.draw_sample(r))
        .collect()
}

/// Per-node estimates plus scratch buffers for one network.
#[derive(Clone, Debug)]
pub struct StrategyState {
    /// Current estimate of each node.
    pub w: Vec<DVector<f64>>,
    /// Completed iterations (iteration indices are 1-based).
    pub iteration: usize,
    phi: Vec<DVector<f64>>,
    psi: Vec<DVector<f64>>,
}

impl StrategyState {
    /// Every node starts from the same initial estimate.
    pub fn new(n_nodes: usize, init: &DVector<f64>) -> StrategyState {
        StrategyState {
            w: vec![init.clone(); n_nodes],
            iteration: 0,
            phi: vec![DVector::zeros(init.len()); n_nodes],
            psi: vec![DVector::zeros(init.len()); n_nodes],
        }
    }

    fn all_finite(&self) -> bool {
        self.w
            .iter()
            .all(|w| w.iter().all(|x: &f64| x.is_finite()))
    }
}

/// `into[k] = sum_l weights[(l, k)] * from[l]`, skipping structural zeros in
/// ascending `l` order so results are reproducible bit for bit.
fn combine(into: &mut [DVector<f64>], weights: &DMatrix<f64>, from: &[DVector<f64>]) {
    let n = from.len();
    for k in 0..n {
        into[k].fill(0.0);
        for l in 0..n {
            let coef = weights[(l, k)];
            if coef != 0.0 {
                into[k].axpy(coef, &from[l], 1.0);
            }
        }
    }
}

/// One general diffusion step.
pub fn diffusion_step<C: CostModel>(
    state: &mut StrategyState,
    cm: &CombinationMatrices,
    costs: &[C],
    input: GradientInput,
) -> Result<(), StepError> {
    let n = state.w.len();
    assert_eq!(costs.len(), n, "one cost per node");
    assert_eq!(cm.n_nodes(), n, "combination matrices sized to the network");
    if let GradientInput::Samples(samples) = input {
        assert_eq!(samples.len(), n, "one sample per node");
    }

    combine(&mut state.phi, &cm.p1, &state.w);
    for k in 0..n {
        let mut gradient_mix = DVector::zeros(state.phi[k].len());
        for l in 0..n {
            let coef = cm.s[(l, k)];
            if coef != 0.0 {
                let g = input.gradient(costs, l, &state.phi[k]);
                gradient_mix.axpy(coef, &g, 1.0);
            }
        }
        state.psi[k].copy_from(&state.phi[k]);
        state.psi[k].axpy(-cm.mu[k], &gradient_mix, 1.0);
    }
    combine(&mut state.w, &cm.p2, &state.psi);

    state.iteration += 1;
    if state.all_finite() {
        Ok(())
    } else {
        Err(StepError::Diverged {
            iteration: state.iteration,
        })
    }
}

/// Adapt-then-combine step: assembles `(I, a, c)` and delegates to
/// [`diffusion_step`]. Long runs should build the triple once via
/// [`CombinationMatrices::for_strategy`] instead.
pub fn atc_step<C: CostModel>(
    state: &mut StrategyState,
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    mu: &DVector<f64>,
    costs: &[C],
    input: GradientInput,
) -> Result<(), StepError> {
    let cm = CombinationMatrices::for_strategy(
        crate::graph::DiffusionKind::AdaptThenCombine,
        a,
        c,
        mu.clone(),
    )
    .expect("valid combination matrices");
    diffusion_step(state, &cm, costs, input)
}

/// Combine-then-adapt step: assembles `(a, I, c)` and delegates to
/// [`diffusion_step`].
pub fn cta_step<C: CostModel>(
    state: &mut StrategyState,
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    mu: &DVector<f64>,
    costs: &[C],
    input: GradientInput,
) -> Result<(), StepError> {
    let cm = CombinationMatrices::for_strategy(
        crate::graph::DiffusionKind::CombineThenAdapt,
        a,
        c,
        mu.clone(),
    )
    .expect("valid combination matrices");
    diffusion_step(state, &cm, costs, input)
}

/// Per-node step-size sequence.
#[derive(Clone, Debug)]
pub enum StepSizeSchedule {
    Constant(DVector<f64>),
    /// `mu_k(i) = c_k / i` for iteration `i >= 1`; strictly positive for all
    /// `i`, vanishing in the limit.
    Harmonic { c: DVector<f64> },
}

impl StepSizeSchedule {
    pub fn at(&self, iteration: usize) -> DVector<f64> {
        assert!(iteration >= 1, "iterations are 1-based");
        match self {
            StepSizeSchedule::Constant(mu) => mu.clone(),
            StepSizeSchedule::Harmonic { c } => c / iteration as f64,
        }
    }
}

/// Consensus step: neighbors' estimates are averaged while the gradient is
/// evaluated at the node's own previous iterate,
///
/// ```text
/// w_k' = sum_l a[l][k] w_l - mu_k(i) * grad_hat J_k(w_k).
/// ```
///
/// Contrast with combine-then-adapt, which evaluates the gradient at the
/// already-combined iterate; that single difference is what lets diffusion
/// out-track consensus.
pub fn consensus_step<C: CostModel>(
    state: &mut StrategyState,
    a: &DMatrix<f64>,
    schedule: &StepSizeSchedule,
    costs: &[C],
    input: GradientInput,
) -> Result<(), StepError> {
    let n = state.w.len();
    assert_eq!(costs.len(), n, "one cost per node");
    let mu = schedule.at(state.iteration + 1);

    for k in 0..n {
        state.psi[k] = input.gradient(costs, k, &state.w[k]);
    }
    combine(&mut state.phi, a, &state.w);
    for k in 0..n {
        state.w[k].copy_from(&state.phi[k]);
        state.w[k].axpy(-mu[k], &state.psi[k], 1.0);
    }

    state.iteration += 1;
    if state.all_finite() {
        Ok(())
    } else {
        Err(StepError::Diverged {
            iteration: state.iteration,
        })
    }
}

/// One incremental cycle: a single estimate visits nodes `1..N` in fixed
/// order, taking one gradient step at each. Returns the estimate after the
/// full cycle. When compared against diffusion at step-size `mu`, pass
/// `mu / N` here so both process comparable gradient energy per cycle.
pub fn incremental_cycle<C: CostModel>(
    w_prev: &DVector<f64>,
    costs: &[C],
    mu: f64,
    input: GradientInput,
    iteration: usize,
) -> Result<DVector<f64>, StepError> {
    let mut psi = w_prev.clone();
    for (k, _) in costs.iter().enumerate() {
        let g = input.gradient(costs, k, &psi);
        psi.axpy(-mu, &g, 1.0);
    }
    if psi.iter().all(|x| x.is_finite()) {
        Ok(psi)
    } else {
        Err(StepError::Diverged { iteration })
    }
}

/// Everything [`run`] needs to know about one strategy.
#[derive(Clone, Debug)]
pub enum Strategy {
    Diffusion(CombinationMatrices),
    Incremental { mu: f64 },
    Consensus {
        a: DMatrix<f64>,
        schedule: StepSizeSchedule,
    },
}

/// What to execute and what to record.
#[derive(Clone, Debug)]
pub struct RunPlan {
    pub strategy: Strategy,
    pub horizon: usize,
    pub exact_gradients: bool,
    /// Initial estimate shared by all nodes.
    pub init: DVector<f64>,
    /// Squared errors are recorded against each of these vectors.
    pub references: Vec<DVector<f64>>,
    /// Record this node's estimate after every iteration.
    pub record_node: Option<usize>,
}

/// Per-iteration records of one run.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// `sq_err[r][i][k]`: squared error of node `k` against reference `r`
    /// after iteration `i + 1`. The incremental strategy carries one shared
    /// estimate; its error is replicated across nodes.
    pub sq_err: Vec<Vec<Vec<f64>>>,
    /// Estimate path of `record_node`, one entry per iteration.
    pub node_path: Option<Vec<DVector<f64>>>,
    pub final_w: Vec<DVector<f64>>,
}

pub(crate) fn sq_dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Run a strategy for `horizon` iterations. Fully deterministic given the
/// streams: rerunning with re-derived streams reproduces the trajectory bit
/// for bit. A non-finite estimate aborts the run with the iteration index.
pub fn run<C: CostModel>(
    plan: &RunPlan,
    costs: &[C],
    rngs: &mut [ChaCha12Rng],
) -> Result<Trajectory, StepError> {
    let n = costs.len();
    let mut sq_err: Vec<Vec<Vec<f64>>> =
        vec![Vec::with_capacity(plan.horizon); plan.references.len()];
    let mut node_path = plan.record_node.map(|_| Vec::with_capacity(plan.horizon));

    fn record(
        plan: &RunPlan,
        w: &[DVector<f64>],
        sq_err: &mut [Vec<Vec<f64>>],
        node_path: &mut Option<Vec<DVector<f64>>>,
    ) {
        for (r, reference) in plan.references.iter().enumerate() {
            sq_err[r].push(w.iter().map(|wk| sq_dist(reference, wk)).collect());
        }
        if let (Some(path), Some(node)) = (node_path.as_mut(), plan.record_node) {
            path.push(w[node].clone());
        }
    }

    match &plan.strategy {
        Strategy::Diffusion(cm) => {
            let mut state = StrategyState::new(n, &plan.init);
            for _ in 0..plan.horizon {
                let input_samples;
                let input = if plan.exact_gradients {
                    GradientInput::Exact
                } else {
                    input_samples = draw_samples(costs, rngs);
                    GradientInput::Samples(&input_samples)
                };
                diffusion_step(&mut state, cm, costs, input)?;
                record(plan, &state.w, &mut sq_err, &mut node_path);
            }
            Ok(Trajectory {
                sq_err,
                node_path,
                final_w: state.w,
            })
        }
        Strategy::Incremental { mu } => {
            let mut w = plan.init.clone();
            for i in 1..=plan.horizon {
                let input_samples;
                let input = if plan.exact_gradients {
                    GradientInput::Exact
                } else {
                    input_samples = draw_samples(costs, rngs);
                    GradientInput::Samples(&input_samples)
                };
                w = incremental_cycle(&w, costs, *mu, input, i)?;
                for (r, reference) in plan.references.iter().enumerate() {
                    sq_err[r].push(vec![sq_dist(reference, &w); n]);
                }
                if let Some(path) = node_path.as_mut() {
                    path.push(w.clone());
                }
            }
            Ok(Trajectory {
                sq_err,
                node_path,
                final_w: vec![w; n],
            })
        }
        Strategy::Consensus { a, schedule } => {
            let mut state = StrategyState::new(n, &plan.init);
            for _ in 0..plan.horizon {
                let input_samples;
                let input = if plan.exact_gradients {
                    GradientInput::Exact
                } else {
                    input_samples = draw_samples(costs, rngs);
                    GradientInput::Samples(&input_samples)
                };
                consensus_step(&mut state, a, schedule, costs, input)?;
                record(plan, &state.w, &mut sq_err, &mut node_path);
            }
            Ok(Trajectory {
                sq_err,
                node_path,
                final_w: state.w,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::{LinearModelData, QuadraticCost};
    use crate::graph::{
        averaging_weights, geometric_topology, identity_weights, metropolis_weights,
        CombinationMatrices, DiffusionKind, Network,
    };
    use crate::rng::trial_streams;

    fn quad_costs(n: usize, w_true: &DVector<f64>, rows: usize, noise_std: f64) -> Vec<QuadraticCost> {
        (0..n)
            .map(|_| QuadraticCost {
                data: LinearModelData {
                    w_true: w_true.clone(),
                    rows,
                    noise_std,
                },
            })
            .collect()
    }

    fn three_node_path() -> Network {
        Network::from_edges(3, None, &[(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn non_cooperative_exact_step_is_plain_gradient_descent() {
        let w_true = DVector::from_vec(vec![1.0, -2.0]);
        let costs = quad_costs(1, &w_true, 1, 0.0);
        let cm = CombinationMatrices::for_strategy(
            DiffusionKind::NonCooperative,
            &identity_weights(1),
            &identity_weights(1),
            DVector::from_element(1, 0.1),
        )
        .unwrap();
        let mut state = StrategyState::new(1, &DVector::zeros(2));
        diffusion_step(&mut state, &cm, &costs, GradientInput::Exact).unwrap();
        // w' = 0 - 0.1 * 2 * (0 - w_true) = 0.2 w_true, exactly.
        assert_eq!(state.w[0], 0.2 * &w_true);
    }

    /// Direct transcription of the adapt-then-combine update over explicit
    /// neighborhoods, as an independent oracle for the matrix-driven step.
    #[test]
    fn atc_matches_neighborhood_transcription() {
        let net = three_node_path();
        let w_true = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let costs = quad_costs(3, &w_true, 2, 1.0);
        let a = averaging_weights(&net);
        let c = metropolis_weights(&net);
        let mu = DVector::from_element(3, 0.01);
        let cm =
            CombinationMatrices::for_strategy(DiffusionKind::AdaptThenCombine, &a, &c, mu.clone())
                .unwrap();

        let mut state = StrategyState::new(3, &DVector::zeros(3));
        let mut rngs = trial_streams(99, 0, 3);

        let mut w_oracle = vec![DVector::zeros(3); 3];
        let mut rngs_oracle = trial_streams(99, 0, 3);

        for _ in 0..10 {
            let samples = draw_samples(&costs, &mut rngs);
            diffusion_step(&mut state, &cm, &costs, GradientInput::Samples(&samples)).unwrap();

            let samples_o = draw_samples(&costs, &mut rngs_oracle);
            let mut psi = vec![DVector::zeros(3); 3];
            for k in 0..3 {
                let mut g = DVector::zeros(3);
                for l in net.neighbors(k) {
                    g.axpy(c[(l, k)], &costs[l].sample_gradient(&samples_o[l], &w_oracle[k]), 1.0);
                }
                psi[k] = &w_oracle[k] - mu[k] * g;
            }
            let mut next = vec![DVector::zeros(3); 3];
            for k in 0..3 {
                for l in net.neighbors(k) {
                    next[k].axpy(a[(l, k)], &psi[l], 1.0);
                }
            }
            w_oracle = next;

            for k in 0..3 {
                assert_eq!(state.w[k], w_oracle[k], "node {k}");
            }
        }
    }

    #[test]
    fn identity_matrices_collapse_every_variant_to_non_cooperative() {
        let w_true = DVector::from_vec(vec![1.0, 0.0, -1.0, 0.5]);
        let costs = quad_costs(5, &w_true, 2, 0.8);
        let eye = identity_weights(5);
        let mu = DVector::from_element(5, 0.02);
        let init = DVector::from_element(4, 0.3);

        let mut runs = Vec::new();
        for kind in [
            DiffusionKind::AdaptThenCombine,
            DiffusionKind::CombineThenAdapt,
            DiffusionKind::NonCooperative,
        ] {
            let cm = CombinationMatrices::for_strategy(kind, &eye, &eye, mu.clone()).unwrap();
            let mut state = StrategyState::new(5, &init);
            let mut rngs = trial_streams(7, 0, 5);
            for _ in 0..20 {
                let samples = draw_samples(&costs, &mut rngs);
                diffusion_step(&mut state, &cm, &costs, GradientInput::Samples(&samples)).unwrap();
            }
            runs.push(state.w);
        }
        for k in 0..5 {
            assert_eq!(runs[0][k], runs[1][k], "atc vs cta at node {k}");
            assert_eq!(runs[0][k], runs[2][k], "atc vs non-cooperative at node {k}");
        }
    }

    #[test]
    fn wrappers_delegate_bitwise() {
        let net = three_node_path();
        let w_true = DVector::from_vec(vec![0.4, 0.6]);
        let costs = quad_costs(3, &w_true, 1, 0.5);
        let a = averaging_weights(&net);
        let c = metropolis_weights(&net);
        let mu = DVector::from_element(3, 0.05);

        for kind in [DiffusionKind::AdaptThenCombine, DiffusionKind::CombineThenAdapt] {
            let cm = CombinationMatrices::for_strategy(kind, &a, &c, mu.clone()).unwrap();
            let mut direct = StrategyState::new(3, &DVector::zeros(2));
            let mut wrapped = StrategyState::new(3, &DVector::zeros(2));
            let mut rngs_a = trial_streams(5, 1, 3);
            let mut rngs_b = trial_streams(5, 1, 3);
            for _ in 0..5 {
                let sa = draw_samples(&costs, &mut rngs_a);
                diffusion_step(&mut direct, &cm, &costs, GradientInput::Samples(&sa)).unwrap();
                let sb = draw_samples(&costs, &mut rngs_b);
                match kind {
                    DiffusionKind::AdaptThenCombine => {
                        atc_step(&mut wrapped, &a, &c, &mu, &costs, GradientInput::Samples(&sb))
                            .unwrap()
                    }
                    _ => cta_step(&mut wrapped, &a, &c, &mu, &costs, GradientInput::Samples(&sb))
                        .unwrap(),
                }
            }
            for k in 0..3 {
                assert_eq!(direct.w[k], wrapped.w[k]);
            }
        }
    }

    #[test]
    fn consensus_evaluates_gradients_before_combining() {
        let net = three_node_path();
        let a = averaging_weights(&net);
        let w_true = DVector::from_vec(vec![2.0, -1.0]);
        let costs = quad_costs(3, &w_true, 1, 0.0);
        let mu = DVector::from_element(3, 0.1);

        // Distinct starting points per node so combining changes the
        // gradient evaluation point.
        let starts = [
            DVector::from_vec(vec![1.0, 1.0]),
            DVector::from_vec(vec![-1.0, 0.0]),
            DVector::from_vec(vec![0.0, 2.0]),
        ];
        let mut consensus = StrategyState::new(3, &DVector::zeros(2));
        let mut cta = StrategyState::new(3, &DVector::zeros(2));
        consensus.w = starts.to_vec();
        cta.w = starts.to_vec();

        consensus_step(
            &mut consensus,
            &a,
            &StepSizeSchedule::Constant(mu.clone()),
            &costs,
            GradientInput::Exact,
        )
        .unwrap();
        cta_step(
            &mut cta,
            &a,
            &identity_weights(3),
            &mu,
            &costs,
            GradientInput::Exact,
        )
        .unwrap();

        // Same combination matrix, same step-size: the only difference is the
        // gradient evaluation point, which must show up in the result.
        assert!((0..3).any(|k| consensus.w[k] != cta.w[k]));

        // With a = I there is nothing to combine and the two coincide.
        let mut consensus_solo = StrategyState::new(3, &DVector::zeros(2));
        let mut cta_solo = StrategyState::new(3, &DVector::zeros(2));
        consensus_solo.w = starts.to_vec();
        cta_solo.w = starts.to_vec();
        consensus_step(
            &mut consensus_solo,
            &identity_weights(3),
            &StepSizeSchedule::Constant(mu.clone()),
            &costs,
            GradientInput::Exact,
        )
        .unwrap();
        cta_step(
            &mut cta_solo,
            &identity_weights(3),
            &identity_weights(3),
            &mu,
            &costs,
            GradientInput::Exact,
        )
        .unwrap();
        for k in 0..3 {
            assert_eq!(consensus_solo.w[k], cta_solo.w[k]);
        }
    }

    #[test]
    fn incremental_cycle_visits_nodes_in_order() {
        let w_true = DVector::from_vec(vec![1.0]);
        let costs = quad_costs(2, &w_true, 1, 0.0);
        let w0 = DVector::from_vec(vec![0.0]);
        let mu = 0.1;
        // Hand-rolled: psi_1 = 0 - mu * 2 * (0 - 1) = 0.2;
        // psi_2 = 0.2 - mu * 2 * (0.2 - 1) = 0.36.
        let w1 = incremental_cycle(&w0, &costs, mu, GradientInput::Exact, 1).unwrap();
        assert!((w1[0] - 0.36).abs() < 1e-15);
    }

    #[test]
    fn harmonic_schedule_decays_as_one_over_iteration() {
        let schedule = StepSizeSchedule::Harmonic {
            c: DVector::from_element(2, 0.5),
        };
        assert_eq!(schedule.at(1)[0], 0.5);
        assert_eq!(schedule.at(100)[1], 0.005);
        for i in [1usize, 10, 1000, 1_000_000] {
            assert!(schedule.at(i).iter().all(|&m| m > 0.0));
        }
    }

    #[test]
    fn noise_free_convergence_is_monotone_below_the_step_bound() {
        let net = geometric_topology(10, 0.5, 21).unwrap();
        let w_true = DVector::from_vec(vec![1.0, -0.5, 0.25, 0.0, 2.0]);
        // Heterogeneous curvature across nodes.
        let costs: Vec<QuadraticCost> = (0..10)
            .map(|k| QuadraticCost {
                data: LinearModelData {
                    w_true: w_true.clone(),
                    rows: 1 + (k % 4),
                    noise_std: 0.0,
                },
            })
            .collect();
        let a = averaging_weights(&net);
        let c = metropolis_weights(&net);
        // sigma_k_max = sum_l c[l][k] * 2 rows_l; stay well inside 2 / sigma.
        let mu = DVector::from_fn(10, |k, _| {
            let sigma_max: f64 = (0..10)
                .map(|l| c[(l, k)] * 2.0 * costs[l].data.rows as f64)
                .sum();
            1.7 / sigma_max
        });
        let cm =
            CombinationMatrices::for_strategy(DiffusionKind::AdaptThenCombine, &a, &c, mu).unwrap();

        let mut state = StrategyState::new(10, &DVector::zeros(5));
        let mut last = f64::INFINITY;
        let mut converged_at = None;
        for i in 1..=10_000 {
            diffusion_step(&mut state, &cm, &costs, GradientInput::Exact).unwrap();
            let worst = state
                .w
                .iter()
                .map(|w| (w - &w_true).norm())
                .fold(0.0f64, f64::max);
            assert!(worst <= last + 1e-15, "error grew at iteration {i}");
            last = worst;
            if worst <= 1e-8 {
                converged_at = Some(i);
                break;
            }
        }
        assert!(converged_at.is_some(), "did not reach 1e-8 in 10_000 iterations");
    }

    #[test]
    fn oversized_step_is_reported_as_divergence() {
        let w_true = DVector::from_vec(vec![1.0]);
        let costs = quad_costs(1, &w_true, 1, 0.0);
        // sigma_max = 2; mu = 4 / sigma_max doubles the error every step.
        let cm = CombinationMatrices::for_strategy(
            DiffusionKind::NonCooperative,
            &identity_weights(1),
            &identity_weights(1),
            DVector::from_element(1, 2.0),
        )
        .unwrap();
        let plan = RunPlan {
            strategy: Strategy::Diffusion(cm),
            horizon: 2000,
            exact_gradients: true,
            init: DVector::zeros(1),
            references: vec![w_true],
            record_node: None,
        };
        let mut rngs = trial_streams(0, 0, 1);
        match run(&plan, &costs, &mut rngs) {
            Err(StepError::Diverged { iteration }) => assert!(iteration > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn runs_are_reproducible_and_horizon_zero_is_a_no_op() {
        let net = three_node_path();
        let w_true = DVector::from_vec(vec![0.3, 0.9]);
        let costs = quad_costs(3, &w_true, 1, 1.0);
        let cm = CombinationMatrices::for_strategy(
            DiffusionKind::AdaptThenCombine,
            &averaging_weights(&net),
            &metropolis_weights(&net),
            DVector::from_element(3, 0.02),
        )
        .unwrap();
        let plan = RunPlan {
            strategy: Strategy::Diffusion(cm),
            horizon: 50,
            exact_gradients: false,
            init: DVector::zeros(2),
            references: vec![w_true.clone()],
            record_node: Some(1),
        };
        let mut rngs_a = trial_streams(42, 3, 3);
        let mut rngs_b = trial_streams(42, 3, 3);
        let ta = run(&plan, &costs, &mut rngs_a).unwrap();
        let tb = run(&plan, &costs, &mut rngs_b).unwrap();
        assert_eq!(ta.sq_err, tb.sq_err);
        assert_eq!(ta.node_path.as_ref().unwrap(), tb.node_path.as_ref().unwrap());
        assert_eq!(ta.sq_err[0].len(), 50);
        assert_eq!(ta.node_path.unwrap().len(), 50);

        let empty_plan = RunPlan {
            horizon: 0,
            ..plan
        };
        let mut rngs = trial_streams(42, 3, 3);
        let t = run(&empty_plan, &costs, &mut rngs).unwrap();
        assert!(t.sq_err[0].is_empty());
        assert_eq!(t.final_w[0], DVector::zeros(2));
    }
}
