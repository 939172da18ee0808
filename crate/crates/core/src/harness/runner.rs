//! Trial execution and aggregation.
//!
//! Every trial derives its data streams from `(master seed, trial, node)`, so
//! each strategy inside one trial replays the same data; differences between
//! curves are the strategies themselves. Trials run in parallel but are
//! collected by index and reduced sequentially, so aggregate artifacts do not
//! depend on the worker count.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{Experiment, ExperimentConfig, ModelKind, MuSpec, ReferenceKind};
use super::output::to_db;
use super::HarnessError;
use crate::costs::{global_minimizer, CostModel};
use crate::graph::CombinationMatrices;
use crate::rng::{node_stream, trial_streams, StreamDomain};
use crate::strategies::{
    self, draw_samples, sq_dist, GradientInput, RunPlan, Strategy, StrategyState,
};
use crate::theory;

/// Per-node gradient draws for the Monte Carlo noise-covariance fallback.
const RV_MC_SAMPLES: usize = 50_000;

#[derive(Clone, Debug, Serialize)]
pub struct LearningCurve {
    pub strategy: String,
    /// Network MSD in dB, one entry per iteration, averaged over trials.
    pub msd_db: Vec<f64>,
    /// `per_node_db[i][k]`: node k's MSD in dB at iteration i.
    pub per_node_db: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SteadyStateEstimate {
    pub strategy: String,
    /// Tail-average MSD, linear scale.
    pub msd: f64,
    pub msd_db: f64,
    /// Standard error of the per-trial tail means.
    pub standard_error: f64,
    pub tail_fraction: f64,
    pub trials_used: usize,
    pub diverged: usize,
    /// Tail-average MSD of each node, linear scale.
    pub per_node_msd: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TheoryOverlayRow {
    pub strategy: String,
    /// Predicted steady-state network MSD in dB; absent when no closed form
    /// applies, with the reason in `note`.
    pub network_msd_db: Option<f64>,
    pub per_node_msd_db: Option<Vec<f64>>,
    /// Some local cost is not convex everywhere; the prediction rests on a
    /// local expansion around the reference.
    pub non_convex_caveat: bool,
    pub note: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DivergenceCount {
    pub strategy: String,
    pub count: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Metadata {
    pub version: String,
    pub seed: u64,
    pub trials: usize,
    pub horizon: usize,
    pub divergence: Vec<DivergenceCount>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub curves: Vec<LearningCurve>,
    pub steady: Vec<SteadyStateEstimate>,
    pub theory: Vec<TheoryOverlayRow>,
    pub metadata: Metadata,
}

/// The vector squared errors are measured against.
pub fn reference_vector(exp: &Experiment) -> Result<DVector<f64>, HarnessError> {
    match exp.reference {
        ReferenceKind::ModelWTrue => Ok(exp.w_true.clone()),
        ReferenceKind::GlobalMinimizer => Ok(global_minimizer(&exp.costs)?),
    }
}

fn tail_length(horizon: usize, fraction: f64) -> usize {
    (((horizon as f64) * fraction).floor() as usize).clamp(1, horizon)
}

fn network_mean(errs: &[f64]) -> f64 {
    errs.iter().sum::<f64>() / errs.len() as f64
}

fn standard_error(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let t = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / t;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (t - 1.0);
    (var / t).sqrt()
}

/// One strategy's record of one trial.
struct TrialRecord {
    /// Network MSD per iteration.
    curve: Vec<f64>,
    /// Per-node squared errors per iteration; kept only when requested.
    per_node: Option<Vec<Vec<f64>>>,
    tail_network: f64,
    tail_nodes: Vec<f64>,
}

fn record_from_errors(errs: Vec<Vec<f64>>, keep_per_node: bool, tail_len: usize) -> TrialRecord {
    let horizon = errs.len();
    let n = errs[0].len();
    let curve: Vec<f64> = errs.iter().map(|e| network_mean(e)).collect();
    let tail_start = horizon - tail_len;
    let tail_network = curve[tail_start..].iter().sum::<f64>() / tail_len as f64;
    let mut tail_nodes = vec![0.0; n];
    for e in &errs[tail_start..] {
        for (acc, v) in tail_nodes.iter_mut().zip(e) {
            *acc += v;
        }
    }
    for acc in tail_nodes.iter_mut() {
        *acc /= tail_len as f64;
    }
    TrialRecord {
        curve,
        per_node: keep_per_node.then_some(errs),
        tail_network,
        tail_nodes,
    }
}

fn tail_mean_network(errs: &[Vec<f64>], tail_len: usize) -> f64 {
    let tail = &errs[errs.len() - tail_len..];
    tail.iter().map(|e| network_mean(e)).sum::<f64>() / tail_len as f64
}

/// Reduce per-trial records (indexed `[trial][strategy]`) into curves and
/// steady-state estimates, excluding diverged trials and counting them.
fn aggregate(
    exp: &Experiment,
    records: &[Vec<Option<TrialRecord>>],
) -> Result<
    (
        Vec<LearningCurve>,
        Vec<SteadyStateEstimate>,
        Vec<DivergenceCount>,
    ),
    HarnessError,
> {
    let n = exp.network.n_nodes();
    let mut curves = Vec::with_capacity(exp.strategies.len());
    let mut steady = Vec::with_capacity(exp.strategies.len());
    let mut divergence = Vec::with_capacity(exp.strategies.len());

    for (si, named) in exp.strategies.iter().enumerate() {
        let used: Vec<&TrialRecord> = records.iter().filter_map(|t| t[si].as_ref()).collect();
        if used.is_empty() {
            return Err(HarnessError::AllTrialsDiverged {
                strategy: named.name.clone(),
                trials: exp.trials,
            });
        }
        let diverged = exp.trials - used.len();
        let t = used.len() as f64;

        let mut mean = vec![0.0; exp.horizon];
        for record in &used {
            for (acc, v) in mean.iter_mut().zip(&record.curve) {
                *acc += v;
            }
        }
        let msd_db: Vec<f64> = mean.iter().map(|&s| to_db(s / t)).collect();

        let per_node_db = exp.per_node.then(|| {
            let mut acc = vec![vec![0.0; n]; exp.horizon];
            for record in &used {
                let per_node = record.per_node.as_ref().expect("kept when requested");
                for (row, src) in acc.iter_mut().zip(per_node) {
                    for (a, v) in row.iter_mut().zip(src) {
                        *a += v;
                    }
                }
            }
            acc.into_iter()
                .map(|row| row.into_iter().map(|s| to_db(s / t)).collect())
                .collect()
        });

        let tails: Vec<f64> = used.iter().map(|r| r.tail_network).collect();
        let msd = tails.iter().sum::<f64>() / t;
        let mut per_node_msd = vec![0.0; n];
        for record in &used {
            for (acc, v) in per_node_msd.iter_mut().zip(&record.tail_nodes) {
                *acc += v;
            }
        }
        for acc in per_node_msd.iter_mut() {
            *acc /= t;
        }

        curves.push(LearningCurve {
            strategy: named.name.clone(),
            msd_db,
            per_node_db,
        });
        steady.push(SteadyStateEstimate {
            strategy: named.name.clone(),
            msd,
            msd_db: to_db(msd),
            standard_error: standard_error(&tails),
            tail_fraction: exp.tail_fraction,
            trials_used: used.len(),
            diverged,
            per_node_msd,
        });
        divergence.push(DivergenceCount {
            strategy: named.name.clone(),
            count: diverged,
        });
    }
    Ok((curves, steady, divergence))
}

fn metadata(exp: &Experiment, divergence: Vec<DivergenceCount>, notes: Vec<String>) -> Metadata {
    Metadata {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: exp.seed,
        trials: exp.trials,
        horizon: exp.horizon,
        divergence,
        notes,
    }
}

/// Run every strategy over every trial on paired data streams and aggregate.
pub fn run_experiment(exp: &Experiment) -> Result<ExperimentResult, HarnessError> {
    if exp.trajectory.is_some() {
        return Err(HarnessError::invalid(
            "this configuration defines a target trajectory; run it with the track command",
        ));
    }
    let w_ref = reference_vector(exp)?;
    let n = exp.network.n_nodes();
    let tail_len = tail_length(exp.horizon, exp.tail_fraction);

    let records: Vec<Vec<Option<TrialRecord>>> = (0..exp.trials)
        .into_par_iter()
        .map(|trial| {
            exp.strategies
                .iter()
                .map(|named| {
                    let mut rngs = trial_streams(exp.seed, trial as u64, n);
                    let plan = RunPlan {
                        strategy: named.strategy.clone(),
                        horizon: exp.horizon,
                        exact_gradients: false,
                        init: exp.init.clone(),
                        references: vec![w_ref.clone()],
                        record_node: None,
                    };
                    strategies::run(&plan, &exp.costs, &mut rngs)
                        .ok()
                        .map(|traj| {
                            let errs = traj.sq_err.into_iter().next().expect("one reference");
                            record_from_errors(errs, exp.per_node, tail_len)
                        })
                })
                .collect()
        })
        .collect();

    let (curves, steady, divergence) = aggregate(exp, &records)?;
    let theory_rows = if exp.theory {
        theory_overlay(exp, &w_ref)
    } else {
        Vec::new()
    };
    let notes: Vec<String> = theory_rows
        .iter()
        .filter_map(|row| {
            row.note
                .as_ref()
                .map(|note| format!("theory {}: {note}", row.strategy))
        })
        .collect();
    Ok(ExperimentResult {
        curves,
        steady,
        theory: theory_rows,
        metadata: metadata(exp, divergence, notes),
    })
}

/// Closed-form steady-state predictions for each strategy that has one.
/// Strategies outside the stored-weights update family get a note instead of
/// a number, as does any instance the exact solve rejects.
pub fn theory_overlay(exp: &Experiment, w_opt: &DVector<f64>) -> Vec<TheoryOverlayRow> {
    exp.strategies
        .iter()
        .map(|named| match &named.strategy {
            Strategy::Diffusion(cm) => diffusion_overlay(named.name.clone(), cm, exp, w_opt),
            Strategy::Incremental { .. } => TheoryOverlayRow {
                strategy: named.name.clone(),
                network_msd_db: None,
                per_node_msd_db: None,
                non_convex_caveat: false,
                note: Some("no closed-form steady state for a roving single estimate".into()),
            },
            Strategy::Consensus { .. } => TheoryOverlayRow {
                strategy: named.name.clone(),
                network_msd_db: None,
                per_node_msd_db: None,
                non_convex_caveat: false,
                note: Some(
                    "no closed-form steady state: consensus adapts at the pre-combination iterate"
                        .into(),
                ),
            },
        })
        .collect()
}

fn diffusion_overlay(
    strategy: String,
    cm: &CombinationMatrices,
    exp: &Experiment,
    w_opt: &DVector<f64>,
) -> TheoryOverlayRow {
    let non_convex_caveat = exp.costs.iter().any(|c| c.hessian_bounds().non_convex);
    let hessians: Vec<DMatrix<f64>> = exp.costs.iter().map(|c| c.hessian(w_opt)).collect();
    let d_inf = theory::d_infinity(cm, &hessians);
    let covs: Option<Vec<DMatrix<f64>>> = exp
        .costs
        .iter()
        .map(|c| c.noise_covariance_at(w_opt))
        .collect();
    let (rv, mut note) = match covs {
        Some(covs) => (theory::rv_matrix(cm, &covs), None),
        None => {
            let mut rngs: Vec<ChaCha12Rng> = (0..exp.costs.len())
                .map(|k| node_stream(exp.seed, StreamDomain::Aux, 0, k as u64))
                .collect();
            let estimate =
                theory::rv_from_model(&exp.costs, w_opt, cm, RV_MC_SAMPLES, &mut rngs);
            (
                estimate.mc,
                Some("gradient-noise covariance estimated by Monte Carlo".to_string()),
            )
        }
    };
    match theory::steady_state_mse(cm, &d_inf, &rv) {
        Ok(ss) => TheoryOverlayRow {
            strategy,
            network_msd_db: Some(to_db(ss.network)),
            per_node_msd_db: Some(ss.per_node.iter().map(|&v| to_db(v)).collect()),
            non_convex_caveat,
            note,
        },
        Err(e) => {
            let reason = format!("overlay omitted: {e}");
            note = Some(match note {
                Some(prior) => format!("{prior}; {reason}"),
                None => reason,
            });
            TheoryOverlayRow {
                strategy,
                network_msd_db: None,
                per_node_msd_db: None,
                non_convex_caveat,
                note,
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BiasDecomposition {
    pub strategy: String,
    /// Tail-average MSD against the data generator's parameter.
    pub total_msd: f64,
    pub total_msd_db: f64,
    /// Tail-average MSD against the aggregate-cost minimizer.
    pub msd_vs_minimizer: f64,
    pub msd_vs_minimizer_db: f64,
    /// Squared distance between the two references.
    pub bias_sq: f64,
    /// Mean of the per-trial cross terms `total - vs_minimizer - bias_sq`;
    /// zero in expectation when fluctuations center on the minimizer.
    pub cross_term: f64,
    pub cross_term_se: f64,
    pub trials_used: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BiasReport {
    pub bias_sq: f64,
    pub minimizer: Vec<f64>,
    pub rows: Vec<BiasDecomposition>,
}

/// Decompose each strategy's steady-state MSD against the generating
/// parameter into distance-to-minimizer plus fluctuation around it. Both
/// references are measured inside the same runs, so the decomposition is
/// exact per trial up to the cross term.
pub fn biased_reference_msd(exp: &Experiment) -> Result<BiasReport, HarnessError> {
    if exp.model != ModelKind::Sparse {
        return Err(HarnessError::invalid(
            "the bias decomposition applies to the sparse regression model",
        ));
    }
    let w_true = exp.w_true.clone();
    let w_hat = global_minimizer(&exp.costs)?;
    let bias_sq = sq_dist(&w_true, &w_hat);
    let n = exp.network.n_nodes();
    let tail_len = tail_length(exp.horizon, exp.tail_fraction);

    let tails: Vec<Vec<Option<(f64, f64)>>> = (0..exp.trials)
        .into_par_iter()
        .map(|trial| {
            exp.strategies
                .iter()
                .map(|named| {
                    let mut rngs = trial_streams(exp.seed, trial as u64, n);
                    let plan = RunPlan {
                        strategy: named.strategy.clone(),
                        horizon: exp.horizon,
                        exact_gradients: false,
                        init: exp.init.clone(),
                        references: vec![w_true.clone(), w_hat.clone()],
                        record_node: None,
                    };
                    strategies::run(&plan, &exp.costs, &mut rngs).ok().map(|traj| {
                        (
                            tail_mean_network(&traj.sq_err[0], tail_len),
                            tail_mean_network(&traj.sq_err[1], tail_len),
                        )
                    })
                })
                .collect()
        })
        .collect();

    let mut rows = Vec::with_capacity(exp.strategies.len());
    for (si, named) in exp.strategies.iter().enumerate() {
        let used: Vec<(f64, f64)> = tails.iter().filter_map(|t| t[si]).collect();
        if used.is_empty() {
            return Err(HarnessError::AllTrialsDiverged {
                strategy: named.name.clone(),
                trials: exp.trials,
            });
        }
        let t = used.len() as f64;
        let total_msd = used.iter().map(|u| u.0).sum::<f64>() / t;
        let msd_vs_minimizer = used.iter().map(|u| u.1).sum::<f64>() / t;
        let crosses: Vec<f64> = used.iter().map(|u| u.0 - u.1 - bias_sq).collect();
        rows.push(BiasDecomposition {
            strategy: named.name.clone(),
            total_msd,
            total_msd_db: to_db(total_msd),
            msd_vs_minimizer,
            msd_vs_minimizer_db: to_db(msd_vs_minimizer),
            bias_sq,
            cross_term: crosses.iter().sum::<f64>() / t,
            cross_term_se: standard_error(&crosses),
            trials_used: used.len(),
        });
    }
    Ok(BiasReport {
        bias_sq,
        minimizer: w_hat.iter().copied().collect(),
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Mu,
    Rho,
    Epsilon,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<SweepParam, HarnessError> {
        match name {
            "mu" => Ok(SweepParam::Mu),
            "rho" => Ok(SweepParam::Rho),
            "epsilon" => Ok(SweepParam::Epsilon),
            other => Err(HarnessError::invalid(format!(
                "sweep parameter '{other}' is not one of mu, rho, epsilon"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Mu => "mu",
            SweepParam::Rho => "rho",
            SweepParam::Epsilon => "epsilon",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub strategy: String,
    pub msd_db: f64,
    pub theory_msd_db: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepFailure {
    pub value: f64,
    pub message: String,
    /// The failure is in the swept configuration itself rather than a
    /// runtime event such as divergence of every trial.
    pub config: bool,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
}

/// Re-run the experiment once per value with the same seeds, collecting
/// steady-state rows. A failing value is recorded and the sweep continues.
pub fn sweep(
    config: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
) -> Result<SweepResult, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::invalid("sweep needs at least one value"));
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &value in values {
        let mut swept = config.clone();
        match param {
            SweepParam::Mu => {
                for strategy in swept.strategies.iter_mut() {
                    strategy.mu = MuSpec::Scalar(value);
                }
            }
            SweepParam::Rho => swept.cost.rho = Some(value),
            SweepParam::Epsilon => swept.cost.epsilon = Some(value),
        }
        let outcome = swept.resolve().and_then(|exp| run_experiment(&exp));
        match outcome {
            Ok(result) => {
                for est in &result.steady {
                    let theory_msd_db = result
                        .theory
                        .iter()
                        .find(|row| row.strategy == est.strategy)
                        .and_then(|row| row.network_msd_db);
                    rows.push(SweepRow {
                        param: param.name().to_string(),
                        value,
                        strategy: est.strategy.clone(),
                        msd_db: est.msd_db,
                        theory_msd_db,
                    });
                }
            }
            Err(e) => failures.push(SweepFailure {
                value,
                message: e.to_string(),
                config: e.is_config_error(),
            }),
        }
    }
    Ok(SweepResult { rows, failures })
}

#[derive(Clone, Debug, Serialize)]
pub struct NodePath {
    pub strategy: String,
    /// First node's estimate after each iteration, from the first
    /// non-diverged trial.
    pub path: Vec<[f64; 2]>,
}

#[derive(Clone, Debug)]
pub struct TrackingResult {
    pub curves: Vec<LearningCurve>,
    pub steady: Vec<SteadyStateEstimate>,
    pub node_paths: Vec<NodePath>,
    /// Target position in effect at each iteration.
    pub target_path: Vec<[f64; 2]>,
    pub metadata: Metadata,
}

enum TrackState {
    Net(StrategyState),
    Single(DVector<f64>),
}

fn run_tracking_trial(
    exp: &Experiment,
    named_strategy: &Strategy,
    trial: usize,
) -> Option<(Vec<Vec<f64>>, Vec<[f64; 2]>)> {
    let trajectory = exp.trajectory.as_ref().expect("checked by caller");
    let n = exp.network.n_nodes();
    let mut costs = exp.costs.clone();
    let mut rngs = trial_streams(exp.seed, trial as u64, n);
    let mut state = match named_strategy {
        Strategy::Incremental { .. } => TrackState::Single(exp.init.clone()),
        _ => TrackState::Net(StrategyState::new(n, &exp.init)),
    };
    let mut errs = Vec::with_capacity(exp.horizon);
    let mut path = Vec::with_capacity(exp.horizon);

    for i in 0..exp.horizon {
        let target = trajectory.at(i);
        let tvec = DVector::from_column_slice(&target);
        for cost in costs.iter_mut() {
            cost.set_target(&tvec);
        }
        let samples = draw_samples(&costs, &mut rngs);
        let input = GradientInput::Samples(&samples);
        let stepped = match (&mut state, named_strategy) {
            (TrackState::Net(st), Strategy::Diffusion(cm)) => {
                strategies::diffusion_step(st, cm, &costs, input)
            }
            (TrackState::Net(st), Strategy::Consensus { a, schedule }) => {
                strategies::consensus_step(st, a, schedule, &costs, input)
            }
            (TrackState::Single(w), Strategy::Incremental { mu }) => {
                match strategies::incremental_cycle(w, &costs, *mu, input, i + 1) {
                    Ok(next) => {
                        *w = next;
                        Ok(())
                    }
                    Err(e) => Err(e),
                }
            }
            _ => unreachable!("state built from the same strategy"),
        };
        if stepped.is_err() {
            return None;
        }
        let node_errs: Vec<f64> = match &state {
            TrackState::Net(st) => st.w.iter().map(|wk| sq_dist(&tvec, wk)).collect(),
            TrackState::Single(w) => vec![sq_dist(&tvec, w); n],
        };
        errs.push(node_errs);
        let w0 = match &state {
            TrackState::Net(st) => &st.w[0],
            TrackState::Single(w) => w,
        };
        path.push([w0[0], w0[1]]);
    }
    Some((errs, path))
}

/// Like [`run_experiment`], but the data-generating target moves along the
/// configured trajectory and errors are measured against the current target.
/// Records the first node's estimate path for overlay plots. A static
/// single-waypoint trajectory reproduces [`run_experiment`] exactly.
pub fn tracking_experiment(exp: &Experiment) -> Result<TrackingResult, HarnessError> {
    let trajectory = exp
        .trajectory
        .as_ref()
        .ok_or_else(|| HarnessError::invalid("tracking needs a trajectory section"))?;
    let tail_len = tail_length(exp.horizon, exp.tail_fraction);
    let target_path: Vec<[f64; 2]> = (0..exp.horizon).map(|i| trajectory.at(i)).collect();

    let outputs: Vec<Vec<Option<(TrialRecord, Vec<[f64; 2]>)>>> = (0..exp.trials)
        .into_par_iter()
        .map(|trial| {
            exp.strategies
                .iter()
                .map(|named| {
                    run_tracking_trial(exp, &named.strategy, trial).map(|(errs, path)| {
                        (record_from_errors(errs, exp.per_node, tail_len), path)
                    })
                })
                .collect()
        })
        .collect();

    let mut records = Vec::with_capacity(outputs.len());
    let mut paths = Vec::with_capacity(outputs.len());
    for trial in outputs {
        let mut record_row = Vec::with_capacity(trial.len());
        let mut path_row = Vec::with_capacity(trial.len());
        for slot in trial {
            match slot {
                Some((record, path)) => {
                    record_row.push(Some(record));
                    path_row.push(Some(path));
                }
                None => {
                    record_row.push(None);
                    path_row.push(None);
                }
            }
        }
        records.push(record_row);
        paths.push(path_row);
    }
    let (curves, steady, divergence) = aggregate(exp, &records)?;

    let node_paths: Vec<NodePath> = exp
        .strategies
        .iter()
        .enumerate()
        .map(|(si, named)| NodePath {
            strategy: named.name.clone(),
            path: paths
                .iter()
                .find_map(|trial| trial[si].clone())
                .expect("aggregate verified a surviving trial"),
        })
        .collect();

    let notes = vec!["steady-state theory does not apply to a moving target".to_string()];
    Ok(TrackingResult {
        curves,
        steady,
        node_paths,
        target_path,
        metadata: metadata(exp, divergence, notes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::CostSample;
    use approx::assert_relative_eq;

    fn quad_config(horizon: usize, trials: usize) -> serde_json::Value {
        serde_json::json!({
            "network": { "n_nodes": 3, "edges": [[0, 1], [1, 2]] },
            "cost": { "model": "quadratic", "dim": 2, "noise_std": 0.5 },
            "strategies": [
                { "name": "atc", "mu": 0.05 },
                { "name": "noncoop", "mu": 0.05 }
            ],
            "run": { "horizon": horizon, "trials": trials, "seed": 11 }
        })
    }

    fn resolve(v: &serde_json::Value) -> Experiment {
        ExperimentConfig::from_str(&v.to_string())
            .unwrap()
            .resolve()
            .unwrap()
    }

    /// Transcribes the very first non-cooperative update by re-deriving the
    /// same data streams and checks the reported MSD entry against it.
    #[test]
    fn first_iteration_msd_matches_direct_transcription() {
        let mut v = quad_config(1, 1);
        v["strategies"] = serde_json::json!([{ "name": "noncoop", "mu": 0.05 }]);
        let exp = resolve(&v);
        let result = run_experiment(&exp).unwrap();

        let mut rngs = trial_streams(exp.seed, 0, 3);
        let samples = draw_samples(&exp.costs, &mut rngs);
        let mut total = 0.0;
        for k in 0..3 {
            let zero = DVector::zeros(2);
            let g = match &samples[k] {
                CostSample::Regression { u, d } => 2.0 * u.transpose() * (u * &zero - d),
                other => panic!("unexpected sample {other:?}"),
            };
            let w1 = -0.05 * g;
            total += sq_dist(&exp.w_true, &w1);
        }
        assert_relative_eq!(
            result.curves[0].msd_db[0],
            to_db(total / 3.0),
            max_relative = 1e-12
        );
        assert_eq!(result.steady[0].trials_used, 1);
        assert_eq!(result.steady[0].standard_error, 0.0);
    }

    #[test]
    fn reruns_are_bitwise_identical() {
        let exp = resolve(&quad_config(40, 4));
        let a = run_experiment(&exp).unwrap();
        let b = run_experiment(&exp).unwrap();
        for (ca, cb) in a.curves.iter().zip(&b.curves) {
            assert_eq!(ca.msd_db, cb.msd_db);
        }
        for (sa, sb) in a.steady.iter().zip(&b.steady) {
            assert_eq!(sa.msd, sb.msd);
            assert_eq!(sa.per_node_msd, sb.per_node_msd);
        }
    }

    /// Strategies must see the same data whether they run alone or next to
    /// others; otherwise comparisons measure seeding, not strategies.
    #[test]
    fn joint_and_solo_runs_pair_the_same_data() {
        let joint = run_experiment(&resolve(&quad_config(30, 3))).unwrap();
        for name in ["atc", "noncoop"] {
            let mut v = quad_config(30, 3);
            v["strategies"] = serde_json::json!([{ "name": name, "mu": 0.05 }]);
            let solo = run_experiment(&resolve(&v)).unwrap();
            let joint_curve = joint.curves.iter().find(|c| c.strategy == name).unwrap();
            assert_eq!(joint_curve.msd_db, solo.curves[0].msd_db, "{name}");
        }
    }

    #[test]
    fn full_divergence_is_an_error_not_a_curve() {
        let mut v = quad_config(400, 2);
        // mu this far beyond 2/sigma_max multiplies the error by ~mu each
        // iteration, overflowing to non-finite well inside the horizon.
        v["strategies"] = serde_json::json!([{ "name": "noncoop", "mu": 1e8 }]);
        let exp = resolve(&v);
        match run_experiment(&exp) {
            Err(e @ HarnessError::AllTrialsDiverged { .. }) => {
                assert!(!e.is_config_error());
            }
            other => panic!("expected divergence error, got {other:?}"),
        }
    }

    #[test]
    fn tail_estimate_is_insensitive_to_the_fraction() {
        let mut reference = None;
        for fraction in [0.1, 0.2, 0.3] {
            let v = serde_json::json!({
                "network": { "n_nodes": 3, "edges": [[0, 1], [1, 2]] },
                "cost": { "model": "quadratic", "dim": 2, "noise_std": 0.5 },
                "strategies": [{ "name": "atc", "mu": 0.1 }],
                "run": {
                    "horizon": 4_000, "trials": 150, "seed": 11,
                    "tail_fraction": fraction, "theory": false
                }
            });
            let result = run_experiment(&resolve(&v)).unwrap();
            let db = result.steady[0].msd_db;
            let base = *reference.get_or_insert(db);
            assert!(
                (db - base).abs() <= 0.1,
                "tail fraction {fraction}: {db} vs {base}"
            );
        }
    }

    #[test]
    fn per_node_curves_appear_only_on_request() {
        let mut v = quad_config(10, 2);
        let bare = run_experiment(&resolve(&v)).unwrap();
        assert!(bare.curves[0].per_node_db.is_none());

        v["run"]["per_node"] = serde_json::json!(true);
        let result = run_experiment(&resolve(&v)).unwrap();
        let per_node = result.curves[0].per_node_db.as_ref().unwrap();
        assert_eq!(per_node.len(), 10);
        assert_eq!(per_node[0].len(), 3);
        // Network curve is the dB of the mean, not the mean of dBs; check
        // consistency through the linear domain instead.
        let linear_mean: f64 = per_node[3]
            .iter()
            .map(|&db| 10f64.powf(db / 10.0))
            .sum::<f64>()
            / 3.0;
        assert_relative_eq!(
            result.curves[0].msd_db[3],
            to_db(linear_mean),
            max_relative = 1e-9
        );
    }

    #[test]
    fn reference_choices_differ_only_when_regularized() {
        let mut v = quad_config(5, 1);
        v["cost"] = serde_json::json!({
            "model": "sparse_reg", "dim": 3, "rho": 8.0, "epsilon": 1e-3
        });
        let exp = resolve(&v);
        let w_true = reference_vector(&exp).unwrap();
        assert_eq!(w_true, exp.w_true);

        v["run"]["reference"] = serde_json::json!("global_minimizer");
        let exp_min = resolve(&v);
        let w_hat = reference_vector(&exp_min).unwrap();
        assert!(sq_dist(&w_true, &w_hat) > 1e-6, "regularization must bias");
    }

    /// The cross term vanishes only where steady fluctuations stay well
    /// inside the regularizer's smoothing scale; otherwise the mean estimate
    /// is displaced from the minimizer and the term is systematic. Small
    /// step, modest noise, and a wide smoothing window put the run in the
    /// vanishing regime.
    #[test]
    fn bias_decomposition_closes_within_statistical_error() {
        let mut v = serde_json::json!({
            "network": { "n_nodes": 3, "edges": [[0, 1], [1, 2]] },
            "cost": {
                "model": "sparse_reg", "dim": 3, "noise_std": 0.25,
                "rho": 8.0, "epsilon": 0.1
            },
            "strategies": [{ "name": "atc", "mu": 3e-4 }],
            "run": {
                "horizon": 6_000, "trials": 30, "seed": 11,
                "init": [0.1, 0.0, 0.1], "theory": false
            }
        });
        let report = biased_reference_msd(&resolve(&v)).unwrap();
        assert!(report.bias_sq > 1e-2, "bias_sq {}", report.bias_sq);
        let row = &report.rows[0];
        assert_eq!(row.trials_used, 30);
        // Exact per-trial identity: the residual is purely the cross term.
        assert!(
            row.cross_term.abs() <= 3.0 * row.cross_term_se.max(1e-12),
            "cross {} vs se {}",
            row.cross_term,
            row.cross_term_se
        );
        assert!(row.total_msd > row.msd_vs_minimizer);

        // Without regularization the references coincide and the bias is 0.
        v["cost"] = serde_json::json!({
            "model": "sparse_reg", "dim": 3, "noise_std": 0.25,
            "rho": 0.0, "epsilon": 0.1
        });
        let plain = biased_reference_msd(&resolve(&v)).unwrap();
        assert!(plain.bias_sq < 1e-16);
    }

    #[test]
    fn bias_decomposition_rejects_other_models() {
        let exp = resolve(&quad_config(5, 1));
        assert!(matches!(
            biased_reference_msd(&exp),
            Err(HarnessError::Invalid(_))
        ));
    }

    #[test]
    fn sweep_emits_rows_per_value_and_continues_past_failures() {
        let cfg = ExperimentConfig::from_str(&quad_config(200, 3).to_string()).unwrap();
        // 1e8 overflows every trial; 0.05 is stable.
        let result = sweep(&cfg, SweepParam::Mu, &[1e8, 0.05]).unwrap();
        assert_eq!(result.failures.len(), 1);
        assert_eq!(result.failures[0].value, 1e8);
        assert!(!result.failures[0].config);
        assert_eq!(result.rows.len(), 2, "{:?}", result.rows);
        for row in &result.rows {
            assert_eq!(row.param, "mu");
            assert_eq!(row.value, 0.05);
            assert!(row.msd_db.is_finite());
        }
        let atc = result.rows.iter().find(|r| r.strategy == "atc").unwrap();
        assert!(atc.theory_msd_db.is_some());

        // rho does not exist on the quadratic model: config-class failure,
        // recorded per value, no rows.
        let bad = sweep(&cfg, SweepParam::Rho, &[1.0, 2.0]).unwrap();
        assert!(bad.rows.is_empty());
        assert_eq!(bad.failures.len(), 2);
        assert!(bad.failures.iter().all(|f| f.config));

        assert!(matches!(
            sweep(&cfg, SweepParam::Mu, &[]),
            Err(HarnessError::Invalid(_))
        ));
        assert!(SweepParam::parse("sigma").is_err());
        assert_eq!(SweepParam::parse("epsilon").unwrap(), SweepParam::Epsilon);
    }

    #[test]
    fn overlay_has_predictions_exactly_where_closed_forms_exist() {
        let mut v = quad_config(5, 1);
        v["strategies"] = serde_json::json!([
            { "name": "atc", "mu": 0.05 },
            { "name": "incremental", "mu": 0.05 },
            { "name": "consensus", "mu": 0.05 }
        ]);
        let exp = resolve(&v);
        let rows = theory_overlay(&exp, &exp.w_true);
        assert_eq!(rows.len(), 3);
        assert!(rows[0].network_msd_db.is_some());
        assert!(rows[0].note.is_none());
        assert!(!rows[0].non_convex_caveat);
        for row in &rows[1..] {
            assert!(row.network_msd_db.is_none());
            assert!(row.note.is_some());
        }
    }

    #[test]
    fn overlay_reports_instability_instead_of_a_number() {
        let mut v = quad_config(5, 1);
        // sigma = 2 everywhere; mu = 1.5 puts |1 - mu sigma| = 2 > 1.
        v["strategies"] = serde_json::json!([{ "name": "noncoop", "mu": 1.5 }]);
        let exp = resolve(&v);
        let rows = theory_overlay(&exp, &exp.w_true);
        assert!(rows[0].network_msd_db.is_none());
        let note = rows[0].note.as_ref().unwrap();
        assert!(note.contains("overlay omitted"), "{note}");
    }

    #[test]
    fn noise_free_overlay_sits_on_the_db_floor() {
        let mut v = quad_config(200, 2);
        v["cost"] = serde_json::json!({ "model": "quadratic", "dim": 2, "noise_std": 0.0 });
        v["strategies"] = serde_json::json!([{ "name": "atc", "mu": 0.05 }]);
        let exp = resolve(&v);
        let result = run_experiment(&exp).unwrap();
        let theory_db = result.theory[0].network_msd_db.unwrap();
        assert_eq!(theory_db, super::super::output::DB_FLOOR);
        let sim_db = result.steady[0].msd_db;
        assert!(sim_db < -80.0, "noise-free simulation at {sim_db} dB");
    }

    #[test]
    fn localization_overlay_carries_the_non_convex_caveat() {
        let v = serde_json::json!({
            "network": { "n_nodes": 4, "radius": 0.9, "seed": 3 },
            "cost": { "model": "localization", "target": [0.4, 0.6], "noise_std": 0.05 },
            "strategies": [{ "name": "atc", "mu": 0.01 }],
            "run": { "horizon": 5, "trials": 1 }
        });
        let exp = resolve(&v);
        let rows = theory_overlay(&exp, &exp.w_true);
        assert!(rows[0].non_convex_caveat);
        assert!(rows[0].network_msd_db.is_some());
    }

    fn tracking_config(waypoints: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "network": {
                "n_nodes": 4,
                "edges": [[0, 1], [1, 2], [2, 3], [3, 0]],
                "positions": [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]
            },
            "cost": { "model": "localization", "target": [0.4, 0.6], "noise_std": 0.05 },
            "strategies": [
                { "name": "atc", "mu": 0.05 },
                { "name": "incremental", "mu": 0.05 },
                { "name": "consensus", "mu": 0.05, "mu_schedule": "harmonic" }
            ],
            "run": { "horizon": 60, "trials": 3, "seed": 2 },
            "trajectory": { "waypoints": waypoints }
        })
    }

    /// With a single waypoint the target never moves, so the tracking loop
    /// must reproduce the stationary runner bit for bit.
    #[test]
    fn static_trajectory_reduces_to_run_experiment() {
        let moving = tracking_config(serde_json::json!([
            { "iteration": 0, "target": [0.4, 0.6] }
        ]));
        let tracked = tracking_experiment(&resolve(&moving)).unwrap();

        let mut stationary = moving.clone();
        stationary.as_object_mut().unwrap().remove("trajectory");
        let ran = run_experiment(&resolve(&stationary)).unwrap();

        for (tc, rc) in tracked.curves.iter().zip(&ran.curves) {
            assert_eq!(tc.strategy, rc.strategy);
            assert_eq!(tc.msd_db, rc.msd_db, "{}", tc.strategy);
        }
        for (ts, rs) in tracked.steady.iter().zip(&ran.steady) {
            assert_eq!(ts.msd, rs.msd);
            assert_eq!(ts.per_node_msd, rs.per_node_msd);
        }
        assert_eq!(tracked.node_paths.len(), 3);
        assert_eq!(tracked.node_paths[0].path.len(), 60);
        assert!(tracked.target_path.iter().all(|t| *t == [0.4, 0.6]));
    }

    #[test]
    fn faster_targets_are_harder_to_track() {
        let slow = tracking_config(serde_json::json!([
            { "iteration": 10, "target": [0.4, 0.6] },
            { "iteration": 60, "target": [0.5, 0.7] }
        ]));
        let fast = tracking_config(serde_json::json!([
            { "iteration": 10, "target": [0.4, 0.6] },
            { "iteration": 60, "target": [0.6, 0.8] }
        ]));
        let slow_res = tracking_experiment(&resolve(&slow)).unwrap();
        let fast_res = tracking_experiment(&resolve(&fast)).unwrap();
        // Paired seeds: the only change is the target speed.
        assert!(
            fast_res.steady[0].msd > slow_res.steady[0].msd,
            "fast {} vs slow {}",
            fast_res.steady[0].msd,
            slow_res.steady[0].msd
        );
    }

    #[test]
    fn run_and_track_guard_against_the_wrong_entry_point() {
        let with_traj = resolve(&tracking_config(serde_json::json!([
            { "iteration": 0, "target": [0.4, 0.6] }
        ])));
        assert!(matches!(
            run_experiment(&with_traj),
            Err(HarnessError::Invalid(_))
        ));

        let without = resolve(&quad_config(5, 1));
        assert!(matches!(
            tracking_experiment(&without),
            Err(HarnessError::Invalid(_))
        ));
    }
}
