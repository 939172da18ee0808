//! Strict experiment configuration: a single JSON document with sections
//! `network`, `cost`, `strategies`, `run`, `output`, and an optional
//! `trajectory`. Unknown keys anywhere are errors, as are contradictory or
//! incomplete sections; resolution turns the document into ready-to-run
//! values and fails before any trial starts.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use super::HarnessError;
use crate::costs::{LinearModelData, LocalizationCost, NodeCost, QuadraticCost, SparseRegCost};
use crate::graph::{
    averaging_weights, geometric_topology, identity_weights, metropolis_weights,
    CombinationMatrices, DiffusionKind, Network,
};
use crate::strategies::{StepSizeSchedule, Strategy};

/// Default iteration horizons, long enough for curves to flatten.
const DEFAULT_HORIZON: usize = 5_000;
const DEFAULT_HORIZON_LOCALIZATION: usize = 3_000;
const DEFAULT_TRIALS: usize = 100;
const DEFAULT_TAIL_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub cost: CostConfig,
    pub strategies: Vec<StrategyConfig>,
    pub run: RunConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub trajectory: Option<TrajectoryConfig>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub n_nodes: usize,
    /// Generated topology: connection radius on the unit square.
    #[serde(default)]
    pub radius: Option<f64>,
    /// Seed for the generated topology (default 0).
    #[serde(default)]
    pub seed: Option<u64>,
    /// Explicit topology: undirected edges, 0-based, no self-edges.
    #[serde(default)]
    pub edges: Option<Vec<(usize, usize)>>,
    /// Node coordinates; only for explicit topologies (generated ones draw
    /// their own).
    #[serde(default)]
    pub positions: Option<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    /// One of `quadratic`, `sparse_reg`, `localization`.
    pub model: String,
    /// Regressor rows per sample (default 1); regression models only.
    #[serde(default)]
    pub rows: Option<usize>,
    /// Observation noise standard deviation (default 1).
    #[serde(default)]
    pub noise_std: Option<f64>,
    /// Generating parameter; alternative to `dim`.
    #[serde(default)]
    pub w_true: Option<Vec<f64>>,
    /// Parameter dimension; `w_true` then defaults to the two-spike vector
    /// [1, 0, ..., 0, 1].
    #[serde(default)]
    pub dim: Option<usize>,
    /// Regularization factor (sparse model only, default 0).
    #[serde(default)]
    pub rho: Option<f64>,
    /// Regularizer smoothing (sparse model only, default 1e-3).
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Source position (localization model only).
    #[serde(default)]
    pub target: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    /// One of `atc`, `cta`, `noncoop`, `incremental`, `consensus`.
    pub name: String,
    /// Estimate combination weights: `averaging`, `metropolis`, `identity`.
    #[serde(default)]
    pub a_weights: Option<String>,
    /// Gradient exchange weights: `metropolis`, `identity`.
    #[serde(default)]
    pub c_weights: Option<String>,
    /// Scalar step size (broadcast) or one value per node. For the
    /// incremental strategy this is the comparison step size; the per-visit
    /// step becomes mu / N automatically.
    pub mu: MuSpec,
    /// `constant` (default) or `harmonic` (mu/i); consensus only.
    #[serde(default)]
    pub mu_schedule: Option<String>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum MuSpec {
    Scalar(f64),
    PerNode(Vec<f64>),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub trials: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// `model_w_true` (default) or `global_minimizer`.
    #[serde(default)]
    pub reference: Option<String>,
    /// Common initial estimate (default zero vector).
    #[serde(default)]
    pub init: Option<Vec<f64>>,
    #[serde(default)]
    pub tail_fraction: Option<f64>,
    /// Also record per-node learning curves.
    #[serde(default)]
    pub per_node: Option<bool>,
    /// Attempt closed-form steady-state predictions (default true).
    #[serde(default)]
    pub theory: Option<bool>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<String>,
    #[serde(default)]
    pub prefix: Option<String>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub waypoints: Vec<WaypointConfig>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointConfig {
    pub iteration: usize,
    pub target: [f64; 2],
}

/// The two-spike generating parameter [1, 0, ..., 0, 1].
pub fn spike(dim: usize) -> DVector<f64> {
    assert!(dim >= 1);
    let mut w = DVector::zeros(dim);
    w[0] = 1.0;
    w[dim - 1] = 1.0;
    w
}

/// Which vector squared errors are measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferenceKind {
    ModelWTrue,
    GlobalMinimizer,
}

/// Which cost family the experiment instantiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Quadratic,
    Sparse,
    Localization,
}

/// A resolved strategy with its display name.
#[derive(Clone, Debug)]
pub struct NamedStrategy {
    pub name: String,
    pub strategy: Strategy,
}

/// Piecewise-linear target path over iterations; holds the first target
/// before the first waypoint and the last one after the last.
#[derive(Clone, Debug)]
pub struct TargetTrajectory {
    waypoints: Vec<(usize, [f64; 2])>,
}

impl TargetTrajectory {
    pub fn new(waypoints: Vec<(usize, [f64; 2])>) -> Result<TargetTrajectory, HarnessError> {
        if waypoints.is_empty() {
            return Err(HarnessError::invalid("trajectory needs at least one waypoint"));
        }
        if waypoints.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(HarnessError::invalid(
                "trajectory waypoint iterations must be strictly increasing",
            ));
        }
        Ok(TargetTrajectory { waypoints })
    }

    pub fn at(&self, iteration: usize) -> [f64; 2] {
        let first = self.waypoints.first().unwrap();
        if iteration <= first.0 {
            return first.1;
        }
        for pair in self.waypoints.windows(2) {
            let (i0, t0) = pair[0];
            let (i1, t1) = pair[1];
            if iteration <= i1 {
                let s = (iteration - i0) as f64 / (i1 - i0) as f64;
                return [t0[0] + s * (t1[0] - t0[0]), t0[1] + s * (t1[1] - t0[1])];
            }
        }
        self.waypoints.last().unwrap().1
    }
}

/// A fully resolved experiment, ready for the runner.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub network: Network,
    pub costs: Vec<NodeCost>,
    pub strategies: Vec<NamedStrategy>,
    pub horizon: usize,
    pub trials: usize,
    pub seed: u64,
    pub reference: ReferenceKind,
    pub init: DVector<f64>,
    pub tail_fraction: f64,
    pub per_node: bool,
    pub theory: bool,
    pub w_true: DVector<f64>,
    pub model: ModelKind,
    pub trajectory: Option<TargetTrajectory>,
    pub out_dir: PathBuf,
    pub prefix: String,
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<ExperimentConfig, HarnessError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: &std::path::Path) -> Result<ExperimentConfig, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::ReadConfig {
            path: path.display().to_string(),
            source,
        })?;
        ExperimentConfig::from_str(&text)
    }

    pub fn resolve(&self) -> Result<Experiment, HarnessError> {
        let network = self.resolve_network()?;
        let n = network.n_nodes();
        let (costs, w_true, model) = self.resolve_costs(&network)?;
        let dim = w_true.len();
        let strategies = self.resolve_strategies(&network)?;

        let run = &self.run;
        let horizon = run.horizon.unwrap_or(match model {
            ModelKind::Localization => DEFAULT_HORIZON_LOCALIZATION,
            _ => DEFAULT_HORIZON,
        });
        if horizon < 1 {
            return Err(HarnessError::invalid("run.horizon must be at least 1"));
        }
        let trials = run.trials.unwrap_or(DEFAULT_TRIALS);
        if trials < 1 {
            return Err(HarnessError::invalid("run.trials must be at least 1"));
        }
        let tail_fraction = run.tail_fraction.unwrap_or(DEFAULT_TAIL_FRACTION);
        if !(tail_fraction > 0.0 && tail_fraction < 1.0) {
            return Err(HarnessError::invalid("run.tail_fraction must lie in (0, 1)"));
        }
        let reference = match run.reference.as_deref() {
            None | Some("model_w_true") => ReferenceKind::ModelWTrue,
            Some("global_minimizer") => ReferenceKind::GlobalMinimizer,
            Some(other) => {
                return Err(HarnessError::invalid(format!(
                    "run.reference '{other}' is not one of model_w_true, global_minimizer"
                )))
            }
        };
        let init = match &run.init {
            None => DVector::zeros(dim),
            Some(v) if v.len() == dim => DVector::from_column_slice(v),
            Some(v) => {
                return Err(HarnessError::invalid(format!(
                    "run.init has {} entries but the parameter dimension is {dim}",
                    v.len()
                )))
            }
        };

        let trajectory = match &self.trajectory {
            None => None,
            Some(t) => {
                if model != ModelKind::Localization {
                    return Err(HarnessError::invalid(
                        "trajectory requires the localization cost model",
                    ));
                }
                Some(TargetTrajectory::new(
                    t.waypoints.iter().map(|w| (w.iteration, w.target)).collect(),
                )?)
            }
        };

        let _ = n;
        Ok(Experiment {
            network,
            costs,
            strategies,
            horizon,
            trials,
            seed: run.seed.unwrap_or(0),
            reference,
            init,
            tail_fraction,
            per_node: run.per_node.unwrap_or(false),
            theory: run.theory.unwrap_or(true),
            w_true,
            model,
            trajectory,
            out_dir: PathBuf::from(self.output.dir.as_deref().unwrap_or("out")),
            prefix: self.output.prefix.clone().unwrap_or_else(|| "experiment".into()),
        })
    }

    fn resolve_network(&self) -> Result<Network, HarnessError> {
        let nc = &self.network;
        match (&nc.radius, &nc.edges) {
            (Some(radius), None) => {
                if nc.positions.is_some() {
                    return Err(HarnessError::invalid(
                        "network.positions only applies to explicit edge lists; generated topologies draw their own",
                    ));
                }
                Ok(geometric_topology(nc.n_nodes, *radius, nc.seed.unwrap_or(0))?)
            }
            (None, Some(edges)) => {
                if nc.seed.is_some() {
                    return Err(HarnessError::invalid(
                        "network.seed only applies to generated topologies",
                    ));
                }
                Ok(Network::from_edges(nc.n_nodes, nc.positions.clone(), edges)?)
            }
            _ => Err(HarnessError::invalid(
                "network needs exactly one of radius (generated) or edges (explicit)",
            )),
        }
    }

    fn resolve_costs(
        &self,
        network: &Network,
    ) -> Result<(Vec<NodeCost>, DVector<f64>, ModelKind), HarnessError> {
        let cc = &self.cost;
        let n = network.n_nodes();
        let noise_std = cc.noise_std.unwrap_or(1.0);
        if noise_std < 0.0 {
            return Err(HarnessError::invalid("cost.noise_std must be nonnegative"));
        }
        let forbid = |field: Option<()>, name: &str, model: &str| {
            if field.is_some() {
                Err(HarnessError::invalid(format!(
                    "cost.{name} does not apply to the {model} model"
                )))
            } else {
                Ok(())
            }
        };

        match cc.model.as_str() {
            model @ ("quadratic" | "sparse_reg") => {
                forbid(cc.target.map(|_| ()), "target", model)?;
                if model == "quadratic" {
                    forbid(cc.rho.map(|_| ()), "rho", model)?;
                    forbid(cc.epsilon.map(|_| ()), "epsilon", model)?;
                }
                let rows = cc.rows.unwrap_or(1);
                if rows < 1 {
                    return Err(HarnessError::invalid("cost.rows must be at least 1"));
                }
                let w_true = match (&cc.w_true, cc.dim) {
                    (Some(w), None) if !w.is_empty() => DVector::from_column_slice(w),
                    (None, Some(dim)) if dim >= 1 => spike(dim),
                    _ => {
                        return Err(HarnessError::invalid(
                            "cost needs exactly one of w_true (nonempty) or dim (>= 1)",
                        ))
                    }
                };
                let data = LinearModelData {
                    w_true: w_true.clone(),
                    rows,
                    noise_std,
                };
                let costs: Vec<NodeCost> = if model == "quadratic" {
                    (0..n)
                        .map(|_| NodeCost::Quadratic(QuadraticCost { data: data.clone() }))
                        .collect()
                } else {
                    let rho = cc.rho.unwrap_or(0.0);
                    if rho < 0.0 {
                        return Err(HarnessError::invalid("cost.rho must be nonnegative"));
                    }
                    let epsilon = cc.epsilon.unwrap_or(1e-3);
                    if epsilon <= 0.0 {
                        return Err(HarnessError::invalid("cost.epsilon must be positive"));
                    }
                    (0..n)
                        .map(|_| {
                            NodeCost::Sparse(SparseRegCost {
                                data: data.clone(),
                                rho,
                                epsilon,
                                n_nodes_total: n,
                            })
                        })
                        .collect()
                };
                let kind = if model == "quadratic" {
                    ModelKind::Quadratic
                } else {
                    ModelKind::Sparse
                };
                Ok((costs, w_true, kind))
            }
            "localization" => {
                forbid(cc.rows.map(|_| ()), "rows", "localization")?;
                forbid(cc.w_true.as_ref().map(|_| ()), "w_true", "localization")?;
                forbid(cc.dim.map(|_| ()), "dim", "localization")?;
                forbid(cc.rho.map(|_| ()), "rho", "localization")?;
                forbid(cc.epsilon.map(|_| ()), "epsilon", "localization")?;
                let target = cc.target.ok_or_else(|| {
                    HarnessError::invalid("cost.target is required for the localization model")
                })?;
                let anchors = network.positions().ok_or_else(|| {
                    HarnessError::invalid(
                        "localization needs node positions (generated topology or explicit network.positions)",
                    )
                })?;
                let costs = anchors
                    .iter()
                    .map(|&anchor| {
                        NodeCost::Localization(LocalizationCost::new(anchor, noise_std, target))
                    })
                    .collect();
                Ok((
                    costs,
                    DVector::from_column_slice(&target),
                    ModelKind::Localization,
                ))
            }
            other => Err(HarnessError::invalid(format!(
                "cost.model '{other}' is not one of quadratic, sparse_reg, localization"
            ))),
        }
    }

    fn resolve_strategies(&self, network: &Network) -> Result<Vec<NamedStrategy>, HarnessError> {
        if self.strategies.is_empty() {
            return Err(HarnessError::invalid("at least one strategy is required"));
        }
        let n = network.n_nodes();
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::with_capacity(self.strategies.len());
        for sc in &self.strategies {
            if !seen.insert(sc.name.clone()) {
                return Err(HarnessError::invalid(format!(
                    "duplicate strategy name '{}'",
                    sc.name
                )));
            }
            out.push(NamedStrategy {
                name: sc.name.clone(),
                strategy: resolve_strategy(sc, network, n)?,
            });
        }
        Ok(out)
    }
}

fn mu_vector(spec: &MuSpec, n: usize, name: &str) -> Result<DVector<f64>, HarnessError> {
    let mu = match spec {
        MuSpec::Scalar(v) => DVector::from_element(n, *v),
        MuSpec::PerNode(v) => {
            if v.len() != n {
                return Err(HarnessError::invalid(format!(
                    "strategy {name}: mu has {} entries for {n} nodes",
                    v.len()
                )));
            }
            DVector::from_column_slice(v)
        }
    };
    if mu.iter().any(|&m| !(m > 0.0)) {
        return Err(HarnessError::invalid(format!(
            "strategy {name}: step sizes must be strictly positive"
        )));
    }
    Ok(mu)
}

fn a_matrix(name: Option<&str>, network: &Network, strategy: &str) -> Result<DMatrix<f64>, HarnessError> {
    match name.unwrap_or("averaging") {
        "averaging" => Ok(averaging_weights(network)),
        "metropolis" => Ok(metropolis_weights(network)),
        "identity" => Ok(identity_weights(network.n_nodes())),
        other => Err(HarnessError::invalid(format!(
            "strategy {strategy}: a_weights '{other}' is not one of averaging, metropolis, identity"
        ))),
    }
}

fn c_matrix(name: Option<&str>, network: &Network, strategy: &str) -> Result<DMatrix<f64>, HarnessError> {
    match name.unwrap_or("metropolis") {
        "metropolis" => Ok(metropolis_weights(network)),
        "identity" => Ok(identity_weights(network.n_nodes())),
        other => Err(HarnessError::invalid(format!(
            "strategy {strategy}: c_weights '{other}' is not one of metropolis, identity"
        ))),
    }
}

fn forbid_field(value: bool, strategy: &str, field: &str) -> Result<(), HarnessError> {
    if value {
        Err(HarnessError::invalid(format!(
            "strategy {strategy}: {field} does not apply"
        )))
    } else {
        Ok(())
    }
}

fn resolve_strategy(
    sc: &StrategyConfig,
    network: &Network,
    n: usize,
) -> Result<Strategy, HarnessError> {
    match sc.name.as_str() {
        name @ ("atc" | "cta") => {
            forbid_field(sc.mu_schedule.is_some(), name, "mu_schedule")?;
            let a = a_matrix(sc.a_weights.as_deref(), network, name)?;
            let c = c_matrix(sc.c_weights.as_deref(), network, name)?;
            let mu = mu_vector(&sc.mu, n, name)?;
            let kind = if name == "atc" {
                DiffusionKind::AdaptThenCombine
            } else {
                DiffusionKind::CombineThenAdapt
            };
            Ok(Strategy::Diffusion(CombinationMatrices::for_strategy(
                kind, &a, &c, mu,
            )?))
        }
        "noncoop" => {
            forbid_field(sc.a_weights.is_some(), "noncoop", "a_weights")?;
            forbid_field(sc.c_weights.is_some(), "noncoop", "c_weights")?;
            forbid_field(sc.mu_schedule.is_some(), "noncoop", "mu_schedule")?;
            let eye = identity_weights(n);
            let mu = mu_vector(&sc.mu, n, "noncoop")?;
            Ok(Strategy::Diffusion(CombinationMatrices::for_strategy(
                DiffusionKind::NonCooperative,
                &eye,
                &eye,
                mu,
            )?))
        }
        "incremental" => {
            forbid_field(sc.a_weights.is_some(), "incremental", "a_weights")?;
            forbid_field(sc.c_weights.is_some(), "incremental", "c_weights")?;
            forbid_field(sc.mu_schedule.is_some(), "incremental", "mu_schedule")?;
            match sc.mu {
                MuSpec::Scalar(mu) if mu > 0.0 => Ok(Strategy::Incremental { mu: mu / n as f64 }),
                MuSpec::Scalar(_) => Err(HarnessError::invalid(
                    "strategy incremental: step size must be strictly positive",
                )),
                MuSpec::PerNode(_) => Err(HarnessError::invalid(
                    "strategy incremental: per-node step sizes do not apply to a single roving estimate",
                )),
            }
        }
        "consensus" => {
            forbid_field(sc.c_weights.is_some(), "consensus", "c_weights")?;
            let a = a_matrix(sc.a_weights.as_deref(), network, "consensus")?;
            let mu = mu_vector(&sc.mu, n, "consensus")?;
            let schedule = match sc.mu_schedule.as_deref() {
                None | Some("constant") => StepSizeSchedule::Constant(mu),
                Some("harmonic") => StepSizeSchedule::Harmonic { c: mu },
                Some(other) => {
                    return Err(HarnessError::invalid(format!(
                        "strategy consensus: mu_schedule '{other}' is not one of constant, harmonic"
                    )))
                }
            };
            Ok(Strategy::Consensus { a, schedule })
        }
        other => Err(HarnessError::invalid(format!(
            "strategy name '{other}' is not one of atc, cta, noncoop, incremental, consensus"
        ))),
    }
}
