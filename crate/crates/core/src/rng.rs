//! Seedable, splittable random streams.
//!
//! Every stochastic quantity in a run is drawn from a ChaCha stream derived
//! from `(master seed, trial, node)`. Streams with distinct ids are
//! statistically independent, and re-deriving a stream replays it exactly,
//! which is what makes paired comparisons work: every strategy in a trial
//! re-derives the same per-node streams and therefore consumes identical
//! data realizations.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Nodes occupy the low bits of the stream id; 2^20 nodes is far beyond any
/// network this crate targets.
const NODE_BITS: u32 = 20;
/// Trials sit above nodes, domains above trials.
const TRIAL_BITS: u32 = 36;

/// Namespaces for unrelated consumers of randomness under one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamDomain {
    /// Per-(trial, node) measurement data consumed by strategy runs.
    TrialData = 0,
    /// Auxiliary Monte Carlo estimation (noise covariance sampling).
    Aux = 1,
}

/// Derive the independent stream for `(trial, node)` within a domain.
///
/// Panics if `trial` or `node` exceed their id budget; both limits are far
/// above anything the harness produces.
pub fn node_stream(master_seed: u64, domain: StreamDomain, trial: u64, node: u64) -> ChaCha12Rng {
    assert!(node < 1 << NODE_BITS, "node id {node} out of range");
    assert!(trial < 1 << TRIAL_BITS, "trial id {trial} out of range");
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(((domain as u64) << (NODE_BITS + TRIAL_BITS)) | (trial << NODE_BITS) | node);
    rng
}

/// One stream per node for a given trial.
pub fn trial_streams(master_seed: u64, trial: u64, n_nodes: usize) -> Vec<ChaCha12Rng> {
    (0..n_nodes)
        .map(|k| node_stream(master_seed, StreamDomain::TrialData, trial, k as u64))
        .collect()
}
