//! Label interpolation over NNK polytopes and leave-one-out risk estimates,
//! per channel and for the full concatenated layer.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{same_class_weight, zero_stats, DEFAULT_ZERO_TOL};
use crate::error::{input, NnkError, Result};
use crate::kernels::{check_features, KernelRows};
use crate::nnk_graph::{knn_with, refresh_with, solve_with, NnkConfig, NnkNeighborhood};
use crate::snapshot::FeatureSnapshot;

/// Channel id carried by full-layer reports.
pub const FULL_LAYER: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    labels: Vec<u16>,
    num_classes: u16,
}

impl LabelSet {
    pub fn new(labels: Vec<u16>, num_classes: u16) -> Result<Self> {
        if num_classes < 2 {
            return input(format!("need at least 2 classes, got {num_classes}"));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return input(format!("label {y} at node {i} exceeds num_classes = {num_classes}"));
        }
        Ok(LabelSet { labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes as usize
    }

    pub fn get(&self, node: usize) -> usize {
        self.labels[node] as usize
    }

    pub fn as_slice(&self) -> &[u16] {
        &self.labels
    }

    /// Classes with no member; callers may want to warn about these.
    pub fn missing_classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.num_classes()];
        for &y in &self.labels {
            seen[y as usize] = true;
        }
        (0..seen.len()).filter(|&c| !seen[c]).collect()
    }
}

/// Per-node correctness flags, serialized as a string of `0`/`1`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NodeMask(pub Vec<bool>);

impl NodeMask {
    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

impl Serialize for NodeMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let text: String = self.0.iter().map(|&b| if b { '1' } else { '0' }).collect();
        s.serialize_str(&text)
    }
}

impl<'de> Deserialize<'de> for NodeMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(serde::de::Error::custom(format!("invalid mask character {other:?}"))),
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(NodeMask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelLooReport {
    pub channel: u32,
    /// Fraction of evaluated nodes misclassified.
    pub loo_risk: f64,
    pub per_node_correct: NodeMask,
    pub mean_neighbor_count: f64,
    pub mean_same_class_weight: f64,
    pub zero_fraction: f64,
    pub evaluated_nodes: usize,
    /// Nodes whose solve degenerated; scored as errors.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_nodes: Vec<usize>,
}

impl ChannelLooReport {
    pub fn is_full_layer(&self) -> bool {
        self.channel == FULL_LAYER
    }
}

/// Which channels and nodes an evaluation covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub channel_subset: Option<Vec<u32>>,
    /// Evaluate only this many randomly chosen nodes.
    pub subsample: Option<usize>,
    pub seed: u64,
    pub zero_tol: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            channel_subset: None,
            subsample: None,
            seed: 0,
            zero_tol: DEFAULT_ZERO_TOL,
        }
    }
}

impl EvalOptions {
    /// Nodes evaluated at `step`. Draws depend only on `(seed, step)` so a
    /// rerun samples the same nodes.
    pub fn node_subset(&self, step: u64, n: usize) -> Option<Vec<usize>> {
        let m = self.subsample?;
        if m >= n {
            return None;
        }
        let mix = self.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(mix);
        let mut nodes = index::sample(&mut rng, n, m).into_vec();
        nodes.sort_unstable();
        Some(nodes)
    }
}

/// Convex combination of one-hot neighbor labels with the normalized NNK
/// weights.
pub fn nnk_interpolate(nbhd: &NnkNeighborhood, labels: &LabelSet) -> Vec<f64> {
    let mut probs = vec![0.0; labels.num_classes()];
    let total: f64 = nbhd.weights.iter().sum();
    for (&j, &w) in nbhd.neighbor_indices.iter().zip(&nbhd.weights) {
        probs[labels.get(j)] += w / total;
    }
    probs
}

/// Probabilities closer than this are a tie. Symmetric neighborhoods give
/// exact ties, and with jitter-sized diagonal regularization the weights
/// are only resolved to about `eps / jitter`.
pub const TIE_TOLERANCE: f64 = 1e-6;

/// Argmax, lowest class id on ties.
pub fn classify(probs: &[f64]) -> usize {
    let mut best = 0;
    for (c, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] + TIE_TOLERANCE {
            best = c;
        }
    }
    best
}

/// Mean 0/1 error of `predictions` against `labels`.
pub fn empirical_risk(predictions: &[usize], labels: &LabelSet) -> Result<f64> {
    if predictions.len() != labels.len() {
        return input(format!("{} predictions for {} labels", predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return input("no predictions");
    }
    let wrong = predictions
        .iter()
        .enumerate()
        .filter(|&(i, &p)| p != labels.get(i))
        .count();
    Ok(wrong as f64 / predictions.len() as f64)
}

/// Cached neighborhoods for one feature matrix, keyed by query node.
pub type ChannelGraph = BTreeMap<usize, NnkNeighborhood>;

/// Neighborhood cache across evaluation steps, one graph per channel.
#[derive(Debug, Clone, Default)]
pub struct NeighborhoodCache {
    graphs: BTreeMap<u32, ChannelGraph>,
    rebuilds: usize,
    reuses: usize,
}

impl NeighborhoodCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Cached neighborhoods that were rebuilt because their residual grew.
    pub fn rebuilds(&self) -> usize {
        self.rebuilds
    }

    pub fn reuses(&self) -> usize {
        self.reuses
    }

    pub fn graph(&self, channel: u32) -> Option<&ChannelGraph> {
        self.graphs.get(&channel)
    }
}

struct NodeOutcome {
    correct: bool,
    failed: bool,
    neighbors: usize,
    same_class: f64,
    rebuilt: Option<bool>,
    nbhd: Option<NnkNeighborhood>,
}

fn evaluate_node(
    rows: &KernelRows,
    labels: &LabelSet,
    config: &NnkConfig,
    node: usize,
    cached: Option<&NnkNeighborhood>,
) -> Result<NodeOutcome> {
    let (solved, rebuilt) = match cached {
        Some(prev) => match refresh_with(rows, prev, config) {
            Ok(r) => (Ok(r.neighborhood), Some(r.rebuilt)),
            Err(e) => (Err(e), None),
        },
        None => (solve_with(rows, node, &knn_with(rows, node, config.k), config), None),
    };
    match solved {
        Ok(nb) => {
            debug_assert!(!nb.neighbor_indices.contains(&node));
            let probs = nnk_interpolate(&nb, labels);
            Ok(NodeOutcome {
                correct: classify(&probs) == labels.get(node),
                failed: false,
                neighbors: nb.len(),
                same_class: same_class_weight(&nb, labels),
                rebuilt,
                nbhd: Some(nb),
            })
        }
        Err(NnkError::Degenerate { .. }) => Ok(NodeOutcome {
            correct: false,
            failed: true,
            neighbors: 0,
            same_class: 0.0,
            rebuilt,
            nbhd: None,
        }),
        Err(e) => Err(e),
    }
}

fn loo_sweep(
    features: ArrayView2<f64>,
    labels: &LabelSet,
    config: &NnkConfig,
    node_subset: Option<&[usize]>,
    zero_tol: f64,
    channel: u32,
    mut cache: Option<(&mut ChannelGraph, &mut usize, &mut usize)>,
) -> Result<ChannelLooReport> {
    check_features(features)?;
    let n = features.nrows();
    if labels.len() != n {
        return input(format!("{} labels for {n} feature rows", labels.len()));
    }
    config.validate()?;
    if n < config.k + 2 {
        return input(format!("LOO needs N >= K + 2 nodes (N = {n}, K = {})", config.k));
    }
    let nodes: Vec<usize> = match node_subset {
        Some(s) => {
            if let Some(&bad) = s.iter().find(|&&q| q >= n) {
                return input(format!("node {bad} out of range (N = {n})"));
            }
            s.to_vec()
        }
        None => (0..n).collect(),
    };
    if nodes.is_empty() {
        return input("no nodes to evaluate");
    }
    let spec = config.kernel.resolve(features, config.k)?;
    let rows = KernelRows::new(features, spec);

    let outcomes: Vec<NodeOutcome> = {
        let prev: Option<&ChannelGraph> = cache.as_ref().map(|(g, _, _)| &**g);
        nodes
            .par_iter()
            .map(|&q| evaluate_node(&rows, labels, config, q, prev.and_then(|g| g.get(&q))))
            .collect::<Result<_>>()?
    };

    if let Some((graph, rebuilds, reuses)) = cache.as_mut() {
        for (&q, o) in nodes.iter().zip(&outcomes) {
            match o.rebuilt {
                Some(true) => **rebuilds += 1,
                Some(false) => **reuses += 1,
                None => {}
            }
            match &o.nbhd {
                Some(nb) => {
                    graph.insert(q, nb.clone());
                }
                None => {
                    graph.remove(&q);
                }
            }
        }
    }

    let m = nodes.len() as f64;
    let mask = NodeMask(outcomes.iter().map(|o| o.correct).collect());
    let correct = mask.count_ones();
    Ok(ChannelLooReport {
        channel,
        loo_risk: 1.0 - correct as f64 / m,
        mean_neighbor_count: outcomes.iter().map(|o| o.neighbors as f64).sum::<f64>() / m,
        mean_same_class_weight: outcomes.iter().map(|o| o.same_class).sum::<f64>() / m,
        zero_fraction: zero_stats(features, zero_tol),
        evaluated_nodes: nodes.len(),
        failed_nodes: nodes
            .iter()
            .zip(&outcomes)
            .filter(|(_, o)| o.failed)
            .map(|(&q, _)| q)
            .collect(),
        per_node_correct: mask,
    })
}

/// Leave-one-out NNK interpolation risk of one channel's features.
///
/// The returned report carries channel id 0; [`loo_risk_all_channels`]
/// fills in real ids.
pub fn loo_risk_channel(
    features_c: ArrayView2<f64>,
    labels: &LabelSet,
    config: &NnkConfig,
    node_subset: Option<&[usize]>,
) -> Result<ChannelLooReport> {
    loo_sweep(features_c, labels, config, node_subset, DEFAULT_ZERO_TOL, 0, None)
}

fn requested_channels(snapshot: &FeatureSnapshot, options: &EvalOptions) -> Result<Vec<u32>> {
    let c = snapshot.num_channels() as u32;
    match &options.channel_subset {
        None => Ok((0..c).collect()),
        Some(subset) => {
            let mut ids = subset.clone();
            ids.sort_unstable();
            ids.dedup();
            if let Some(&bad) = ids.iter().find(|&&id| id >= c) {
                return input(format!("channel {bad} out of range (C = {c})"));
            }
            Ok(ids)
        }
    }
}

/// One report per requested channel, in ascending channel order.
pub fn loo_risk_all_channels(
    snapshot: &FeatureSnapshot,
    config: &NnkConfig,
    options: &EvalOptions,
) -> Result<Vec<ChannelLooReport>> {
    let nodes = options.node_subset(snapshot.step, snapshot.num_nodes());
    requested_channels(snapshot, options)?
        .into_iter()
        .map(|c| {
            let x = snapshot.channel_f64(c as usize);
            loo_sweep(
                x.view(),
                &snapshot.labels,
                config,
                nodes.as_deref(),
                options.zero_tol,
                c,
                None,
            )
        })
        .collect()
}

/// Like [`loo_risk_all_channels`] but reuses neighborhoods from earlier
/// steps, rebuilding only those whose residual grew.
pub fn loo_risk_all_channels_cached(
    snapshot: &FeatureSnapshot,
    config: &NnkConfig,
    options: &EvalOptions,
    cache: &mut NeighborhoodCache,
) -> Result<Vec<ChannelLooReport>> {
    let nodes = options.node_subset(snapshot.step, snapshot.num_nodes());
    let mut out = Vec::new();
    for c in requested_channels(snapshot, options)? {
        let x = snapshot.channel_f64(c as usize);
        let graph = cache.graphs.entry(c).or_default();
        let handle = Some((graph, &mut cache.rebuilds, &mut cache.reuses));
        out.push(loo_sweep(
            x.view(),
            &snapshot.labels,
            config,
            nodes.as_deref(),
            options.zero_tol,
            c,
            handle,
        )?);
    }
    Ok(out)
}

/// LOO risk on the concatenation of all channel subvectors.
pub fn loo_risk_full_layer(snapshot: &FeatureSnapshot, config: &NnkConfig) -> Result<ChannelLooReport> {
    loo_risk_full_layer_with(snapshot, config, &EvalOptions::default())
}

/// [`loo_risk_full_layer`] honoring node subsampling from `options`.
pub fn loo_risk_full_layer_with(
    snapshot: &FeatureSnapshot,
    config: &NnkConfig,
    options: &EvalOptions,
) -> Result<ChannelLooReport> {
    let nodes = options.node_subset(snapshot.step, snapshot.num_nodes());
    let x: Array2<f64> = snapshot.full_layer();
    loo_sweep(
        x.view(),
        &snapshot.labels,
        config,
        nodes.as_deref(),
        options.zero_tol,
        FULL_LAYER,
        None,
    )
}
