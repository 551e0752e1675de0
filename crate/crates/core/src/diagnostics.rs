//! Channel-importance signals: activation sparsity, NNK neighborhood size,
//! same-class neighbor weight, and a risk-based channel ranking.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::interpolation::{ChannelGraph, ChannelLooReport, LabelSet};
use crate::nnk_graph::NnkNeighborhood;

/// Magnitudes at or below this count as zero activations.
pub const DEFAULT_ZERO_TOL: f64 = 1e-7;

/// Channels with LOO risk strictly below this are considered informative.
pub const DEFAULT_RISK_THRESHOLD: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMetrics {
    pub channel: u32,
    pub zero_fraction: f64,
    pub mean_neighbors: f64,
    pub mean_same_class_weight: f64,
    /// Equal to the LOO risk; lower ranks first.
    pub rank_score: f64,
}

impl From<&ChannelLooReport> for ImportanceMetrics {
    fn from(r: &ChannelLooReport) -> Self {
        ImportanceMetrics {
            channel: r.channel,
            zero_fraction: r.zero_fraction,
            mean_neighbors: r.mean_neighbor_count,
            mean_same_class_weight: r.mean_same_class_weight,
            rank_score: r.loo_risk,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRanking {
    /// All channels, best first.
    pub order: Vec<u32>,
    /// Channels whose risk is below the threshold, in rank order.
    pub passing: Vec<u32>,
    pub threshold: f64,
}

/// Fraction of entries with magnitude at most `zero_tol`.
pub fn zero_stats(features_c: ArrayView2<f64>, zero_tol: f64) -> f64 {
    let total = features_c.len();
    if total == 0 {
        return 0.0;
    }
    let zeros = features_c.iter().filter(|v| v.abs() <= zero_tol).count();
    zeros as f64 / total as f64
}

/// Normalized weight a neighborhood puts on neighbors sharing the query's
/// label.
pub fn same_class_weight(nbhd: &NnkNeighborhood, labels: &LabelSet) -> f64 {
    let own = labels.get(nbhd.query_index);
    let total: f64 = nbhd.weights.iter().sum();
    nbhd.neighbor_indices
        .iter()
        .zip(&nbhd.weights)
        .filter(|(&j, _)| labels.get(j) == own)
        .map(|(_, w)| w / total)
        .sum()
}

/// `(mean support size, mean same-class weight)` over the graph's nodes.
pub fn neighborhood_stats(graph: &ChannelGraph, labels: &LabelSet) -> (f64, f64) {
    if graph.is_empty() {
        return (0.0, 0.0);
    }
    let n = graph.len() as f64;
    let neighbors = graph.values().map(|nb| nb.len() as f64).sum::<f64>() / n;
    let same = graph.values().map(|nb| same_class_weight(nb, labels)).sum::<f64>() / n;
    (neighbors, same)
}

/// Orders channels by ascending LOO risk, ties by channel id.
pub fn rank_channels(reports: &[ChannelLooReport], threshold: f64) -> ChannelRanking {
    let mut scored: Vec<(f64, u32)> = reports.iter().map(|r| (r.loo_risk, r.channel)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ChannelRanking {
        order: scored.iter().map(|&(_, c)| c).collect(),
        passing: scored
            .iter()
            .filter(|&&(r, _)| r < threshold)
            .map(|&(_, c)| c)
            .collect(),
        threshold,
    }
}

pub fn importance_metrics(reports: &[ChannelLooReport]) -> Vec<ImportanceMetrics> {
    reports.iter().map(ImportanceMetrics::from).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpolation::NodeMask;
    use ndarray::{array, Array2};
    use std::collections::BTreeMap;

    fn report(channel: u32, loo_risk: f64) -> ChannelLooReport {
        ChannelLooReport {
            channel,
            loo_risk,
            per_node_correct: NodeMask::default(),
            mean_neighbor_count: 1.0,
            mean_same_class_weight: 1.0,
            zero_fraction: 0.0,
            evaluated_nodes: 0,
            failed_nodes: vec![],
        }
    }

    #[test]
    fn zero_fraction_examples() {
        assert_eq!(zero_stats(Array2::<f64>::zeros((3, 4)).view(), 0.0), 1.0);
        assert_eq!(zero_stats(Array2::from_elem((3, 4), 0.2).view(), 0.0), 0.0);
        assert_eq!(zero_stats(array![[0.0, 1.0], [2.0, 0.0]].view(), DEFAULT_ZERO_TOL), 0.5);
        assert_eq!(zero_stats(array![[5e-8, -5e-8]].view(), DEFAULT_ZERO_TOL), 1.0);
    }

    #[test]
    fn neighborhood_stats_examples() {
        let labels = LabelSet::new(vec![0, 0, 1, 1], 2).unwrap();
        let mut g = BTreeMap::new();
        g.insert(
            0,
            NnkNeighborhood {
                query_index: 0,
                neighbor_indices: vec![1],
                weights: vec![0.4],
                objective_residual: 0.1,
            },
        );
        g.insert(
            2,
            NnkNeighborhood {
                query_index: 2,
                neighbor_indices: vec![3],
                weights: vec![0.9],
                objective_residual: 0.1,
            },
        );
        assert_eq!(neighborhood_stats(&g, &labels), (1.0, 1.0));

        g.insert(
            1,
            NnkNeighborhood {
                query_index: 1,
                neighbor_indices: vec![0, 2, 3],
                weights: vec![0.1, 0.2, 0.1],
                objective_residual: 0.0,
            },
        );
        let (nbrs, same) = neighborhood_stats(&g, &labels);
        assert!((nbrs - 5.0 / 3.0).abs() < 1e-12);
        assert!((same - (2.0 + 0.25) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ranking_examples() {
        let r = rank_channels(
            &[report(0, 0.5), report(1, 0.1), report(2, 0.3)],
            DEFAULT_RISK_THRESHOLD,
        );
        assert_eq!(r.order, vec![1, 2, 0]);
        assert_eq!(r.passing, vec![1, 2]);
        let r = rank_channels(&[report(0, 0.2), report(1, 0.2), report(2, 0.2)], 0.4);
        assert_eq!(r.order, vec![0, 1, 2]);
        assert_eq!(rank_channels(&[report(0, 0.9)], 0.4).order, vec![0]);
    }
}
