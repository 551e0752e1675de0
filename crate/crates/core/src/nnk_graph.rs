//! NNK neighborhoods: KNN candidates refined by a non-negative kernel-space
//! regression of the query onto its candidates.
//!
//! For a query `q` with candidate set `S` the weights solve
//!
//! ```text
//!   minimize  1/2 t' K_SS t - t' k_Sq   subject to  t >= 0
//! ```
//!
//! Candidates that lie further out along a direction already covered by a
//! selected neighbor end up with zero weight, which is what makes the
//! neighborhood sparse.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input, NnkError, Result};
use crate::kernels::{check_features, KernelRows, KernelSpec};
use crate::nnls;

/// Residuals at or below this count as an exact reconstruction.
const EXACT_RESIDUAL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NnkConfig {
    /// Number of KNN candidates per query.
    pub k: usize,
    pub kernel: KernelSpec,
    /// Added to the diagonal of the candidate kernel matrix.
    pub jitter: f64,
    /// Weights below this are dropped from the support.
    pub nnls_tolerance: f64,
    /// A cached neighborhood is rebuilt when its residual grows by more than
    /// this factor.
    pub cache_rebuild_factor: f64,
}

impl Default for NnkConfig {
    fn default() -> Self {
        NnkConfig {
            k: 15,
            kernel: KernelSpec::cosine(),
            jitter: 1e-8,
            nnls_tolerance: 1e-8,
            cache_rebuild_factor: 2.0,
        }
    }
}

impl NnkConfig {
    pub fn with_k(k: usize, kernel: KernelSpec) -> Self {
        NnkConfig {
            k,
            kernel,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return input("K must be at least 1");
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return input(format!("jitter must be finite and >= 0, got {}", self.jitter));
        }
        if !(self.nnls_tolerance > 0.0) {
            return input(format!("nnls_tolerance must be > 0, got {}", self.nnls_tolerance));
        }
        if !(self.cache_rebuild_factor > 1.0) {
            return input(format!(
                "cache rebuild factor must be > 1, got {}",
                self.cache_rebuild_factor
            ));
        }
        self.kernel.validate()
    }

    pub(crate) fn validate_for(&self, n: usize) -> Result<()> {
        self.validate()?;
        if n <= self.k {
            return input(format!("need N >= K + 1 nodes (N = {n}, K = {})", self.k));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnkNeighborhood {
    pub query_index: usize,
    pub neighbor_indices: Vec<usize>,
    /// Unnormalized, strictly positive.
    pub weights: Vec<f64>,
    /// Objective at the solution plus 1/2, i.e. half the squared kernel-space
    /// distance between the query and its reconstruction.
    pub objective_residual: f64,
}

impl NnkNeighborhood {
    pub fn len(&self) -> usize {
        self.neighbor_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbor_indices.is_empty()
    }

    /// Weights scaled to sum to one.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }
}

/// Output of [`refresh_cached_neighborhood`].
#[derive(Debug, Clone, PartialEq)]
pub struct Refreshed {
    pub neighborhood: NnkNeighborhood,
    pub rebuilt: bool,
}

/// The `k` nodes most similar to `query` (the query itself excluded),
/// in descending similarity with ties going to the lower node id.
pub fn knn_candidates(query: usize, features: ArrayView2<f64>, k: usize, kernel: &KernelSpec) -> Result<Vec<usize>> {
    check_features(features)?;
    let n = features.nrows();
    if k == 0 || n <= k {
        return input(format!("need N >= K + 1 nodes (N = {n}, K = {k})"));
    }
    check_query(query, n)?;
    let spec = kernel.resolve(features, k)?;
    Ok(knn_with(&KernelRows::new(features, spec), query, k))
}

pub(crate) fn knn_with(rows: &KernelRows, query: usize, k: usize) -> Vec<usize> {
    let mut sims: Vec<(f64, usize)> = (0..rows.n())
        .filter(|&j| j != query)
        .map(|j| (rows.value(query, j), j))
        .collect();
    let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if sims.len() > k {
        sims.select_nth_unstable_by(k - 1, order);
        sims.truncate(k);
    }
    sims.sort_unstable_by(order);
    sims.into_iter().map(|(_, j)| j).collect()
}

fn check_query(query: usize, n: usize) -> Result<()> {
    if query >= n {
        return input(format!("query node {query} out of range (N = {n})"));
    }
    Ok(())
}

/// Solves the non-negative kernel regression of `query` onto `candidates`.
pub fn nnk_solve(
    query: usize,
    candidates: &[usize],
    features: ArrayView2<f64>,
    config: &NnkConfig,
) -> Result<NnkNeighborhood> {
    check_features(features)?;
    config.validate()?;
    let n = features.nrows();
    check_query(query, n)?;
    if candidates.is_empty() {
        return input("candidate list is empty");
    }
    if let Some(&bad) = candidates.iter().find(|&&c| c >= n || c == query) {
        return input(format!("invalid candidate {bad} for query {query}"));
    }
    let spec = config.kernel.resolve(features, config.k.min(n - 1))?;
    solve_with(&KernelRows::new(features, spec), query, candidates, config)
}

pub(crate) fn solve_with(
    rows: &KernelRows,
    query: usize,
    candidates: &[usize],
    config: &NnkConfig,
) -> Result<NnkNeighborhood> {
    let m = candidates.len();
    let mut gram = Array2::<f64>::zeros((m, m));
    for a in 0..m {
        gram[[a, a]] = 1.0 + config.jitter;
        for b in (a + 1)..m {
            let v = rows.value(candidates[a], candidates[b]);
            gram[[a, b]] = v;
            gram[[b, a]] = v;
        }
    }
    let target: Array1<f64> = candidates.iter().map(|&c| rows.value(c, query)).collect();
    let mut sol = nnls::solve(gram.view(), target.view()).x;
    sol.mapv_inplace(|w| if w < config.nnls_tolerance { 0.0 } else { w });
    let objective = nnls::objective(gram.view(), target.view(), sol.view());

    let (neighbor_indices, weights): (Vec<usize>, Vec<f64>) = candidates
        .iter()
        .zip(sol.iter())
        .filter(|(_, &w)| w > 0.0)
        .map(|(&c, &w)| (c, w))
        .unzip();
    if neighbor_indices.is_empty() {
        return Err(NnkError::Degenerate { query });
    }
    Ok(NnkNeighborhood {
        query_index: query,
        neighbor_indices,
        weights,
        objective_residual: (objective + 0.5).max(0.0),
    })
}

/// NNK neighborhood of every requested node (all nodes by default), each
/// built on the pool of all other nodes.
pub fn build_channel_graph(
    features: ArrayView2<f64>,
    config: &NnkConfig,
    node_subset: Option<&[usize]>,
) -> Result<BTreeMap<usize, NnkNeighborhood>> {
    check_features(features)?;
    let n = features.nrows();
    config.validate_for(n)?;
    let nodes: Vec<usize> = match node_subset {
        Some(s) => {
            for &q in s {
                check_query(q, n)?;
            }
            s.to_vec()
        }
        None => (0..n).collect(),
    };
    let spec = config.kernel.resolve(features, config.k)?;
    let rows = KernelRows::new(features, spec);
    let built: Vec<Result<NnkNeighborhood>> = nodes
        .par_iter()
        .map(|&q| solve_with(&rows, q, &knn_with(&rows, q, config.k), config))
        .collect();
    built.into_iter().map(|r| r.map(|nb| (nb.query_index, nb))).collect()
}

/// Re-solves a cached neighborhood on its previous support with the current
/// features, falling back to a fresh KNN + NNK build when the residual has
/// grown past the configured factor.
pub fn refresh_cached_neighborhood(
    prev: &NnkNeighborhood,
    features: ArrayView2<f64>,
    config: &NnkConfig,
) -> Result<Refreshed> {
    check_features(features)?;
    let n = features.nrows();
    config.validate_for(n)?;
    check_query(prev.query_index, n)?;
    if prev.neighbor_indices.iter().any(|&j| j >= n || j == prev.query_index) {
        return input(format!(
            "cached neighborhood of node {} does not match the population",
            prev.query_index
        ));
    }
    let spec = config.kernel.resolve(features, config.k)?;
    refresh_with(&KernelRows::new(features, spec), prev, config)
}

pub(crate) fn refresh_with(rows: &KernelRows, prev: &NnkNeighborhood, config: &NnkConfig) -> Result<Refreshed> {
    let q = prev.query_index;
    let reused = match solve_with(rows, q, &prev.neighbor_indices, config) {
        Ok(nb) => nb,
        Err(NnkError::Degenerate { .. }) => {
            let neighborhood = solve_with(rows, q, &knn_with(rows, q, config.k), config)?;
            return Ok(Refreshed {
                neighborhood,
                rebuilt: true,
            });
        }
        Err(e) => return Err(e),
    };
    let rho = config.cache_rebuild_factor;
    let grew = if rho.is_infinite() {
        false
    } else if prev.objective_residual <= EXACT_RESIDUAL {
        reused.objective_residual > config.nnls_tolerance
    } else {
        reused.objective_residual > rho * prev.objective_residual
    };
    if grew {
        let neighborhood = solve_with(rows, q, &knn_with(rows, q, config.k), config)?;
        Ok(Refreshed {
            neighborhood,
            rebuilt: true,
        })
    } else {
        Ok(Refreshed {
            neighborhood: reused,
            rebuilt: false,
        })
    }
}
