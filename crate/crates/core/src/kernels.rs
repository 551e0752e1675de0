//! Similarity kernels on feature vectors.
//!
//! Both kernels map into `[0, 1]`: the Gaussian kernel
//! `exp(-|a - b|^2 / 2 sigma^2)` and the range-normalized cosine kernel
//! `1/2 + <a, b> / (2 |a| |b|)`.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};

/// Norms below this are treated as the zero vector by the cosine kernel.
pub const COSINE_ZERO_NORM: f64 = 1e-12;

const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Gaussian,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaPolicy {
    Fixed,
    /// Median distance to the K-th nearest neighbor, recomputed per feature
    /// matrix.
    MedianKnnDistance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub sigma: f64,
    pub sigma_policy: SigmaPolicy,
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Self {
        KernelSpec {
            kind: KernelKind::Gaussian,
            sigma,
            sigma_policy: SigmaPolicy::Fixed,
        }
    }

    /// Gaussian kernel whose bandwidth is estimated from the data.
    pub fn gaussian_adaptive() -> Self {
        KernelSpec {
            kind: KernelKind::Gaussian,
            sigma: 1.0,
            sigma_policy: SigmaPolicy::MedianKnnDistance,
        }
    }

    pub fn cosine() -> Self {
        KernelSpec {
            kind: KernelKind::Cosine,
            sigma: 1.0,
            sigma_policy: SigmaPolicy::Fixed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == KernelKind::Gaussian
            && self.sigma_policy == SigmaPolicy::Fixed
            && !(self.sigma > 0.0 && self.sigma.is_finite())
        {
            return input(format!(
                "gaussian kernel needs a positive finite sigma, got {}",
                self.sigma
            ));
        }
        Ok(())
    }

    /// Returns a fixed-bandwidth spec for `features`, estimating sigma when
    /// the policy asks for it. Cosine specs are returned unchanged.
    pub fn resolve(&self, features: ArrayView2<f64>, k: usize) -> Result<KernelSpec> {
        match (self.kind, self.sigma_policy) {
            (KernelKind::Gaussian, SigmaPolicy::MedianKnnDistance) => {
                let sigma = estimate_sigma(features, k)?;
                Ok(KernelSpec::gaussian(sigma))
            }
            _ => {
                self.validate()?;
                Ok(*self)
            }
        }
    }
}

/// Evaluates the kernel between two feature vectors.
pub fn kernel_value(a: ArrayView1<f64>, b: ArrayView1<f64>, spec: &KernelSpec) -> Result<f64> {
    if a.len() != b.len() {
        return input(format!("dimension mismatch: {} vs {}", a.len(), b.len()));
    }
    if a.is_empty() {
        return input("feature vectors must have dimension >= 1");
    }
    Ok(match spec.kind {
        KernelKind::Gaussian => {
            let d2: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            gaussian_from_sq_dist(d2, spec.sigma)
        }
        KernelKind::Cosine => {
            let na = a.dot(&a).sqrt();
            let nb = b.dot(&b).sqrt();
            cosine_from_parts(a.dot(&b), na, nb)
        }
    })
}

#[inline]
pub(crate) fn gaussian_from_sq_dist(d2: f64, sigma: f64) -> f64 {
    (-d2 / (2.0 * sigma * sigma)).exp().clamp(0.0, 1.0)
}

#[inline]
pub(crate) fn cosine_from_parts(dot: f64, na: f64, nb: f64) -> f64 {
    if na < COSINE_ZERO_NORM || nb < COSINE_ZERO_NORM {
        return 0.5;
    }
    (0.5 + dot / (2.0 * na * nb)).clamp(0.0, 1.0)
}

/// Row-wise kernel evaluation against a fixed feature matrix.
///
/// Caches row norms so that one similarity row costs `O(N D)`.
pub(crate) struct KernelRows<'a> {
    features: ArrayView2<'a, f64>,
    spec: KernelSpec,
    norms: Vec<f64>,
}

impl<'a> KernelRows<'a> {
    /// `spec` must already be resolved to a fixed bandwidth.
    pub fn new(features: ArrayView2<'a, f64>, spec: KernelSpec) -> Self {
        let norms = match spec.kind {
            KernelKind::Cosine => features.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect(),
            KernelKind::Gaussian => Vec::new(),
        };
        KernelRows { features, spec, norms }
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 1.0;
        }
        let a = self.features.row(i);
        let b = self.features.row(j);
        match self.spec.kind {
            KernelKind::Gaussian => {
                let d2: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                gaussian_from_sq_dist(d2, self.spec.sigma)
            }
            KernelKind::Cosine => cosine_from_parts(a.dot(&b), self.norms[i], self.norms[j]),
        }
    }
}

fn check_finite(features: ArrayView2<f64>) -> Result<()> {
    if let Some(((r, c), v)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return input(format!("non-finite feature value {v} at row {r}, column {c}"));
    }
    Ok(())
}

pub(crate) fn check_features(features: ArrayView2<f64>) -> Result<()> {
    if features.nrows() == 0 || features.ncols() == 0 {
        return input(format!(
            "empty feature matrix ({}x{})",
            features.nrows(),
            features.ncols()
        ));
    }
    check_finite(features)
}

/// Dense `N x N` kernel matrix.
pub fn kernel_matrix(features: ArrayView2<f64>, spec: &KernelSpec) -> Result<Array2<f64>> {
    check_features(features)?;
    spec.validate()?;
    let rows = KernelRows::new(features, *spec);
    let n = features.nrows();
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        m[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let v = rows.value(i, j);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    Ok(m)
}

/// Median over nodes of the Euclidean distance to the `k`-th nearest other
/// node. Falls back to 1.0 when the median is numerically zero.
pub fn estimate_sigma(features: ArrayView2<f64>, k: usize) -> Result<f64> {
    check_features(features)?;
    let n = features.nrows();
    if k == 0 || n <= k {
        return input(format!("estimate_sigma needs N > K >= 1 (N = {n}, K = {k})"));
    }
    let mut kth = Vec::with_capacity(n);
    let mut dists = Vec::with_capacity(n - 1);
    for i in 0..n {
        dists.clear();
        let a = features.row(i);
        for j in (0..n).filter(|&j| j != i) {
            let b = features.row(j);
            dists.push(a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
        }
        let (_, v, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
        kth.push(v.sqrt());
    }
    kth.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        kth[n / 2]
    } else {
        0.5 * (kth[n / 2 - 1] + kth[n / 2])
    };
    Ok(if median < SIGMA_FLOOR { 1.0 } else { median })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    #[test]
    fn gaussian_identical_vectors() {
        let a = array![0.3, -2.0, 7.5];
        for sigma in [0.01, 1.0, 100.0] {
            assert_eq!(
                kernel_value(a.view(), a.view(), &KernelSpec::gaussian(sigma)).unwrap(),
                1.0
            );
        }
    }

    #[test]
    fn gaussian_known_value() {
        let v = kernel_value(array![0.0].view(), array![2.0].view(), &KernelSpec::gaussian(1.0)).unwrap();
        assert_abs_diff_eq!(v, (-2.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.13534, epsilon = 1e-5);
    }

    #[test]
    fn cosine_endpoints() {
        let a = array![1.0, -2.0, 0.5];
        let neg = a.mapv(|x| -x);
        let spec = KernelSpec::cosine();
        assert_abs_diff_eq!(kernel_value(a.view(), neg.view(), &spec).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(kernel_value(a.view(), a.view(), &spec).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn cosine_zero_vector_is_half() {
        let z = Array1::<f64>::zeros(3);
        let a = array![1.0, 2.0, 3.0];
        assert_eq!(kernel_value(z.view(), a.view(), &KernelSpec::cosine()).unwrap(), 0.5);
        assert_eq!(kernel_value(z.view(), z.view(), &KernelSpec::cosine()).unwrap(), 0.5);
    }

    #[test]
    fn dimension_mismatch() {
        let err = kernel_value(array![1.0].view(), array![1.0, 2.0].view(), &KernelSpec::cosine());
        assert!(matches!(err, Err(crate::NnkError::Input(_))));
    }

    #[test]
    fn matrix_single_row_and_duplicates() {
        let m = kernel_matrix(array![[1.0, 2.0]].view(), &KernelSpec::gaussian(1.0)).unwrap();
        assert_eq!(m, array![[1.0]]);
        let m = kernel_matrix(array![[1.0, 2.0], [1.0, 2.0]].view(), &KernelSpec::gaussian(1.0)).unwrap();
        assert_eq!(m, array![[1.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn matrix_rejects_non_finite() {
        let x = array![[1.0, f64::NAN], [0.0, 1.0]];
        assert!(kernel_matrix(x.view(), &KernelSpec::cosine()).is_err());
    }

    #[test]
    fn sigma_examples() {
        let same = Array2::from_elem((5, 3), 4.0);
        assert_eq!(estimate_sigma(same.view(), 2).unwrap(), 1.0);
        let line = array![[0.0], [1.0], [2.0]];
        assert_eq!(estimate_sigma(line.view(), 1).unwrap(), 1.0);
        assert!(estimate_sigma(line.view(), 3).is_err());
    }

    #[test]
    fn sigma_tracks_cluster_scale() {
        // two tight clusters, 10 apart
        let mut x = Array2::zeros((8, 1));
        for i in 0..4 {
            x[[i, 0]] = 0.1 * i as f64 / 3.0;
            x[[i + 4, 0]] = 10.0 + 0.1 * i as f64 / 3.0;
        }
        let s = estimate_sigma(x.view(), 1).unwrap();
        // brute force: every node's nearest neighbor sits 0.1/3 away
        assert_abs_diff_eq!(s, 0.1 / 3.0, epsilon = 1e-12);
    }

    fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..6).prop_flat_map(|d| {
            (
                prop::collection::vec(-10.0..10.0f64, d),
                prop::collection::vec(-10.0..10.0f64, d),
            )
        })
    }

    proptest! {
        #[test]
        fn bounded_and_symmetric((a, b) in vec_pair(), sigma in 0.05..20.0f64) {
            let (a, b) = (Array1::from(a), Array1::from(b));
            for spec in [KernelSpec::gaussian(sigma), KernelSpec::cosine()] {
                let ab = kernel_value(a.view(), b.view(), &spec).unwrap();
                let ba = kernel_value(b.view(), a.view(), &spec).unwrap();
                prop_assert!((0.0..=1.0).contains(&ab));
                prop_assert_eq!(ab, ba);
            }
        }

        #[test]
        fn cosine_scale_invariant((a, b) in vec_pair(), c in 0.01..100.0f64) {
            let (a, b) = (Array1::from(a), Array1::from(b));
            prop_assume!(a.dot(&a) > 1e-6 && b.dot(&b) > 1e-6);
            let spec = KernelSpec::cosine();
            let base = kernel_value(a.view(), b.view(), &spec).unwrap();
            let scaled = kernel_value((&a * c).view(), b.view(), &spec).unwrap();
            prop_assert!((base - scaled).abs() < 1e-12);
        }

        #[test]
        fn gaussian_decreasing(d1 in 0.0..5.0f64, extra in 1e-3..5.0f64, sigma in 0.5..5.0f64) {
            let spec = KernelSpec::gaussian(sigma);
            let o = array![0.0];
            let near = kernel_value(o.view(), array![d1].view(), &spec).unwrap();
            let far = kernel_value(o.view(), array![d1 + extra].view(), &spec).unwrap();
            prop_assert!(far < near);
        }

        #[test]
        fn matrix_symmetric(data in prop::collection::vec(-5.0..5.0f64, 40)) {
            let x = Array2::from_shape_vec((10, 4), data).unwrap();
            for spec in [KernelSpec::gaussian(1.5), KernelSpec::cosine()] {
                let m = kernel_matrix(x.view(), &spec).unwrap();
                let diff = (&m - &m.t()).mapv(f64::abs).fold(0.0f64, |acc, &v| acc.max(v));
                prop_assert!(diff <= 1e-12);
                for i in 0..10 { prop_assert_eq!(m[[i, i]], 1.0); }
            }
        }
    }
}
