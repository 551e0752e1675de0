//! Independent reference implementations used as test oracles. Nothing in
//! here calls into the library's numerical code paths.

#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::Array2;
use nnk_core::{FeatureSnapshot, LabelSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub enum RefKernel {
    Gaussian(f64),
    Cosine,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn ref_kernel(a: &[f64], b: &[f64], k: RefKernel) -> f64 {
    match k {
        RefKernel::Gaussian(sigma) => {
            let mut d2 = 0.0;
            for i in 0..a.len() {
                d2 += (a[i] - b[i]).powi(2);
            }
            (-d2 / (2.0 * sigma * sigma)).exp()
        }
        RefKernel::Cosine => {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for i in 0..a.len() {
                dot += a[i] * b[i];
                na += a[i] * a[i];
                nb += b[i] * b[i];
            }
            let (na, nb) = (na.sqrt(), nb.sqrt());
            if na < 1e-12 || nb < 1e-12 {
                0.5
            } else {
                (0.5 + dot / (2.0 * na * nb)).clamp(0.0, 1.0)
            }
        }
    }
}

fn row(x: &Array2<f64>, i: usize) -> Vec<f64> {
    x.row(i).to_vec()
}

/// Quadratic objective `1/2 t'At - t'b` on plain vectors.
pub fn qp_objective(a: &[Vec<f64>], b: &[f64], t: &[f64]) -> f64 {
    let n = b.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += t[i] * a[i][j] * t[j];
        }
    }
    0.5 * quad - (0..n).map(|i| t[i] * b[i]).sum::<f64>()
}

/// Accelerated projected gradient (FISTA) on the non-negative orthant,
/// step 1/L with L bounded by the largest absolute row sum.
pub fn projected_gradient(a: &[Vec<f64>], b: &[f64], iters: usize) -> Vec<f64> {
    let n = b.len();
    let lip = a
        .iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let mut x = vec![0.0; n];
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..iters {
        let mut next = vec![0.0; n];
        for i in 0..n {
            let g: f64 = (0..n).map(|j| a[i][j] * y[j]).sum::<f64>() - b[i];
            next[i] = (y[i] - g / lip).max(0.0);
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        for i in 0..n {
            y[i] = next[i] + (t - 1.0) / t_next * (next[i] - x[i]);
        }
        // restart when momentum stops helping
        if qp_objective(a, b, &next) > qp_objective(a, b, &x) {
            y = next.clone();
            t = 1.0;
        } else {
            t = t_next;
        }
        x = next;
    }
    x
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn dense_solve(mut m: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let n = rhs.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-15 {
            return None;
        }
        m.swap(col, piv);
        rhs.swap(col, piv);
        for r in (col + 1)..n {
            let f = m[r][col] / m[col][col];
            for c in col..n {
                m[r][c] -= f * m[col][c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = ((r + 1)..n).map(|c| m[r][c] * x[c]).sum();
        x[r] = (rhs[r] - s) / m[r][r];
    }
    Some(x)
}

/// Exact NNLS optimum by enumerating every support set: the optimum is the
/// best stationary point with strictly positive coordinates on its support.
pub fn exhaustive_nnls(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    assert!(n <= 16);
    let mut best = vec![0.0; n];
    let mut best_obj = 0.0;
    for mask in 1u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let sub: Vec<Vec<f64>> = idx.iter().map(|&i| idx.iter().map(|&j| a[i][j]).collect()).collect();
        let rhs: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
        let Some(z) = dense_solve(sub, rhs) else {
            continue;
        };
        if z.iter().any(|&v| v <= 0.0) {
            continue;
        }
        let mut t = vec![0.0; n];
        for (k, &i) in idx.iter().enumerate() {
            t[i] = z[k];
        }
        let obj = qp_objective(a, b, &t);
        if obj < best_obj {
            best_obj = obj;
            best = t;
        }
    }
    best
}

/// Candidate system for `query` over `cands` with diagonal jitter.
pub fn ref_system(
    x: &Array2<f64>,
    query: usize,
    cands: &[usize],
    k: RefKernel,
    jitter: f64,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let a = cands
        .iter()
        .map(|&i| {
            cands
                .iter()
                .map(|&j| {
                    if i == j {
                        1.0 + jitter
                    } else {
                        ref_kernel(&row(x, i), &row(x, j), k)
                    }
                })
                .collect()
        })
        .collect();
    let b = cands
        .iter()
        .map(|&i| ref_kernel(&row(x, i), &row(x, query), k))
        .collect();
    (a, b)
}

/// Top-`k` most similar nodes by full sort, lower id first on ties.
pub fn ref_knn(x: &Array2<f64>, query: usize, k: usize, kern: RefKernel) -> Vec<usize> {
    let q = row(x, query);
    let mut all: Vec<(f64, usize)> = (0..x.nrows())
        .filter(|&j| j != query)
        .map(|j| (ref_kernel(&q, &row(x, j), kern), j))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Full LOO classification by brute force: per node, KNN by full sort,
/// exhaustive NNLS, thresholding, weighted vote, lowest class on ties.
pub fn ref_loo_correct(
    x: &Array2<f64>,
    labels: &[u16],
    classes: usize,
    k: usize,
    kern: RefKernel,
    jitter: f64,
    tol: f64,
) -> Vec<bool> {
    (0..x.nrows())
        .map(|i| {
            let cands = ref_knn(x, i, k, kern);
            assert!(!cands.contains(&i));
            let (a, b) = ref_system(x, i, &cands, kern, jitter);
            let theta = exhaustive_nnls(&a, &b);
            let mut votes = vec![0.0; classes];
            let mut total = 0.0;
            for (c, &w) in cands.iter().zip(&theta) {
                if w >= tol {
                    votes[labels[*c] as usize] += w;
                    total += w;
                }
            }
            if total == 0.0 {
                return false;
            }
            // shares within 1e-6 of the leader count as tied
            let shares: Vec<f64> = votes.iter().map(|v| v / total).collect();
            let mut best = 0;
            for c in 1..classes {
                if shares[c] > shares[best] + 1e-6 {
                    best = c;
                }
            }
            best == labels[i] as usize
        })
        .collect()
}

/// Literal transcription of the per-channel patience loop: returns, per
/// observation, (channels frozen at that step, any improvement, t*, all
/// frozen).
pub fn ref_controller(
    channels: usize,
    patience: u32,
    trace: &[(u64, BTreeMap<u32, f64>)],
) -> Vec<(Vec<u32>, bool, u64, bool)> {
    let mut q = vec![patience; channels];
    let mut r = vec![f64::INFINITY; channels];
    let mut t_star = 0;
    let mut out = Vec::new();
    for (t, risks) in trace {
        let mut frozen = Vec::new();
        let mut improved = false;
        for c in 0..channels {
            if q[c] > 0 {
                let risk = risks[&(c as u32)];
                if risk < r[c] {
                    r[c] = risk;
                    q[c] = patience;
                    t_star = *t;
                    improved = true;
                } else {
                    q[c] -= 1;
                }
                if q[c] == 0 {
                    frozen.push(c as u32);
                }
            }
        }
        out.push((frozen, improved, t_star, q.iter().all(|&v| v == 0)));
        if q.iter().all(|&v| v == 0) {
            break;
        }
    }
    out
}

pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.gen_range(-scale..scale))
}

/// Two isotropic Gaussian blobs at distance `separation`, unit spread.
pub fn blobs(rng: &mut ChaCha8Rng, n: usize, d: usize, separation: f64) -> (Array2<f64>, Vec<u16>) {
    let offset = separation / (d as f64).sqrt();
    let labels: Vec<u16> = (0..n).map(|i| (i % 2) as u16).collect();
    let x = Array2::from_shape_fn((n, d), |(i, _)| {
        let centre = if labels[i] == 0 { 0.0 } else { offset };
        centre + normal(rng)
    });
    (x, labels)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn snapshot_from(step: u64, labels: Vec<u16>, classes: u16, channels: Vec<Array2<f64>>) -> FeatureSnapshot {
    FeatureSnapshot::new(
        step,
        LabelSet::new(labels, classes).unwrap(),
        channels.into_iter().map(|m| m.mapv(|v| v as f32)).collect(),
    )
    .unwrap()
}

/// Prints a one-line verdict and returns whether it passed.
pub fn verdict(name: &str, ok: bool, detail: &str) -> bool {
    println!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}
