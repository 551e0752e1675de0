//! Active-set solver for the non-negative quadratic program
//!
//! ```text
//!   minimize  1/2 x' A x - x' b   subject to  x >= 0
//! ```
//!
//! with `A` symmetric positive (semi)definite. This is the Lawson-Hanson
//! NNLS iteration written directly on the normal equations, which is the
//! form the kernel-space regression produces.

use ndarray::{Array1, ArrayView1, ArrayView2};

/// Result of [`solve`].
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Array1<f64>,
    pub objective: f64,
    pub iterations: usize,
}

/// Value of `1/2 x' A x - x' b`.
pub fn objective(a: ArrayView2<f64>, b: ArrayView1<f64>, x: ArrayView1<f64>) -> f64 {
    0.5 * x.dot(&a.dot(&x)) - x.dot(&b)
}

pub fn solve(a: ArrayView2<f64>, b: ArrayView1<f64>) -> QpSolution {
    let n = b.len();
    assert_eq!(a.dim(), (n, n), "system matrix must be {n}x{n}");

    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let dual_tol = 1e-13 * scale;

    let mut x = Array1::<f64>::zeros(n);
    let mut passive = vec![false; n];
    // columns rejected since the last successful step (dependent or unstable)
    let mut rejected = vec![false; n];
    let max_outer = 3 * n + 10;
    let mut iterations = 0;

    while iterations < max_outer {
        iterations += 1;
        let w = &b - &a.dot(&x);
        let entering =
            (0..n)
                .filter(|&j| !passive[j] && !rejected[j] && w[j] > dual_tol)
                .fold(None, |best: Option<usize>, j| match best {
                    Some(k) if w[k] >= w[j] => Some(k),
                    _ => Some(j),
                });
        let Some(j) = entering else { break };
        passive[j] = true;

        let mut first = true;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let z = match solve_spd_subsystem(a, b, &idx) {
                Some(z) => z,
                None => {
                    // only the column just added can make the subsystem singular
                    passive[j] = false;
                    rejected[j] = true;
                    break;
                }
            };
            if first {
                let zj = z[idx.iter().position(|&i| i == j).unwrap()];
                if zj <= 0.0 {
                    passive[j] = false;
                    rejected[j] = true;
                    break;
                }
            }
            if z.iter().all(|&v| v > 0.0) {
                for (&i, &v) in idx.iter().zip(z.iter()) {
                    x[i] = v;
                }
                rejected.iter_mut().for_each(|r| *r = false);
                break;
            }
            first = false;
            // step back towards feasibility
            let mut alpha = f64::INFINITY;
            for (&i, &zi) in idx.iter().zip(z.iter()) {
                if zi <= 0.0 {
                    let denom = x[i] - zi;
                    let t = if denom > 0.0 { x[i] / denom } else { 0.0 };
                    alpha = alpha.min(t);
                }
            }
            for (&i, &zi) in idx.iter().zip(z.iter()) {
                x[i] += alpha * (zi - x[i]);
                if x[i] <= 1e-300 || (zi <= 0.0 && x[i] <= 1e-15 * scale) {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }

    let objective = objective(a, b, x.view());
    QpSolution {
        x,
        objective,
        iterations,
    }
}

/// Solves `A[idx, idx] z = b[idx]` by Cholesky. Returns `None` when the
/// principal submatrix is not numerically positive definite.
fn solve_spd_subsystem(a: ArrayView2<f64>, b: ArrayView1<f64>, idx: &[usize]) -> Option<Vec<f64>> {
    let m = idx.len();
    let mut l = vec![0.0; m * m];
    let max_diag = idx.iter().fold(0.0f64, |acc, &i| acc.max(a[[i, i]].abs()));
    let pivot_floor = 1e-14 * max_diag.max(f64::MIN_POSITIVE);
    for r in 0..m {
        for c in 0..=r {
            let mut s = a[[idx[r], idx[c]]];
            for k in 0..c {
                s -= l[r * m + k] * l[c * m + k];
            }
            if r == c {
                if !(s > pivot_floor) {
                    return None;
                }
                l[r * m + r] = s.sqrt();
            } else {
                l[r * m + c] = s / l[c * m + c];
            }
        }
    }
    let mut y = vec![0.0; m];
    for r in 0..m {
        let mut s = b[idx[r]];
        for k in 0..r {
            s -= l[r * m + k] * y[k];
        }
        y[r] = s / l[r * m + r];
    }
    let mut z = vec![0.0; m];
    for r in (0..m).rev() {
        let mut s = y[r];
        for k in (r + 1)..m {
            s -= l[k * m + r] * z[k];
        }
        z[r] = s / l[r * m + r];
    }
    z.iter().all(|v| v.is_finite()).then_some(z)
}
