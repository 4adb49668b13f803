#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xlct::forward::SystemMatrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense non-negative matrix with entries in [0, 1) and roughly `density` non-zero.
pub fn random_dense(rows: usize, cols: usize, density: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..rows * cols)
        .map(|_| if r.random::<f64>() < density { r.random::<f64>() } else { 0.0 })
        .collect()
}

pub fn random_matrix(rows: usize, cols: usize, density: f64, seed: u64) -> SystemMatrix {
    SystemMatrix::from_dense(rows, cols, &random_dense(rows, cols, density, seed)).unwrap()
}

pub fn to_nalgebra(a: &SystemMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.n_rows(), a.n_cols(), &a.to_dense())
}

/// Non-negative least squares by exhaustive search over supports: the
/// minimiser is the unconstrained least-squares solution on its own support.
pub fn nnls_brute_force(a: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    let n = a.ncols();
    assert!(n <= 12, "brute force is exponential");
    let y = DVector::from_column_slice(y);
    let mut best = (y.norm_squared(), vec![0.0; n]);
    for mask in 1u32..(1 << n) {
        let cols: Vec<usize> = (0..n).filter(|j| mask & (1 << j) != 0).collect();
        let sub = a.select_columns(&cols);
        let Some(x) = sub.clone().svd(true, true).solve(&y, 1e-14).ok() else {
            continue;
        };
        if x.iter().any(|&v| v < 0.0) {
            continue;
        }
        let r = (&sub * &x - &y).norm_squared();
        if r < best.0 {
            let mut full = vec![0.0; n];
            for (k, &j) in cols.iter().enumerate() {
                full[j] = x[k];
            }
            best = (r, full);
        }
    }
    best.1
}

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Radon transform of a uniform disk of attenuation `mu`, radius `r`, centred at `(cx, cy)`.
pub fn disk_projection(mu: f64, r: f64, cx: f64, cy: f64, theta: f64, s: f64) -> f64 {
    let s0 = -theta.sin() * cx + theta.cos() * cy;
    let d = s - s0;
    if d.abs() >= r {
        0.0
    } else {
        2.0 * mu * (r * r - d * d).sqrt()
    }
}
