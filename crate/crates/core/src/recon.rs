//! Reconstruction: MLEM and non-negative FISTA-L1 for XLCT counts, and
//! parallel-beam filtered backprojection for the pencil-beam CT sinogram.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{ensure_non_negative, ensure_positive, Error, Result};
use crate::forward::{apply, apply_adjoint, SystemMatrix};
use crate::phantom::GridGeometry;

/// A reconstructed volume on the phantom grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconVolume {
    pub grid: GridGeometry,
    pub values: Vec<f64>,
    pub iterations_run: usize,
    /// MLEM: Poisson log-likelihood, starting with the initial estimate.
    /// FISTA: objective of each iterate. FBP: empty.
    pub objective_trace: Vec<f64>,
}

impl ReconVolume {
    pub fn zeros(grid: GridGeometry) -> Self {
        ReconVolume {
            grid,
            values: vec![0.0; grid.n_voxels()],
            iterations_run: 0,
            objective_trace: Vec::new(),
        }
    }

    /// Running minimum of the objective trace.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.objective_trace
            .iter()
            .map(|&v| {
                best = best.min(v);
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// L1 weight for FISTA.
    pub lambda: f64,
    /// Stop when the relative objective change falls below this; 0 runs all iterations.
    pub tolerance: f64,
    pub lipschitz_iters: usize,
    /// Added to MLEM forward projections before division.
    pub epsilon_floor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 200,
            lambda: 0.0,
            tolerance: 0.0,
            lipschitz_iters: 50,
            epsilon_floor: 1e-12,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::validation("solver.max_iters", "must be >= 1"));
        }
        if self.lipschitz_iters == 0 {
            return Err(Error::validation("solver.lipschitz_iters", "must be >= 1"));
        }
        ensure_non_negative("solver.lambda", self.lambda)?;
        ensure_non_negative("solver.tolerance", self.tolerance)?;
        ensure_positive("solver.epsilon_floor", self.epsilon_floor)
    }
}

fn check_grid(a: &SystemMatrix, grid: &GridGeometry) -> Result<()> {
    if grid.n_voxels() != a.n_cols() {
        return Err(Error::validation(
            "grid",
            format!("{} voxels do not match {} matrix columns", grid.n_voxels(), a.n_cols()),
        ));
    }
    Ok(())
}

fn check_data(a: &SystemMatrix, y: &[f64]) -> Result<()> {
    if y.len() != a.n_rows() {
        return Err(Error::validation(
            "y",
            format!("length {} does not match {} rows", y.len(), a.n_rows()),
        ));
    }
    if let Some((i, v)) = y.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::validation("y", format!("entry {i} is {v}; counts must be >= 0")));
    }
    Ok(())
}

/// Poisson log-likelihood `Σ y ln(ȳ + ε) − ȳ` (the constant `ln y!` dropped).
pub fn poisson_log_likelihood(y: &[f64], forward: &[f64], epsilon_floor: f64) -> f64 {
    y.iter()
        .zip(forward)
        .map(|(&y, &f)| {
            let ll = if y > 0.0 { y * (f + epsilon_floor).ln() } else { 0.0 };
            ll - f
        })
        .sum()
}

/// Maximum-likelihood expectation maximisation for Poisson data.
///
/// Voxels that no row sees stay at zero. The default start is 1 on every
/// other voxel.
pub fn mlem(
    a: &SystemMatrix,
    grid: &GridGeometry,
    y: &[f64],
    cfg: &SolverConfig,
    init: Option<&[f64]>,
) -> Result<ReconVolume> {
    cfg.validate()?;
    check_grid(a, grid)?;
    check_data(a, y)?;
    let sens = a.column_sums();
    let mut x: Vec<f64> = match init {
        Some(x0) => {
            if x0.len() != a.n_cols() {
                return Err(Error::validation("init", "length must match matrix columns"));
            }
            if x0.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::validation("init", "must be non-negative"));
            }
            x0.iter()
                .zip(&sens)
                .map(|(&v, &s)| if s > 0.0 { v } else { 0.0 })
                .collect()
        }
        None => sens.iter().map(|&s| if s > 0.0 { 1.0 } else { 0.0 }).collect(),
    };

    let mut forward = apply(a, &x)?;
    let mut trace = vec![poisson_log_likelihood(y, &forward, cfg.epsilon_floor)];
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        let ratio: Vec<f64> = y
            .iter()
            .zip(&forward)
            .map(|(&y, &f)| y / (f + cfg.epsilon_floor))
            .collect();
        let back = apply_adjoint(a, &ratio)?;
        x.iter_mut()
            .zip(sens.iter().zip(&back))
            .for_each(|(x, (&s, &b))| *x = if s > 0.0 { *x / s * b } else { 0.0 });
        forward = apply(a, &x)?;
        let ll = poisson_log_likelihood(y, &forward, cfg.epsilon_floor);
        let prev = *trace.last().expect("trace starts non-empty");
        trace.push(ll);
        iterations += 1;
        if cfg.tolerance > 0.0 && (ll - prev).abs() <= cfg.tolerance * prev.abs() {
            break;
        }
    }
    Ok(ReconVolume {
        grid: *grid,
        values: x,
        iterations_run: iterations,
        objective_trace: trace,
    })
}

/// Per-iteration Rayleigh-quotient estimates of ‖AᵀA‖₂ from a seeded start.
pub fn power_iteration_trace(a: &SystemMatrix, iters: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..a.n_cols()).map(|_| rng.random::<f64>() + 0.5).collect();
    let mut trace = Vec::with_capacity(iters);
    let mut norm = norm2(&v);
    if norm == 0.0 {
        return Ok(vec![0.0; iters]);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    for _ in 0..iters {
        let av = apply(a, &v)?;
        trace.push(dot(&av, &av));
        let w = apply_adjoint(a, &av)?;
        norm = norm2(&w);
        if norm == 0.0 {
            trace.resize(iters, 0.0);
            break;
        }
        v = w.into_iter().map(|x| x / norm).collect();
    }
    Ok(trace)
}

/// Safety factor applied to the power-iteration estimate.
pub const LIPSCHITZ_SAFETY: f64 = 1.05;

/// Estimate of the gradient Lipschitz constant ‖AᵀA‖₂, times `LIPSCHITZ_SAFETY`.
pub fn power_iteration_lipschitz(a: &SystemMatrix, iters: usize, seed: u64) -> Result<f64> {
    if iters == 0 {
        return Err(Error::validation("lipschitz_iters", "must be >= 1"));
    }
    let trace = power_iteration_trace(a, iters, seed)?;
    Ok(trace.into_iter().fold(0.0, f64::max) * LIPSCHITZ_SAFETY)
}

const POWER_SEED: u64 = 0x5eed;

/// `½‖Ax − y‖² + λ‖x‖₁`
pub fn l1_objective(a: &SystemMatrix, x: &[f64], y: &[f64], lambda: f64) -> Result<f64> {
    let ax = apply(a, x)?;
    let fit: f64 = ax.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok(0.5 * fit + lambda * x.iter().map(|v| v.abs()).sum::<f64>())
}

/// λ = `fraction · ‖Aᵀy‖∞`; `‖Aᵀy‖∞` is the smallest λ whose solution is zero.
pub fn lambda_heuristic(a: &SystemMatrix, y: &[f64], fraction: f64) -> Result<f64> {
    ensure_non_negative("lambda_fraction", fraction)?;
    let g = apply_adjoint(a, y)?;
    Ok(fraction * g.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Accelerated proximal gradient for `min ½‖Ax − y‖² + λ‖x‖₁` over `x ≥ 0`,
/// started from zero. Returns the iterate with the lowest objective.
pub fn fista_l1(
    a: &SystemMatrix,
    grid: &GridGeometry,
    y: &[f64],
    cfg: &SolverConfig,
) -> Result<ReconVolume> {
    cfg.validate()?;
    check_grid(a, grid)?;
    if y.len() != a.n_rows() {
        return Err(Error::validation("y", "length must match matrix rows"));
    }
    let lip = power_iteration_lipschitz(a, cfg.lipschitz_iters, POWER_SEED)?;
    if !(lip > 0.0) {
        return Err(Error::Degenerate("operator: Lipschitz estimate is zero".into()));
    }
    let step = 1.0 / lip;
    let shrink = cfg.lambda * step;

    let n = a.n_cols();
    let mut x = vec![0.0; n];
    let mut z = x.clone();
    let mut t = 1.0f64;
    let mut best = x.clone();
    let mut best_obj = l1_objective(a, &x, y, cfg.lambda)?;
    let mut trace = Vec::with_capacity(cfg.max_iters);
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        let residual: Vec<f64> = apply(a, &z)?.iter().zip(y).map(|(p, q)| p - q).collect();
        let grad = apply_adjoint(a, &residual)?;
        let x_new: Vec<f64> = z
            .iter()
            .zip(&grad)
            .map(|(&z, &g)| (z - step * g - shrink).max(0.0))
            .collect();
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_new;
        z = x_new
            .iter()
            .zip(&x)
            .map(|(&xn, &xo)| xn + momentum * (xn - xo))
            .collect();
        x = x_new;
        t = t_new;

        let obj = l1_objective(a, &x, y, cfg.lambda)?;
        let prev = trace.last().copied();
        trace.push(obj);
        iterations += 1;
        if obj < best_obj {
            best_obj = obj;
            best.copy_from_slice(&x);
        }
        if let Some(prev) = prev {
            if cfg.tolerance > 0.0 && (obj - prev).abs() <= cfg.tolerance * prev.abs() {
                break;
            }
        }
    }
    Ok(ReconVolume {
        grid: *grid,
        values: best,
        iterations_run: iterations,
        objective_trace: trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FbpFilter {
    Ramp,
    RampHann,
}

/// Sampling of a parallel-beam sinogram: rows are angles, columns lateral positions.
#[derive(Debug, Clone, PartialEq)]
pub struct FbpGeometry {
    pub angles: Vec<f64>,
    pub s_positions: Vec<f64>,
}

impl FbpGeometry {
    fn validate(&self) -> Result<f64> {
        let na = self.angles.len();
        let ns = self.s_positions.len();
        if na == 0 || ns < 2 {
            return Err(Error::validation("sinogram", "need >= 1 angle and >= 2 lateral samples"));
        }
        let dtheta = PI / na as f64;
        for (i, &a) in self.angles.iter().enumerate() {
            let expect = self.angles[0] + i as f64 * dtheta;
            if (a - expect).abs() > 1e-9 || self.angles[0] < -1e-12 || self.angles[0] >= dtheta {
                return Err(Error::validation(
                    "sinogram.angles",
                    "angles must be uniform over [0, π)",
                ));
            }
        }
        let ds = self.s_positions[1] - self.s_positions[0];
        if !(ds > 0.0) {
            return Err(Error::validation("sinogram.s_positions", "must be increasing"));
        }
        for (i, &s) in self.s_positions.iter().enumerate() {
            let expect = self.s_positions[0] + i as f64 * ds;
            if (s - expect).abs() > 1e-6 * ds {
                return Err(Error::validation(
                    "sinogram.s_positions",
                    "lateral sampling must be uniform",
                ));
            }
        }
        Ok(ds)
    }
}

/// Ramp (optionally Hann-apodised) filter on a padded grid of `n` frequencies,
/// in cycles per sample, capped at Nyquist.
fn fbp_filter_response(n: usize, filter: FbpFilter) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let f = (k.min(n - k) as f64 / n as f64).min(0.5);
            match filter {
                FbpFilter::Ramp => f,
                FbpFilter::RampHann => f * 0.5 * (1.0 + (2.0 * PI * f).cos()),
            }
        })
        .collect()
}

/// Filtered backprojection onto a single-layer grid.
///
/// Each projection is zero-padded to the next power of two at least twice its
/// length, filtered in frequency, and backprojected with linear interpolation.
/// The result is scaled by π/n_angles and 1/Δs.
pub fn fbp_parallel(
    sinogram: &[f64],
    geometry: &FbpGeometry,
    grid: &GridGeometry,
    filter: FbpFilter,
) -> Result<ReconVolume> {
    let ds = geometry.validate()?;
    let na = geometry.angles.len();
    let ns = geometry.s_positions.len();
    if sinogram.len() != na * ns {
        return Err(Error::validation(
            "sinogram",
            format!("expected {} values, got {}", na * ns, sinogram.len()),
        ));
    }
    if grid.dims[2] != 1 {
        return Err(Error::validation("grid", "filtered backprojection needs a single-layer grid"));
    }

    let padded = (2 * ns).next_power_of_two();
    let response = fbp_filter_response(padded, filter);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(padded);
    let inv = planner.plan_fft_inverse(padded);
    let norm = 1.0 / (padded as f64 * ds);
    let filtered: Vec<Vec<f64>> = sinogram
        .par_chunks(ns)
        .map(|proj| {
            let mut buf: Vec<Complex<f64>> = proj
                .iter()
                .map(|&p| Complex::new(p, 0.0))
                .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
                .take(padded)
                .collect();
            fwd.process(&mut buf);
            buf.iter_mut().zip(&response).for_each(|(c, &h)| *c *= h);
            inv.process(&mut buf);
            buf[..ns].iter().map(|c| c.re * norm).collect()
        })
        .collect();

    let trig: Vec<(f64, f64)> = geometry.angles.iter().map(|t| t.sin_cos()).collect();
    let s0 = geometry.s_positions[0];
    let scale = PI / na as f64;
    let [nx, ny, _] = grid.dims;
    let values: Vec<f64> = (0..ny)
        .into_par_iter()
        .flat_map_iter(|j| {
            let y = grid.center_coord(1, j);
            let filtered = &filtered;
            let trig = &trig;
            (0..nx).map(move |i| {
                let x = grid.center_coord(0, i);
                let mut acc = 0.0;
                for (q, &(sin, cos)) in filtered.iter().zip(trig) {
                    let u = (-sin * x + cos * y - s0) / ds;
                    let k = u.floor();
                    if k < 0.0 || k > (ns - 1) as f64 {
                        continue;
                    }
                    let k0 = k as usize;
                    let frac = u - k;
                    acc += if k0 + 1 < ns {
                        q[k0] * (1.0 - frac) + q[k0 + 1] * frac
                    } else {
                        q[k0] * (1.0 - frac)
                    };
                }
                acc * scale
            })
        })
        .collect();
    Ok(ReconVolume {
        grid: *grid,
        values,
        iterations_run: 0,
        objective_trace: Vec::new(),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
