//! Physics kernels: exact voxel traversal, X-ray attenuation along the
//! pencil beam, Gaussian focal-beam fluence, and the continuous-wave diffusion
//! Green's function that carries luminescence to the surface detectors.
//!
//! The optical model is the infinite-medium diffusion kernel; surface boundary
//! conditions are not modelled.

use std::f64::consts::PI;

use crate::error::{ensure_positive, Error, Result};
use crate::geometry::{beam_ray, BeamPose, DetectorSet, Ray};
use crate::phantom::{GridGeometry, VoxelPhantom};

/// Voxel/length pairs in traversal order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RayTraceResult {
    pub entries: Vec<(usize, f64)>,
}

impl RayTraceResult {
    pub fn total_length(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One traversed voxel with its entry and exit distance along the ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSegment {
    pub voxel: usize,
    pub t_start: f64,
    pub t_end: f64,
}

/// Parametric interval `[alpha_min, alpha_max]` where `origin + alpha * dir`
/// is inside the grid box, or `None` for a miss. Only `alpha >= 0` counts.
fn clip_to_grid(grid: &GridGeometry, ray: &Ray) -> Option<(f64, f64)> {
    let lo = grid.origin;
    let hi = grid.max_corner();
    let mut a_min = 0.0f64;
    let mut a_max = f64::INFINITY;
    for axis in 0..3 {
        let o = ray.origin[axis];
        let d = ray.direction[axis];
        if d == 0.0 {
            if o < lo[axis] || o >= hi[axis] {
                return None;
            }
        } else {
            let a0 = (lo[axis] - o) / d;
            let a1 = (hi[axis] - o) / d;
            a_min = a_min.max(a0.min(a1));
            a_max = a_max.min(a0.max(a1));
        }
    }
    (a_max > a_min).then_some((a_min, a_max))
}

/// Siddon traversal returning segments with distances measured in mm from the
/// ray origin.
pub fn trace_segments(grid: &GridGeometry, ray: &Ray) -> Result<Vec<TraceSegment>> {
    let norm = ray.direction.iter().map(|d| d * d).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) || ray.origin.iter().any(|o| !o.is_finite()) {
        return Err(Error::validation("ray.direction", "must be finite and non-zero"));
    }
    let Some((a_min, a_max)) = clip_to_grid(grid, ray) else {
        return Ok(Vec::new());
    };

    let mut alphas = Vec::new();
    for axis in 0..3 {
        let d = ray.direction[axis];
        if d == 0.0 {
            continue;
        }
        for m in 0..=grid.dims[axis] {
            let plane = grid.origin[axis] + m as f64 * grid.voxel_size;
            let a = (plane - ray.origin[axis]) / d;
            if a > a_min && a < a_max {
                alphas.push(a);
            }
        }
    }
    alphas.sort_by(f64::total_cmp);
    alphas.push(a_max);

    // crossings closer than this are the same corner seen by two axes
    let merge_tol = 1e-10 * grid.voxel_size / norm;
    let locate = |a0: f64, a1: f64| -> usize {
        let mid = ray.at(0.5 * (a0 + a1));
        let mut ijk = [0usize; 3];
        for axis in 0..3 {
            let f = ((mid[axis] - grid.origin[axis]) / grid.voxel_size).floor();
            ijk[axis] = f.clamp(0.0, (grid.dims[axis] - 1) as f64) as usize;
        }
        grid.index(ijk[0], ijk[1], ijk[2])
    };

    let mut segments: Vec<TraceSegment> = Vec::new();
    let mut prev = a_min;
    let last = alphas.len() - 1;
    for (n, &a) in alphas.iter().enumerate() {
        if a - prev <= merge_tol {
            if n == last {
                if let Some(s) = segments.last_mut() {
                    s.t_end = a * norm;
                    break;
                }
            } else {
                continue;
            }
        }
        let voxel = locate(prev, a);
        match segments.last_mut() {
            Some(s) if s.voxel == voxel => s.t_end = a * norm,
            _ => segments.push(TraceSegment {
                voxel,
                t_start: prev * norm,
                t_end: a * norm,
            }),
        }
        prev = a;
    }
    Ok(segments)
}

/// Exact voxel intersection lengths of `ray` with the grid; empty on a miss.
pub fn siddon_trace(grid: &GridGeometry, ray: &Ray) -> Result<RayTraceResult> {
    Ok(RayTraceResult {
        entries: trace_segments(grid, ray)?
            .into_iter()
            .map(|s| (s.voxel, s.t_end - s.t_start))
            .collect(),
    })
}

/// Σ μx·length along the ray; the transmitted fraction is `exp(-result)`.
pub fn xray_line_integral(phantom: &VoxelPhantom, ray: &Ray) -> Result<f64> {
    let trace = siddon_trace(&phantom.grid, ray)?;
    Ok(trace
        .entries
        .iter()
        .map(|&(v, len)| phantom.mu_x_at(v) * len)
        .sum())
}

/// Cumulative attenuation along a traced central ray.
struct AttenuationProfile {
    segments: Vec<TraceSegment>,
    mu: Vec<f64>,
    /// attenuation accumulated before each segment
    before: Vec<f64>,
}

impl AttenuationProfile {
    fn new(phantom: &VoxelPhantom, ray: &Ray) -> Result<Self> {
        let segments = trace_segments(&phantom.grid, ray)?;
        let mu: Vec<f64> = segments.iter().map(|s| phantom.mu_x_at(s.voxel)).collect();
        let mut before = Vec::with_capacity(segments.len());
        let mut acc = 0.0;
        for (s, m) in segments.iter().zip(&mu) {
            before.push(acc);
            acc += m * (s.t_end - s.t_start);
        }
        Ok(AttenuationProfile {
            segments,
            mu,
            before,
        })
    }

    /// Attenuation from grid entry up to distance `t` along the ray.
    fn upto(&self, t: f64) -> f64 {
        let k = self.segments.partition_point(|s| s.t_end <= t);
        if k == self.segments.len() {
            return match self.segments.last() {
                Some(s) => self.before[k - 1] + self.mu[k - 1] * (s.t_end - s.t_start),
                None => 0.0,
            };
        }
        let s = &self.segments[k];
        if t <= s.t_start {
            return self.before[k];
        }
        self.before[k] + self.mu[k] * (t - s.t_start)
    }
}

/// Sparse X-ray fluence, sorted by voxel index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FluenceDeposit {
    pub entries: Vec<(usize, f64)>,
}

/// Fluence of a focused pencil beam at every voxel centre within 3σ of its
/// central line: `i0 · exp(−d⊥²/2σ²) · exp(−A(t))`, with A the attenuation along
/// the central ray up to the voxel's axial position.
pub fn beam_fluence(phantom: &VoxelPhantom, pose: &BeamPose, i0: f64) -> Result<FluenceDeposit> {
    pose.validate()?;
    ensure_positive("i0", i0)?;
    let grid = &phantom.grid;
    let ray = beam_ray(pose);
    let atten = AttenuationProfile::new(phantom, &ray)?;

    let sigma = pose.sigma();
    let reach = 3.0 * sigma;
    let reach2 = reach * reach;
    let inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    let (sin, cos) = pose.theta.sin_cos();
    let [nx, ny, nz] = grid.dims;
    let vs = grid.voxel_size;

    let mut entries = Vec::new();
    for k in 0..nz {
        let dz = grid.center_coord(2, k) - pose.z;
        if dz.abs() > reach {
            continue;
        }
        let r = (reach2 - dz * dz).sqrt();
        for j in 0..ny {
            let y = grid.center_coord(1, j);
            // signed in-plane distance is −sin·x + c0
            let c0 = cos * y - pose.s;
            let (i_lo, i_hi) = if sin.abs() < 1e-12 {
                if c0.abs() > r {
                    continue;
                }
                (0, nx - 1)
            } else {
                let xa = (c0 - r) / sin;
                let xb = (c0 + r) / sin;
                let lo = ((xa.min(xb) - grid.origin[0]) / vs - 0.5).floor() - 1.0;
                let hi = ((xa.max(xb) - grid.origin[0]) / vs - 0.5).ceil() + 1.0;
                if hi < 0.0 || lo > (nx - 1) as f64 {
                    continue;
                }
                (
                    lo.max(0.0) as usize,
                    hi.min((nx - 1) as f64) as usize,
                )
            };
            for i in i_lo..=i_hi {
                let x = grid.center_coord(0, i);
                let d = -sin * x + c0;
                let d2 = d * d + dz * dz;
                if d2 > reach2 {
                    continue;
                }
                let t = (x - ray.origin[0]) * cos + (y - ray.origin[1]) * sin;
                let f = i0 * (-d2 * inv_two_sigma2).exp() * (-atten.upto(t)).exp();
                entries.push((grid.index(i, j, k), f));
            }
        }
    }
    Ok(FluenceDeposit { entries })
}

/// Diffusion-approximation constants of a homogeneous turbid medium.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpticalBackground {
    pub mu_a: f64,
    pub mu_s_prime: f64,
    /// Diffusion coefficient, mm.
    pub d: f64,
    /// Effective attenuation, mm⁻¹.
    pub mu_eff: f64,
}

pub fn diffusion_params(mu_a: f64, mu_s_prime: f64) -> Result<OpticalBackground> {
    ensure_positive("mu_a", mu_a)?;
    ensure_positive("mu_s_prime", mu_s_prime)?;
    let mu_t = mu_a + mu_s_prime;
    Ok(OpticalBackground {
        mu_a,
        mu_s_prime,
        d: 1.0 / (3.0 * mu_t),
        mu_eff: (3.0 * mu_a * mu_t).sqrt(),
    })
}

/// Singularity clamp for detector weights: half the voxel space diagonal.
pub fn clamp_distance(voxel_size: f64) -> f64 {
    0.5 * 3f64.sqrt() * voxel_size
}

/// CW Green's function `exp(−μeff r) / (4π D r)` with `r` clamped below at `r_min`.
pub fn greens_cw(r_src: [f64; 3], r_det: [f64; 3], optical: &OpticalBackground, r_min: f64) -> f64 {
    let dx = r_src[0] - r_det[0];
    let dy = r_src[1] - r_det[1];
    let dz = r_src[2] - r_det[2];
    let r = (dx * dx + dy * dy + dz * dz).sqrt().max(r_min);
    (-optical.mu_eff * r).exp() / (4.0 * PI * optical.d * r)
}

pub fn detector_weight(
    voxel_center: [f64; 3],
    detector: usize,
    detectors: &DetectorSet,
    optical: &OpticalBackground,
    r_min: f64,
) -> Result<f64> {
    let (Some(pos), Some(&sens)) = (
        detectors.positions.get(detector),
        detectors.sensitivity.get(detector),
    ) else {
        return Err(Error::Range {
            index: detector,
            len: detectors.len(),
        });
    };
    Ok(sens * greens_cw(voxel_center, *pos, optical, r_min))
}
