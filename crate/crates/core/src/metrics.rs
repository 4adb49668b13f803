//! Image-quality figures (FWHM, CNR, Dice) and scan-time estimates.

use crate::error::{Error, Result};
use crate::geometry::ScanProtocol;
use crate::phantom::GridGeometry;
use crate::recon::ReconVolume;

/// Samples along a straight segment through an image.
#[derive(Debug, Clone, PartialEq)]
pub struct LineProfile {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub n_samples: usize,
    pub values: Vec<f64>,
}

impl LineProfile {
    /// Samples `image` at `n_samples` evenly spaced points from `start` to `end`
    /// (both included) by trilinear interpolation between voxel centres.
    pub fn sample(image: &ReconVolume, start: [f64; 3], end: [f64; 3], n_samples: usize) -> Result<Self> {
        if n_samples < 3 {
            return Err(Error::validation("n_samples", "must be >= 3"));
        }
        let values = (0..n_samples)
            .map(|k| {
                let f = k as f64 / (n_samples - 1) as f64;
                let p = [
                    start[0] + f * (end[0] - start[0]),
                    start[1] + f * (end[1] - start[1]),
                    start[2] + f * (end[2] - start[2]),
                ];
                interpolate(&image.grid, &image.values, p)
            })
            .collect();
        Ok(LineProfile {
            start,
            end,
            n_samples,
            values,
        })
    }

    pub fn spacing(&self) -> f64 {
        let d = (0..3)
            .map(|k| (self.end[k] - self.start[k]).powi(2))
            .sum::<f64>()
            .sqrt();
        d / (self.n_samples - 1) as f64
    }
}

/// Trilinear interpolation between voxel centres; coordinates beyond the
/// outermost centres are clamped, points outside the grid give 0.
pub fn interpolate(grid: &GridGeometry, values: &[f64], p: [f64; 3]) -> f64 {
    let mut lo = [0usize; 3];
    let mut w = [0.0f64; 3];
    let hi_corner = grid.max_corner();
    for axis in 0..3 {
        if p[axis] < grid.origin[axis] || p[axis] > hi_corner[axis] {
            return 0.0;
        }
        let n = grid.dims[axis];
        let u = ((p[axis] - grid.origin[axis]) / grid.voxel_size - 0.5).clamp(0.0, (n - 1) as f64);
        let i = (u.floor() as usize).min(n.saturating_sub(2));
        lo[axis] = i;
        w[axis] = if n == 1 { 0.0 } else { u - i as f64 };
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut weight = 1.0;
        let mut idx = [0usize; 3];
        for axis in 0..3 {
            let up = (corner >> axis) & 1 == 1;
            if up && grid.dims[axis] == 1 {
                weight = 0.0;
                break;
            }
            idx[axis] = lo[axis] + up as usize;
            weight *= if up { w[axis] } else { 1.0 - w[axis] };
        }
        if weight != 0.0 {
            acc += weight * values[grid.index(idx[0], idx[1], idx[2])];
        }
    }
    acc
}

/// Full width at half of (peak − baseline) of uniformly spaced samples, with
/// baseline = min of the two end samples and crossings linearly interpolated.
pub fn profile_fwhm(values: &[f64], spacing: f64) -> Result<f64> {
    if values.len() < 3 {
        return Err(Error::validation("profile", "need at least 3 samples"));
    }
    let (peak_idx, &peak) = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let baseline = values[0].min(values[values.len() - 1]);
    if !(peak > baseline) {
        return Err(Error::Metric("no peak above baseline".into()));
    }
    let half = baseline + 0.5 * (peak - baseline);

    let left = (0..peak_idx).rev().find(|&i| values[i] < half);
    let right = (peak_idx + 1..values.len()).find(|&i| values[i] < half);
    let (Some(l), Some(r)) = (left, right) else {
        return Err(Error::Metric("profile truncated: half level not crossed on both sides".into()));
    };
    // crossing between l and l + 1, and between r - 1 and r
    let xl = l as f64 + (half - values[l]) / (values[l + 1] - values[l]);
    let xr = (r - 1) as f64 + (values[r - 1] - half) / (values[r - 1] - values[r]);
    Ok((xr - xl) * spacing)
}

pub fn line_profile_fwhm(image: &ReconVolume, profile: &LineProfile) -> Result<f64> {
    let sampled = LineProfile::sample(image, profile.start, profile.end, profile.n_samples)?;
    profile_fwhm(&sampled.values, sampled.spacing())
}

fn masked_stats(values: &[f64], mask: &[bool]) -> (usize, f64, f64) {
    let (n, sum) = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0usize, 0.0), |(n, s), (v, _)| (n + 1, s + v));
    let mean = sum / n.max(1) as f64;
    let var = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| (v - mean) * (v - mean))
        .sum::<f64>()
        / n.max(1) as f64;
    (n, mean, var.sqrt())
}

/// Contrast-to-noise ratio `(mean_t − mean_b) / std_b` with population std.
pub fn cnr(image: &[f64], target_mask: &[bool], background_mask: &[bool]) -> Result<f64> {
    if target_mask.len() != image.len() || background_mask.len() != image.len() {
        return Err(Error::validation("mask", "masks must match the image size"));
    }
    if target_mask.iter().zip(background_mask).any(|(&t, &b)| t && b) {
        return Err(Error::validation("mask", "target and background masks overlap"));
    }
    let (nt, mt, _) = masked_stats(image, target_mask);
    let (nb, mb, sb) = masked_stats(image, background_mask);
    if nt < 2 || nb < 2 {
        return Err(Error::validation("mask", "each mask needs at least 2 voxels"));
    }
    if !(sb > 0.0) {
        return Err(Error::Degenerate("background: zero standard deviation".into()));
    }
    Ok((mt - mb) / sb)
}

/// Dice overlap of `{image ≥ threshold_fraction · max}` with `truth`.
pub fn dice(image: &[f64], truth: &[bool], threshold_fraction: f64) -> Result<f64> {
    if !(threshold_fraction > 0.0 && threshold_fraction < 1.0) {
        return Err(Error::validation("threshold_fraction", "must lie in (0, 1)"));
    }
    if truth.len() != image.len() {
        return Err(Error::validation("mask", "truth mask must match the image size"));
    }
    let max = image.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::Metric("empty segmentation: image has no positive values".into()));
    }
    let seg: Vec<bool> = image.iter().map(|&v| v >= threshold_fraction * max).collect();
    Ok(dice_masks(&seg, truth))
}

/// Dice coefficient of two binary masks; two empty masks score 1.
pub fn dice_masks(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    let total = a.iter().filter(|&&x| x).count() + b.iter().filter(|&&x| x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Fly-scan timing: each line takes `fov / stage_speed` plus a lumped turnaround.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingModel {
    pub per_line: f64,
    pub turnaround_time: f64,
    pub per_slice: f64,
    pub total: f64,
}

pub fn estimate_scan_time(protocol: &ScanProtocol) -> TimingModel {
    let per_line = protocol.fov / protocol.stage_speed;
    let per_slice = protocol.n_angles() as f64 * (per_line + protocol.turnaround_time);
    TimingModel {
        per_line,
        turnaround_time: protocol.turnaround_time,
        per_slice,
        total: per_slice * protocol.slices.len() as f64,
    }
}

/// Step-and-shoot comparison: at every bin position the stage settles, then
/// counts for `dwell_time`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepScanTiming {
    pub settle_time: f64,
    pub dwell_time: f64,
}

pub fn estimate_step_scan_time(protocol: &ScanProtocol, step: &StepScanTiming) -> TimingModel {
    let per_line = protocol.bins_per_line() as f64 * (step.settle_time + step.dwell_time);
    let per_slice = protocol.n_angles() as f64 * (per_line + protocol.turnaround_time);
    TimingModel {
        per_line,
        turnaround_time: protocol.turnaround_time,
        per_slice,
        total: per_slice * protocol.slices.len() as f64,
    }
}

/// How many times faster the fly scan is than the step scan, per slice.
pub fn fly_scan_speedup(protocol: &ScanProtocol, step: &StepScanTiming) -> f64 {
    estimate_step_scan_time(protocol, step).per_slice / estimate_scan_time(protocol).per_slice
}
