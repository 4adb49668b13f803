//! Rotary-gantry fly-scan geometry.
//!
//! Conventions used throughout the crate: a beam at gantry angle `theta`
//! travels along `u = (cos θ, sin θ, 0)`; its lateral offset `s` is measured
//! along `n = (−sin θ, cos θ, 0)`; the beam lies in the plane `z = const`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_non_negative, ensure_positive, Error, Result};

/// Raw protocol settings as they appear in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub n_angles: usize,
    /// Explicit projection angles in radians; uniform over [0, π) when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub angles: Option<Vec<f64>>,
    /// Lateral scan length, mm.
    pub fov: f64,
    /// mm/s
    pub stage_speed: f64,
    /// Gated counter window, s.
    pub bin_time: f64,
    /// Slice heights, mm.
    pub slices: Vec<f64>,
    /// mm
    pub beam_fwhm: f64,
    pub quadrature_q: usize,
    /// Per-line overhead, s.
    pub turnaround_time: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            n_angles: 6,
            angles: None,
            fov: 30.0,
            stage_speed: 5.0,
            bin_time: 0.02,
            slices: vec![0.0],
            beam_fwhm: 0.15,
            quadrature_q: 5,
            turnaround_time: 1.17,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanProtocol {
    pub angles: Vec<f64>,
    pub fov: f64,
    pub stage_speed: f64,
    pub bin_time: f64,
    pub step_size: f64,
    pub slices: Vec<f64>,
    pub beam_fwhm: f64,
    pub quadrature_q: usize,
    pub turnaround_time: f64,
}

impl ScanProtocol {
    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    /// Lateral bins per (slice, angle) line.
    pub fn bins_per_line(&self) -> usize {
        (self.fov / self.step_size - 1e-9).ceil().max(1.0) as usize
    }

    pub fn n_bins(&self) -> usize {
        self.slices.len() * self.angles.len() * self.bins_per_line()
    }

    /// Returns a copy with a different quadrature order.
    pub fn with_quadrature(&self, q: usize) -> Result<Self> {
        if q == 0 {
            return Err(Error::validation("protocol.quadrature_q", "must be >= 1"));
        }
        let mut out = self.clone();
        out.quadrature_q = q;
        Ok(out)
    }
}

/// Validates raw settings and derives angles and step size.
pub fn make_protocol(cfg: &ProtocolConfig) -> Result<ScanProtocol> {
    let angles = match &cfg.angles {
        Some(a) => {
            if a.is_empty() {
                return Err(Error::validation("protocol.angles", "must not be empty"));
            }
            if a.iter().any(|t| !t.is_finite()) {
                return Err(Error::validation("protocol.angles", "must be finite"));
            }
            if cfg.n_angles != a.len() {
                return Err(Error::validation(
                    "protocol.n_angles",
                    format!("{} does not match {} explicit angles", cfg.n_angles, a.len()),
                ));
            }
            a.clone()
        }
        None => {
            if cfg.n_angles == 0 {
                return Err(Error::validation("protocol.n_angles", "must be >= 1"));
            }
            (0..cfg.n_angles)
                .map(|i| PI * i as f64 / cfg.n_angles as f64)
                .collect()
        }
    };
    ensure_positive("protocol.fov", cfg.fov)?;
    ensure_positive("protocol.stage_speed", cfg.stage_speed)?;
    ensure_positive("protocol.bin_time", cfg.bin_time)?;
    ensure_positive("protocol.beam_fwhm", cfg.beam_fwhm)?;
    ensure_non_negative("protocol.turnaround_time", cfg.turnaround_time)?;
    if cfg.quadrature_q == 0 {
        return Err(Error::validation("protocol.quadrature_q", "must be >= 1"));
    }
    if cfg.slices.is_empty() {
        return Err(Error::validation("protocol.slices", "at least one slice is required"));
    }
    if cfg.slices.iter().any(|z| !z.is_finite()) {
        return Err(Error::validation("protocol.slices", "must be finite"));
    }
    let step_size = cfg.stage_speed * cfg.bin_time;
    if step_size > cfg.fov {
        return Err(Error::validation(
            "protocol.step_size",
            format!("step {step_size} mm exceeds fov {} mm", cfg.fov),
        ));
    }
    Ok(ScanProtocol {
        angles,
        fov: cfg.fov,
        stage_speed: cfg.stage_speed,
        bin_time: cfg.bin_time,
        step_size,
        slices: cfg.slices.clone(),
        beam_fwhm: cfg.beam_fwhm,
        quadrature_q: cfg.quadrature_q,
        turnaround_time: cfg.turnaround_time,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamPose {
    pub theta: f64,
    pub s: f64,
    pub z: f64,
    pub fwhm: f64,
}

impl BeamPose {
    pub fn validate(&self) -> Result<()> {
        ensure_positive("pose.fwhm", self.fwhm)?;
        if !(self.theta.is_finite() && self.s.is_finite() && self.z.is_finite()) {
            return Err(Error::validation("pose", "theta, s and z must be finite"));
        }
        Ok(())
    }

    /// Gaussian σ of the transverse profile.
    pub fn sigma(&self) -> f64 {
        self.fwhm / FWHM_PER_SIGMA
    }
}

/// 2·sqrt(2·ln 2), rounded to the customary four decimals.
pub const FWHM_PER_SIGMA: f64 = 2.3548;

/// One gate window of the continuous lateral sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlyBin {
    /// (slice, angle, lateral bin)
    pub index: (usize, usize, usize),
    pub s_start: f64,
    pub s_end: f64,
    pub z: f64,
    pub theta: f64,
}

impl FlyBin {
    pub fn center(&self) -> f64 {
        0.5 * (self.s_start + self.s_end)
    }

    pub fn width(&self) -> f64 {
        self.s_end - self.s_start
    }

    pub fn center_pose(&self, fwhm: f64) -> BeamPose {
        BeamPose {
            theta: self.theta,
            s: self.center(),
            z: self.z,
            fwhm,
        }
    }
}

/// All gate bins, slice-major, then angle, then lateral position.
pub fn enumerate_fly_bins(protocol: &ScanProtocol) -> Vec<FlyBin> {
    let per_line = protocol.bins_per_line();
    let lo = -0.5 * protocol.fov;
    let hi = 0.5 * protocol.fov;
    let mut out = Vec::with_capacity(protocol.n_bins());
    for (si, &z) in protocol.slices.iter().enumerate() {
        for (ai, &theta) in protocol.angles.iter().enumerate() {
            for b in 0..per_line {
                let s_start = lo + b as f64 * protocol.step_size;
                let s_end = if b + 1 == per_line {
                    hi
                } else {
                    lo + (b + 1) as f64 * protocol.step_size
                };
                out.push(FlyBin {
                    index: (si, ai, b),
                    s_start,
                    s_end,
                    z,
                    theta,
                });
            }
        }
    }
    out
}

/// A ray with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
}

impl Ray {
    pub fn at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

/// Distance from the rotation axis at which beam rays start; any grid used
/// with this crate must fit inside this radius.
pub const RAY_START_RADIUS: f64 = 1.0e4;

/// Central ray of a beam pose, starting `RAY_START_RADIUS` upstream of the axis.
pub fn beam_ray(pose: &BeamPose) -> Ray {
    let (sin, cos) = pose.theta.sin_cos();
    let u = [cos, sin, 0.0];
    let n = [-sin, cos];
    Ray {
        origin: [
            pose.s * n[0] - RAY_START_RADIUS * u[0],
            pose.s * n[1] - RAY_START_RADIUS * u[1],
            pose.z,
        ],
        direction: u,
    }
}

/// `q` poses at the midpoints of `q` equal sub-intervals of the bin.
pub fn quadrature_poses(bin: &FlyBin, q: usize, fwhm: f64) -> Vec<BeamPose> {
    let q = q.max(1);
    let center = bin.center();
    let width = bin.width();
    (0..q)
        .map(|k| BeamPose {
            theta: bin.theta,
            // written relative to the centre so q = 1 lands on it exactly
            s: center + ((k as f64 + 0.5) / q as f64 - 0.5) * width,
            z: bin.z,
            fwhm,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSet {
    pub positions: Vec<[f64; 3]>,
    pub sensitivity: Vec<f64>,
}

impl DetectorSet {
    pub fn new(positions: Vec<[f64; 3]>, sensitivity: Vec<f64>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::validation("detectors", "at least one detector is required"));
        }
        if positions.len() != sensitivity.len() {
            return Err(Error::validation(
                "detectors.sensitivity",
                "one sensitivity per detector is required",
            ));
        }
        for &s in &sensitivity {
            ensure_non_negative("detectors.sensitivity", s)?;
        }
        Ok(DetectorSet {
            positions,
            sensitivity,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// `n` unit-sensitivity detectors evenly spaced on a ring, the first at angle 0.
pub fn detector_ring(n: usize, ring_radius: f64, z: f64) -> Result<DetectorSet> {
    if n == 0 {
        return Err(Error::validation("detectors.count", "must be >= 1"));
    }
    ensure_positive("detectors.ring_radius", ring_radius)?;
    let positions = (0..n)
        .map(|i| {
            let phi = 2.0 * PI * i as f64 / n as f64;
            [ring_radius * phi.cos(), ring_radius * phi.sin(), z]
        })
        .collect();
    DetectorSet::new(positions, vec![1.0; n])
}
