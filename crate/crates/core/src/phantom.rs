//! Voxelized numerical phantoms.
//!
//! A phantom is a cylindrical object centred on the gantry rotation axis (the
//! z axis), sampled on an isotropic voxel grid. Optical and X-ray properties are
//! uniform over the object; the nanophosphor concentration varies per voxel:
//! capillary targets on top of an optional uniform uptake.
//!
//! Voxel `(i, j, k)` has linear index `i + nx * (j + ny * k)` (x fastest) and its
//! centre at `origin + (idx + 0.5) * voxel_size`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_non_negative, ensure_positive, Error, Result};

/// Largest voxel count allowed along any axis.
pub const MAX_DIM: usize = 1024;

/// Optical absorption, reduced scattering and X-ray attenuation, all in mm⁻¹.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TissueProperties {
    pub mu_a: f64,
    pub mu_s_prime: f64,
    pub mu_x: f64,
}

impl Default for TissueProperties {
    /// Soft-tissue-like values: μa = 0.01, μs′ = 1.0, μx = 0.02 mm⁻¹.
    fn default() -> Self {
        TissueProperties {
            mu_a: 0.01,
            mu_s_prime: 1.0,
            mu_x: 0.02,
        }
    }
}

impl TissueProperties {
    pub fn new(mu_a: f64, mu_s_prime: f64, mu_x: f64) -> Result<Self> {
        let props = TissueProperties {
            mu_a,
            mu_s_prime,
            mu_x,
        };
        props.validate()?;
        Ok(props)
    }

    /// Checks the invariants and warns when the medium is not scattering-dominated.
    pub fn validate(&self) -> Result<()> {
        ensure_positive("mu_a", self.mu_a)?;
        ensure_positive("mu_s_prime", self.mu_s_prime)?;
        ensure_non_negative("mu_x", self.mu_x)?;
        if self.mu_s_prime < 10.0 * self.mu_a {
            log::warn!(
                "mu_s_prime ({}) < 10 * mu_a ({}): diffusion approximation is questionable",
                self.mu_s_prime,
                self.mu_a
            );
        }
        Ok(())
    }
}

/// Regular isotropic voxel grid; `origin` is the outer corner of voxel (0, 0, 0)
/// relative to the rotation axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: [f64; 3],
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], voxel_size: f64, origin: [f64; 3]) -> Result<Self> {
        ensure_positive("voxel_size", voxel_size)?;
        for (axis, &n) in ["nx", "ny", "nz"].iter().zip(dims.iter()) {
            if n == 0 {
                return Err(Error::validation(*axis, "must be >= 1"));
            }
            if n > MAX_DIM {
                return Err(Error::Capacity {
                    what: "grid dimension",
                    size: n,
                    limit: MAX_DIM,
                });
            }
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::validation("origin", "must be finite"));
        }
        Ok(GridGeometry {
            dims,
            voxel_size,
            origin,
        })
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.voxel_size.powi(3)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn unravel(&self, index: usize) -> [usize; 3] {
        let i = index % self.dims[0];
        let rest = index / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Coordinate of the centre of voxel `idx` along `axis`.
    #[inline]
    pub fn center_coord(&self, axis: usize, idx: usize) -> f64 {
        self.origin[axis] + (idx as f64 + 0.5) * self.voxel_size
    }

    pub fn voxel_center(&self, index: usize) -> [f64; 3] {
        let [i, j, k] = self.unravel(index);
        [
            self.center_coord(0, i),
            self.center_coord(1, j),
            self.center_coord(2, k),
        ]
    }

    /// Upper corner of the grid.
    pub fn max_corner(&self) -> [f64; 3] {
        let mut c = self.origin;
        for (axis, v) in c.iter_mut().enumerate() {
            *v += self.dims[axis] as f64 * self.voxel_size;
        }
        c
    }

    /// Voxel containing `point` using `floor((p - origin) / voxel_size)` per axis,
    /// so a point on a shared face belongs to the voxel on its positive side.
    pub fn locate(&self, point: [f64; 3]) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for axis in 0..3 {
            let f = ((point[axis] - self.origin[axis]) / self.voxel_size).floor();
            if !(f >= 0.0 && f < self.dims[axis] as f64) {
                return None;
            }
            out[axis] = f as usize;
        }
        Some(out)
    }

    /// Index of the z layer whose centre is nearest to `z`, clamped to the grid.
    pub fn nearest_layer(&self, z: f64) -> usize {
        let f = ((z - self.origin[2]) / self.voxel_size - 0.5).round();
        f.clamp(0.0, (self.dims[2] - 1) as f64) as usize
    }

    /// Radius of a sphere centred on the rotation axis that encloses the grid.
    pub fn bounding_radius(&self) -> f64 {
        let lo = self.origin;
        let hi = self.max_corner();
        let mut r2 = 0.0;
        for axis in 0..3 {
            let m = lo[axis].abs().max(hi[axis].abs());
            r2 += m * m;
        }
        r2.sqrt()
    }
}

/// The cylindrical object support, centred on the rotation axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CylinderSupport {
    pub radius: f64,
    pub height: f64,
}

impl CylinderSupport {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        p[0] * p[0] + p[1] * p[1] <= self.radius * self.radius && p[2].abs() <= 0.5 * self.height
    }
}

/// Axis-aligned (along z) capillary target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub center: [f64; 3],
    pub radius: f64,
    pub height: f64,
    /// μM
    pub concentration: f64,
}

impl TargetSpec {
    pub fn validate(&self) -> Result<()> {
        ensure_positive("target.radius", self.radius)?;
        ensure_positive("target.height", self.height)?;
        ensure_non_negative("target.concentration", self.concentration)?;
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::validation("target.center", "must be finite"));
        }
        Ok(())
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        dx * dx + dy * dy <= self.radius * self.radius
            && (p[2] - self.center[2]).abs() <= 0.5 * self.height
    }

    /// Analytic volume, mm³.
    pub fn volume(&self) -> f64 {
        std::f64::consts::PI * self.radius * self.radius * self.height
    }
}

/// Properties returned by a point lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSample {
    pub tissue: TissueProperties,
    pub concentration: f64,
    pub inside: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelPhantom {
    pub grid: GridGeometry,
    pub background: TissueProperties,
    pub support: CylinderSupport,
    concentration: Vec<f64>,
    inside_mask: Vec<bool>,
}

impl VoxelPhantom {
    /// Reassembles a phantom from stored parts (used when reading phantom files).
    pub fn from_parts(
        grid: GridGeometry,
        background: TissueProperties,
        support: CylinderSupport,
        concentration: Vec<f64>,
    ) -> Result<Self> {
        if concentration.len() != grid.n_voxels() {
            return Err(Error::validation(
                "concentration",
                format!("expected {} values, got {}", grid.n_voxels(), concentration.len()),
            ));
        }
        let inside_mask: Vec<bool> = (0..grid.n_voxels())
            .map(|n| support.contains(grid.voxel_center(n)))
            .collect();
        for (n, (&c, &inside)) in concentration.iter().zip(&inside_mask).enumerate() {
            if !(c >= 0.0) || (!inside && c != 0.0) {
                return Err(Error::validation(
                    "concentration",
                    format!("voxel {n}: {c} violates c >= 0 and c = 0 outside the object"),
                ));
            }
        }
        Ok(VoxelPhantom {
            grid,
            background,
            support,
            concentration,
            inside_mask,
        })
    }

    pub fn concentration(&self) -> &[f64] {
        &self.concentration
    }

    pub fn inside_mask(&self) -> &[bool] {
        &self.inside_mask
    }

    /// X-ray attenuation of voxel `index`: background μx inside the object, air (0) outside.
    #[inline]
    pub fn mu_x_at(&self, index: usize) -> f64 {
        if self.inside_mask[index] {
            self.background.mu_x
        } else {
            0.0
        }
    }

    /// Total nanophosphor amount Σ c·v, μM·mm³.
    pub fn total_amount(&self) -> f64 {
        self.concentration.iter().sum::<f64>() * self.grid.voxel_volume()
    }

    /// Copy of this phantom with every concentration multiplied by `factor`.
    pub fn scaled_concentration(&self, factor: f64) -> Result<Self> {
        ensure_non_negative("factor", factor)?;
        let mut out = self.clone();
        out.concentration.iter_mut().for_each(|c| *c *= factor);
        Ok(out)
    }
}

/// Builds an empty cylinder of the given diameter and height centred on the
/// rotation axis. The grid is the tightest voxel box around the cylinder.
pub fn build_cylinder_phantom(
    diameter: f64,
    height: f64,
    voxel_size: f64,
    background: TissueProperties,
) -> Result<VoxelPhantom> {
    ensure_positive("diameter", diameter)?;
    ensure_positive("height", height)?;
    ensure_positive("voxel_size", voxel_size)?;
    background.validate()?;

    let count = |extent: f64| -> Result<usize> {
        let n = (extent / voxel_size - 1e-9).ceil().max(1.0);
        if n > MAX_DIM as f64 {
            return Err(Error::Capacity {
                what: "grid dimension",
                size: if n.is_finite() { n as usize } else { usize::MAX },
                limit: MAX_DIM,
            });
        }
        Ok(n as usize)
    };
    let nxy = count(diameter)?;
    let nz = count(height)?;
    let half_xy = 0.5 * nxy as f64 * voxel_size;
    let half_z = 0.5 * nz as f64 * voxel_size;
    let grid = GridGeometry::new([nxy, nxy, nz], voxel_size, [-half_xy, -half_xy, -half_z])?;
    let support = CylinderSupport {
        radius: 0.5 * diameter,
        height,
    };
    VoxelPhantom::from_parts(grid, background, support, vec![0.0; grid.n_voxels()])
}

/// Returns a copy of `phantom` whose voxels with centres inside `target` carry
/// the target concentration. The target must lie entirely inside the object.
pub fn add_capillary_target(phantom: &VoxelPhantom, target: &TargetSpec) -> Result<VoxelPhantom> {
    target.validate()?;
    let tol = 1e-9;
    let radial = target.center[0].hypot(target.center[1]) + target.radius;
    let axial = target.center[2].abs() + 0.5 * target.height;
    if radial > phantom.support.radius + tol || axial > 0.5 * phantom.support.height + tol {
        return Err(Error::Geometry(format!(
            "target at {:?} (radius {}, height {}) protrudes outside the object (radius {}, height {})",
            target.center, target.radius, target.height, phantom.support.radius, phantom.support.height
        )));
    }
    let mut out = phantom.clone();
    let grid = &phantom.grid;
    for n in 0..grid.n_voxels() {
        if out.inside_mask[n] && target.contains(grid.voxel_center(n)) {
            out.concentration[n] = target.concentration;
        }
    }
    Ok(out)
}

/// Returns a copy of `phantom` with `uptake` added to every voxel inside the
/// object (non-specific background concentration).
pub fn add_uniform_uptake(phantom: &VoxelPhantom, uptake: f64) -> Result<VoxelPhantom> {
    ensure_non_negative("uptake", uptake)?;
    let mut out = phantom.clone();
    for (c, &inside) in out.concentration.iter_mut().zip(&phantom.inside_mask) {
        if inside {
            *c += uptake;
        }
    }
    Ok(out)
}

/// Nearest-voxel lookup. Points outside the grid get the background with zero
/// concentration and `inside = false`.
pub fn property_at(phantom: &VoxelPhantom, point: [f64; 3]) -> PointSample {
    match phantom.grid.locate(point) {
        Some([i, j, k]) => {
            let n = phantom.grid.index(i, j, k);
            PointSample {
                tissue: phantom.background,
                concentration: phantom.concentration[n],
                inside: phantom.inside_mask[n],
            }
        }
        None => PointSample {
            tissue: phantom.background,
            concentration: 0.0,
            inside: false,
        },
    }
}
