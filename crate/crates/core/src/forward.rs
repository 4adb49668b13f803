//! System matrix assembly and measurement synthesis.
//!
//! Row `(bin, detector)` of the XLCT system matrix holds, for each voxel `n`
//! inside the object,
//!
//! ```text
//! A[(m, d), n] = ε · v · w_x(m, n) · sens(d) · G(r_n, r_d)
//! ```
//!
//! where `w_x(m, n)` is the beam fluence at voxel `n` averaged over the
//! midpoint-quadrature poses of fly bin `m`, `v` is the voxel volume and `G` is
//! the diffusion Green's function. Rows are ordered bin-major, detector-minor.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use crate::error::{ensure_non_negative, ensure_positive, Error, Result};
use crate::geometry::{
    beam_ray, enumerate_fly_bins, quadrature_poses, BeamPose, DetectorSet, ScanProtocol,
};
use crate::phantom::VoxelPhantom;
use crate::transport::{beam_fluence, clamp_distance, detector_weight, diffusion_params, xray_line_integral};

/// Default cap on stored non-zeros (about 1.2 GB with the transpose).
pub const DEFAULT_MAX_NONZEROS: usize = 50_000_000;

/// Compressed sparse rows with a transposed copy for the adjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrix {
    n_rows: usize,
    n_cols: usize,
    n_detectors: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    col_ptr: Vec<usize>,
    t_rows: Vec<u32>,
    t_vals: Vec<f64>,
}

impl SystemMatrix {
    /// Builds a matrix from per-row `(column, weight)` lists. Columns within a
    /// row must be strictly increasing and weights finite and non-negative.
    pub fn from_rows(n_cols: usize, n_detectors: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if n_detectors == 0 || rows.len() % n_detectors != 0 {
            return Err(Error::validation(
                "n_detectors",
                format!("{} rows are not a multiple of {n_detectors} detectors", rows.len()),
            ));
        }
        if n_cols > u32::MAX as usize {
            return Err(Error::Capacity {
                what: "column count",
                size: n_cols,
                limit: u32::MAX as usize,
            });
        }
        let nnz: usize = rows.iter().map(Vec::len).sum();
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for (r, row) in rows.iter().enumerate() {
            let mut last: Option<usize> = None;
            for &(c, v) in row {
                if c >= n_cols {
                    return Err(Error::Range { index: c, len: n_cols });
                }
                if last.is_some_and(|l| c <= l) {
                    return Err(Error::validation(
                        "system matrix",
                        format!("row {r}: columns must be strictly increasing"),
                    ));
                }
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::validation(
                        "system matrix",
                        format!("row {r}, column {c}: weight {v} must be finite and >= 0"),
                    ));
                }
                last = Some(c);
                cols.push(c as u32);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }

        let mut counts = vec![0usize; n_cols + 1];
        for &c in &cols {
            counts[c as usize + 1] += 1;
        }
        for c in 0..n_cols {
            counts[c + 1] += counts[c];
        }
        let col_ptr = counts.clone();
        let mut fill = counts;
        let mut t_rows = vec![0u32; nnz];
        let mut t_vals = vec![0.0; nnz];
        for r in 0..rows.len() {
            for k in row_ptr[r]..row_ptr[r + 1] {
                let c = cols[k] as usize;
                t_rows[fill[c]] = r as u32;
                t_vals[fill[c]] = vals[k];
                fill[c] += 1;
            }
        }
        Ok(SystemMatrix {
            n_rows: rows.len(),
            n_cols,
            n_detectors,
            row_ptr,
            cols,
            vals,
            col_ptr,
            t_rows,
            t_vals,
        })
    }

    /// Dense row-major input; zeros are not stored.
    pub fn from_dense(n_rows: usize, n_cols: usize, dense: &[f64]) -> Result<Self> {
        if dense.len() != n_rows * n_cols {
            return Err(Error::validation("dense", "length must be n_rows * n_cols"));
        }
        let rows = dense
            .chunks(n_cols.max(1))
            .take(n_rows)
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(c, &v)| (c, v))
                    .collect()
            })
            .collect();
        Self::from_rows(n_cols, 1, rows)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_rows(n, 1, (0..n).map(|i| vec![(i, 1.0)]).collect())
            .expect("identity is well formed")
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Row index of `(bin, detector)`.
    pub fn row_of(&self, bin: usize, detector: usize) -> usize {
        bin * self.n_detectors + detector
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.cols[span.clone()], &self.vals[span])
    }

    pub fn column(&self, c: usize) -> (&[u32], &[f64]) {
        let span = self.col_ptr[c]..self.col_ptr[c + 1];
        (&self.t_rows[span.clone()], &self.t_vals[span])
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows * self.n_cols];
        for r in 0..self.n_rows {
            let (c, v) = self.row(r);
            for (&c, &v) in c.iter().zip(v) {
                out[r * self.n_cols + c as usize] = v;
            }
        }
        out
    }

    /// Aᵀ1, the per-voxel sensitivity.
    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.n_cols)
            .into_par_iter()
            .map(|c| self.column(c).1.iter().sum())
            .collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.vals.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Copy with every weight multiplied by `k >= 0`.
    pub fn scaled(&self, k: f64) -> Result<Self> {
        ensure_non_negative("scale", k)?;
        let mut out = self.clone();
        out.vals.iter_mut().for_each(|v| *v *= k);
        out.t_vals.iter_mut().for_each(|v| *v *= k);
        Ok(out)
    }

    /// Restriction to the given rows and columns (both in the order given).
    /// Row grouping by detector is kept when `rows` is a whole number of bins.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Result<Self> {
        let mut remap = vec![usize::MAX; self.n_cols];
        for (new, &c) in cols.iter().enumerate() {
            if c >= self.n_cols {
                return Err(Error::Range { index: c, len: self.n_cols });
            }
            remap[c] = new;
        }
        let mut out_rows = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.n_rows {
                return Err(Error::Range { index: r, len: self.n_rows });
            }
            let (c, v) = self.row(r);
            let mut row: Vec<(usize, f64)> = c
                .iter()
                .zip(v)
                .filter(|(&c, _)| remap[c as usize] != usize::MAX)
                .map(|(&c, &v)| (remap[c as usize], v))
                .collect();
            row.sort_by_key(|e| e.0);
            out_rows.push(row);
        }
        let n_det = if rows.len() % self.n_detectors == 0 { self.n_detectors } else { 1 };
        Self::from_rows(cols.len(), n_det, out_rows)
    }
}

/// `A x`
pub fn apply(a: &SystemMatrix, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != a.n_cols {
        return Err(Error::validation(
            "x",
            format!("length {} does not match {} columns", x.len(), a.n_cols),
        ));
    }
    Ok((0..a.n_rows)
        .into_par_iter()
        .map(|r| {
            let (c, v) = a.row(r);
            c.iter().zip(v).map(|(&c, &v)| v * x[c as usize]).sum()
        })
        .collect())
}

/// `Aᵀ y`
pub fn apply_adjoint(a: &SystemMatrix, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != a.n_rows {
        return Err(Error::validation(
            "y",
            format!("length {} does not match {} rows", y.len(), a.n_rows),
        ));
    }
    Ok((0..a.n_cols)
        .into_par_iter()
        .map(|c| {
            let (r, v) = a.column(c);
            r.iter().zip(v).map(|(&r, &v)| v * y[r as usize]).sum()
        })
        .collect())
}

/// Source strength and calibration constants.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceModel {
    /// Photons·mm⁻² per gate window.
    pub i0: f64,
    /// Detected-photon rate per (fluence × μM × mm³).
    pub epsilon: f64,
    /// Expected counts per unit model output.
    pub count_scale: f64,
}

/// Gives ≈10³ expected counts per detector (four on a ring at the surface)
/// for a 1 μM, 0.3 mm capillary on the axis of a 12.8 mm cylinder with
/// default tissue properties, 0.05 mm voxels, beam centred on the capillary,
/// i0 = ε = 1.
pub const DEFAULT_COUNT_SCALE: f64 = 1.25e7;

impl Default for SourceModel {
    fn default() -> Self {
        SourceModel {
            i0: 1.0,
            epsilon: 1.0,
            count_scale: DEFAULT_COUNT_SCALE,
        }
    }
}

impl SourceModel {
    pub fn validate(&self) -> Result<()> {
        ensure_positive("source.i0", self.i0)?;
        ensure_positive("source.epsilon", self.epsilon)?;
        ensure_positive("source.count_scale", self.count_scale)
    }
}

/// Assembles the fly-scan XLCT system matrix.
pub fn assemble_system_matrix(
    phantom: &VoxelPhantom,
    protocol: &ScanProtocol,
    detectors: &DetectorSet,
    source: &SourceModel,
) -> Result<SystemMatrix> {
    assemble_system_matrix_with_limit(phantom, protocol, detectors, source, DEFAULT_MAX_NONZEROS)
}

pub fn assemble_system_matrix_with_limit(
    phantom: &VoxelPhantom,
    protocol: &ScanProtocol,
    detectors: &DetectorSet,
    source: &SourceModel,
    max_nonzeros: usize,
) -> Result<SystemMatrix> {
    let groups: Vec<Vec<BeamPose>> = enumerate_fly_bins(protocol)
        .iter()
        .map(|b| quadrature_poses(b, protocol.quadrature_q, protocol.beam_fwhm))
        .collect();
    assemble_from_pose_groups(phantom, &groups, detectors, source, max_nonzeros)
}

/// Step-and-shoot counterpart: one pose per bin at the bin centre.
pub fn assemble_static_system_matrix(
    phantom: &VoxelPhantom,
    protocol: &ScanProtocol,
    detectors: &DetectorSet,
    source: &SourceModel,
) -> Result<SystemMatrix> {
    let groups: Vec<Vec<BeamPose>> = enumerate_fly_bins(protocol)
        .iter()
        .map(|b| vec![b.center_pose(protocol.beam_fwhm)])
        .collect();
    assemble_from_pose_groups(phantom, &groups, detectors, source, DEFAULT_MAX_NONZEROS)
}

/// One matrix row block per pose group; each group's fluence is averaged.
pub fn assemble_from_pose_groups(
    phantom: &VoxelPhantom,
    groups: &[Vec<BeamPose>],
    detectors: &DetectorSet,
    source: &SourceModel,
    max_nonzeros: usize,
) -> Result<SystemMatrix> {
    source.validate()?;
    let grid = &phantom.grid;
    let optical = diffusion_params(phantom.background.mu_a, phantom.background.mu_s_prime)?;
    let r_min = clamp_distance(grid.voxel_size);
    let n_det = detectors.len();
    let mask = phantom.inside_mask();

    // detector weights for voxels inside the object, compact-indexed
    let mut compact = vec![u32::MAX; grid.n_voxels()];
    let inside: Vec<usize> = (0..grid.n_voxels()).filter(|&n| mask[n]).collect();
    for (k, &n) in inside.iter().enumerate() {
        compact[n] = k as u32;
    }
    let det_weights: Vec<f64> = inside
        .par_iter()
        .flat_map_iter(|&n| {
            let c = grid.voxel_center(n);
            (0..n_det).map(move |d| detector_weight(c, d, detectors, &optical, r_min))
        })
        .collect::<Result<_>>()?;

    let fluence: Vec<Vec<(usize, f64)>> = groups
        .par_iter()
        .map(|poses| average_fluence(phantom, poses, source.i0))
        .collect::<Result<_>>()?;

    let total: usize = fluence.iter().map(Vec::len).sum::<usize>().saturating_mul(n_det);
    if total > max_nonzeros {
        return Err(Error::Capacity {
            what: "system matrix non-zeros",
            size: total,
            limit: max_nonzeros,
        });
    }

    let eps_v = source.epsilon * grid.voxel_volume();
    let rows: Vec<Vec<(usize, f64)>> = fluence
        .par_iter()
        .flat_map_iter(|wx| {
            let compact = &compact;
            let det_weights = &det_weights;
            (0..n_det).map(move |d| {
                wx.iter()
                    .map(|&(n, w)| (n, eps_v * w * det_weights[compact[n] as usize * n_det + d]))
                    .filter(|e| e.1 > 0.0)
                    .collect()
            })
        })
        .collect();
    SystemMatrix::from_rows(grid.n_voxels(), n_det, rows)
}

/// Fluence averaged over `poses`, restricted to voxels inside the object.
fn average_fluence(phantom: &VoxelPhantom, poses: &[BeamPose], i0: f64) -> Result<Vec<(usize, f64)>> {
    let mask = phantom.inside_mask();
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for pose in poses {
        for (n, f) in beam_fluence(phantom, pose, i0)?.entries {
            if mask[n] {
                *acc.entry(n).or_insert(0.0) += f;
            }
        }
    }
    let inv_q = 1.0 / poses.len() as f64;
    Ok(acc.into_iter().map(|(n, f)| (n, f * inv_q)).collect())
}

/// Synthesized acquisition of one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub n_bins: usize,
    pub n_detectors: usize,
    /// Photon counts per row `(bin, detector)`.
    pub xlct_counts: Vec<u32>,
    /// Expected counts `count_scale · A c` per row.
    pub xlct_means: Vec<f64>,
    /// Optical depth `−ln(I/I0)` per bin.
    pub ct_projections: Vec<f64>,
    pub rng_seed: u64,
    pub count_scale: f64,
}

const XLCT_STREAM_TAG: u64 = 0x786c_6374_636e_7473; // "xlctcnts"
const CT_STREAM_TAG: u64 = 0x6374_6e6f_6973_6521; // "ctnoise!"

/// Counter-based generator: the key is (seed, domain), the stream is the row.
fn keyed_rng(seed: u64, domain: u64, row: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(row);
    rng
}

/// Poisson sample of `mean`, saturating at `u32::MAX`.
pub fn poisson_count(seed: u64, row: u64, mean: f64) -> u32 {
    if !(mean > 0.0) {
        return 0;
    }
    let mut rng = keyed_rng(seed, XLCT_STREAM_TAG, row);
    match Poisson::new(mean) {
        Ok(dist) => dist.sample(&mut rng).min(u32::MAX as f64) as u32,
        Err(_) => u32::MAX,
    }
}

/// Expected and Poisson-noisy counts for concentration `c` under an assembled matrix.
pub fn synthesize_counts(
    a: &SystemMatrix,
    concentration: &[f64],
    count_scale: f64,
    seed: u64,
) -> Result<(Vec<u32>, Vec<f64>)> {
    ensure_positive("count_scale", count_scale)?;
    let means: Vec<f64> = apply(a, concentration)?
        .into_iter()
        .map(|y| count_scale * y)
        .collect();
    let counts = means
        .par_iter()
        .enumerate()
        .map(|(r, &m)| poisson_count(seed, r as u64, m))
        .collect();
    Ok((counts, means))
}

/// XLCT part of a measurement set; `ct_projections` is left empty.
pub fn synthesize_xlct(
    phantom: &VoxelPhantom,
    protocol: &ScanProtocol,
    detectors: &DetectorSet,
    source: &SourceModel,
    seed: u64,
) -> Result<MeasurementSet> {
    let a = assemble_system_matrix(phantom, protocol, detectors, source)?;
    let (xlct_counts, xlct_means) =
        synthesize_counts(&a, phantom.concentration(), source.count_scale, seed)?;
    Ok(MeasurementSet {
        n_bins: protocol.n_bins(),
        n_detectors: detectors.len(),
        xlct_counts,
        xlct_means,
        ct_projections: Vec::new(),
        rng_seed: seed,
        count_scale: source.count_scale,
    })
}

/// Transmission below this is treated as this.
pub const CT_TRANSMISSION_FLOOR: f64 = 1e-9;

/// Pencil-beam CT projections at every bin centre, with optional Gaussian
/// relative noise on the transmitted fraction (clamped to [floor, 1]).
pub fn synthesize_ct(
    phantom: &VoxelPhantom,
    protocol: &ScanProtocol,
    seed: u64,
    noise: Option<f64>,
) -> Result<Vec<f64>> {
    let noise = match noise {
        Some(s) if s > 0.0 => {
            ensure_positive("ct.noise", s)?;
            Some(Normal::new(0.0, s).map_err(|e| Error::validation("ct.noise", e.to_string()))?)
        }
        Some(s) => {
            ensure_non_negative("ct.noise", s)?;
            None
        }
        None => None,
    };
    enumerate_fly_bins(protocol)
        .par_iter()
        .enumerate()
        .map(|(m, bin)| {
            let p = xray_line_integral(phantom, &beam_ray(&bin.center_pose(protocol.beam_fwhm)))?;
            Ok(match &noise {
                None => p,
                Some(dist) => {
                    let mut rng = keyed_rng(seed, CT_STREAM_TAG, m as u64);
                    let eta = dist.sample(&mut rng);
                    let t = ((-p).exp() * (1.0 + eta)).clamp(CT_TRANSMISSION_FLOOR, 1.0);
                    -t.ln()
                }
            })
        })
        .collect()
}
