//! On-disk formats.
//!
//! Every array is a small `key = value` text header next to a raw
//! little-endian file named by the header's `data` key (relative to the
//! header). Volumes and phantoms are f32 in x-fastest order, counts are u32
//! in row order `(bin, detector)`, sinograms are f32 with the lateral position
//! fastest, then angle, then slice.
//!
//! Values are stored as f32, so a round trip is bit-exact for values that are
//! representable in f32 and rounds everything else to nearest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward::MeasurementSet;
use crate::phantom::{CylinderSupport, GridGeometry, TissueProperties, VoxelPhantom};
use crate::recon::ReconVolume;

const VOLUME_FORMAT: &str = "xlct-volume";
const PHANTOM_FORMAT: &str = "xlct-phantom";
const COUNTS_FORMAT: &str = "xlct-counts";
const SINOGRAM_FORMAT: &str = "xlct-sinogram";
const ORDER_X_FASTEST: &str = "x-fastest";

/// Parsed `key = value` header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Header {
    path: PathBuf,
    entries: BTreeMap<String, String>,
}

impl Header {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(path, format!("line {}: expected `key = value`", lineno + 1))
            })?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Header {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Header::parse(path, &text)
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(&self.path, format!("missing key `{key}`")))
    }

    pub fn value<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::format(&self.path, format!("bad value for `{key}`: {raw}")))
    }

    pub fn list<T: FromStr>(&self, key: &str, len: usize) -> Result<Vec<T>> {
        let raw = self.get(key)?;
        let items: Vec<T> = raw
            .split_whitespace()
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(&self.path, format!("bad value for `{key}`: {raw}")))?;
        if items.len() != len {
            return Err(Error::format(
                &self.path,
                format!("`{key}` needs {len} values, got {}", items.len()),
            ));
        }
        Ok(items)
    }

    fn expect(&self, key: &str, want: &str) -> Result<()> {
        let got = self.get(key)?;
        if got != want {
            return Err(Error::format(
                &self.path,
                format!("unsupported {key} `{got}` (expected `{want}`)"),
            ));
        }
        Ok(())
    }

    fn data_path(&self, key: &str) -> Result<PathBuf> {
        let name = self.get(key)?;
        Ok(self.path.parent().unwrap_or(Path::new("")).join(name))
    }
}

fn join3<T: std::fmt::Display>(v: [T; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_raw(path: &Path, expected_bytes: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_bytes {
        return Err(Error::format(
            path,
            format!("size mismatch: expected {expected_bytes} bytes, found {}", bytes.len()),
        ));
    }
    Ok(bytes)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn sibling(header: &Path, ext: &str) -> PathBuf {
    header.with_extension(ext)
}

pub fn encode_f32le(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn decode_f32le(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect()
}

fn grid_header(out: &mut String, grid: &GridGeometry) {
    let _ = writeln!(out, "dims = {}", join3(grid.dims));
    let _ = writeln!(out, "voxel_size = {}", grid.voxel_size);
    let _ = writeln!(out, "origin = {}", join3(grid.origin));
    let _ = writeln!(out, "dtype = f32le");
    let _ = writeln!(out, "order = {ORDER_X_FASTEST}");
}

fn read_grid(h: &Header) -> Result<GridGeometry> {
    let d: Vec<usize> = h.list("dims", 3)?;
    let o: Vec<f64> = h.list("origin", 3)?;
    h.expect("dtype", "f32le")?;
    h.expect("order", ORDER_X_FASTEST)?;
    GridGeometry::new([d[0], d[1], d[2]], h.value("voxel_size")?, [o[0], o[1], o[2]])
        .map_err(|e| Error::format(&h.path, e.to_string()))
}

/// Writes `<header>` plus `<header>.f32` and one PGM preview per z layer.
/// Returns every file written, header first.
pub fn write_volume(volume: &ReconVolume, header_path: &Path) -> Result<Vec<PathBuf>> {
    let raw = sibling(header_path, "f32");
    let mut text = format!("format = {VOLUME_FORMAT}\n");
    grid_header(&mut text, &volume.grid);
    let _ = writeln!(text, "data = {}", file_name(&raw));
    write_file(header_path, text.as_bytes())?;
    write_file(&raw, &encode_f32le(&volume.values))?;
    let mut files = vec![header_path.to_path_buf(), raw];
    files.extend(write_pgm_previews(&volume.grid, &volume.values, header_path)?);
    Ok(files)
}

pub fn read_volume(header_path: &Path) -> Result<ReconVolume> {
    let h = Header::read(header_path)?;
    h.expect("format", VOLUME_FORMAT)?;
    let grid = read_grid(&h)?;
    let bytes = read_raw(&h.data_path("data")?, grid.n_voxels() * 4)?;
    Ok(ReconVolume {
        grid,
        values: decode_f32le(&bytes),
        iterations_run: 0,
        objective_trace: Vec::new(),
    })
}

/// Phantom header: grid, background properties and cylinder support, with the
/// concentration as the raw array.
pub fn write_phantom(phantom: &VoxelPhantom, header_path: &Path) -> Result<Vec<PathBuf>> {
    let raw = sibling(header_path, "f32");
    let mut text = format!("format = {PHANTOM_FORMAT}\n");
    grid_header(&mut text, &phantom.grid);
    let bg = phantom.background;
    let _ = writeln!(text, "mu_a = {}", bg.mu_a);
    let _ = writeln!(text, "mu_s_prime = {}", bg.mu_s_prime);
    let _ = writeln!(text, "mu_x = {}", bg.mu_x);
    let _ = writeln!(text, "support_radius = {}", phantom.support.radius);
    let _ = writeln!(text, "support_height = {}", phantom.support.height);
    let _ = writeln!(text, "data = {}", file_name(&raw));
    write_file(header_path, text.as_bytes())?;
    write_file(&raw, &encode_f32le(phantom.concentration()))?;
    let mut files = vec![header_path.to_path_buf(), raw];
    files.extend(write_pgm_previews(&phantom.grid, phantom.concentration(), header_path)?);
    Ok(files)
}

pub fn read_phantom(header_path: &Path) -> Result<VoxelPhantom> {
    let h = Header::read(header_path)?;
    h.expect("format", PHANTOM_FORMAT)?;
    let grid = read_grid(&h)?;
    let background = TissueProperties {
        mu_a: h.value("mu_a")?,
        mu_s_prime: h.value("mu_s_prime")?,
        mu_x: h.value("mu_x")?,
    };
    let support = CylinderSupport {
        radius: h.value("support_radius")?,
        height: h.value("support_height")?,
    };
    let bytes = read_raw(&h.data_path("data")?, grid.n_voxels() * 4)?;
    VoxelPhantom::from_parts(grid, background, support, decode_f32le(&bytes))
        .map_err(|e| Error::format(header_path, e.to_string()))
}

/// Writes counts (u32le) and expected counts (f64le) of a measurement set.
pub fn write_counts(m: &MeasurementSet, header_path: &Path) -> Result<Vec<PathBuf>> {
    let raw = sibling(header_path, "u32");
    let means = header_path.with_file_name(format!(
        "{}-means.f64",
        header_path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    let mut text = format!("format = {COUNTS_FORMAT}\n");
    let _ = writeln!(text, "n_bins = {}", m.n_bins);
    let _ = writeln!(text, "n_detectors = {}", m.n_detectors);
    let _ = writeln!(text, "seed = {}", m.rng_seed);
    let _ = writeln!(text, "count_scale = {}", m.count_scale);
    let _ = writeln!(text, "dtype = u32le");
    let _ = writeln!(text, "order = bin-major");
    let _ = writeln!(text, "data = {}", file_name(&raw));
    let _ = writeln!(text, "means = {}", file_name(&means));
    let _ = writeln!(text, "means_dtype = f64le");
    write_file(header_path, text.as_bytes())?;
    let counts: Vec<u8> = m.xlct_counts.iter().flat_map(|c| c.to_le_bytes()).collect();
    write_file(&raw, &counts)?;
    let mean_bytes: Vec<u8> = m.xlct_means.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(&means, &mean_bytes)?;
    Ok(vec![header_path.to_path_buf(), raw, means])
}

/// Reads a counts file; `ct_projections` is left empty.
pub fn read_counts(header_path: &Path) -> Result<MeasurementSet> {
    let h = Header::read(header_path)?;
    h.expect("format", COUNTS_FORMAT)?;
    h.expect("dtype", "u32le")?;
    h.expect("order", "bin-major")?;
    h.expect("means_dtype", "f64le")?;
    let n_bins: usize = h.value("n_bins")?;
    let n_detectors: usize = h.value("n_detectors")?;
    let rows = n_bins * n_detectors;
    let counts = read_raw(&h.data_path("data")?, rows * 4)?
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let means = read_raw(&h.data_path("means")?, rows * 8)?
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect();
    Ok(MeasurementSet {
        n_bins,
        n_detectors,
        xlct_counts: counts,
        xlct_means: means,
        ct_projections: Vec::new(),
        rng_seed: h.value("seed")?,
        count_scale: h.value("count_scale")?,
    })
}

/// Pencil-beam CT sinogram in scan order: slice, angle, lateral position.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub n_slices: usize,
    pub n_angles: usize,
    pub n_positions: usize,
    pub values: Vec<f64>,
}

impl Sinogram {
    /// Projections of one slice, `n_angles × n_positions`.
    pub fn slice(&self, s: usize) -> &[f64] {
        let n = self.n_angles * self.n_positions;
        &self.values[s * n..(s + 1) * n]
    }
}

pub fn write_sinogram(sino: &Sinogram, header_path: &Path) -> Result<Vec<PathBuf>> {
    let raw = sibling(header_path, "f32");
    let mut text = format!("format = {SINOGRAM_FORMAT}\n");
    let _ = writeln!(text, "n_slices = {}", sino.n_slices);
    let _ = writeln!(text, "n_angles = {}", sino.n_angles);
    let _ = writeln!(text, "n_positions = {}", sino.n_positions);
    let _ = writeln!(text, "dtype = f32le");
    let _ = writeln!(text, "order = position-fastest");
    let _ = writeln!(text, "data = {}", file_name(&raw));
    write_file(header_path, text.as_bytes())?;
    write_file(&raw, &encode_f32le(&sino.values))?;
    Ok(vec![header_path.to_path_buf(), raw])
}

pub fn read_sinogram(header_path: &Path) -> Result<Sinogram> {
    let h = Header::read(header_path)?;
    h.expect("format", SINOGRAM_FORMAT)?;
    h.expect("dtype", "f32le")?;
    h.expect("order", "position-fastest")?;
    let n_slices: usize = h.value("n_slices")?;
    let n_angles: usize = h.value("n_angles")?;
    let n_positions: usize = h.value("n_positions")?;
    let bytes = read_raw(&h.data_path("data")?, n_slices * n_angles * n_positions * 4)?;
    Ok(Sinogram {
        n_slices,
        n_angles,
        n_positions,
        values: decode_f32le(&bytes),
    })
}

/// `iteration,objective` rows.
pub fn write_trace_csv(trace: &[f64], path: &Path) -> Result<()> {
    let mut text = String::from("iteration,objective\n");
    for (i, v) in trace.iter().enumerate() {
        let _ = writeln!(text, "{i},{v}");
    }
    write_file(path, text.as_bytes())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

/// Binary 16-bit PGM (P5, maxval 65535, big-endian samples).
pub fn encode_pgm16(width: usize, height: usize, pixels: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.extend(pixels.iter().flat_map(|p| p.to_be_bytes()));
    out
}

/// Maps every layer of a volume to 16-bit grey levels, scaled by the maximum
/// of the whole volume. Negative values clamp to 0. A volume whose maximum is
/// not positive maps to all zeros (black).
pub fn preview_levels(values: &[f64]) -> Vec<u16> {
    let max = values.iter().cloned().fold(0.0_f64, f64::max);
    if !(max > 0.0 && max.is_finite()) {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| {
            let t = if v.is_nan() { 0.0 } else { (v / max).clamp(0.0, 1.0) };
            (t * 65535.0).round() as u16
        })
        .collect()
}

/// One `<stem>-zNNN.pgm` per layer next to `header_path`. Image row `j` is
/// grid row `j`, so y increases downwards.
pub fn write_pgm_previews(grid: &GridGeometry, values: &[f64], header_path: &Path) -> Result<Vec<PathBuf>> {
    let [nx, ny, nz] = grid.dims;
    let levels = preview_levels(values);
    let stem = header_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    (0..nz)
        .map(|k| {
            let path = header_path.with_file_name(format!("{stem}-z{k:03}.pgm"));
            let layer = &levels[k * nx * ny..(k + 1) * nx * ny];
            write_file(&path, &encode_pgm16(nx, ny, layer))?;
            Ok(path)
        })
        .collect()
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
