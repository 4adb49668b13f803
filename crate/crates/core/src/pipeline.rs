//! Configuration-driven runs: phantom → simulate → recon-xlct → recon-ct →
//! metrics, each stage reading its inputs from and writing its artifacts to
//! one output directory.
//!
//! ```toml
//! seed = 7
//!
//! [phantom]
//! diameter = 12.8
//! height = 0.1
//! voxel_size = 0.1
//!
//! [[phantom.targets]]
//! center = [1.0, 0.5, 0.0]
//! radius = 0.3
//! height = 0.1
//! concentration = 1.0
//! ```
//!
//! Every other section is optional; [`PipelineConfig::to_toml`] shows all
//! defaults filled in.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_non_negative, ensure_positive, Error, Result};
use crate::forward::{
    assemble_system_matrix_with_limit, synthesize_counts, synthesize_ct, MeasurementSet, SourceModel,
    SystemMatrix, DEFAULT_MAX_NONZEROS,
};
use crate::geometry::{detector_ring, enumerate_fly_bins, make_protocol, DetectorSet, ProtocolConfig, ScanProtocol};
use crate::io::{self, Sinogram};
use crate::metrics::{cnr, dice, estimate_scan_time, line_profile_fwhm, LineProfile};
use crate::phantom::{
    add_capillary_target, add_uniform_uptake, build_cylinder_phantom, GridGeometry, TargetSpec, TissueProperties,
    VoxelPhantom,
};
use crate::recon::{fbp_parallel, fista_l1, lambda_heuristic, mlem, FbpFilter, FbpGeometry, ReconVolume, SolverConfig};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses the machine default. Outputs never depend on it.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "default_max_nonzeros")]
    pub max_nonzeros: usize,
    pub phantom: Option<PhantomConfig>,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub detectors: DetectorConfig,
    #[serde(default)]
    pub source: SourceModel,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub ct: CtConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("xlct-out")
}

fn default_max_nonzeros() -> usize {
    DEFAULT_MAX_NONZEROS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    /// mm
    pub diameter: Option<f64>,
    /// mm
    pub height: Option<f64>,
    /// mm
    pub voxel_size: Option<f64>,
    /// Uniform non-specific concentration added inside the object, μM.
    #[serde(default)]
    pub uptake: f64,
    #[serde(default)]
    pub background: TissueProperties,
    #[serde(default)]
    pub targets: Vec<TargetSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub count: usize,
    /// Defaults to the object surface.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ring_radius: Option<f64>,
    pub z: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            count: 4,
            ring_radius: None,
            z: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Fista,
    Mlem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub algorithm: Algorithm,
    pub max_iters: usize,
    /// Fixed L1 weight; when absent, `lambda_fraction · ‖Aᵀy‖∞`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub lambda_fraction: f64,
    pub tolerance: f64,
    pub lipschitz_iters: usize,
    pub epsilon_floor: f64,
    /// Reconstruct each slice's rows onto its nearest voxel layer alone.
    pub per_slice: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolverConfig::default();
        SolverSection {
            algorithm: Algorithm::Fista,
            max_iters: s.max_iters,
            lambda: None,
            lambda_fraction: 0.01,
            tolerance: s.tolerance,
            lipschitz_iters: s.lipschitz_iters,
            epsilon_floor: s.epsilon_floor,
            per_slice: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CtConfig {
    pub filter: FbpFilter,
    /// Relative Gaussian noise on transmission; 0 is noiseless.
    pub noise: f64,
}

impl Default for CtConfig {
    fn default() -> Self {
        CtConfig {
            filter: FbpFilter::RampHann,
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Dice segmentation threshold as a fraction of the image maximum.
    pub dice_threshold: f64,
    /// Background region starts this far (mm) from every target.
    pub background_margin: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            dice_threshold: 0.5,
            background_margin: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Target concentrations, μM, strictly decreasing.
    pub concentrations: Vec<f64>,
    pub cnr_threshold: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            concentrations: vec![1.0, 0.5, 0.25, 0.125],
            cnr_threshold: 4.0,
        }
    }
}

/// Validated phantom geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomGeometry {
    pub diameter: f64,
    pub height: f64,
    pub voxel_size: f64,
}

impl PipelineConfig {
    /// Parses TOML text and validates it. Unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.normalized()
    }

    /// Validated copy with derived defaults filled in.
    pub fn normalized(mut self) -> Result<Self> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::validation("seed", "must fit in a signed 64-bit integer"));
        }
        if self.max_nonzeros == 0 {
            return Err(Error::validation("max_nonzeros", "must be >= 1"));
        }
        let geom = self.phantom_geometry()?;
        let ph = self.phantom.as_ref().expect("checked by phantom_geometry");
        ensure_non_negative("phantom.uptake", ph.uptake)?;
        ph.background.validate()?;
        for t in &ph.targets {
            t.validate()?;
        }
        make_protocol(&self.protocol)?;
        if self.detectors.count == 0 {
            return Err(Error::validation("detectors.count", "must be >= 1"));
        }
        let radius = *self.detectors.ring_radius.get_or_insert(0.5 * geom.diameter);
        ensure_positive("detectors.ring_radius", radius)?;
        if !self.detectors.z.is_finite() {
            return Err(Error::validation("detectors.z", "must be finite"));
        }
        self.source.validate()?;
        self.solver_config(0.0).validate()?;
        if let Some(l) = self.solver.lambda {
            ensure_non_negative("solver.lambda", l)?;
        }
        ensure_non_negative("solver.lambda_fraction", self.solver.lambda_fraction)?;
        ensure_non_negative("ct.noise", self.ct.noise)?;
        let t = self.metrics.dice_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::validation("metrics.dice_threshold", "must be in (0, 1]"));
        }
        ensure_non_negative("metrics.background_margin", self.metrics.background_margin)?;
        if let Some(sw) = &self.sweep {
            if sw.concentrations.is_empty() {
                return Err(Error::validation("sweep.concentrations", "must not be empty"));
            }
            for &c in &sw.concentrations {
                ensure_non_negative("sweep.concentrations", c)?;
            }
            if sw.concentrations.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::validation("sweep.concentrations", "must be strictly decreasing"));
            }
            if !sw.cnr_threshold.is_finite() {
                return Err(Error::validation("sweep.cnr_threshold", "must be finite"));
            }
        }
        Ok(self)
    }

    /// TOML text of this configuration; loading it gives the same configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the normalized TOML text.
    pub fn hash(&self) -> Result<String> {
        Ok(io::sha256_hex(self.to_toml()?.as_bytes()))
    }

    pub fn phantom_geometry(&self) -> Result<PhantomGeometry> {
        let ph = self
            .phantom
            .as_ref()
            .ok_or_else(|| Error::validation("phantom", "section is required"))?;
        let need = |name: &str, v: Option<f64>| -> Result<f64> {
            let field = format!("phantom.{name}");
            let v = v.ok_or_else(|| Error::validation(field.clone(), "is required"))?;
            ensure_positive(&field, v)?;
            Ok(v)
        };
        Ok(PhantomGeometry {
            diameter: need("diameter", ph.diameter)?,
            height: need("height", ph.height)?,
            voxel_size: need("voxel_size", ph.voxel_size)?,
        })
    }

    pub fn scan_protocol(&self) -> Result<ScanProtocol> {
        make_protocol(&self.protocol)
    }

    pub fn detector_set(&self) -> Result<DetectorSet> {
        let radius = match self.detectors.ring_radius {
            Some(r) => r,
            None => 0.5 * self.phantom_geometry()?.diameter,
        };
        detector_ring(self.detectors.count, radius, self.detectors.z)
    }

    pub fn solver_config(&self, lambda: f64) -> SolverConfig {
        SolverConfig {
            max_iters: self.solver.max_iters,
            lambda,
            tolerance: self.solver.tolerance,
            lipschitz_iters: self.solver.lipschitz_iters,
            epsilon_floor: self.solver.epsilon_floor,
        }
    }

    fn targets(&self) -> &[TargetSpec] {
        self.phantom.as_ref().map(|p| p.targets.as_slice()).unwrap_or(&[])
    }
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PipelineConfig::from_toml(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Phantom described by the configuration, with every target at its own
/// concentration or, when `target_concentration` is given, at that one.
pub fn build_phantom(cfg: &PipelineConfig, target_concentration: Option<f64>) -> Result<VoxelPhantom> {
    let g = cfg.phantom_geometry()?;
    let ph = cfg.phantom.as_ref().expect("checked by phantom_geometry");
    let mut p = build_cylinder_phantom(g.diameter, g.height, g.voxel_size, ph.background)?;
    for t in &ph.targets {
        let t = TargetSpec {
            concentration: target_concentration.unwrap_or(t.concentration),
            ..*t
        };
        p = add_capillary_target(&p, &t)?;
    }
    add_uniform_uptake(&p, ph.uptake)
}

pub fn assemble(cfg: &PipelineConfig, phantom: &VoxelPhantom) -> Result<SystemMatrix> {
    assemble_system_matrix_with_limit(
        phantom,
        &cfg.scan_protocol()?,
        &cfg.detector_set()?,
        &cfg.source,
        cfg.max_nonzeros,
    )
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Phantom,
    Simulate,
    ReconXlct,
    ReconCt,
    Metrics,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Phantom,
        Stage::Simulate,
        Stage::ReconXlct,
        Stage::ReconCt,
        Stage::Metrics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Phantom => "phantom",
            Stage::Simulate => "simulate",
            Stage::ReconXlct => "recon-xlct",
            Stage::ReconCt => "recon-ct",
            Stage::Metrics => "metrics",
        }
    }
}

/// Artifact names, in the order the pipeline writes them.
pub const ARTIFACTS: [&str; 6] = ["phantom", "counts", "sinogram", "xlct_recon", "ct_recon", "metrics"];

fn header(out: &Path, artifact: &str) -> PathBuf {
    out.join(format!("{artifact}.hdr"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactFile {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub files: Vec<ArtifactFile>,
}

impl Artifact {
    fn collect(name: &str, out: &Path, files: &[PathBuf]) -> Result<Self> {
        let files = files
            .iter()
            .map(|f| {
                let rel = f.strip_prefix(out).unwrap_or(f);
                Ok(ArtifactFile {
                    path: rel.to_string_lossy().replace('\\', "/"),
                    sha256: io::sha256_file(f)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Artifact {
            name: name.to_string(),
            files,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    /// `complete`, or `failed` when a stage aborted; artifacts then list only
    /// what finished stages wrote.
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub timings: Vec<StageTiming>,
    pub artifacts: Vec<Artifact>,
    pub config: PipelineConfig,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn artifact(&self, name: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.name == name)
    }

    /// Checks that every listed file exists with the recorded digest.
    pub fn verify(&self, out: &Path) -> Result<()> {
        for a in &self.artifacts {
            for f in &a.files {
                let path = out.join(&f.path);
                let digest = io::sha256_file(&path)?;
                if digest != f.sha256 {
                    return Err(Error::format(path, "digest does not match the manifest"));
                }
            }
        }
        Ok(())
    }
}

/// Runs `f` on a pool of `threads` workers (0: the global pool).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if threads == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

/// Runs one stage, reading earlier artifacts from `out`.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, out: &Path) -> Result<Vec<Artifact>> {
    log::info!("{} -> {}", stage.name(), out.display());
    let result = match stage {
        Stage::Phantom => stage_phantom(cfg, out).map(|a| vec![a]),
        Stage::Simulate => stage_simulate(cfg, out),
        Stage::ReconXlct => stage_recon_xlct(cfg, out).map(|a| vec![a]),
        Stage::ReconCt => stage_recon_ct(cfg, out).map(|a| vec![a]),
        Stage::Metrics => stage_metrics(cfg, out).map(|a| vec![a]),
    };
    result.map_err(|e| Error::Stage {
        stage: stage.name(),
        source: Box::new(e),
    })
}

/// Runs every stage into `cfg.output_dir` and writes the manifest there. On
/// failure the manifest is still written, marked `failed`, and the stage error
/// is returned.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunManifest> {
    let cfg = cfg.clone().normalized()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        config_hash: cfg.hash()?,
        status: "complete".into(),
        failed_stage: None,
        error: None,
        timings: Vec::new(),
        artifacts: Vec::new(),
        config: cfg.clone(),
    };
    let mut failure = None;
    for stage in Stage::ALL {
        let t0 = Instant::now();
        let result = with_threads(cfg.threads, || run_stage(stage, &cfg, &out));
        manifest.timings.push(StageTiming {
            stage: stage.name().into(),
            seconds: t0.elapsed().as_secs_f64(),
        });
        match result {
            Ok(a) => manifest.artifacts.extend(a),
            Err(e) => {
                manifest.status = "failed".into();
                manifest.failed_stage = Some(stage.name().into());
                manifest.error = Some(e.to_string());
                failure = Some(e);
                break;
            }
        }
    }
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    io::write_text(&out.join(MANIFEST_FILE), &text)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

fn stage_phantom(cfg: &PipelineConfig, out: &Path) -> Result<Artifact> {
    let phantom = build_phantom(cfg, None)?;
    let files = io::write_phantom(&phantom, &header(out, "phantom"))?;
    Artifact::collect("phantom", out, &files)
}

fn stage_simulate(cfg: &PipelineConfig, out: &Path) -> Result<Vec<Artifact>> {
    let phantom = io::read_phantom(&header(out, "phantom"))?;
    let protocol = cfg.scan_protocol()?;
    let a = assemble(cfg, &phantom)?;
    let (xlct_counts, xlct_means) =
        synthesize_counts(&a, phantom.concentration(), cfg.source.count_scale, cfg.seed)?;
    let ct = synthesize_ct(&phantom, &protocol, cfg.seed, Some(cfg.ct.noise))?;
    let m = MeasurementSet {
        n_bins: protocol.n_bins(),
        n_detectors: a.n_detectors(),
        xlct_counts,
        xlct_means,
        ct_projections: Vec::new(),
        rng_seed: cfg.seed,
        count_scale: cfg.source.count_scale,
    };
    let counts = io::write_counts(&m, &header(out, "counts"))?;
    let sino = Sinogram {
        n_slices: protocol.slices.len(),
        n_angles: protocol.n_angles(),
        n_positions: protocol.bins_per_line(),
        values: ct,
    };
    let sinogram = io::write_sinogram(&sino, &header(out, "sinogram"))?;
    Ok(vec![
        Artifact::collect("counts", out, &counts)?,
        Artifact::collect("sinogram", out, &sinogram)?,
    ])
}

/// One-layer grid holding layer `k` of `grid`.
fn layer_grid(grid: &GridGeometry, k: usize) -> Result<GridGeometry> {
    let mut origin = grid.origin;
    origin[2] += k as f64 * grid.voxel_size;
    GridGeometry::new([grid.dims[0], grid.dims[1], 1], grid.voxel_size, origin)
}

/// Voxel layers of the scanned slices, in slice order. Distinct slices must
/// land on distinct layers.
fn slice_layers(grid: &GridGeometry, protocol: &ScanProtocol) -> Result<Vec<usize>> {
    let layers: Vec<usize> = protocol.slices.iter().map(|&z| grid.nearest_layer(z)).collect();
    for (i, k) in layers.iter().enumerate() {
        if layers[..i].contains(k) {
            return Err(Error::validation(
                "protocol.slices",
                format!("two slices fall on voxel layer {k}"),
            ));
        }
    }
    Ok(layers)
}

fn solve(cfg: &PipelineConfig, a: &SystemMatrix, grid: &GridGeometry, y: &[f64]) -> Result<ReconVolume> {
    match cfg.solver.algorithm {
        Algorithm::Mlem => mlem(a, grid, y, &cfg.solver_config(0.0), None),
        Algorithm::Fista => {
            let lambda = match cfg.solver.lambda {
                Some(l) => l,
                None => lambda_heuristic(a, y, cfg.solver.lambda_fraction)?,
            };
            fista_l1(a, grid, y, &cfg.solver_config(lambda))
        }
    }
}

/// Reconstructs concentration from counts. `a` is the unscaled system matrix;
/// the solver sees `count_scale · A` so the result is in μM.
pub fn reconstruct_xlct(
    cfg: &PipelineConfig,
    grid: &GridGeometry,
    a: &SystemMatrix,
    counts: &[u32],
    count_scale: f64,
) -> Result<ReconVolume> {
    let scaled = a.scaled(count_scale)?;
    let y: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    if !cfg.solver.per_slice {
        return solve(cfg, &scaled, grid, &y);
    }
    let protocol = cfg.scan_protocol()?;
    let layers = slice_layers(grid, &protocol)?;
    let rows_per_slice = protocol.n_angles() * protocol.bins_per_line() * a.n_detectors();
    let layer_len = grid.dims[0] * grid.dims[1];
    let mut out = ReconVolume::zeros(*grid);
    for (s, &k) in layers.iter().enumerate() {
        let rows: Vec<usize> = (s * rows_per_slice..(s + 1) * rows_per_slice).collect();
        let cols: Vec<usize> = (k * layer_len..(k + 1) * layer_len).collect();
        let sub = scaled.submatrix(&rows, &cols)?;
        let r = solve(cfg, &sub, &layer_grid(grid, k)?, &y[rows[0]..rows[0] + rows.len()])?;
        out.values[k * layer_len..(k + 1) * layer_len].copy_from_slice(&r.values);
        out.iterations_run = out.iterations_run.max(r.iterations_run);
        out.objective_trace.extend(r.objective_trace);
    }
    Ok(out)
}

fn stage_recon_xlct(cfg: &PipelineConfig, out: &Path) -> Result<Artifact> {
    let phantom = io::read_phantom(&header(out, "phantom"))?;
    let m = io::read_counts(&header(out, "counts"))?;
    let a = assemble(cfg, &phantom)?;
    if m.n_bins * m.n_detectors != a.n_rows() || m.n_detectors != a.n_detectors() {
        return Err(Error::validation(
            "counts",
            format!(
                "{} bins x {} detectors do not match the configured scan ({} rows)",
                m.n_bins,
                m.n_detectors,
                a.n_rows()
            ),
        ));
    }
    let r = reconstruct_xlct(cfg, &phantom.grid, &a, &m.xlct_counts, m.count_scale)?;
    let hdr = header(out, "xlct_recon");
    let mut files = io::write_volume(&r, &hdr)?;
    let trace = out.join("xlct_recon-trace.csv");
    io::write_trace_csv(&r.objective_trace, &trace)?;
    files.push(trace);
    Artifact::collect("xlct_recon", out, &files)
}

/// FBP of every slice of a sinogram into the nearest layers of `grid`.
/// A truncated last lateral bin is dropped so the sampling stays uniform.
pub fn reconstruct_ct(
    protocol: &ScanProtocol,
    grid: &GridGeometry,
    sino: &Sinogram,
    filter: FbpFilter,
) -> Result<ReconVolume> {
    if sino.n_slices != protocol.slices.len()
        || sino.n_angles != protocol.n_angles()
        || sino.n_positions != protocol.bins_per_line()
    {
        return Err(Error::validation("sinogram", "shape does not match the configured scan"));
    }
    let bins = enumerate_fly_bins(protocol);
    let line = &bins[..sino.n_positions];
    let mut keep = sino.n_positions;
    if keep > 2 && line[keep - 1].width() < protocol.step_size * (1.0 - 1e-9) {
        keep -= 1;
    }
    let geom = FbpGeometry {
        angles: protocol.angles.clone(),
        s_positions: line[..keep].iter().map(|b| b.center()).collect(),
    };
    let layers = slice_layers(grid, protocol)?;
    let layer_len = grid.dims[0] * grid.dims[1];
    let mut out = ReconVolume::zeros(*grid);
    for (s, &k) in layers.iter().enumerate() {
        let proj: Vec<f64> = sino
            .slice(s)
            .chunks(sino.n_positions)
            .flat_map(|p| p[..keep].iter().copied())
            .collect();
        let r = fbp_parallel(&proj, &geom, &layer_grid(grid, k)?, filter)?;
        out.values[k * layer_len..(k + 1) * layer_len].copy_from_slice(&r.values);
    }
    Ok(out)
}

fn stage_recon_ct(cfg: &PipelineConfig, out: &Path) -> Result<Artifact> {
    let phantom = io::read_phantom(&header(out, "phantom"))?;
    let sino = io::read_sinogram(&header(out, "sinogram"))?;
    let r = reconstruct_ct(&cfg.scan_protocol()?, &phantom.grid, &sino, cfg.ct.filter)?;
    let files = io::write_volume(&r, &header(out, "ct_recon"))?;
    Artifact::collect("ct_recon", out, &files)
}

fn in_layers(grid: &GridGeometry, layers: &[usize], n: usize) -> bool {
    layers.contains(&grid.unravel(n)[2])
}

/// Target voxels and background voxels (inside the object, at least
/// `margin` from every target) in the scanned layers.
pub fn region_masks(
    phantom: &VoxelPhantom,
    targets: &[TargetSpec],
    layers: &[usize],
    margin: f64,
) -> (Vec<bool>, Vec<bool>) {
    let grid = &phantom.grid;
    let inside = phantom.inside_mask();
    let grown: Vec<TargetSpec> = targets
        .iter()
        .map(|t| TargetSpec {
            radius: t.radius + margin,
            height: t.height + 2.0 * margin,
            ..*t
        })
        .collect();
    (0..grid.n_voxels())
        .map(|n| {
            if !inside[n] || !in_layers(grid, layers, n) {
                return (false, false);
            }
            let c = grid.voxel_center(n);
            let target = targets.iter().any(|t| t.concentration > 0.0 && t.contains(c));
            let near = grown.iter().any(|t| t.contains(c));
            (target, !near)
        })
        .unzip()
}

/// Profile through the target centre along y, `radius + 1 mm` either side.
pub fn target_profile(target: &TargetSpec, voxel_size: f64) -> LineProfile {
    let half = target.radius + 1.0;
    let [x, y, z] = target.center;
    let n = ((2.0 * half) / (0.25 * voxel_size)).ceil() as usize + 1;
    LineProfile {
        start: [x, y - half, z],
        end: [x, y + half, z],
        n_samples: n,
        values: Vec::new(),
    }
}

/// CNR of a target-concentration sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// (concentration, CNR)
    pub rows: Vec<(f64, f64)>,
    pub cnr_threshold: f64,
    /// First concentration whose CNR is below the threshold.
    pub first_below: Option<f64>,
}

/// Simulates and reconstructs the configured scan once per sweep
/// concentration (all targets set to it) and reports the target CNR.
pub fn sensitivity_sweep(cfg: &PipelineConfig) -> Result<SweepResult> {
    let sweep = cfg.sweep.clone().unwrap_or_default();
    let base = build_phantom(cfg, Some(0.0))?;
    let a = assemble(cfg, &base)?;
    let layers = slice_layers(&base.grid, &cfg.scan_protocol()?)?;
    let mut rows = Vec::with_capacity(sweep.concentrations.len());
    for &c in &sweep.concentrations {
        let phantom = build_phantom(cfg, Some(c))?;
        let targets: Vec<TargetSpec> = cfg
            .targets()
            .iter()
            .map(|t| TargetSpec {
                concentration: c,
                ..*t
            })
            .collect();
        let (counts, _) = synthesize_counts(&a, phantom.concentration(), cfg.source.count_scale, cfg.seed)?;
        let r = reconstruct_xlct(cfg, &phantom.grid, &a, &counts, cfg.source.count_scale)?;
        let (target, background) = region_masks(&phantom, &targets, &layers, cfg.metrics.background_margin);
        rows.push((c, cnr(&r.values, &target, &background)?));
    }
    let first_below = rows.iter().find(|(_, v)| *v < sweep.cnr_threshold).map(|(c, _)| *c);
    Ok(SweepResult {
        rows,
        cnr_threshold: sweep.cnr_threshold,
        first_below,
    })
}

/// Key/value metrics of a finished run plus optional sweep rows.
pub fn compute_metrics(
    cfg: &PipelineConfig,
    phantom: &VoxelPhantom,
    xlct: &ReconVolume,
    ct: &ReconVolume,
) -> Result<String> {
    let protocol = cfg.scan_protocol()?;
    let grid = &phantom.grid;
    let layers = slice_layers(grid, &protocol)?;
    let targets = cfg.targets();
    let mut text = String::new();
    let mut kv = |k: &str, v: f64| {
        let _ = writeln!(text, "{k} = {v}");
    };

    let (target, background) = region_masks(phantom, targets, &layers, cfg.metrics.background_margin);
    let xlct_cnr = cnr(&xlct.values, &target, &background).unwrap_or_else(|e| {
        log::warn!("xlct_cnr: {e}");
        f64::NAN
    });
    kv("xlct_cnr", xlct_cnr);
    let xlct_dice = dice(&xlct.values, &target, cfg.metrics.dice_threshold).unwrap_or_else(|e| {
        log::warn!("xlct_dice: {e}");
        f64::NAN
    });
    kv("xlct_dice", xlct_dice);
    for (i, t) in targets.iter().enumerate() {
        let w = line_profile_fwhm(xlct, &target_profile(t, grid.voxel_size)).unwrap_or_else(|e| {
            log::warn!("target {i} fwhm: {e}");
            f64::NAN
        });
        kv(&format!("xlct_fwhm_target_{i}"), w);
    }

    let mu_x = phantom.background.mu_x;
    let rim = phantom.support.radius - 2.0 * grid.voxel_size;
    let interior: Vec<f64> = (0..grid.n_voxels())
        .filter(|&n| {
            let c = grid.voxel_center(n);
            phantom.inside_mask()[n] && in_layers(grid, &layers, n) && c[0].hypot(c[1]) < rim
        })
        .map(|n| ct.values[n])
        .collect();
    let count = interior.len().max(1) as f64;
    let mean = interior.iter().sum::<f64>() / count;
    let mse = interior.iter().map(|v| (v - mu_x) * (v - mu_x)).sum::<f64>() / count;
    kv("ct_mu_x_true", mu_x);
    kv("ct_interior_mean", mean);
    kv("ct_interior_rmse", mse.sqrt());

    let timing = estimate_scan_time(&protocol);
    kv("scan_time_per_line", timing.per_line);
    kv("scan_time_per_slice", timing.per_slice);
    kv("scan_time_total", timing.total);

    if cfg.sweep.is_some() {
        let sweep = sensitivity_sweep(cfg)?;
        kv("cnr_threshold", sweep.cnr_threshold);
        match sweep.first_below {
            Some(c) => kv("cnr_below_threshold_at", c),
            None => {
                let _ = writeln!(text, "cnr_below_threshold_at = none");
            }
        }
        text.push_str("\nconcentration,cnr\n");
        for (c, v) in sweep.rows {
            let _ = writeln!(text, "{c},{v}");
        }
    }
    Ok(text)
}

fn stage_metrics(cfg: &PipelineConfig, out: &Path) -> Result<Artifact> {
    let phantom = io::read_phantom(&header(out, "phantom"))?;
    let xlct = io::read_volume(&header(out, "xlct_recon"))?;
    let ct = io::read_volume(&header(out, "ct_recon"))?;
    let text = compute_metrics(cfg, &phantom, &xlct, &ct)?;
    let path = out.join("metrics.txt");
    io::write_text(&path, &text)?;
    Artifact::collect("metrics", out, &[path])
}

/// Parses the `key = value` part of a metrics file.
pub fn parse_metrics(text: &str) -> Vec<(String, String)> {
    text.lines()
        .take_while(|l| !l.trim().is_empty())
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[phantom]\ndiameter = 3.2\nheight = 0.1\nvoxel_size = 0.1\n";

    #[test]
    fn missing_voxel_size_is_named() {
        let err = PipelineConfig::from_toml("[phantom]\ndiameter = 3.2\nheight = 0.1\n").unwrap_err();
        assert!(matches!(&err, Error::Validation { field, .. } if field == "phantom.voxel_size"), "{err}");
        let err = PipelineConfig::from_toml("seed = 1\n").unwrap_err();
        assert!(matches!(&err, Error::Validation { field, .. } if field == "phantom"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = PipelineConfig::from_toml(&format!("{MINIMAL}bogus_key = 1\n")).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
        let err = PipelineConfig::from_toml(&format!("{MINIMAL}[solver]\nlamda = 1\n")).unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
    }

    #[test]
    fn parse_error_has_position() {
        let err = PipelineConfig::from_toml("[phantom\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn normalized_dump_is_fixed_point() {
        let cfg = PipelineConfig::from_toml(MINIMAL).unwrap();
        let dump = cfg.to_toml().unwrap();
        for key in [
            "output_dir",
            "seed",
            "threads",
            "max_nonzeros",
            "uptake",
            "mu_s_prime",
            "n_angles",
            "stage_speed",
            "turnaround_time",
            "quadrature_q",
            "ring_radius",
            "count_scale",
            "algorithm",
            "lambda_fraction",
            "per_slice",
            "filter",
            "noise",
            "dice_threshold",
            "background_margin",
        ] {
            assert!(dump.contains(key), "{key} missing from\n{dump}");
        }
        let again = PipelineConfig::from_toml(&dump).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_toml().unwrap(), dump);
    }

    #[test]
    fn invariant_violations_named() {
        let cases = [
            ("[protocol]\nbin_time = 0\n", "protocol.bin_time"),
            ("[detectors]\ncount = 0\n", "detectors.count"),
            ("[sweep]\nconcentrations = [0.5, 1.0]\n", "sweep.concentrations"),
            ("[metrics]\ndice_threshold = 0\n", "metrics.dice_threshold"),
            ("[source]\ncount_scale = -1\n", "source.count_scale"),
        ];
        for (extra, name) in cases {
            let err = PipelineConfig::from_toml(&format!("{MINIMAL}{extra}")).unwrap_err();
            assert!(matches!(&err, Error::Validation { field, .. } if field == name), "{name}: {err}");
        }
    }

    #[test]
    fn region_masks_are_disjoint() {
        let cfg = PipelineConfig::from_toml(&format!(
            "{MINIMAL}[[phantom.targets]]\ncenter = [0.5, 0.0, 0.0]\nradius = 0.3\nheight = 0.1\nconcentration = 1.0\n"
        ))
        .unwrap();
        let p = build_phantom(&cfg, None).unwrap();
        let (t, b) = region_masks(&p, cfg.targets(), &[0], 0.2);
        assert!(t.iter().zip(&b).all(|(t, b)| !(*t && *b)));
        assert!(t.iter().filter(|&&v| v).count() > 20);
        assert!(b.iter().filter(|&&v| v).count() > 300);
    }
}
