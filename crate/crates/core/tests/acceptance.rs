//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use common::*;
use rand::Rng;
use xlct::forward::*;
use xlct::geometry::*;
use xlct::metrics::*;
use xlct::phantom::*;
use xlct::pipeline::{load_config, parse_metrics, reconstruct_ct, run_pipeline, sensitivity_sweep, target_profile};
use xlct::io::Sinogram;
use xlct::recon::*;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Two 0.3 mm capillaries with a 0.3 mm gap, reconstructed with FISTA-L1.
struct PairResult {
    peaks: (f64, f64),
    valley: f64,
    fwhm: [Option<f64>; 2],
    seconds: f64,
}

impl PairResult {
    fn valley_ratio(&self) -> f64 {
        self.valley / self.peaks.0.min(self.peaks.1)
    }

    fn fwhm_text(&self) -> String {
        let f = |w: Option<f64>| w.map_or("n/a".to_string(), |w| format!("{w:.3}"));
        format!("[{}, {}]", f(self.fwhm[0]), f(self.fwhm[1]))
    }
}

const PAIR_CENTER: [f64; 2] = [1.0, 0.5];
const PAIR_HALF_SEPARATION: f64 = 0.3;
const PAIR_COUNT_SCALE: f64 = 2.0e8;
const PAIR_LAMBDA_FRACTION: f64 = 0.01;

fn two_capillary_scan(step: f64) -> PairResult {
    let t0 = Instant::now();
    let vs = 0.05;
    let base = build_cylinder_phantom(12.8, vs, vs, TissueProperties::default()).unwrap();
    let [cx, cy] = PAIR_CENTER;
    let targets = [-1.0, 1.0].map(|sign| TargetSpec {
        center: [cx + sign * PAIR_HALF_SEPARATION, cy, 0.0],
        radius: 0.15,
        height: vs,
        concentration: 1.0,
    });
    let mut phantom = base;
    for t in &targets {
        phantom = add_capillary_target(&phantom, t).unwrap();
    }
    let protocol = make_protocol(&ProtocolConfig {
        n_angles: 6,
        fov: 13.2,
        stage_speed: step / 0.02,
        bin_time: 0.02,
        beam_fwhm: 0.15,
        quadrature_q: 5,
        ..Default::default()
    })
    .unwrap();
    let detectors = detector_ring(4, 6.4, 0.0).unwrap();
    let source = SourceModel { count_scale: PAIR_COUNT_SCALE, ..Default::default() };
    let a = assemble_system_matrix(&phantom, &protocol, &detectors, &source).unwrap();
    let (counts, _) = synthesize_counts(&a, phantom.concentration(), PAIR_COUNT_SCALE, 1).unwrap();
    let scaled = a.scaled(PAIR_COUNT_SCALE).unwrap();
    let y: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let lambda = lambda_heuristic(&scaled, &y, PAIR_LAMBDA_FRACTION).unwrap();
    let cfg = SolverConfig { max_iters: 200, lambda, ..Default::default() };
    let image = fista_l1(&scaled, &phantom.grid, &y, &cfg).unwrap();

    let n = 801;
    let line = LineProfile::sample(&image, [cx - 1.0, cy, 0.0], [cx + 1.0, cy, 0.0], n).unwrap();
    let x_at = |i: usize| cx - 1.0 + 2.0 * i as f64 / (n - 1) as f64;
    let max_in = |lo: f64, hi: f64| {
        (0..n)
            .filter(|&i| (lo..=hi).contains(&x_at(i)))
            .map(|i| line.values[i])
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let s = PAIR_HALF_SEPARATION;
    let peaks = (max_in(cx - s - 0.15, cx - s + 0.15), max_in(cx + s - 0.15, cx + s + 0.15));
    let valley = (0..n)
        .filter(|&i| (cx - s..=cx + s).contains(&x_at(i)))
        .map(|i| line.values[i])
        .fold(f64::INFINITY, f64::min);
    let fwhm = targets.map(|t| line_profile_fwhm(&image, &target_profile(&t, vs)).ok());
    PairResult { peaks, valley, fwhm, seconds: t0.elapsed().as_secs_f64() }
}

fn criterion_resolution(fine: &PairResult) -> Outcome {
    let in_range = fine.fwhm.iter().all(|w| matches!(w, Some(w) if (0.15..=0.45).contains(w)));
    check(
        fine.valley_ratio() <= 0.8 && in_range && fine.seconds < 120.0,
        format!(
            "valley/lower peak {:.3} (<= 0.8), FWHM {} mm (in [0.15, 0.45]), {:.1} s (< 120)",
            fine.valley_ratio(),
            fine.fwhm_text(),
            fine.seconds
        ),
    )
}

fn criterion_step_degradation(fine: &PairResult, coarse: &PairResult) -> Outcome {
    let valley_fails = coarse.valley_ratio() > 0.8;
    let widened = fine.fwhm.iter().zip(&coarse.fwhm).any(|(f, c)| match (f, c) {
        (Some(f), Some(c)) => *c >= 1.5 * f,
        (Some(_), None) => true,
        _ => false,
    });
    check(
        valley_fails || widened,
        format!(
            "step 0.6 mm: valley/lower peak {:.3} (fails if > 0.8), FWHM {} vs {} mm at 0.075 mm",
            coarse.valley_ratio(),
            coarse.fwhm_text(),
            fine.fwhm_text()
        ),
    )
}

fn criterion_ct_fidelity() -> Outcome {
    let vs = 0.1;
    let phantom = build_cylinder_phantom(10.0, vs, vs, TissueProperties::default()).unwrap();
    let protocol = make_protocol(&ProtocolConfig {
        n_angles: 180,
        fov: 14.0,
        stage_speed: 5.0,
        bin_time: 0.02,
        ..Default::default()
    })
    .unwrap();
    let p = synthesize_ct(&phantom, &protocol, 0, None).unwrap();
    let sino = Sinogram { n_slices: 1, n_angles: 180, n_positions: protocol.bins_per_line(), values: p };
    let grid = phantom.grid;
    let mu = phantom.background.mu_x;
    let mut detail = Vec::new();
    let mut ok = true;
    for filter in [FbpFilter::Ramp, FbpFilter::RampHann] {
        let img = reconstruct_ct(&protocol, &grid, &sino, filter).unwrap();
        let interior: Vec<f64> = (0..grid.n_voxels())
            .filter(|&n| {
                let c = grid.voxel_center(n);
                phantom.inside_mask()[n] && c[0].hypot(c[1]) < 5.0 - 2.0 * vs
            })
            .map(|n| img.values[n])
            .collect();
        let mean = interior.iter().sum::<f64>() / interior.len() as f64;
        let rmse = (interior.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / interior.len() as f64).sqrt();
        ok &= (mean - mu).abs() / mu < 0.05 && rmse / mu < 0.10;
        detail.push(format!(
            "{filter:?}: mean error {:.2}% (< 5%), RMSE {:.2}% (< 10%)",
            100.0 * (mean - mu).abs() / mu,
            100.0 * rmse / mu
        ));
    }
    check(ok, detail.join("; "))
}

fn desk_scanner() -> (VoxelPhantom, ScanProtocol, DetectorSet) {
    let phantom = build_cylinder_phantom(3.2, 0.3, 0.1, TissueProperties::default()).unwrap();
    let protocol = make_protocol(&ProtocolConfig {
        n_angles: 4,
        fov: 4.0,
        stage_speed: 5.0,
        bin_time: 0.02,
        slices: vec![-0.1, 0.1],
        quadrature_q: 3,
        ..Default::default()
    })
    .unwrap();
    let detectors = detector_ring(4, 1.6, 0.0).unwrap();
    (phantom, protocol, detectors)
}

fn criterion_adjoint() -> Outcome {
    let (phantom, protocol, detectors) = desk_scanner();
    let a = assemble_system_matrix(&phantom, &protocol, &detectors, &SourceModel::default()).unwrap();
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x: Vec<f64> = (0..a.n_cols()).map(|_| r.random::<f64>() - 0.5).collect();
        let y: Vec<f64> = (0..a.n_rows()).map(|_| r.random::<f64>() - 0.5).collect();
        let ax = apply(&a, &x).unwrap();
        let aty = apply_adjoint(&a, &y).unwrap();
        worst = worst.max((dot(&ax, &y) - dot(&x, &aty)).abs() / (norm(&ax) * norm(&y)));
    }
    check(
        worst < 1e-10,
        format!("{}x{} matrix, worst relative gap {worst:.2e} over 100 pairs (< 1e-10)", a.n_rows(), a.n_cols()),
    )
}

fn criterion_mlem_monotone() -> Outcome {
    let (base, protocol, detectors) = desk_scanner();
    let a = assemble_system_matrix(&base, &protocol, &detectors, &SourceModel::default()).unwrap();
    let mut worst: f64 = 0.0;
    for instance in 0..20u64 {
        let mut r = rng(100 + instance);
        let mut phantom = add_uniform_uptake(&base, r.random::<f64>() * 0.2).unwrap();
        for _ in 0..1 + r.random_range(0..3) {
            let t = TargetSpec {
                center: [r.random_range(-0.8..0.8), r.random_range(-0.8..0.8), 0.0],
                radius: r.random_range(0.1..0.4),
                height: 0.3,
                concentration: r.random_range(0.1..2.0),
            };
            phantom = add_capillary_target(&phantom, &t).unwrap();
        }
        let scale = 10f64.powf(r.random_range(5.0..8.0));
        let (counts, _) = synthesize_counts(&a, phantom.concentration(), scale, instance).unwrap();
        let y: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let out = mlem(&a.scaled(scale).unwrap(), &phantom.grid, &y, &SolverConfig { max_iters: 60, ..Default::default() }, None).unwrap();
        for w in out.objective_trace.windows(2) {
            worst = worst.max((w[0] - w[1]) / w[0].abs());
        }
    }
    check(
        worst <= 1e-9,
        format!("20 instances x 60 iterations, largest relative decrease {worst:.2e} (<= 1e-9)"),
    )
}

fn criterion_solver_oracles() -> Outcome {
    let mut worst_fista: f64 = 0.0;
    for seed in 0..10u64 {
        let (m, n) = (12 + 2 * seed as usize, 2 + seed as usize % 9);
        let a = random_matrix(m, n, 0.8, 200 + seed);
        let mut r = rng(300 + seed);
        let y: Vec<f64> = (0..m).map(|_| (r.random::<f64>() - 0.2).abs()).collect();
        let oracle = nnls_brute_force(&to_nalgebra(&a), &y);
        let grid = xlct::phantom::GridGeometry::new([n, 1, 1], 1.0, [0.0; 3]).unwrap();
        let cfg = SolverConfig { max_iters: 20_000, lambda: 1e-8, ..Default::default() };
        let x = fista_l1(&a, &grid, &y, &cfg).unwrap().values;
        worst_fista = worst_fista.max(rel_l2(&x, &oracle));
    }
    let mut worst_mlem: f64 = 0.0;
    for seed in 0..10u64 {
        let a = random_matrix(30, 10, 0.9, 400 + seed);
        let mut r = rng(500 + seed);
        let c: Vec<f64> = (0..10).map(|_| 0.5 + r.random::<f64>()).collect();
        let y = apply(&a, &c).unwrap();
        let grid = xlct::phantom::GridGeometry::new([10, 1, 1], 1.0, [0.0; 3]).unwrap();
        let x = mlem(&a, &grid, &y, &SolverConfig { max_iters: 500, ..Default::default() }, None).unwrap();
        worst_mlem = worst_mlem.max(rel_l2(&apply(&a, &x.values).unwrap(), &y));
    }
    check(
        worst_fista < 1e-4 && worst_mlem < 1e-3,
        format!(
            "FISTA vs brute-force NNLS worst rel L2 {worst_fista:.2e} (< 1e-4); MLEM 500 it. worst residual {worst_mlem:.2e} (< 1e-3)"
        ),
    )
}

fn sparse_diff_norm(a: &SystemMatrix, b: &SystemMatrix) -> f64 {
    let mut sum = 0.0;
    for r in 0..a.n_rows() {
        let (ca, va) = a.row(r);
        let (cb, vb) = b.row(r);
        let (mut i, mut j) = (0, 0);
        while i < ca.len() || j < cb.len() {
            let d = if j == cb.len() || (i < ca.len() && ca[i] < cb[j]) {
                i += 1;
                va[i - 1]
            } else if i == ca.len() || cb[j] < ca[i] {
                j += 1;
                vb[j - 1]
            } else {
                i += 1;
                j += 1;
                va[i - 1] - vb[j - 1]
            };
            sum += d * d;
        }
    }
    sum.sqrt()
}

fn criterion_fly_scan() -> Outcome {
    let phantom = build_cylinder_phantom(6.4, 0.1, 0.05, TissueProperties::default()).unwrap();
    let protocol = make_protocol(&ProtocolConfig {
        n_angles: 4,
        fov: 7.2,
        stage_speed: 7.5,
        bin_time: 0.02,
        beam_fwhm: 0.15,
        ..Default::default()
    })
    .unwrap();
    let detectors = detector_ring(4, 3.2, 0.0).unwrap();
    let source = SourceModel::default();
    let q1 = assemble_system_matrix(&phantom, &protocol.with_quadrature(1).unwrap(), &detectors, &source).unwrap();
    let stat = assemble_static_system_matrix(&phantom, &protocol, &detectors, &source).unwrap();
    let identical = q1 == stat;
    let q5 = assemble_system_matrix(&phantom, &protocol.with_quadrature(5).unwrap(), &detectors, &source).unwrap();
    let q25 = assemble_system_matrix(&phantom, &protocol.with_quadrature(25).unwrap(), &detectors, &source).unwrap();
    let rel = sparse_diff_norm(&q5, &q25) / q25.frobenius_norm();
    check(
        identical && rel < 0.01,
        format!(
            "q=1 {} static; step {:.3} mm = FWHM, ||A5 - A25||/||A25|| = {:.3}% (< 1%)",
            if identical { "bit-identical to" } else { "DIFFERS from" },
            protocol.step_size,
            100.0 * rel
        ),
    )
}

fn criterion_timing() -> Outcome {
    let demo = make_protocol(&ProtocolConfig::default()).unwrap();
    let t = estimate_scan_time(&demo);
    let anchor = (t.per_slice - 43.0).abs() < 0.05;
    let mut linear = true;
    let exact = ProtocolConfig { fov: 32.0, stage_speed: 4.0, turnaround_time: 1.0, ..Default::default() };
    let unit = estimate_scan_time(&make_protocol(&ProtocolConfig { n_angles: 1, ..exact.clone() }).unwrap()).per_slice;
    for n_angles in 1..=360usize {
        for n_slices in [1usize, 2, 7, 50] {
            let p = make_protocol(&ProtocolConfig {
                n_angles,
                slices: (0..n_slices).map(|k| k as f64).collect(),
                ..exact.clone()
            })
            .unwrap();
            let tm = estimate_scan_time(&p);
            linear &= tm.per_slice == n_angles as f64 * unit && tm.total == (n_angles * n_slices) as f64 * unit;
        }
    }
    check(
        anchor && linear,
        format!(
            "demo protocol {:.2} s per slice (43.0 +- 0.05); linear in angles and slices: {}",
            t.per_slice,
            if linear { "exact" } else { "NO" }
        ),
    )
}

fn demo_config() -> xlct::pipeline::PipelineConfig {
    load_config(&Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/demo.toml")).unwrap()
}

fn criterion_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for threads in [8usize, 1] {
        let mut cfg = demo_config();
        cfg.threads = threads;
        cfg.output_dir = dir.path().join(format!("t{threads}"));
        runs.push(run_pipeline(&cfg).unwrap());
    }
    let files = |m: &xlct::pipeline::RunManifest| -> Vec<(String, String)> {
        m.artifacts.iter().flat_map(|a| a.files.iter().map(|f| (f.path.clone(), f.sha256.clone()))).collect()
    };
    let (a, b) = (files(&runs[0]), files(&runs[1]));
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    check(
        a.len() == b.len() && differing.is_empty(),
        format!("{} artifact files, 8 vs 1 threads, differing: {:?}", a.len(), differing),
    )
}

fn criterion_sensitivity() -> Outcome {
    let cfg = demo_config();
    let sweep = sensitivity_sweep(&cfg).unwrap();
    let cnrs: Vec<f64> = sweep.rows.iter().map(|r| r.1).collect();
    let monotone = cnrs.windows(2).all(|w| w[1] <= w[0]);

    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_xlct"))
        .arg("pipeline")
        .arg("--config")
        .arg(Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/demo.toml"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap_or_default();
    let emitted = parse_metrics(&text)
        .into_iter()
        .find(|(k, _)| k == "cnr_below_threshold_at")
        .map(|(_, v)| v);
    let expected = sweep.first_below.map(|c| c.to_string());
    check(
        monotone && out.status.success() && emitted.is_some() && emitted == expected,
        format!(
            "CNR over {:?} uM = {:?}; CLI emits cnr_below_threshold_at = {}",
            sweep.rows.iter().map(|r| r.0).collect::<Vec<_>>(),
            cnrs.iter().map(|c| (c * 100.0).round() / 100.0).collect::<Vec<_>>(),
            emitted.unwrap_or_else(|| "missing".into())
        ),
    )
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} {id:>2} {name}: {detail}");
    outcome.is_ok()
}

fn main() -> ExitCode {
    let mut ok = true;
    let fine = catch_unwind(|| two_capillary_scan(0.075));
    let coarse = catch_unwind(|| two_capillary_scan(0.6));
    ok &= run(1, "resolution vs beam size", || match &fine {
        Ok(f) => criterion_resolution(f),
        Err(_) => Err("scan panicked".into()),
    });
    ok &= run(2, "step-size degradation", || match (&fine, &coarse) {
        (Ok(f), Ok(c)) => criterion_step_degradation(f, c),
        _ => Err("scan panicked".into()),
    });
    ok &= run(3, "CT fidelity", criterion_ct_fidelity);
    ok &= run(4, "adjoint identity", criterion_adjoint);
    ok &= run(5, "MLEM monotonicity", criterion_mlem_monotone);
    ok &= run(6, "solver-oracle equivalence", criterion_solver_oracles);
    ok &= run(7, "fly-scan consistency", criterion_fly_scan);
    ok &= run(8, "timing model", criterion_timing);
    ok &= run(9, "determinism", criterion_determinism);
    ok &= run(10, "sensitivity property", criterion_sensitivity);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
