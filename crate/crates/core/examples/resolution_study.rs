//! Two 0.3 mm capillaries 0.3 mm apart, scanned at several step sizes with a
//! 0.15 mm beam: valley-to-peak ratio and per-target FWHM.
//!
//!     cargo run --release --example resolution_study -- 0.075 0.15 0.3 0.6

use xlct::forward::*;
use xlct::geometry::*;
use xlct::metrics::*;
use xlct::phantom::*;
use xlct::pipeline::target_profile;
use xlct::recon::*;

fn main() -> xlct::Result<()> {
    let steps: Vec<f64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let steps = if steps.is_empty() { vec![0.075, 0.15, 0.3, 0.6] } else { steps };
    let vs = 0.05;
    let (cx, cy) = (1.0, 0.5);
    let targets = [-0.3, 0.3].map(|dx| TargetSpec { center: [cx + dx, cy, 0.0], radius: 0.15, height: vs, concentration: 1.0 });
    let mut p = build_cylinder_phantom(12.8, vs, vs, TissueProperties::default())?;
    for t in &targets {
        p = add_capillary_target(&p, t)?;
    }
    let detectors = detector_ring(4, 6.4, 0.0)?;
    let count_scale = 2e8;
    println!("step_mm  valley/peak  fwhm_a  fwhm_b");
    for step in steps {
        let protocol = make_protocol(&ProtocolConfig {
            fov: 13.2,
            stage_speed: step / 0.02,
            bin_time: 0.02,
            ..Default::default()
        })?;
        let a = assemble_system_matrix(&p, &protocol, &detectors, &SourceModel { count_scale, ..Default::default() })?;
        let (counts, _) = synthesize_counts(&a, p.concentration(), count_scale, 1)?;
        let a = a.scaled(count_scale)?;
        let y: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let lambda = lambda_heuristic(&a, &y, 0.01)?;
        let img = fista_l1(&a, &p.grid, &y, &SolverConfig { max_iters: 200, lambda, ..Default::default() })?;

        let line = LineProfile::sample(&img, [cx - 0.6, cy, 0.0], [cx + 0.6, cy, 0.0], 481)?;
        let v = &line.values;
        let peak = v[..240].iter().cloned().fold(0.0, f64::max).min(v[241..].iter().cloned().fold(0.0, f64::max));
        let valley = v[120..=360].iter().cloned().fold(f64::INFINITY, f64::min);
        let w: Vec<String> = targets
            .iter()
            .map(|t| match line_profile_fwhm(&img, &target_profile(t, vs)) {
                Ok(w) => format!("{w:.3}"),
                Err(_) => "  n/a".into(),
            })
            .collect();
        println!("{step:7.3}  {:11.3}  {}  {}", valley / peak, w[0], w[1]);
    }
    Ok(())
}
