//! Reconstructs one simulated slice with MLEM and with FISTA-L1 and compares
//! target CNR and Dice.

use xlct::forward::*;
use xlct::geometry::*;
use xlct::metrics::{cnr, dice};
use xlct::phantom::*;
use xlct::recon::*;

fn main() -> xlct::Result<()> {
    let target = TargetSpec { center: [0.8, -0.4, 0.0], radius: 0.3, height: 0.1, concentration: 1.0 };
    let p = build_cylinder_phantom(6.4, 0.1, 0.1, TissueProperties::default())?;
    let p = add_uniform_uptake(&add_capillary_target(&p, &target)?, 0.1)?;
    let protocol = make_protocol(&ProtocolConfig { fov: 7.0, n_angles: 6, ..Default::default() })?;
    let detectors = detector_ring(4, 3.2, 0.0)?;
    let source = SourceModel { count_scale: 1e6, ..Default::default() };
    let a = assemble_system_matrix(&p, &protocol, &detectors, &source)?;
    let (counts, _) = synthesize_counts(&a, p.concentration(), source.count_scale, 7)?;
    let a = a.scaled(source.count_scale)?;
    let y: Vec<f64> = counts.iter().map(|&c| c as f64).collect();

    let grid = &p.grid;
    let truth: Vec<bool> = (0..grid.n_voxels()).map(|n| target.contains(grid.voxel_center(n))).collect();
    let background: Vec<bool> = (0..grid.n_voxels())
        .map(|n| {
            let c = grid.voxel_center(n);
            p.inside_mask()[n] && (c[0] - 0.8).hypot(c[1] + 0.4) > 1.0
        })
        .collect();

    let em = mlem(&a, grid, &y, &SolverConfig { max_iters: 50, ..Default::default() }, None)?;
    let lambda = lambda_heuristic(&a, &y, 0.01)?;
    let fista = fista_l1(&a, grid, &y, &SolverConfig { max_iters: 200, lambda, ..Default::default() })?;
    for (name, r) in [("MLEM", &em), ("FISTA-L1", &fista)] {
        println!(
            "{name:9} CNR {:7.2}  Dice {:.3}  last objective {:.6e}",
            cnr(&r.values, &truth, &background)?,
            dice(&r.values, &truth, 0.5)?,
            r.objective_trace.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
