//! Siddon traversal, pencil-beam fluence and the diffusion Green's function.

use xlct::geometry::{beam_ray, BeamPose};
use xlct::phantom::*;
use xlct::transport::*;

fn main() -> xlct::Result<()> {
    let p = build_cylinder_phantom(12.8, 0.1, 0.1, TissueProperties::default())?;
    let pose = BeamPose { theta: 0.3, s: 1.0, z: 0.0, fwhm: 0.15 };
    let ray = beam_ray(&pose);
    let trace = siddon_trace(&p.grid, &ray)?;
    println!(
        "central ray crosses {} voxels over {:.4} mm; line integral {:.5}",
        trace.entries.len(),
        trace.total_length(),
        xray_line_integral(&p, &ray)?
    );

    let fluence = beam_fluence(&p, &pose, 1.0)?;
    let peak = fluence.entries.iter().map(|e| e.1).fold(0.0, f64::max);
    println!("fluence touches {} voxels, peak {:.4}", fluence.entries.len(), peak);

    let optical = diffusion_params(p.background.mu_a, p.background.mu_s_prime)?;
    println!("D = {:.4} mm, mu_eff = {:.4} /mm", optical.d, optical.mu_eff);
    let r_min = clamp_distance(p.grid.voxel_size);
    for r in [0.0, 1.0, 2.0, 4.0, 8.0] {
        let g = greens_cw([0.0; 3], [r, 0.0, 0.0], &optical, r_min);
        println!("G({r} mm) = {g:.4e}");
    }
    Ok(())
}
