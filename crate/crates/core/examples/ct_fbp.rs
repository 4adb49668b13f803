//! Pencil-beam CT of a homogeneous cylinder, reconstructed by filtered
//! backprojection with both filters.

use xlct::forward::synthesize_ct;
use xlct::geometry::*;
use xlct::io::Sinogram;
use xlct::phantom::*;
use xlct::pipeline::reconstruct_ct;
use xlct::recon::FbpFilter;

fn main() -> xlct::Result<()> {
    let p = build_cylinder_phantom(10.0, 0.1, 0.1, TissueProperties::default())?;
    let protocol = make_protocol(&ProtocolConfig { n_angles: 180, fov: 14.0, ..Default::default() })?;
    for noise in [None, Some(0.01)] {
        let values = synthesize_ct(&p, &protocol, 3, noise)?;
        let sino = Sinogram { n_slices: 1, n_angles: 180, n_positions: protocol.bins_per_line(), values };
        for filter in [FbpFilter::Ramp, FbpFilter::RampHann] {
            let img = reconstruct_ct(&protocol, &p.grid, &sino, filter)?;
            let interior: Vec<f64> = (0..p.grid.n_voxels())
                .filter(|&n| {
                    let c = p.grid.voxel_center(n);
                    c[0].hypot(c[1]) < 4.8
                })
                .map(|n| img.values[n])
                .collect();
            let mean = interior.iter().sum::<f64>() / interior.len() as f64;
            let sd = (interior.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / interior.len() as f64).sqrt();
            println!("noise {noise:?} {filter:?}: interior mu_x {mean:.5} +- {sd:.5} (truth 0.02)");
        }
    }
    Ok(())
}
