//! Gate bins of a continuous lateral sweep and the beam poses averaged in each.

use xlct::geometry::*;

fn main() -> xlct::Result<()> {
    let protocol = make_protocol(&ProtocolConfig {
        n_angles: 3,
        fov: 1.0,
        stage_speed: 7.5,
        bin_time: 0.02,
        ..Default::default()
    })?;
    println!(
        "step {} mm, {} bins per line, {} bins in total",
        protocol.step_size,
        protocol.bins_per_line(),
        protocol.n_bins()
    );
    let bins = enumerate_fly_bins(&protocol);
    for bin in bins.iter().take(protocol.bins_per_line()) {
        let poses = quadrature_poses(bin, protocol.quadrature_q, protocol.beam_fwhm);
        let s: Vec<String> = poses.iter().map(|p| format!("{:+.3}", p.s)).collect();
        println!("bin {:?} [{:+.3}, {:+.3}] poses s = {}", bin.index, bin.s_start, bin.s_end, s.join(" "));
    }
    let last = bins.last().expect("at least one bin");
    let ray = beam_ray(&last.center_pose(protocol.beam_fwhm));
    println!("last bin at θ = {:.4} rad: ray origin {:?}, direction {:?}", last.theta, ray.origin, ray.direction);
    let ring = detector_ring(4, 6.4, 0.0)?;
    println!("detectors {:?}", ring.positions);
    Ok(())
}
