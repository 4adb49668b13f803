//! Assembles the fly-scan system matrix and synthesizes Poisson counts and a
//! CT sinogram for a single-slice phantom.

use xlct::forward::*;
use xlct::geometry::*;
use xlct::phantom::*;

fn main() -> xlct::Result<()> {
    let p = build_cylinder_phantom(6.4, 0.1, 0.1, TissueProperties::default())?;
    let p = add_capillary_target(
        &p,
        &TargetSpec { center: [0.8, -0.4, 0.0], radius: 0.3, height: 0.1, concentration: 1.0 },
    )?;
    let protocol = make_protocol(&ProtocolConfig { fov: 7.0, n_angles: 6, ..Default::default() })?;
    let detectors = detector_ring(4, 3.2, 0.0)?;
    let source = SourceModel::default();
    let t0 = std::time::Instant::now();
    let a = assemble_system_matrix(&p, &protocol, &detectors, &source)?;
    println!("A: {} x {}, {} non-zeros, {:?}", a.n_rows(), a.n_cols(), a.nnz(), t0.elapsed());

    let m = synthesize_xlct(&p, &protocol, &detectors, &source, 42)?;
    let total: u64 = m.xlct_counts.iter().map(|&c| c as u64).sum();
    let peak = m.xlct_counts.iter().max().copied().unwrap_or(0);
    println!("{} rows, {} counts in total, peak {} per gate", m.xlct_counts.len(), total, peak);

    let ct = synthesize_ct(&p, &protocol, 42, None)?;
    let longest = ct.iter().cloned().fold(0.0, f64::max);
    println!("{} CT projections, largest optical depth {:.4}", ct.len(), longest);
    Ok(())
}
