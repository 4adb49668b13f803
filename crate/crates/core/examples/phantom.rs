//! Builds a cylinder with two capillaries and writes it as header + raw + PGM.
//!
//!     cargo run --example phantom -- [out_dir]

use std::path::PathBuf;

use xlct::io::write_phantom;
use xlct::phantom::*;

fn main() -> xlct::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("xlct-phantom"));
    let p = build_cylinder_phantom(12.8, 1.0, 0.1, TissueProperties::default())?;
    let targets = [
        TargetSpec { center: [1.0, 0.5, 0.0], radius: 0.3, height: 1.0, concentration: 1.0 },
        TargetSpec { center: [-2.5, -1.5, 0.0], radius: 0.15, height: 0.6, concentration: 0.5 },
    ];
    let mut p = add_uniform_uptake(&p, 0.05)?;
    for t in &targets {
        p = add_capillary_target(&p, t)?;
    }
    let inside = p.inside_mask().iter().filter(|&&m| m).count();
    println!("grid {:?} at {} mm, {} voxels inside the object", p.grid.dims, p.grid.voxel_size, inside);
    for t in &targets {
        println!("target at {:?}: nominal volume {:.4} mm^3", t.center, t.volume());
    }
    println!("total nanophosphor {:.4} uM mm^3", p.total_amount());
    let s = property_at(&p, [1.0, 0.5, 0.0]);
    println!("at the first target: c = {} uM, mu_x = {} /mm", s.concentration, s.tissue.mu_x);
    for f in write_phantom(&p, &out.join("phantom.hdr"))? {
        println!("wrote {}", f.display());
    }
    Ok(())
}
