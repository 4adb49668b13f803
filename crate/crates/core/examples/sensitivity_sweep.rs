//! CNR of the demo targets as their concentration is halved, and the first
//! concentration that falls below the detectability threshold.

use std::path::Path;

use xlct::pipeline::{load_config, sensitivity_sweep};

fn main() -> xlct::Result<()> {
    let cfg = load_config(&Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/demo.toml"))?;
    let sweep = sensitivity_sweep(&cfg)?;
    println!("concentration,cnr");
    for (c, v) in &sweep.rows {
        println!("{c},{v:.3}");
    }
    match sweep.first_below {
        Some(c) => println!("CNR first drops below {} at {c} uM", sweep.cnr_threshold),
        None => println!("CNR stays above {} over the sweep", sweep.cnr_threshold),
    }
    Ok(())
}
