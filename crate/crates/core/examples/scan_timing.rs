//! Fly-scan duration for the default protocol and the speed-up over a
//! step-and-shoot acquisition with the same bins.

use xlct::geometry::*;
use xlct::metrics::*;

fn main() -> xlct::Result<()> {
    let protocol = make_protocol(&ProtocolConfig::default())?;
    let t = estimate_scan_time(&protocol);
    println!(
        "{} angles x ({:.2} s sweep + {:.2} s turnaround) = {:.2} s per slice",
        protocol.n_angles(),
        t.per_line,
        t.turnaround_time,
        t.per_slice
    );
    let step = StepScanTiming { settle_time: 0.5, dwell_time: 0.1 };
    let s = estimate_step_scan_time(&protocol, &step);
    println!(
        "step-and-shoot ({} s settle, {} s dwell, {} stops per line): {:.1} s per slice, {:.1}x slower",
        step.settle_time,
        step.dwell_time,
        protocol.bins_per_line(),
        s.per_slice,
        fly_scan_speedup(&protocol, &step)
    );
    for slices in [1, 10, 40] {
        let p = make_protocol(&ProtocolConfig { slices: (0..slices).map(|k| k as f64 * 0.15).collect(), ..Default::default() })?;
        println!("{slices:3} slices: {:.1} min", estimate_scan_time(&p).total / 60.0);
    }
    Ok(())
}
