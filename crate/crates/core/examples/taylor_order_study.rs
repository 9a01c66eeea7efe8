//! Measure how fast V_d and u_d approach the optimal value and control
//! along a ray, using the open-loop oracle as reference.

use polyfeed::oracle::{geometric_grid, taylor_order_study, StudyConfig};
use polyfeed::{make_scalar, synthesize};

fn main() -> polyfeed::Result<()> {
    let sys = make_scalar(-1.0, 1.0, 1.0, 1.0)?;
    let full = synthesize(&sys, 3, 1e-10)?.expansion;
    let expansions = vec![full.truncated(2)?, full];
    let cfg = StudyConfig::new(vec![1.0], geometric_grid(1e-3, 1e-1, 8)?);
    let report = taylor_order_study(&sys, &expansions, &cfg)?;

    println!("{:>10} {:>2} {:>12} {:>12} {:>10}", "s", "d", "gap_V", "gap_u", "noise_V");
    for r in &report.rows {
        println!("{:>10.3e} {:>2} {:>12.3e} {:>12.3e} {:>10.1e}", r.s, r.d, r.gap_v, r.gap_u, r.noise_v);
    }
    print!("{}", report.summary());
    Ok(())
}
