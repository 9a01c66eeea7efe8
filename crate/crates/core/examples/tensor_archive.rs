//! Save a synthesized chain to disk, reload it, and show that loading
//! against a different system is refused.

use polyfeed::archive::{load_expansion, save_expansion, Manifest};
use polyfeed::{make_burgers, synthesize, BurgersConfig};

fn main() -> polyfeed::Result<()> {
    let mut cfg = BurgersConfig {
        n_modes: 5,
        nu: 0.05,
        mu: 1.0,
        control_patches: vec![(0.1, 0.3), (0.6, 0.8)],
        alpha: 0.1,
    };
    let sys = make_burgers(&cfg)?;
    let exp = synthesize(&sys, 4, 1e-10)?.expansion;

    let dir = std::env::temp_dir().join("polyfeed-archive-example");
    let mut extra = Manifest::new();
    extra.set("note", "example archive");
    save_expansion(&dir, &exp, &extra)?;
    println!("{}", std::fs::read_to_string(dir.join("manifest.txt"))?);

    let back = load_expansion(&dir, &sys)?;
    let y = [0.1, 0.2, -0.1, 0.05, 0.0];
    println!("V_4 before {:.16e}, after reload {:.16e}", exp.eval_vd(&y)?, back.eval_vd(&y)?);

    cfg.nu = 0.06;
    match load_expansion(&dir, &make_burgers(&cfg)?) {
        Ok(_) => println!("unexpected: archive accepted for a different system"),
        Err(e) => println!("different system rejected: {e}"),
    }
    Ok(())
}
