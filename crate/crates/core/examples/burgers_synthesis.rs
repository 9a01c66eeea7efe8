//! Synthesize a degree-4 feedback for a 6-mode Burgers Galerkin model.

use polyfeed::{make_burgers, synthesize, BurgersConfig};

fn main() -> polyfeed::Result<()> {
    let cfg = BurgersConfig {
        n_modes: 6,
        nu: 0.05,
        mu: 1.0,
        control_patches: vec![(0.1, 0.3), (0.6, 0.8)],
        alpha: 0.1,
    };
    let unstable: Vec<_> = (1..=cfg.n_modes).filter(|&j| cfg.mode_eigenvalue(j) > 0.0).collect();
    println!("uncontrolled unstable modes: {unstable:?}");

    let sys = make_burgers(&cfg)?;
    let syn = synthesize(&sys, 4, 1e-10)?;
    println!(
        "riccati: residual {:.2e} after {} Newton steps, closed-loop abscissa {:.5}",
        syn.riccati.residual_norm, syn.riccati.iterations, syn.riccati.spectral_abscissa
    );
    for eq in &syn.equations {
        println!("T_{}: {} packed entries, max |entry| {:.3e}, residual {:.1e}", eq.k, eq.solution.entries().len(), eq.solution.max_abs(), eq.residual_norm);
    }

    let y = [0.3, -0.2, 0.1, 0.0, 0.05, -0.05];
    for d in 2..=4 {
        let exp = syn.expansion.truncated(d)?;
        println!("d = {d}: V_d(y) = {:.8e}, u_d(y) = {:?}", exp.eval_vd(&y)?, exp.eval_feedback(&y)?);
    }
    Ok(())
}
