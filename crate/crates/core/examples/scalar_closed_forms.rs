//! The scalar system y' = -y - y² + u with α = 1 has closed-form Riccati and
//! cubic coefficients; print them next to the synthesized chain.

use polyfeed::{make_scalar, synthesize};

fn main() -> polyfeed::Result<()> {
    let sys = make_scalar(-1.0, 1.0, 1.0, 1.0)?;
    let syn = synthesize(&sys, 5, 1e-12)?;

    let pi = 2f64.sqrt() - 1.0;
    let a_pi = -(2f64.sqrt());
    println!("pi    = {:.15} (closed form {pi:.15})", syn.riccati.pi[(0, 0)]);
    println!("a_pi  = {:.15} (closed form {a_pi:.15})", syn.riccati.a_pi[(0, 0)]);
    println!("t3    = {:.15} (closed form {:.15})", syn.expansion.tensor(3).get(&[0, 0, 0]), 2.0 * pi / a_pi);
    for k in 4..=5 {
        println!("t{k}    = {:.15}", syn.expansion.tensor(k).get(&vec![0; k]));
    }

    let exp = &syn.expansion;
    for y in [0.1, 0.3, 0.5] {
        println!(
            "y = {y}: V_5 = {:.6e}, u_5 = {:.6e}, hjb residual = {:.1e}",
            exp.eval_vd(&[y])?,
            exp.eval_feedback(&[y])?[0],
            exp.hjb_residual(&sys, &[y])?
        );
    }
    Ok(())
}
