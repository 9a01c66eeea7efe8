//! Solve one chain equation three ways: Schur recursion, the dense
//! Kronecker system, and quadrature of the integral representation.

use std::time::Instant;

use polyfeed::genlyap::{assemble_rhs, solve_chain_lyapunov, solve_kronecker, solve_via_quadrature};
use polyfeed::{make_burgers, solve_are, BurgersConfig};

fn main() -> polyfeed::Result<()> {
    let sys = make_burgers(&BurgersConfig {
        n_modes: 4,
        nu: 0.05,
        mu: 1.0,
        control_patches: vec![(0.1, 0.3), (0.6, 0.8)],
        alpha: 0.1,
    })?;
    let ric = solve_are(&sys, 1e-12)?;
    let rhs = assemble_rhs(3, &[ric.pi_tensor()?], &sys)?;

    let t = Instant::now();
    let schur = solve_chain_lyapunov(&ric.a_pi, &rhs, 1e-10)?;
    println!("schur      {:>10.2?}", t.elapsed());
    let t = Instant::now();
    let kron = solve_kronecker(&ric.a_pi, &rhs)?;
    println!("kronecker  {:>10.2?}  max diff {:.2e}", t.elapsed(), schur.sub(&kron)?.max_abs());
    let t = Instant::now();
    let quad = solve_via_quadrature(&ric.a_pi, &rhs, None, 200)?;
    println!(
        "quadrature {:>10.2?}  max diff {:.2e}  horizon {:.1}  tail {:.1e}",
        t.elapsed(),
        schur.sub(&quad.tensor)?.max_abs(),
        quad.horizon,
        quad.tail_estimate
    );
    Ok(())
}
