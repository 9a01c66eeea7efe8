//! Compare the LQR law with polynomial feedbacks of increasing degree from
//! the same initial state, and check the dynamic-programming identity.

use polyfeed::sim::{cost_j, cost_jd, default_horizon, dp_identity_check, integrate_closed_loop, integrate_lqr, SimOptions};
use polyfeed::{make_burgers, synthesize, BurgersConfig};

fn main() -> polyfeed::Result<()> {
    let sys = make_burgers(&BurgersConfig {
        n_modes: 6,
        nu: 0.05,
        mu: 1.0,
        control_patches: vec![(0.1, 0.3), (0.6, 0.8)],
        alpha: 0.1,
    })?;
    let full = synthesize(&sys, 4, 1e-10)?.expansion;
    let y0 = [0.8, -0.4, 0.2, 0.0, 0.1, -0.1];
    let opts = SimOptions::new(default_horizon(&sys, &full)?, 1e-10);

    let lqr = integrate_lqr(&sys, &full, &y0, &opts)?;
    println!("LQR      J = {:.10e}", cost_j(&lqr)?);
    for d in 2..=4 {
        let exp = full.truncated(d)?;
        let traj = integrate_closed_loop(&sys, &exp, &y0, &opts)?;
        println!(
            "degree {d} J = {:.10e}  J_d = {:.10e}  V_d(y0) = {:.10e}  dp defect = {:.1e}  ({} steps)",
            cost_j(&traj)?,
            cost_jd(&traj)?,
            exp.eval_vd(&y0)?,
            dp_identity_check(&traj, &exp, &sys)?,
            traj.accepted_steps
        );
    }
    Ok(())
}
