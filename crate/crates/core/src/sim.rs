//! Closed-loop integration with running-cost accumulation.
//!
//! The state is augmented with `J' = ½‖y‖² + (α/2)‖u‖²` and `R' = r_d(y)`,
//! so both cost integrals are computed by the same fifth-order Dormand–Prince
//! steps (and the same error control) as the state itself.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feedback::ValueExpansion;
use crate::model::QuadraticControlSystem;
use crate::riccati::{closed_loop, schur_form};

pub const DIVERGENCE_NORM: f64 = 1e6;
pub const MIN_STEP_FRACTION: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimOptions {
    pub horizon: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl SimOptions {
    pub fn new(horizon: f64, tol: f64) -> Self {
        SimOptions {
            horizon,
            rtol: tol,
            atol: tol,
            max_steps: 1_000_000,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::InvalidInput("integrator tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// `40/|abscissa(A_π)|` for the LQR part of `exp`.
pub fn default_horizon(sys: &QuadraticControlSystem, exp: &ValueExpansion) -> Result<f64> {
    let a_pi = closed_loop(sys, &exp.tensor(2).to_matrix()?)?;
    let abscissa = schur_form(&a_pi)?.spectral_abscissa();
    if abscissa >= 0.0 {
        return Err(Error::NotHurwitz(abscissa));
    }
    Ok(40.0 / abscissa.abs())
}

/// Accepted integrator nodes; controls are evaluated at every node.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    /// `½‖y‖² + (α/2)‖u‖² + r_d(y)` at each node (`r_d = 0` without an expansion).
    pub ell_d: Vec<f64>,
    /// Running `½∫‖y‖² + (α/2)∫‖u‖²` at each node.
    pub j_cumulative: Vec<f64>,
    /// Running `∫ r_d` at each node.
    pub rd_cumulative: Vec<f64>,
    pub j_running: f64,
    pub rd_integral: f64,
    pub diverged: bool,
    /// `½ y(T)ᵀ Π y(T)`: LQR cost-to-go from the terminal state.
    pub tail_estimate: f64,
    /// `|r_d(y(T))| / ((d+1)|abscissa|)`: decay bound for the rest of `∫ r_d`.
    pub tail_rd: f64,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one node")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least one node")
    }

    fn ensure_converged(&self) -> Result<()> {
        if self.diverged {
            let y = self.final_state();
            return Err(Error::Diverged {
                time: self.final_time(),
                norm: y.iter().map(|v| v * v).sum::<f64>().sqrt(),
            });
        }
        Ok(())
    }

    /// CSV with header `t,y_1..y_n,u_1..u_m,ell_d`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.states.first().map_or(0, Vec::len);
        let m = self.controls.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("y_{i}")));
        header.extend((1..=m).map(|i| format!("u_{i}")));
        header.push("ell_d".into());
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.times.len() {
            let mut row = vec![format!("{:.16e}", self.times[i])];
            row.extend(self.states[i].iter().map(|v| format!("{v:.16e}")));
            row.extend(self.controls[i].iter().map(|v| format!("{v:.16e}")));
            row.push(format!("{:.16e}", self.ell_d[i]));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// Integrand sources for [`integrate`].
pub struct CostTerms<'a> {
    /// Supplies `r_d` (and the degree for the tail bound).
    pub expansion: Option<&'a ValueExpansion>,
    /// Terminal quadratic form for the tail estimate.
    pub terminal: Option<&'a DMatrix<f64>>,
    /// Decay rate used in the `∫ r_d` tail bound.
    pub abscissa: Option<f64>,
}

// the system is autonomous, so stage times are not needed
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// fifth-order weights minus embedded fourth-order weights
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrates `ẏ = Ay − F(y) + B·law(y)` from `y0` over `[0, horizon]`.
pub fn integrate<L>(
    sys: &QuadraticControlSystem,
    law: L,
    costs: &CostTerms<'_>,
    y0: &[f64],
    opts: &SimOptions,
) -> Result<Trajectory>
where
    L: Fn(&[f64]) -> Result<Vec<f64>>,
{
    opts.validate()?;
    let n = sys.n();
    if y0.len() != n {
        return Err(Error::Dimension(format!("initial state has length {}, expected {n}", y0.len())));
    }
    if let Some(exp) = costs.expansion {
        if exp.n() != n {
            return Err(Error::Dimension("expansion and system dimensions differ".into()));
        }
    }
    let alpha = sys.alpha();
    let rd = |y: &[f64]| -> Result<f64> {
        match costs.expansion {
            Some(exp) => exp.eval_rd(sys, y),
            None => Ok(0.0),
        }
    };
    // z = [y; J; R]
    let field = |z: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
        let y = &z[..n];
        let u = law(y)?;
        let mut dz = sys.rhs_closed(y, &u)?;
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let uu: f64 = u.iter().map(|v| v * v).sum();
        dz.push(0.5 * yy + 0.5 * alpha * uu);
        dz.push(rd(y)?);
        Ok((dz, u))
    };

    let t_end = opts.horizon;
    let mut z: Vec<f64> = y0.iter().copied().chain([0.0, 0.0]).collect();
    let (mut k0, u0) = field(&z)?;
    let node_ell = |y: &[f64], u: &[f64]| -> Result<f64> {
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let uu: f64 = u.iter().map(|v| v * v).sum();
        Ok(0.5 * yy + 0.5 * alpha * uu + rd(y)?)
    };

    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![y0.to_vec()],
        ell_d: vec![node_ell(y0, &u0)?],
        controls: vec![u0],
        j_cumulative: vec![0.0],
        rd_cumulative: vec![0.0],
        j_running: 0.0,
        rd_integral: 0.0,
        diverged: false,
        tail_estimate: 0.0,
        tail_rd: 0.0,
        accepted_steps: 0,
        rejected_steps: 0,
    };

    let scale0: f64 = z.iter().fold(0.0, |m, v| m.max(v.abs()));
    let rate: f64 = k0.iter().fold(0.0, |m, v| m.max(v.abs()));
    let mut h = if rate > 0.0 {
        (0.01 * (scale0 + opts.atol) / rate).min(0.01 * t_end)
    } else {
        0.01 * t_end
    };
    let h_min = MIN_STEP_FRACTION * t_end;
    let mut t = 0.0;
    let dim = z.len();
    let mut stages: Vec<Vec<f64>> = vec![vec![0.0; dim]; 7];
    let mut trial = vec![0.0; dim];

    while t < t_end {
        if traj.accepted_steps + traj.rejected_steps >= opts.max_steps {
            return Err(Error::NoConvergence {
                what: "closed-loop integration (step budget)",
                iterations: opts.max_steps,
                residual: h,
            });
        }
        if h < h_min {
            traj.diverged = true;
            break;
        }
        let last = t + h >= t_end;
        if last {
            h = t_end - t;
        }
        stages[0].clone_from(&k0);
        let mut ok = true;
        let mut u_new = Vec::new();
        for s in 1..7 {
            for i in 0..dim {
                let mut acc = z[i];
                for (j, stage) in stages.iter().enumerate().take(s) {
                    acc += h * A[s][j] * stage[i];
                }
                trial[i] = acc;
            }
            if trial.iter().any(|v| !v.is_finite()) {
                ok = false;
                break;
            }
            let (k, u) = field(&trial)?;
            stages[s] = k;
            u_new = u;
        }
        if !ok {
            h *= 0.25;
            traj.rejected_steps += 1;
            continue;
        }
        // trial now holds the fifth-order solution (stage 7 is evaluated at it)
        let mut err_sq = 0.0;
        for i in 0..dim {
            let e: f64 = (0..7).map(|s| E[s] * stages[s][i]).sum::<f64>() * h;
            let sc = opts.atol + opts.rtol * z[i].abs().max(trial[i].abs());
            err_sq += (e / sc).powi(2);
        }
        let err = (err_sq / dim as f64).sqrt();
        if !err.is_finite() {
            h *= 0.25;
            traj.rejected_steps += 1;
            continue;
        }
        if err <= 1.0 {
            t = if last { t_end } else { t + h };
            z.clone_from(&trial);
            k0 = stages[6].clone();
            traj.accepted_steps += 1;
            let y = &z[..n];
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            traj.times.push(t);
            traj.states.push(y.to_vec());
            traj.ell_d.push(node_ell(y, &u_new)?);
            traj.controls.push(u_new);
            traj.j_cumulative.push(z[n]);
            traj.rd_cumulative.push(z[n + 1]);
            if norm > DIVERGENCE_NORM || !norm.is_finite() {
                traj.diverged = true;
                break;
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h *= factor;
        } else {
            traj.rejected_steps += 1;
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
        }
    }

    traj.j_running = *traj.j_cumulative.last().unwrap();
    traj.rd_integral = *traj.rd_cumulative.last().unwrap();
    if !traj.diverged {
        let yt = traj.final_state().to_vec();
        if let Some(p) = costs.terminal {
            let y = nalgebra::DVector::from_vec(yt.clone());
            traj.tail_estimate = 0.5 * y.dot(&(p * &y));
        }
        if let (Some(exp), Some(sigma)) = (costs.expansion, costs.abscissa) {
            traj.tail_rd = rd(&yt)?.abs() / ((exp.d() + 1) as f64 * sigma.abs());
        }
    }
    Ok(traj)
}

/// Closed loop under `u_d` of `exp`, with `r_d` from the same expansion.
pub fn integrate_closed_loop(
    sys: &QuadraticControlSystem,
    exp: &ValueExpansion,
    y0: &[f64],
    opts: &SimOptions,
) -> Result<Trajectory> {
    let pi = exp.tensor(2).to_matrix()?;
    let abscissa = schur_form(&closed_loop(sys, &pi)?)?.spectral_abscissa();
    let costs = CostTerms {
        expansion: Some(exp),
        terminal: Some(&pi),
        abscissa: Some(abscissa),
    };
    integrate(sys, |y| exp.eval_feedback(y), &costs, y0, opts)
}

/// Trajectory under the LQR law `−(1/α)BᵀΠy`, with `r_d` of `exp` accumulated
/// along it (so `cost_jd` is comparable with the degree-`d` closed loop).
pub fn integrate_lqr(
    sys: &QuadraticControlSystem,
    exp: &ValueExpansion,
    y0: &[f64],
    opts: &SimOptions,
) -> Result<Trajectory> {
    let lqr = exp.truncated(2)?;
    let pi = exp.tensor(2).to_matrix()?;
    let abscissa = schur_form(&closed_loop(sys, &pi)?)?.spectral_abscissa();
    let costs = CostTerms {
        expansion: Some(exp),
        terminal: Some(&pi),
        abscissa: Some(abscissa),
    };
    integrate(sys, |y| lqr.eval_feedback(y), &costs, y0, opts)
}

/// Uncontrolled dynamics `ẏ = Ay − F(y)`.
pub fn integrate_uncontrolled(sys: &QuadraticControlSystem, y0: &[f64], opts: &SimOptions) -> Result<Trajectory> {
    let zero = vec![0.0; sys.m()];
    let costs = CostTerms {
        expansion: None,
        terminal: None,
        abscissa: None,
    };
    integrate(sys, |_| Ok(zero.clone()), &costs, y0, opts)
}

/// Independent closed-loop runs from several initial states, in parallel.
pub fn integrate_batch(
    sys: &QuadraticControlSystem,
    exp: &ValueExpansion,
    y0s: &[Vec<f64>],
    opts: &SimOptions,
) -> Vec<Result<Trajectory>> {
    y0s.par_iter().map(|y0| integrate_closed_loop(sys, exp, y0, opts)).collect()
}

/// `½∫‖y‖² + (α/2)∫‖u‖²` plus the LQR tail.
pub fn cost_j(traj: &Trajectory) -> Result<f64> {
    traj.ensure_converged()?;
    Ok(traj.j_running + traj.tail_estimate)
}

/// `J + ∫ r_d` with both tails.
pub fn cost_jd(traj: &Trajectory) -> Result<f64> {
    Ok(cost_j(traj)? + traj.rd_integral + traj.tail_rd)
}

/// `|V_d(y(T)) − V_d(y₀) + ∫₀ᵀ ℓ_d|` along a closed-loop trajectory of `exp`.
pub fn dp_identity_check(traj: &Trajectory, exp: &ValueExpansion, sys: &QuadraticControlSystem) -> Result<f64> {
    exp.check_provenance(sys)?;
    traj.ensure_converged()?;
    let v0 = exp.eval_vd(&traj.states[0])?;
    let vt = exp.eval_vd(traj.final_state())?;
    Ok((vt - v0 + traj.j_running + traj.rd_integral).abs())
}

/// Fixed-step classical Runge–Kutta under a state feedback law; returns the
/// states at `t_j = jT/steps`.
pub fn rk4_fixed<L>(sys: &QuadraticControlSystem, law: L, y0: &[f64], horizon: f64, steps: usize) -> Result<Vec<Vec<f64>>>
where
    L: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let h = horizon / steps as f64;
    let f = |y: &[f64]| -> Result<Vec<f64>> { sys.rhs_closed(y, &law(y)?) };
    let axpy = |y: &[f64], c: f64, k: &[f64]| -> Vec<f64> { y.iter().zip(k).map(|(a, b)| a + c * b).collect() };
    let mut out = Vec::with_capacity(steps + 1);
    let mut y = y0.to_vec();
    out.push(y.clone());
    for _ in 0..steps {
        let k1 = f(&y)?;
        let k2 = f(&axpy(&y, 0.5 * h, &k1))?;
        let k3 = f(&axpy(&y, 0.5 * h, &k2))?;
        let k4 = f(&axpy(&y, h, &k3))?;
        for i in 0..y.len() {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if y.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_NORM) {
            return Err(Error::Diverged {
                time: h * out.len() as f64,
                norm: y.iter().map(|v| v * v).sum::<f64>().sqrt(),
            });
        }
        out.push(y.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genlyap::{synthesize, DEFAULT_TOL};
    use crate::model::{make_burgers, make_scalar, BurgersConfig};

    fn burgers6() -> QuadraticControlSystem {
        make_burgers(&BurgersConfig {
            n_modes: 6,
            nu: 0.05,
            mu: 1.0,
            control_patches: vec![(0.1, 0.3), (0.6, 0.8)],
            alpha: 0.1,
        })
        .unwrap()
    }

    #[test]
    fn zero_initial_state() {
        let sys = burgers6();
        let exp = synthesize(&sys, 3, DEFAULT_TOL).unwrap().expansion;
        let traj = integrate_closed_loop(&sys, &exp, &[0.0; 6], &SimOptions::new(5.0, 1e-9)).unwrap();
        assert!(traj.states.iter().flatten().all(|&v| v == 0.0));
        assert!(traj.controls.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(cost_j(&traj).unwrap(), 0.0);
        assert_eq!(dp_identity_check(&traj, &exp, &sys).unwrap(), 0.0);
    }

    #[test]
    fn lqr_cost_matches_riccati_value() {
        let sys = burgers6().linearized();
        let syn = synthesize(&sys, 2, DEFAULT_TOL).unwrap();
        let y0 = vec![0.3, -0.2, 0.1, 0.05, -0.1, 0.2];
        let horizon = default_horizon(&sys, &syn.expansion).unwrap();
        let traj = integrate_closed_loop(&sys, &syn.expansion, &y0, &SimOptions::new(horizon, 1e-10)).unwrap();
        let y = nalgebra::DVector::from_vec(y0.clone());
        let value = 0.5 * y.dot(&(&syn.riccati.pi * &y));
        let j = cost_j(&traj).unwrap();
        assert!((j - value).abs() <= 1e-6 * value, "{j} vs {value}");
        assert_eq!(cost_jd(&traj).unwrap(), j + traj.tail_rd);
        assert!(dp_identity_check(&traj, &syn.expansion, &sys).unwrap() <= 1e-6);
    }

    #[test]
    fn scalar_matches_fine_fixed_step() {
        let sys = make_scalar(-1.0, 1.0, 1.0, 1.0).unwrap();
        let exp = synthesize(&sys, 3, DEFAULT_TOL).unwrap().expansion;
        let traj = integrate_closed_loop(&sys, &exp, &[0.1], &SimOptions::new(10.0, 1e-10)).unwrap();
        let fine = rk4_fixed(&sys, |y| exp.eval_feedback(y), &[0.1], 10.0, 20_000).unwrap();
        assert!((traj.final_state()[0] - fine[20_000][0]).abs() < 1e-9);
        // monotone decay from a positive start
        assert!(traj.states.windows(2).all(|w| w[1][0] <= w[0][0] && w[1][0] >= 0.0));
        assert!(traj.j_cumulative.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn burgers_dp_identity_and_comparison() {
        let sys = burgers6();
        let exp = synthesize(&sys, 3, DEFAULT_TOL).unwrap().expansion;
        let y0 = vec![0.2, -0.1, 0.05, 0.0, 0.02, -0.03];
        let horizon = default_horizon(&sys, &exp).unwrap();
        let opts = SimOptions::new(horizon, 1e-9);
        let cl = integrate_closed_loop(&sys, &exp, &y0, &opts).unwrap();
        assert!(dp_identity_check(&cl, &exp, &sys).unwrap() <= 1e-6);
        let lqr = integrate_lqr(&sys, &exp, &y0, &opts).unwrap();
        assert!(cost_jd(&cl).unwrap() <= cost_jd(&lqr).unwrap() + 1e-8);
    }

    #[test]
    fn dp_identity_scales_with_tolerance() {
        let sys = burgers6();
        let exp = synthesize(&sys, 4, DEFAULT_TOL).unwrap().expansion;
        let y0 = vec![0.2, -0.1, 0.05, 0.0, 0.02, -0.03];
        let horizon = default_horizon(&sys, &exp).unwrap();
        let errs: Vec<f64> = [1e-7, 1e-9, 1e-11]
            .iter()
            .map(|&tol| {
                let traj = integrate_closed_loop(&sys, &exp, &y0, &SimOptions::new(horizon, tol)).unwrap();
                dp_identity_check(&traj, &exp, &sys).unwrap()
            })
            .collect();
        assert!(errs[0] <= 1e-6);
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!(ratio > 100.0 / 50.0 && ratio < 100.0 * 50.0, "{errs:?}");
        }
    }

    #[test]
    fn stabilization_does_work() {
        let sys = burgers6();
        let exp = synthesize(&sys, 2, DEFAULT_TOL).unwrap().expansion;
        let y0 = vec![0.05, 0.0, 0.0, 0.0, 0.0, 0.0];
        let opts = SimOptions::new(10.0, 1e-9);
        let free = integrate_uncontrolled(&sys, &y0, &opts).unwrap();
        let cl = integrate_closed_loop(&sys, &exp, &y0, &opts).unwrap();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm(free.final_state()) > norm(&y0));
        assert!(norm(cl.final_state()) < 1e-3 * norm(&y0));
    }

    #[test]
    fn divergence_is_flagged() {
        // far outside the basin: the quadratic term blows up in finite time
        let sys = make_scalar(-1.0, 1.0, 1.0, 1.0).unwrap();
        let exp = synthesize(&sys, 2, DEFAULT_TOL).unwrap().expansion;
        let traj = integrate_closed_loop(&sys, &exp, &[-10.0], &SimOptions::new(10.0, 1e-9)).unwrap();
        assert!(traj.diverged);
        assert!(matches!(cost_j(&traj), Err(Error::Diverged { .. })));
    }

    #[test]
    fn invalid_options() {
        let sys = make_scalar(-1.0, 1.0, 1.0, 1.0).unwrap();
        let exp = synthesize(&sys, 2, DEFAULT_TOL).unwrap().expansion;
        assert!(integrate_closed_loop(&sys, &exp, &[0.1], &SimOptions::new(0.0, 1e-9)).is_err());
        assert!(integrate_closed_loop(&sys, &exp, &[0.1], &SimOptions::new(1.0, 0.0)).is_err());
        assert!(integrate_closed_loop(&sys, &exp, &[0.1, 0.2], &SimOptions::new(1.0, 1e-9)).is_err());
    }

    #[test]
    fn csv_format() {
        let sys = make_scalar(-1.0, 1.0, 1.0, 1.0).unwrap();
        let exp = synthesize(&sys, 2, DEFAULT_TOL).unwrap().expansion;
        let traj = integrate_closed_loop(&sys, &exp, &[0.1], &SimOptions::new(1.0, 1e-6)).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,y_1,u_1,ell_d");
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first.len(), 4);
        assert_eq!(first[1].parse::<f64>().unwrap(), 0.1);
    }
}
