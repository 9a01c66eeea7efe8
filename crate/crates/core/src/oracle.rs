//! Open-loop optimal control by direct transcription, and Taylor-order
//! studies of value expansions against it.
//!
//! Controls are piecewise linear on a uniform grid. Each step is one
//! classical Runge–Kutta step with the control taken at `t_n`, the midpoint
//! and `t_{n+1}`; the running cost is carried as an extra state by the same
//! step. The terminal cost `½y(T)ᵀΠy(T)` stands in for the infinite tail.
//! Gradients are the exact discrete adjoint of this scheme, so L-BFGS sees
//! the true derivative of the function it minimizes.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::archive::Manifest;
use crate::error::{Error, Result};
use crate::feedback::ValueExpansion;
use crate::lbfgs::{minimize, LbfgsOptions, Termination};
use crate::model::QuadraticControlSystem;
use crate::riccati::{closed_loop, schur_form};
use crate::sim::{cost_jd, integrate_closed_loop, rk4_fixed, SimOptions, DIVERGENCE_NORM};

pub const MIN_STEPS: usize = 50;
pub const DEFAULT_N_STEPS: usize = 400;
pub const DEFAULT_TOL: f64 = 1e-9;
/// Rows whose gap is below this multiple of the measured noise are not fitted.
pub const NOISE_FACTOR: f64 = 10.0;
pub const MIN_USABLE_ROWS: usize = 4;

const RK4_WEIGHTS: [f64; 4] = [1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0];

/// The discretized finite-horizon problem from one initial state.
///
/// Decision variables are offsets `v` from the LQR law: the applied control
/// is `u = −Ky + v` with `K = (1/α)BᵀΠ`, evaluated at every Runge–Kutta stage.
/// Every control is reachable this way, but gradients no longer pass through
/// the open-loop unstable dynamics, which keeps the problem well conditioned
/// on long horizons.
#[derive(Clone, Debug)]
pub struct OpenLoopProblem<'a> {
    sys: &'a QuadraticControlSystem,
    pi: DMatrix<f64>,
    gain: DMatrix<f64>,
    a_cl_t: DMatrix<f64>,
    y0: Vec<f64>,
    horizon: f64,
    n_steps: usize,
}

/// Cost, gradient with respect to the nodal offsets, nodal states and
/// controls, and discrete costates `p_n = ∂J/∂y_n`.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub cost: f64,
    pub gradient: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub costates: Vec<Vec<f64>>,
}

/// A feedback law sampled along its own fixed-step closed loop.
#[derive(Clone, Debug)]
pub struct WarmStart {
    pub offsets: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
}

struct Forward {
    states: Vec<Vec<f64>>,
    controls: Vec<Vec<f64>>,
    // per step: stage states and applied stage controls
    stages: Vec<[(Vec<f64>, Vec<f64>); 4]>,
    cost: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn axpy(y: &[f64], c: f64, k: &[f64]) -> Vec<f64> {
    y.iter().zip(k).map(|(a, b)| a + c * b).collect()
}

impl<'a> OpenLoopProblem<'a> {
    /// `pi` is the Riccati solution: it weighs the terminal state and defines
    /// the reference feedback.
    pub fn new(sys: &'a QuadraticControlSystem, pi: DMatrix<f64>, y0: &[f64], horizon: f64, n_steps: usize) -> Result<Self> {
        let n = sys.n();
        if y0.len() != n {
            return Err(Error::Dimension(format!("initial state has length {}, expected {n}", y0.len())));
        }
        if pi.shape() != (n, n) {
            return Err(Error::Dimension("terminal weight must be n×n".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps < MIN_STEPS {
            return Err(Error::InvalidInput(format!("n_steps must be at least {MIN_STEPS}, got {n_steps}")));
        }
        let gain = sys.b().transpose() * &pi / sys.alpha();
        let a_cl_t = (sys.a() - sys.b() * &gain).transpose();
        Ok(OpenLoopProblem {
            sys,
            pi,
            gain,
            a_cl_t,
            y0: y0.to_vec(),
            horizon,
            n_steps,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn y0(&self) -> &[f64] {
        &self.y0
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|j| self.horizon * j as f64 / self.n_steps as f64).collect()
    }

    /// Trapezoid weights of the grid.
    pub fn weights(&self) -> Vec<f64> {
        let h = self.step();
        (0..=self.n_steps)
            .map(|j| if j == 0 || j == self.n_steps { 0.5 * h } else { h })
            .collect()
    }

    /// Same problem on a grid with `n_steps` steps.
    pub fn regridded(&self, n_steps: usize) -> Result<Self> {
        Self::new(self.sys, self.pi.clone(), &self.y0, self.horizon, n_steps)
    }

    fn check_offsets(&self, v: &[Vec<f64>]) -> Result<()> {
        if v.len() != self.n_steps + 1 || v.iter().any(|x| x.len() != self.sys.m()) {
            return Err(Error::Dimension(format!(
                "expected {} nodal offsets of length {}",
                self.n_steps + 1,
                self.sys.m()
            )));
        }
        Ok(())
    }

    fn applied(&self, y: &[f64], v: &[f64]) -> Vec<f64> {
        let ky = &self.gain * nalgebra::DVector::from_column_slice(y);
        v.iter().zip(ky.iter()).map(|(a, b)| a - b).collect()
    }

    fn forward(&self, v: &[Vec<f64>], keep_stages: bool) -> Result<std::result::Result<Forward, Error>> {
        let sys = self.sys;
        let alpha = sys.alpha();
        let h = self.step();
        let ell = |y: &[f64], u: &[f64]| 0.5 * y.iter().map(|x| x * x).sum::<f64>() + 0.5 * alpha * u.iter().map(|x| x * x).sum::<f64>();
        let mut y = self.y0.clone();
        let mut states = Vec::with_capacity(self.n_steps + 1);
        let mut controls = Vec::with_capacity(self.n_steps + 1);
        let mut stages = Vec::with_capacity(if keep_stages { self.n_steps } else { 0 });
        states.push(y.clone());
        controls.push(self.applied(&y, &v[0]));
        let mut cost = 0.0;
        for n in 0..self.n_steps {
            let vm: Vec<f64> = v[n].iter().zip(&v[n + 1]).map(|(a, b)| 0.5 * (a + b)).collect();
            let y1 = y.clone();
            let u1 = self.applied(&y1, &v[n]);
            let k1 = sys.rhs_closed(&y1, &u1)?;
            let y2 = axpy(&y, 0.5 * h, &k1);
            let u2 = self.applied(&y2, &vm);
            let k2 = sys.rhs_closed(&y2, &u2)?;
            let y3 = axpy(&y, 0.5 * h, &k2);
            let u3 = self.applied(&y3, &vm);
            let k3 = sys.rhs_closed(&y3, &u3)?;
            let y4 = axpy(&y, h, &k3);
            let u4 = self.applied(&y4, &v[n + 1]);
            let k4 = sys.rhs_closed(&y4, &u4)?;
            cost += h
                * (RK4_WEIGHTS[0] * ell(&y1, &u1)
                    + RK4_WEIGHTS[1] * ell(&y2, &u2)
                    + RK4_WEIGHTS[2] * ell(&y3, &u3)
                    + RK4_WEIGHTS[3] * ell(&y4, &u4));
            for i in 0..y.len() {
                y[i] += h * (RK4_WEIGHTS[0] * k1[i] + RK4_WEIGHTS[1] * k2[i] + RK4_WEIGHTS[2] * k3[i] + RK4_WEIGHTS[3] * k4[i]);
            }
            let ny = norm(&y);
            if !ny.is_finite() || ny > DIVERGENCE_NORM {
                return Ok(Err(Error::Diverged {
                    time: h * (n + 1) as f64,
                    norm: ny,
                }));
            }
            states.push(y.clone());
            controls.push(self.applied(&y, &v[n + 1]));
            if keep_stages {
                stages.push([(y1, u1), (y2, u2), (y3, u3), (y4, u4)]);
            }
        }
        let yt = nalgebra::DVector::from_column_slice(&y);
        cost += 0.5 * yt.dot(&(&self.pi * &yt));
        Ok(Ok(Forward {
            states,
            controls,
            stages,
            cost,
        }))
    }

    /// Discrete cost of nodal offsets `v` (`n_steps + 1` vectors).
    pub fn cost(&self, v: &[Vec<f64>]) -> Result<f64> {
        self.check_offsets(v)?;
        self.forward(v, false)?.map(|f| f.cost)
    }

    /// Cost and its exact gradient by the discrete adjoint.
    pub fn evaluate(&self, v: &[Vec<f64>]) -> Result<Evaluation> {
        self.check_offsets(v)?;
        let fw = self.forward(v, true)??;
        let sys = self.sys;
        let (n, m) = (sys.n(), sys.m());
        let alpha = sys.alpha();
        let h = self.step();
        let kt = self.gain.transpose();
        let yt = nalgebra::DVector::from_column_slice(&fw.states[self.n_steps]);
        let mut lambda: Vec<f64> = (&self.pi * &yt).iter().copied().collect();
        let mut costates = vec![Vec::new(); self.n_steps + 1];
        costates[self.n_steps] = lambda.clone();
        let mut gradient = vec![vec![0.0; m]; self.n_steps + 1];
        // Y_i depends on k_{i−1} with coefficient c_i·h
        let coupling = [0.0, 0.5 * h, 0.5 * h, h];

        for step in (0..self.n_steps).rev() {
            let st = &fw.stages[step];
            let mut kbar: [Vec<f64>; 4] = std::array::from_fn(|i| lambda.iter().map(|x| h * RK4_WEIGHTS[i] * x).collect());
            let mut ybar = lambda.clone();
            let mut vbar: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; m]);
            for i in (0..4).rev() {
                let (ys, us) = &st[i];
                let lbar = h * RK4_WEIGHTS[i];
                let ak = &self.a_cl_t * nalgebra::DVector::from_column_slice(&kbar[i]);
                let dft = sys.dfdy_transpose(ys, &kbar[i])?;
                // running cost depends on Y through u = −KY + V
                let ku = &kt * nalgebra::DVector::from_column_slice(us);
                let ystage: Vec<f64> = (0..n).map(|j| ak[j] - dft[j] + lbar * (ys[j] - alpha * ku[j])).collect();
                let btk = sys.bt_apply(&kbar[i]);
                vbar[i] = (0..m).map(|p| btk[p] + lbar * alpha * us[p]).collect();
                if i > 0 {
                    for j in 0..n {
                        kbar[i - 1][j] += coupling[i] * ystage[j];
                    }
                }
                for j in 0..n {
                    ybar[j] += ystage[j];
                }
            }
            for p in 0..m {
                let mid = 0.5 * (vbar[1][p] + vbar[2][p]);
                gradient[step][p] += vbar[0][p] + mid;
                gradient[step + 1][p] += vbar[3][p] + mid;
            }
            lambda = ybar;
            costates[step] = lambda.clone();
        }
        Ok(Evaluation {
            cost: fw.cost,
            gradient,
            states: fw.states,
            controls: fw.controls,
            costates,
        })
    }

    /// `max_n ‖g_n / w_n‖ / (1 + ‖u‖∞)`: the discrete form of
    /// `sup ‖αu + Bᵀp‖ / (1 + ‖u‖∞)`.
    pub fn kkt_norm(&self, controls: &[Vec<f64>], gradient: &[Vec<f64>]) -> f64 {
        let w = self.weights();
        let umax = controls.iter().flatten().fold(0.0f64, |a, x| a.max(x.abs()));
        let gmax = gradient.iter().zip(&w).fold(0.0f64, |a, (g, wn)| a.max(norm(g) / wn));
        gmax / (1.0 + umax)
    }

    /// Samples a state-feedback law along its fixed-step closed loop on this
    /// grid.
    pub fn closed_loop_start<L>(&self, law: L) -> Result<WarmStart>
    where
        L: Fn(&[f64]) -> Result<Vec<f64>>,
    {
        let states = rk4_fixed(self.sys, &law, &self.y0, self.horizon, self.n_steps)?;
        let controls = states.iter().map(|y| law(y)).collect::<Result<Vec<_>>>()?;
        let offsets = states
            .iter()
            .zip(&controls)
            .map(|(y, u)| {
                let ky = &self.gain * nalgebra::DVector::from_column_slice(y);
                u.iter().zip(ky.iter()).map(|(a, b)| a + b).collect()
            })
            .collect();
        Ok(WarmStart { offsets, controls })
    }

    /// `(∫‖a − b‖²)^{1/2}` by the trapezoid rule on this grid.
    pub fn l2_distance(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let w = self.weights();
        a.iter()
            .zip(b)
            .zip(&w)
            .map(|((x, y), wn)| wn * x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OracleOptions {
    /// KKT stopping tolerance.
    pub tol: f64,
    pub max_iterations: usize,
    pub memory: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            tol: DEFAULT_TOL,
            max_iterations: 2000,
            memory: 12,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OpenLoopSolution {
    pub times: Vec<f64>,
    /// Decision variables: offsets from the LQR law at the nodes.
    pub offsets: Vec<Vec<f64>>,
    /// Applied controls `u_n = −K y_n + v_n`.
    pub controls: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub costates: Vec<Vec<f64>>,
    /// Discrete cost including the terminal tail.
    pub v_hat: f64,
    pub kkt_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes the discrete cost from the offsets `warm_start` (zero offsets,
/// i.e. the LQR law, if absent). A non-converged run is returned with
/// `converged == false`; a start whose forward solve diverges is an error.
pub fn optimal_openloop(problem: &OpenLoopProblem<'_>, warm_start: Option<&[Vec<f64>]>, opts: &OracleOptions) -> Result<OpenLoopSolution> {
    let m = problem.sys.m();
    let nodes = problem.n_steps + 1;
    let v0: Vec<Vec<f64>> = match warm_start {
        Some(v) => {
            problem.check_offsets(v)?;
            v.to_vec()
        }
        None => vec![vec![0.0; m]; nodes],
    };
    // scaled variables √w·v make the control-cost Hessian close to α·I
    let sqrt_w: Vec<f64> = problem.weights().iter().map(|w| w.sqrt()).collect();
    let unscale = |x: &[f64]| -> Vec<Vec<f64>> { (0..nodes).map(|j| (0..m).map(|p| x[j * m + p] / sqrt_w[j]).collect()).collect() };
    let mut first_error = None;
    let mut eval = |x: &[f64]| -> Option<(f64, Vec<f64>)> {
        match problem.evaluate(&unscale(x)) {
            Ok(e) => {
                let g = (0..nodes * m).map(|i| e.gradient[i / m][i % m] / sqrt_w[i / m]).collect();
                Some((e.cost, g))
            }
            Err(err) => {
                first_error.get_or_insert(err);
                None
            }
        }
    };
    let done = |x: &[f64], g: &[f64]| {
        let grad: Vec<Vec<f64>> = (0..nodes).map(|j| (0..m).map(|p| g[j * m + p] * sqrt_w[j]).collect()).collect();
        // the accepted point is not always the last evaluated one
        match problem.forward(&unscale(x), false) {
            Ok(Ok(fw)) => problem.kkt_norm(&fw.controls, &grad) <= opts.tol,
            _ => false,
        }
    };
    let x0: Vec<f64> = (0..nodes * m).map(|i| v0[i / m][i % m] * sqrt_w[i / m]).collect();
    let lopts = LbfgsOptions {
        memory: opts.memory,
        max_iterations: opts.max_iterations,
        initial_scale: 1.0 / problem.sys.alpha(),
        ..LbfgsOptions::default()
    };
    let res = minimize(&mut eval, x0, done, &lopts);
    let Some(res) = res else {
        return Err(first_error.unwrap_or(Error::InvalidInput("initial control is infeasible".into())));
    };
    let offsets = unscale(&res.x);
    let ev = problem.evaluate(&offsets)?;
    let kkt = problem.kkt_norm(&ev.controls, &ev.gradient);
    Ok(OpenLoopSolution {
        times: problem.times(),
        offsets,
        controls: ev.controls,
        states: ev.states,
        costates: ev.costates,
        v_hat: ev.cost,
        kkt_norm: kkt,
        iterations: res.iterations,
        converged: res.termination == Termination::Converged,
    })
}

/// KKT residual re-evaluated at the offsets of `sol`.
pub fn kkt_residual(problem: &OpenLoopProblem<'_>, sol: &OpenLoopSolution) -> Result<f64> {
    let ev = problem.evaluate(&sol.offsets)?;
    Ok(problem.kkt_norm(&ev.controls, &ev.gradient))
}

/// `count` points from `s_max` down to `s_min`, equally spaced in log.
pub fn geometric_grid(s_min: f64, s_max: f64, count: usize) -> Result<Vec<f64>> {
    if !(s_min > 0.0 && s_max > s_min && count >= 2) {
        return Err(Error::InvalidInput(format!(
            "need 0 < s_min < s_max and at least 2 points, got [{s_min}, {s_max}] × {count}"
        )));
    }
    let ratio = (s_min / s_max).powf(1.0 / (count - 1) as f64);
    Ok((0..count)
        .map(|i| if i == count - 1 { s_min } else { s_max * ratio.powi(i as i32) })
        .collect())
}

#[derive(Clone, Debug)]
pub struct StudyConfig {
    /// Unit direction `v`; initial states are `s·v`.
    pub direction: Vec<f64>,
    /// Strictly decreasing scalings.
    pub scalings: Vec<f64>,
    /// Oracle horizon; `None` means `20/|abscissa(A_π)|`.
    pub horizon: Option<f64>,
    pub n_steps: usize,
    pub oracle: OracleOptions,
}

impl StudyConfig {
    pub fn new(direction: Vec<f64>, scalings: Vec<f64>) -> Self {
        StudyConfig {
            direction,
            scalings,
            horizon: None,
            n_steps: 2000,
            oracle: OracleOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StudyRow {
    pub s: f64,
    pub d: usize,
    pub v_hat: f64,
    pub v_d: f64,
    pub gap_v: f64,
    /// Discrete cost of the degree-`d` closed-loop controls.
    pub j_cl: f64,
    /// `J_d` of the degree-`d` closed loop from the adaptive simulator.
    pub jd_cl: f64,
    /// `‖ū − u_d(y_d)‖_{L²}` on the oracle grid.
    pub gap_u: f64,
    pub kkt: f64,
    pub noise_v: f64,
    pub noise_u: f64,
    pub ordering_slack: f64,
    pub converged: bool,
}

impl StudyRow {
    pub fn ordering_holds(&self) -> bool {
        self.v_hat <= self.j_cl + self.ordering_slack
    }

    pub fn usable_v(&self) -> bool {
        self.converged && self.gap_v >= NOISE_FACTOR * self.noise_v && self.gap_v > 0.0
    }

    pub fn usable_u(&self) -> bool {
        self.converged && self.gap_u >= NOISE_FACTOR * self.noise_u && self.gap_u > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FitStatus {
    Fitted { slope: f64, half_width: f64 },
    BelowNoiseFloor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderFit {
    pub d: usize,
    /// `"value"` (log gap_V) or `"control"` (log gap_u).
    pub quantity: &'static str,
    pub points: usize,
    pub status: FitStatus,
}

impl OrderFit {
    pub fn slope(&self) -> Option<f64> {
        match self.status {
            FitStatus::Fitted { slope, .. } => Some(slope),
            FitStatus::BelowNoiseFloor => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StudyReport {
    pub direction: Vec<f64>,
    pub scalings: Vec<f64>,
    pub horizon: f64,
    pub n_steps: usize,
    pub rows: Vec<StudyRow>,
    pub fits: Vec<OrderFit>,
}

/// Least-squares slope of `y` on `x` and its 95% Student-t half-width.
pub fn fit_slope(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return Err(Error::InvalidInput("slope fit needs at least 3 paired points".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - my - slope * (a - mx)).powi(2)).sum();
    let se = (sse / (n - 2) as f64 / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 2) as f64)
        .map_err(|e| Error::InvalidInput(e.to_string()))?
        .inverse_cdf(0.975);
    Ok((slope, t * se))
}

struct ScaleOutcome {
    rows: Vec<StudyRow>,
}

fn study_one_scale(
    sys: &QuadraticControlSystem,
    expansions: &[ValueExpansion],
    pi: &DMatrix<f64>,
    cfg: &StudyConfig,
    horizon: f64,
    s: f64,
) -> Result<ScaleOutcome> {
    let y0: Vec<f64> = cfg.direction.iter().map(|v| s * v).collect();
    let problem = OpenLoopProblem::new(sys, pi.clone(), &y0, horizon, cfg.n_steps)?;
    let m = sys.m();

    let warm: Vec<Option<WarmStart>> = expansions
        .iter()
        .map(|exp| problem.closed_loop_start(|y| exp.eval_feedback(y)).ok())
        .collect();
    let mut runs: Vec<OpenLoopSolution> = Vec::new();
    for w in warm.iter().flatten() {
        if let Ok(sol) = optimal_openloop(&problem, Some(&w.offsets), &cfg.oracle) {
            runs.push(sol);
        }
    }
    if let Ok(sol) = optimal_openloop(&problem, None, &cfg.oracle) {
        runs.push(sol);
    }
    let converged: Vec<&OpenLoopSolution> = runs.iter().filter(|r| r.converged).collect();
    let best = converged
        .iter()
        .copied()
        .min_by(|a, b| a.v_hat.total_cmp(&b.v_hat));

    // noise: spread between starts and a fourth-order Richardson estimate of
    // the discretization error from a half-resolution solve
    let (v_hat, ubar, kkt, noise_v, noise_u, iterations) = match best {
        Some(b) => {
            let spread_v = converged.iter().map(|r| (r.v_hat - b.v_hat).abs()).fold(0.0, f64::max);
            let spread_u = converged
                .iter()
                .map(|r| problem.l2_distance(&r.controls, &b.controls))
                .fold(0.0, f64::max);
            let coarse = problem.regridded(cfg.n_steps / 2)?;
            let sub: Vec<Vec<f64>> = (0..=coarse.n_steps()).map(|j| b.offsets[2 * j].clone()).collect();
            let (rich_v, rich_u) = match optimal_openloop(&coarse, Some(&sub), &cfg.oracle) {
                Ok(c) if c.converged => {
                    let fine_sub: Vec<Vec<f64>> = (0..=coarse.n_steps()).map(|j| b.controls[2 * j].clone()).collect();
                    ((b.v_hat - c.v_hat).abs() / 15.0, coarse.l2_distance(&fine_sub, &c.controls))
                }
                _ => (f64::INFINITY, f64::INFINITY),
            };
            (b.v_hat, b.controls.clone(), b.kkt_norm, spread_v.max(rich_v), spread_u.max(rich_u), b.iterations)
        }
        None => (f64::NAN, vec![vec![f64::NAN; m]; cfg.n_steps + 1], f64::NAN, f64::NAN, f64::NAN, 0),
    };
    let umax = ubar.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    let kkt_scaled = cfg.oracle.tol * (1.0 + umax);
    // residual-gradient bound on the cost error, plus the rounding increase the
    // line search may accept once per iteration
    let ordering_slack =
        2.0 * horizon * kkt_scaled * kkt_scaled / (2.0 * sys.alpha()) + (iterations + 1) as f64 * crate::lbfgs::rounding(v_hat);

    let mut rows = Vec::with_capacity(expansions.len());
    for (exp, w) in expansions.iter().zip(&warm) {
        let v_d = exp.eval_vd(&y0)?;
        let (j_cl, gap_u, ok) = match w {
            Some(w) => match problem.cost(&w.offsets) {
                Ok(j) => (j, problem.l2_distance(&ubar, &w.controls), best.is_some()),
                Err(_) => (f64::NAN, f64::NAN, false),
            },
            None => (f64::NAN, f64::NAN, false),
        };
        let jd_cl = integrate_closed_loop(sys, exp, &y0, &SimOptions::new(horizon, 1e-11))
            .and_then(|t| cost_jd(&t))
            .unwrap_or(f64::NAN);
        rows.push(StudyRow {
            s,
            d: exp.d(),
            v_hat,
            v_d,
            gap_v: (v_hat - v_d).abs(),
            j_cl,
            jd_cl,
            gap_u,
            kkt,
            noise_v,
            noise_u,
            ordering_slack,
            converged: ok,
        });
    }
    Ok(ScaleOutcome { rows })
}

/// Compares `V_d`, `u_d` for each expansion with the open-loop oracle along
/// `s·v` and fits the convergence orders of `|V̂ − V_d|` and `‖ū − u_d‖`.
pub fn taylor_order_study(sys: &QuadraticControlSystem, expansions: &[ValueExpansion], cfg: &StudyConfig) -> Result<StudyReport> {
    if expansions.is_empty() {
        return Err(Error::InvalidInput("no expansions to study".into()));
    }
    for exp in expansions {
        exp.check_provenance(sys)?;
    }
    if cfg.direction.len() != sys.n() {
        return Err(Error::Dimension(format!(
            "direction has length {}, expected {}",
            cfg.direction.len(),
            sys.n()
        )));
    }
    if (norm(&cfg.direction) - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput("direction must be a unit vector".into()));
    }
    if cfg.scalings.len() < 2 || cfg.scalings.windows(2).any(|w| w[1] >= w[0]) || cfg.scalings.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidInput("scalings must be positive and strictly decreasing".into()));
    }
    let pi = expansions[0].tensor(2).to_matrix()?;
    let horizon = match cfg.horizon {
        Some(t) => t,
        None => {
            let sigma = schur_form(&closed_loop(sys, &pi)?)?.spectral_abscissa();
            if sigma >= 0.0 {
                return Err(Error::NotHurwitz(sigma));
            }
            20.0 / sigma.abs()
        }
    };
    let outcomes: Vec<Result<ScaleOutcome>> = cfg
        .scalings
        .par_iter()
        .map(|&s| study_one_scale(sys, expansions, &pi, cfg, horizon, s))
        .collect();
    let mut rows = Vec::new();
    for o in outcomes {
        rows.extend(o?.rows);
    }

    let mut fits = Vec::new();
    for exp in expansions {
        let d = exp.d();
        let of_d: Vec<&StudyRow> = rows.iter().filter(|r| r.d == d).collect();
        let converged = of_d.iter().filter(|r| r.converged).count();
        if converged < MIN_USABLE_ROWS {
            return Err(Error::Study(format!(
                "degree {d}: only {converged} of {} rows converged, need {MIN_USABLE_ROWS}",
                of_d.len()
            )));
        }
        for (quantity, usable, gap) in [
            ("value", StudyRow::usable_v as fn(&StudyRow) -> bool, (|r: &StudyRow| r.gap_v) as fn(&StudyRow) -> f64),
            ("control", StudyRow::usable_u, |r: &StudyRow| r.gap_u),
        ] {
            let pts: Vec<(f64, f64)> = of_d.iter().filter(|r| usable(r)).map(|r| (r.s.ln(), gap(r).ln())).collect();
            let status = if pts.len() < MIN_USABLE_ROWS {
                FitStatus::BelowNoiseFloor
            } else {
                let (x, y): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
                let (slope, half_width) = fit_slope(&x, &y)?;
                FitStatus::Fitted { slope, half_width }
            };
            fits.push(OrderFit {
                d,
                quantity,
                points: pts.len(),
                status,
            });
        }
    }
    Ok(StudyReport {
        direction: cfg.direction.clone(),
        scalings: cfg.scalings.clone(),
        horizon,
        n_steps: cfg.n_steps,
        rows,
        fits,
    })
}

impl StudyReport {
    pub fn fit(&self, d: usize, quantity: &str) -> Option<&OrderFit> {
        self.fits.iter().find(|f| f.d == d && f.quantity == quantity)
    }

    pub fn ordering_violations(&self) -> Vec<&StudyRow> {
        self.rows.iter().filter(|r| r.converged && !r.ordering_holds()).collect()
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("s,d,V_hat,V_d,gap_V,J_cl,gap_u,kkt,Jd_cl,noise_V,noise_u,converged,usable_V,usable_u\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{}",
                r.s,
                r.d,
                r.v_hat,
                r.v_d,
                r.gap_v,
                r.j_cl,
                r.gap_u,
                r.kkt,
                r.jd_cl,
                r.noise_v,
                r.noise_u,
                r.converged,
                r.usable_v(),
                r.usable_u()
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "horizon {:.6} with {} steps, {} scalings", self.horizon, self.n_steps, self.scalings.len());
        for f in &self.fits {
            match f.status {
                FitStatus::Fitted { slope, half_width } => {
                    let _ = writeln!(out, "d={} {}: slope {slope:.4} ± {half_width:.4} ({} points)", f.d, f.quantity, f.points);
                }
                FitStatus::BelowNoiseFloor => {
                    let _ = writeln!(out, "d={} {}: below noise floor ({} usable points)", f.d, f.quantity, f.points);
                }
            }
        }
        let bad = self.ordering_violations().len();
        let _ = writeln!(out, "ordering V_hat <= J_cl + slack: {}", if bad == 0 { "holds on all converged rows".to_string() } else { format!("{bad} violations") });
        out
    }

    /// Writes `study.csv`, `summary.txt` and one `(s, gap)` data file per fit.
    pub fn save(&self, dir: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("study.csv"), self.csv())?;
        std::fs::write(dir.join("summary.txt"), self.summary())?;
        for f in &self.fits {
            let mut data = String::new();
            for r in self.rows.iter().filter(|r| r.d == f.d) {
                let gap = if f.quantity == "value" { r.gap_v } else { r.gap_u };
                let _ = writeln!(data, "{:.16e} {:.16e}", r.s, gap);
            }
            std::fs::write(dir.join(format!("{}_d{}.dat", f.quantity, f.d)), data)?;
        }
        manifest.save(dir.join(crate::archive::MANIFEST_FILE))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genlyap::synthesize;
    use crate::model::{make_burgers, make_scalar, BurgersConfig};
    use rand::{Rng, SeedableRng};

    fn small_burgers() -> QuadraticControlSystem {
        make_burgers(&BurgersConfig {
            n_modes: 3,
            nu: 0.05,
            mu: 1.0,
            control_patches: vec![(0.1, 0.3), (0.6, 0.8)],
            alpha: 0.1,
        })
        .unwrap()
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let sys = small_burgers();
        let pi = crate::riccati::solve_are(&sys, 1e-11).unwrap().pi;
        let problem = OpenLoopProblem::new(&sys, pi, &[0.3, -0.2, 0.1], 4.0, 60).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let u: Vec<Vec<f64>> = (0..=60).map(|_| (0..2).map(|_| rng.random_range(-0.5..0.5)).collect()).collect();
        let ev = problem.evaluate(&u).unwrap();
        for _ in 0..5 {
            let dir: Vec<Vec<f64>> = (0..=60).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let analytic: f64 = ev.gradient.iter().flatten().zip(dir.iter().flatten()).map(|(a, b)| a * b).sum();
            let h = 1e-6;
            let shift = |c: f64| -> Vec<Vec<f64>> { u.iter().zip(&dir).map(|(a, b)| axpy(a, c, b)).collect() };
            let fd = (problem.cost(&shift(h)).unwrap() - problem.cost(&shift(-h)).unwrap()) / (2.0 * h);
            assert!((fd - analytic).abs() <= 1e-5 * analytic.abs(), "{fd} vs {analytic}");
        }
    }

    #[test]
    fn lqr_value_recovered() {
        let sys = small_burgers().linearized();
        let ric = crate::riccati::solve_are(&sys, 1e-11).unwrap();
        let y0 = [0.3, -0.2, 0.1];
        let problem = OpenLoopProblem::new(&sys, ric.pi.clone(), &y0, 10.0, 400).unwrap();
        let sol = optimal_openloop(&problem, None, &OracleOptions::default()).unwrap();
        assert!(sol.converged);
        let y = nalgebra::DVector::from_column_slice(&y0);
        let value = 0.5 * y.dot(&(&ric.pi * &y));
        assert!((sol.v_hat - value).abs() <= 1e-6 * value, "{} vs {value}", sol.v_hat);
        assert!(kkt_residual(&problem, &sol).unwrap() <= DEFAULT_TOL);
    }

    #[test]
    fn zero_state_gives_zero_control() {
        let sys = make_scalar(-1.0, 1.0, 1.0, 1.0).unwrap();
        let pi = crate::riccati::solve_are(&sys, 1e-11).unwrap().pi;
        let problem = OpenLoopProblem::new(&sys, pi, &[0.0], 5.0, 100).unwrap();
        let sol = optimal_openloop(&problem, None, &OracleOptions::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.v_hat, 0.0);
        assert!(sol.controls.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn kkt_grows_with_control_perturbation() {
        let sys = make_scalar(-1.0, 1.0, 1.0, 1.0).unwrap();
        let pi = crate::riccati::solve_are(&sys, 1e-11).unwrap().pi;
        let problem = OpenLoopProblem::new(&sys, pi, &[0.2], 5.0, 100).unwrap();
        let mut sol = optimal_openloop(&problem, None, &OracleOptions::default()).unwrap();
        let base = kkt_residual(&problem, &sol).unwrap();
        let delta = 1e-3;
        sol.offsets[50][0] += delta;
        let perturbed = kkt_residual(&problem, &sol).unwrap();
        // the mass-matrix row of one hat function contributes ≈ α·δ·(2/3)
        let grown = perturbed - base;
        assert!(grown > 0.3 * delta && grown < 2.0 * delta, "{grown}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let sys = make_scalar(-1.0, 1.0, 1.0, 1.0).unwrap();
        let pi = DMatrix::from_element(1, 1, 0.4);
        assert!(OpenLoopProblem::new(&sys, pi.clone(), &[0.1], 5.0, 10).is_err());
        assert!(OpenLoopProblem::new(&sys, pi.clone(), &[0.1], -1.0, 100).is_err());
        assert!(OpenLoopProblem::new(&sys, pi, &[0.1, 0.2], 1.0, 100).is_err());
        assert!(geometric_grid(1e-1, 1e-3, 8).is_err());
    }

    #[test]
    fn grid_and_fit() {
        let g = geometric_grid(1e-3, 1e-1, 8).unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(g[0], 1e-1);
        assert_eq!(g[7], 1e-3);
        assert!(g.windows(2).all(|w| w[1] < w[0]));
        let x: Vec<f64> = g.iter().map(|s| s.ln()).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v + 1.5).collect();
        let (slope, hw) = fit_slope(&x, &y).unwrap();
        assert!((slope - 3.0).abs() < 1e-12 && hw < 1e-10);
    }

    #[test]
    fn warm_start_is_no_worse_than_zero_start() {
        let sys = make_scalar(-1.0, 1.0, 1.0, 1.0).unwrap();
        let exp = synthesize(&sys, 3, 1e-10).unwrap().expansion;
        let pi = exp.tensor(2).to_matrix().unwrap();
        let problem = OpenLoopProblem::new(&sys, pi, &[0.1], 10.0, 400).unwrap();
        let warm = problem.closed_loop_start(|y| exp.eval_feedback(y)).unwrap();
        let j_cl = problem.cost(&warm.offsets).unwrap();
        let a = optimal_openloop(&problem, Some(&warm.offsets), &OracleOptions::default()).unwrap();
        let b = optimal_openloop(&problem, None, &OracleOptions::default()).unwrap();
        assert!(a.converged && b.converged);
        assert!(a.v_hat <= j_cl);
        assert!(a.v_hat <= b.v_hat + 1e-14);
    }
}
