//! Limited-memory BFGS with a monotone weak-Wolfe line search.
//!
//! The objective may fail (e.g. a forward solve leaving the basin); such
//! trial points are treated as `+∞` and the step is shortened.

use std::collections::VecDeque;

#[derive(Clone, Copy, Debug)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iterations: usize,
    /// Inverse-Hessian scale for the first step.
    pub initial_scale: f64,
    pub armijo: f64,
    /// Curvature constant of the weak Wolfe condition.
    pub wolfe: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 12,
            max_iterations: 500,
            initial_scale: 1.0,
            armijo: 1e-4,
            wolfe: 0.9,
            max_backtracks: 40,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub g: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

const APPROX_WOLFE_DELTA: f64 = 0.1;

/// Increase of `f` tolerated as rounding noise when accepting a step.
pub fn rounding(f: f64) -> f64 {
    64.0 * f64::EPSILON * f.abs()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` from `x0`. `eval` returns `(f, ∇f)` or `None` when the point
/// is infeasible; `done(x, g)` is the stopping test.
pub fn minimize<E, D>(mut eval: E, x0: Vec<f64>, done: D, opts: &LbfgsOptions) -> Option<LbfgsResult>
where
    E: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    D: Fn(&[f64], &[f64]) -> bool,
{
    let (mut f, mut g) = eval(&x0)?;
    let mut x = x0;
    let mut evaluations = 1;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut gamma = opts.initial_scale;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        if done(&x, &g) {
            termination = Termination::Converged;
            break;
        }
        iterations += 1;
        let mut restarted = false;
        loop {
            let dir = two_loop(&g, &history, gamma);
            let slope = dot(&g, &dir);
            let (dir, slope) = if slope < 0.0 {
                (dir, slope)
            } else {
                history.clear();
                let d: Vec<f64> = g.iter().map(|v| -gamma * v).collect();
                let s = dot(&g, &d);
                (d, s)
            };
            // weak Wolfe bracketing: expand while the slope is still steep,
            // bisect once a bracket exists
            let (mut lo, mut hi, mut t) = (0.0, f64::INFINITY, 1.0);
            let mut accepted = None;
            let mut armijo_best: Option<(Vec<f64>, f64, Vec<f64>)> = None;
            // strictly decreasing trial kept in case Armijo is lost in rounding
            let mut fallback: Option<(Vec<f64>, f64, Vec<f64>)> = None;
            for _ in 0..opts.max_backtracks {
                let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
                evaluations += 1;
                match eval(&trial) {
                    // approximate Wolfe: once f-differences are at rounding
                    // level, judge the step by its directional derivative
                    Some((ft, gt))
                        if ft.is_finite() && ft <= f + rounding(f) && {
                            let dg = dot(&gt, &dir);
                            dg >= opts.wolfe * slope && dg <= (2.0 * APPROX_WOLFE_DELTA - 1.0) * slope
                        } =>
                    {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                    Some((ft, gt)) if ft.is_finite() && ft <= f + opts.armijo * t * slope => {
                        if dot(&gt, &dir) >= opts.wolfe * slope {
                            accepted = Some((trial, ft, gt));
                            break;
                        }
                        if armijo_best.as_ref().is_none_or(|b| ft < b.1) {
                            armijo_best = Some((trial, ft, gt));
                        }
                        lo = t;
                    }
                    Some((ft, gt)) => {
                        if ft < f && fallback.as_ref().is_none_or(|b| ft < b.1) {
                            fallback = Some((trial, ft, gt));
                        }
                        hi = t;
                    }
                    None => hi = t,
                }
                t = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * lo };
            }
            let accepted = accepted.or(armijo_best).or(fallback);
            match accepted {
                Some((xn, fnew, gn)) => {
                    let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                    let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
                    let sy = dot(&s, &y);
                    if sy > 0.0 {
                        gamma = sy / dot(&y, &y);
                        history.push_back((s, y, 1.0 / sy));
                        if history.len() > opts.memory {
                            history.pop_front();
                        }
                    }
                    x = xn;
                    f = fnew;
                    g = gn;
                    break;
                }
                None if !restarted && !history.is_empty() => {
                    history.clear();
                    restarted = true;
                }
                None => {
                    termination = if done(&x, &g) {
                        Termination::Converged
                    } else {
                        Termination::LineSearchFailed
                    };
                    return Some(LbfgsResult {
                        x,
                        f,
                        g,
                        iterations,
                        evaluations,
                        termination,
                    });
                }
            }
        }
    }
    if termination == Termination::MaxIterations && done(&x, &g) {
        termination = Termination::Converged;
    }
    Some(LbfgsResult {
        x,
        f,
        g,
        iterations,
        evaluations,
        termination,
    })
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, gamma: f64) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    for qi in q.iter_mut() {
        *qi *= gamma;
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}
