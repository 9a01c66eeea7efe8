//! Stabilizing solution of `AᵀΠ + ΠA + I − (1/α)ΠBBᵀΠ = 0`.

use nalgebra::{Complex, DMatrix, Schur, SVD};

use crate::error::{Error, Result};
use crate::genlyap::ChainSolver;
use crate::model::QuadraticControlSystem;
use crate::symtensor::SymTensor;

pub type C64 = Complex<f64>;

/// Which Schur form [`schur_form`] produces.
pub const SCHUR_KIND: &str = "complex upper-triangular";

pub const DEFAULT_TOL: f64 = 1e-11;
pub const MAX_NEWTON_STEPS: usize = 50;

/// `M = Q T Qᴴ` with `Q` unitary and `T` upper triangular.
#[derive(Clone, Debug)]
pub struct SchurForm {
    pub q: DMatrix<C64>,
    pub t: DMatrix<C64>,
}

impl SchurForm {
    pub fn eigenvalues(&self) -> Vec<C64> {
        (0..self.t.nrows()).map(|i| self.t[(i, i)]).collect()
    }

    pub fn spectral_abscissa(&self) -> f64 {
        self.eigenvalues().iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn reconstruct(&self) -> DMatrix<C64> {
        &self.q * &self.t * self.q.adjoint()
    }
}

pub fn schur_form(m: &DMatrix<f64>) -> Result<SchurForm> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!("Schur form of a {}×{} matrix", m.nrows(), m.ncols())));
    }
    let mc = m.map(|v| C64::new(v, 0.0));
    let schur = Schur::try_new(mc, f64::EPSILON, 10_000).ok_or(Error::NoConvergence {
        what: "Schur eigenvalue iteration",
        iterations: 10_000,
        residual: f64::NAN,
    })?;
    let (q, mut t) = schur.unpack();
    for j in 0..t.ncols() {
        for i in j + 1..t.nrows() {
            t[(i, j)] = C64::new(0.0, 0.0);
        }
    }
    Ok(SchurForm { q, t })
}

#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    pub pi: DMatrix<f64>,
    pub a_pi: DMatrix<f64>,
    pub spectral_abscissa: f64,
    pub residual_norm: f64,
    pub iterations: usize,
}

impl RiccatiSolution {
    pub fn pi_tensor(&self) -> Result<SymTensor> {
        SymTensor::from_matrix(&self.pi)
    }
}

/// Frobenius norm of `AᵀΠ + ΠA + I − (1/α)ΠBBᵀΠ`.
pub fn riccati_residual(sys: &QuadraticControlSystem, pi: &DMatrix<f64>) -> f64 {
    let (a, b) = (sys.a(), sys.b());
    let pb = pi * b;
    let r = a.transpose() * pi + pi * a + DMatrix::identity(sys.n(), sys.n())
        - &pb * pb.transpose() / sys.alpha();
    r.norm()
}

/// `A_π = A − (1/α)BBᵀΠ`.
pub fn closed_loop(sys: &QuadraticControlSystem, pi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if pi.nrows() != sys.n() || pi.ncols() != sys.n() {
        return Err(Error::Dimension(format!(
            "Π is {}×{}, system has n = {}",
            pi.nrows(),
            pi.ncols(),
            sys.n()
        )));
    }
    let b = sys.b();
    Ok(sys.a() - b * (b.transpose() * pi) / sys.alpha())
}

fn scale(sys: &QuadraticControlSystem) -> f64 {
    1.0 + sys.a().norm() + sys.b().norm()
}

/// Eigenvalue-wise rank test of `[A − λI, B]` for every eigenvalue with
/// non-negative real part.
pub fn check_stabilizable(sys: &QuadraticControlSystem) -> Result<()> {
    let schur = schur_form(sys.a())?;
    let (n, m) = (sys.n(), sys.m());
    let s = scale(sys);
    for lambda in schur.eigenvalues() {
        if lambda.re < -1e-12 * s {
            continue;
        }
        let mut pencil = DMatrix::<C64>::zeros(n, n + m);
        for i in 0..n {
            for j in 0..n {
                pencil[(i, j)] = C64::new(sys.a()[(i, j)], 0.0);
            }
            pencil[(i, i)] -= lambda;
            for p in 0..m {
                pencil[(i, n + p)] = C64::new(sys.b()[(i, p)], 0.0);
            }
        }
        let sv = SVD::new(pencil, false, false).singular_values;
        let smallest = sv.iter().copied().fold(f64::INFINITY, f64::min);
        if smallest <= 1e-9 * s {
            return Err(Error::Unstabilizable {
                re: lambda.re,
                im: lambda.im,
            });
        }
    }
    Ok(())
}

/// Matrix sign function by scaled Newton iteration.
fn matrix_sign(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut z = s.clone();
    for it in 0..100 {
        let zi = z.clone().try_inverse().ok_or(Error::NoConvergence {
            what: "matrix sign iteration (singular iterate)",
            iterations: it,
            residual: f64::NAN,
        })?;
        let c = (zi.norm() / z.norm()).sqrt();
        let next = (&z * c + zi / c) * 0.5;
        let change = (&next - &z).norm();
        z = next;
        if change <= 1e-13 * z.norm() {
            return Ok(z);
        }
    }
    Err(Error::NoConvergence {
        what: "matrix sign iteration",
        iterations: 100,
        residual: f64::NAN,
    })
}

/// Gain `K` (with `u = −Ky`) making `A − BK` Hurwitz. Only the unstable
/// part of the spectrum is moved: the gain acts through an orthonormal basis
/// of the left invariant subspace of the unstable eigenvalues, on which a
/// Bass-type pole shift is applied.
pub fn initial_gain(sys: &QuadraticControlSystem) -> Result<DMatrix<f64>> {
    let (a, b) = (sys.a(), sys.b());
    let (n, m) = (sys.n(), sys.m());
    let eig = schur_form(a)?.eigenvalues();
    let s = scale(sys);
    let stable_gap = eig
        .iter()
        .filter(|l| l.re < -1e-12 * s)
        .map(|l| -l.re)
        .fold(f64::INFINITY, f64::min);
    let delta = (1e-3 * s).min(0.5 * stable_gap);
    let r = eig.iter().filter(|l| l.re > -delta).count();
    if r == 0 {
        return Ok(DMatrix::zeros(m, n));
    }

    let shifted = a.transpose() + DMatrix::identity(n, n) * delta;
    let sign = matrix_sign(&shifted)?;
    let projector = (DMatrix::identity(n, n) + sign) * 0.5;
    let svd = SVD::new(projector, true, false);
    let u = svd.u.expect("left singular vectors requested");
    let w = u.columns(0, r).into_owned();

    let lambda = w.transpose() * a * &w;
    let bw = w.transpose() * b;
    let max_re = schur_form(&lambda)?.spectral_abscissa().max(0.0);
    let beta = 2.0 * delta + max_re + 1e-2 * (1.0 + lambda.norm());
    // (Λ+βI)P + P(Λ+βI)ᵀ = 2 Bw Bwᵀ, posed with the Hurwitz matrix −(Λ+βI)ᵀ.
    let m_hurwitz = -(lambda.transpose() + DMatrix::identity(r, r) * beta);
    let rhs = SymTensor::from_matrix(&(&bw * bw.transpose() * -2.0))?;
    let p = ChainSolver::new(&m_hurwitz)?.solve(&rhs, 1e-8)?.to_matrix()?;
    let p_inv = p.try_inverse().ok_or(Error::Unstabilizable {
        re: max_re,
        im: 0.0,
    })?;
    let gain = bw.transpose() * p_inv * w.transpose();

    let abscissa = schur_form(&(a - b * &gain))?.spectral_abscissa();
    if abscissa >= 0.0 {
        return Err(Error::NoConvergence {
            what: "initial stabilizing gain",
            iterations: 1,
            residual: abscissa,
        });
    }
    Ok(gain)
}

/// Newton–Kleinman iteration from a stabilizing initial gain; each step is a
/// Lyapunov solve in the current closed-loop matrix.
pub fn solve_are(sys: &QuadraticControlSystem, tol: f64) -> Result<RiccatiSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    check_stabilizable(sys)?;
    let (a, b, alpha) = (sys.a(), sys.b(), sys.alpha());
    let n = sys.n();
    let mut gain = initial_gain(sys)?;
    let mut last_residual = f64::INFINITY;
    let mut accepted: Option<(DMatrix<f64>, f64, usize)> = None;
    for it in 1..=MAX_NEWTON_STEPS {
        let a_j = a - b * &gain;
        let q = DMatrix::identity(n, n) + gain.transpose() * &gain * alpha;
        let rhs = SymTensor::from_matrix(&(-q))?;
        let x = ChainSolver::new(&a_j)?.solve(&rhs, 1e-9)?.to_matrix()?;
        let residual = riccati_residual(sys, &x);
        let improving = residual < 0.5 * last_residual;
        last_residual = residual;
        if residual <= tol * (1.0 + x.norm_squared()) {
            // Once inside the tolerance, keep taking Newton steps while they
            // still pay off; quadratic convergence reaches rounding level
            // within a step or two.
            let better = accepted.as_ref().is_none_or(|(_, r, _)| residual < *r);
            if better {
                accepted = Some((x.clone(), residual, it));
            }
            if !improving || accepted.as_ref().is_some_and(|(_, _, first)| it >= first + 3) {
                break;
            }
        } else if accepted.is_some() {
            break;
        }
        gain = b.transpose() * x / alpha;
    }
    let Some((pi, residual_norm, iterations)) = accepted else {
        return Err(Error::NoConvergence {
            what: "Newton–Kleinman iteration",
            iterations: MAX_NEWTON_STEPS,
            residual: last_residual,
        });
    };
    let a_pi = closed_loop(sys, &pi)?;
    let spectral_abscissa = schur_form(&a_pi)?.spectral_abscissa();
    if spectral_abscissa >= 0.0 {
        return Err(Error::NotHurwitz(spectral_abscissa));
    }
    Ok(RiccatiSolution {
        pi,
        a_pi,
        spectral_abscissa,
        residual_norm,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_burgers, make_scalar, BurgersConfig};
    use crate::quadrature::composite;
    use crate::symtensor::GeneralTensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

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
    fn schur_of_diagonal_and_symmetric() {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-1.0, 2.0, 0.5]));
        let s = schur_form(&d).unwrap();
        let mut eig: Vec<f64> = s.eigenvalues().iter().map(|l| l.re).collect();
        eig.sort_by(f64::total_cmp);
        assert_eq!(eig, vec![-1.0, 0.5, 2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let sym = &g + g.transpose();
        let s = schur_form(&sym).unwrap();
        for j in 0..5 {
            for i in 0..j {
                assert!(s.t[(i, j)].norm() <= 1e-12 * sym.norm());
            }
        }
    }

    #[test]
    fn schur_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let s = schur_form(&m).unwrap();
        let err = (s.reconstruct() - m.map(|v| C64::new(v, 0.0))).norm();
        assert!(err <= 1e-12 * m.norm(), "reconstruction error {err}");
        let qq = s.q.adjoint() * &s.q - DMatrix::<C64>::identity(6, 6);
        assert!(qq.norm() < 1e-13);
    }

    #[test]
    fn scalar_closed_form() {
        let sys = make_scalar(-1.0, 1.0, 1.0, 1.0).unwrap();
        let sol = solve_are(&sys, DEFAULT_TOL).unwrap();
        let sqrt2 = 2f64.sqrt();
        assert!((sol.pi[(0, 0)] - (sqrt2 - 1.0)).abs() < 1e-14);
        assert!((sol.a_pi[(0, 0)] + sqrt2).abs() < 1e-14);

        // general scalar formula π = α(a + √(a² + b²/α))/b²
        let (a, b, alpha) = (1.3, 0.7, 0.4);
        let sys = make_scalar(a, b, 0.0, alpha).unwrap();
        let expect = alpha * (a + (a * a + b * b / alpha).sqrt()) / (b * b);
        let sol = solve_are(&sys, DEFAULT_TOL).unwrap();
        assert!((sol.pi[(0, 0)] - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn zero_input_reduces_to_lyapunov() {
        let a = DMatrix::from_row_slice(3, 3, &[-1.0, 0.4, 0.0, 0.0, -2.0, 1.0, 0.3, 0.0, -1.5]);
        let sys = QuadraticControlSystem::new(
            a.clone(),
            DMatrix::zeros(3, 1),
            GeneralTensor::zeros(vec![3; 3]),
            1.0,
            "lyap",
        )
        .unwrap();
        let sol = solve_are(&sys, DEFAULT_TOL).unwrap();
        assert_eq!(closed_loop(&sys, &sol.pi).unwrap(), a);
        // Π = ∫₀^∞ e^{Aᵀt} e^{At} dt by composite Gauss–Legendre
        let (t, w) = composite(0.0, 60.0, 60, 20);
        let mut integral = DMatrix::zeros(3, 3);
        for (ti, wi) in t.iter().zip(&w) {
            let e = (&a * *ti).exp();
            integral += e.transpose() * e * *wi;
        }
        assert!((integral - &sol.pi).norm() < 1e-10);
    }

    #[test]
    fn burgers_riccati() {
        let sys = burgers6();
        let sol = solve_are(&sys, DEFAULT_TOL).unwrap();
        assert!(sol.residual_norm <= 1e-10 * (1.0 + sol.pi.norm_squared()));
        assert!(sol.spectral_abscissa < 0.0);
        assert!((&sol.pi - sol.pi.transpose()).norm() <= 1e-12);
        let min_eig = sol.pi.clone().symmetric_eigen().eigenvalues.min();
        assert!(min_eig >= -1e-10 * sol.pi.norm());
    }

    #[test]
    fn alpha_b_scale_covariance() {
        let sys = burgers6();
        let c: f64 = 3.7;
        let scaled = sys
            .with_b(sys.b() * c.sqrt())
            .unwrap()
            .with_alpha(sys.alpha() * c)
            .unwrap();
        let s1 = solve_are(&sys, DEFAULT_TOL).unwrap();
        let s2 = solve_are(&scaled, DEFAULT_TOL).unwrap();
        assert!((&s1.pi - &s2.pi).norm() <= 1e-10 * (1.0 + s1.pi.norm()));
        assert!((&s1.a_pi - &s2.a_pi).norm() <= 1e-10 * (1.0 + s1.a_pi.norm()));
    }

    #[test]
    fn unstabilizable_pair_reports_eigenvalue() {
        // second mode is unstable and not reached by B
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 0.5]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let sys = QuadraticControlSystem::new(a, b, GeneralTensor::zeros(vec![2; 3]), 1.0, "bad").unwrap();
        match solve_are(&sys, DEFAULT_TOL) {
            Err(Error::Unstabilizable { re, im }) => {
                assert!((re - 0.5).abs() < 1e-12 && im.abs() < 1e-12);
            }
            other => panic!("expected unstabilizable, got {other:?}"),
        }
    }

    #[test]
    fn stabilizes_several_unstable_modes() {
        let sys = make_burgers(&BurgersConfig {
            n_modes: 5,
            nu: 0.02,
            mu: 2.0,
            control_patches: vec![(0.05, 0.25), (0.3, 0.45), (0.55, 0.7), (0.75, 0.95)],
            alpha: 0.5,
        })
        .unwrap();
        let k0 = initial_gain(&sys).unwrap();
        let a0 = sys.a() - sys.b() * k0;
        assert!(schur_form(&a0).unwrap().spectral_abscissa() < 0.0);
        let sol = solve_are(&sys, DEFAULT_TOL).unwrap();
        assert!(sol.spectral_abscissa < 0.0);
    }
}
