//! The polynomial value expansion `V_d`, its gradient, the feedback law
//! `u_d`, and the residual `r_d` that closes the HJB identity.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::QuadraticControlSystem;
use crate::symtensor::{binomial, factorial, SymTensor};

/// Where an expansion came from and how well its equations were solved.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub system_hash: String,
    pub riccati_residual: f64,
    /// `(k, lyap_residual)` for `k = 3..=d`.
    pub lyap_residuals: Vec<(usize, f64)>,
    /// Worst normalized perturbed-HJB residual seen after synthesis.
    pub hjb_check: Option<f64>,
    pub solver: String,
}

/// `V_d(y) = Σ_{k=2}^d T_k(y,…,y)/k!` together with `α` and `B`.
#[derive(Clone, Debug)]
pub struct ValueExpansion {
    alpha: f64,
    b: DMatrix<f64>,
    tensors: Vec<SymTensor>,
    pub provenance: Provenance,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl ValueExpansion {
    /// `tensors[i]` must have order `i + 2`.
    pub fn new(alpha: f64, b: DMatrix<f64>, tensors: Vec<SymTensor>, provenance: Provenance) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::Validation(format!("alpha must be positive, got {alpha}")));
        }
        let n = b.nrows();
        if tensors.is_empty() {
            return Err(Error::InvalidInput("expansion needs at least T_2".into()));
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.order() != i + 2 || t.dim() != n {
                return Err(Error::Dimension(format!(
                    "tensor {i} has order {} over ℝ^{}, expected order {} over ℝ^{n}",
                    t.order(),
                    t.dim(),
                    i + 2
                )));
            }
        }
        Ok(ValueExpansion {
            alpha,
            b,
            tensors,
            provenance,
        })
    }

    pub fn d(&self) -> usize {
        self.tensors.len() + 1
    }

    pub fn n(&self) -> usize {
        self.b.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// `T_k`, `2 ≤ k ≤ d`.
    pub fn tensor(&self, k: usize) -> &SymTensor {
        &self.tensors[k - 2]
    }

    pub fn tensors(&self) -> &[SymTensor] {
        &self.tensors
    }

    /// Expansion of degree `d' ≤ d` sharing the lower tensors.
    pub fn truncated(&self, d: usize) -> Result<Self> {
        if d < 2 || d > self.d() {
            return Err(Error::InvalidInput(format!("cannot truncate degree {} to {d}", self.d())));
        }
        let mut out = self.clone();
        out.tensors.truncate(d - 1);
        out.provenance.lyap_residuals.retain(|(k, _)| *k <= d);
        Ok(out)
    }

    pub fn provenance_matches(&self, sys: &QuadraticControlSystem) -> bool {
        self.provenance.system_hash == sys.content_hash()
    }

    pub fn check_provenance(&self, sys: &QuadraticControlSystem) -> Result<()> {
        if self.provenance_matches(sys) {
            Ok(())
        } else {
            Err(Error::Provenance(format!(
                "expansion was synthesized for system {}, not {}",
                self.provenance.system_hash,
                sys.content_hash()
            )))
        }
    }

    fn check_y(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.n() {
            return Err(Error::Dimension(format!("state has length {}, expected {}", y.len(), self.n())));
        }
        Ok(())
    }

    fn bt(&self, v: &[f64]) -> Vec<f64> {
        (0..self.m())
            .map(|p| (0..self.n()).map(|i| self.b[(i, p)] * v[i]).sum())
            .collect()
    }

    /// Riesz representatives `g_k(y)` of `T_k(·, y, …, y)`, `k = 2..=d`.
    pub fn gradients(&self, y: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_y(y)?;
        self.tensors.iter().map(|t| t.riesz_gradient(y)).collect()
    }

    /// `Bᵀ g_k(y)` for `k = 2..=d`, the contractions shared by the feedback
    /// terms and `r_d`.
    pub fn control_gradients(&self, y: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(self.gradients(y)?.iter().map(|g| self.bt(g)).collect())
    }

    pub fn eval_vd(&self, y: &[f64]) -> Result<f64> {
        self.check_y(y)?;
        let mut v = 0.0;
        for (i, t) in self.tensors.iter().enumerate() {
            v += t.eval_diag(y)? / factorial(i + 2);
        }
        Ok(v)
    }

    pub fn eval_dvd(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n()];
        for (i, g) in self.gradients(y)?.iter().enumerate() {
            let c = 1.0 / factorial(i + 1);
            out.iter_mut().zip(g).for_each(|(o, v)| *o += c * v);
        }
        Ok(out)
    }

    /// `u_d(y) = −(1/α) Bᵀ DV_d(y)`.
    pub fn eval_feedback(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut u = vec![0.0; self.m()];
        for (i, bg) in self.control_gradients(y)?.iter().enumerate() {
            let c = -1.0 / (self.alpha * factorial(i + 1));
            u.iter_mut().zip(bg).for_each(|(o, v)| *o += c * v);
        }
        Ok(u)
    }

    /// `G_k(y) = −(1/(α(k−1)!)) B Bᵀ g_k(y)`, `3 ≤ k ≤ d`.
    pub fn eval_gk(&self, k: usize, y: &[f64]) -> Result<Vec<f64>> {
        if k < 3 || k > self.d() {
            return Err(Error::InvalidInput(format!("G_k defined for 3 ≤ k ≤ {}, got {k}", self.d())));
        }
        self.check_y(y)?;
        let bg = self.bt(&self.tensor(k).riesz_gradient(y)?);
        let c = -1.0 / (self.alpha * factorial(k - 1));
        Ok((0..self.n())
            .map(|i| c * (0..self.m()).map(|p| self.b[(i, p)] * bg[p]).sum::<f64>())
            .collect())
    }

    /// `r_d(y)`: the terms of `‖BᵀDV_d‖²` above degree `d`, plus the top
    /// convection term `T_d(F(y), y, …, y)/(d−1)!`.
    pub fn eval_rd(&self, sys: &QuadraticControlSystem, y: &[f64]) -> Result<f64> {
        let d = self.d();
        let bg = self.control_gradients(y)?;
        let f = sys.f_eval(y)?;
        let g_d = self.tensor(d).riesz_gradient(y)?;
        let mut r = dot(&g_d, &f) / factorial(d - 1);
        let mut coupling = 0.0;
        for k in d + 1..=2 * d - 2 {
            for l in k - d + 1..=d - 1 {
                // ⟨Bᵀg_{l+1}, Bᵀg_{k−l+1}⟩, index j ↦ bg[j − 2]
                coupling += dot(&bg[l - 1], &bg[k - l - 1]) / (factorial(l) * factorial(k - l));
            }
        }
        r += coupling / (2.0 * self.alpha);
        Ok(r)
    }

    /// `⟨DV_d, Ay − F(y)⟩ + ½‖y‖² − (1/2α)‖BᵀDV_d‖² + r_d(y)`, identically
    /// zero for a correctly synthesized chain.
    pub fn hjb_residual(&self, sys: &QuadraticControlSystem, y: &[f64]) -> Result<f64> {
        self.check_y(y)?;
        let dv = self.eval_dvd(y)?;
        let f = sys.f_eval(y)?;
        let n = self.n();
        let drift: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| sys.a()[(i, j)] * y[j]).sum::<f64>() - f[i])
            .collect();
        let btdv = self.bt(&dv);
        Ok(dot(&dv, &drift) + 0.5 * dot(y, y) - dot(&btdv, &btdv) / (2.0 * self.alpha) + self.eval_rd(sys, y)?)
    }

    /// `|hjb_residual| / (1 + ‖y‖^{2d})`.
    pub fn hjb_normalized(&self, sys: &QuadraticControlSystem, y: &[f64]) -> Result<f64> {
        let r = self.hjb_residual(sys, y)?;
        Ok(r.abs() / (1.0 + norm(y).powi(2 * self.d() as i32)))
    }

    /// The chain equation of order `k` evaluated on the diagonal in terms of
    /// `A` rather than `A_π`:
    /// `k T_k(Ay,y,…) − (1/2α) Σ_{i=1}^{k−1} binom(k,i)⟨Bᵀg_{i+1}, Bᵀg_{k−i+1}⟩
    ///  − k(k−1) T_{k−1}(F(y),y,…)`.
    pub fn a_form_residual(&self, sys: &QuadraticControlSystem, k: usize, y: &[f64]) -> Result<f64> {
        if k < 3 || k > self.d() {
            return Err(Error::InvalidInput(format!("identity defined for 3 ≤ k ≤ {}, got {k}", self.d())));
        }
        let g = self.gradients(y)?;
        let bg: Vec<Vec<f64>> = g.iter().map(|v| self.bt(v)).collect();
        let n = self.n();
        let ay: Vec<f64> = (0..n).map(|i| (0..n).map(|j| sys.a()[(i, j)] * y[j]).sum()).collect();
        let f = sys.f_eval(y)?;
        let mut coupling = 0.0;
        for i in 1..k {
            coupling += binomial(k, i) as f64 * dot(&bg[i - 1], &bg[k - i - 1]);
        }
        Ok(k as f64 * dot(&g[k - 2], &ay)
            - coupling / (2.0 * self.alpha)
            - (k * (k - 1)) as f64 * dot(&g[k - 3], &f))
    }

    /// Closed-loop vector field `Ay − F(y) + B u_d(y)`.
    pub fn closed_loop_rhs(&self, sys: &QuadraticControlSystem, y: &[f64]) -> Result<Vec<f64>> {
        let u = self.eval_feedback(y)?;
        sys.rhs_closed(y, &u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genlyap::{synthesize, DEFAULT_TOL};
    use crate::model::{make_burgers, make_scalar, BurgersConfig};
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

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn scalar_expansion_values() {
        let sys = make_scalar(-1.0, 1.0, 1.0, 1.0).unwrap();
        let exp = synthesize(&sys, 3, DEFAULT_TOL).unwrap().expansion;
        let sqrt2 = 2f64.sqrt();
        let (pi, t3) = (sqrt2 - 1.0, 2.0 * (sqrt2 - 1.0) / -sqrt2);
        let y = 0.37;
        let v = exp.eval_vd(&[y]).unwrap();
        assert!((v - (0.5 * pi * y * y + t3 * y * y * y / 6.0)).abs() < 1e-15);
        let u = exp.eval_feedback(&[y]).unwrap()[0];
        assert!((u + (pi * y + 0.5 * t3 * y * y)).abs() < 1e-15);
        assert_eq!(exp.eval_vd(&[0.0]).unwrap(), 0.0);
        assert_eq!(exp.eval_feedback(&[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn quadratic_case_is_lqr() {
        let sys = burgers6();
        let syn = synthesize(&sys, 2, DEFAULT_TOL).unwrap();
        let exp = &syn.expansion;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = rand_vec(6, &mut rng);
        let yv = nalgebra::DVector::from_vec(y.clone());
        let piy = &syn.riccati.pi * &yv;
        assert!((exp.eval_vd(&y).unwrap() - 0.5 * yv.dot(&piy)).abs() < 1e-14);
        let dv = exp.eval_dvd(&y).unwrap();
        for i in 0..6 {
            assert!((dv[i] - piy[i]).abs() < 1e-14);
        }
        let lqr = -(sys.b().transpose() * &piy) / sys.alpha();
        let u = exp.eval_feedback(&y).unwrap();
        for p in 0..2 {
            assert!((u[p] - lqr[p]).abs() < 1e-13);
        }
        // r₂(y) = ⟨Πy, F(y)⟩
        let f = sys.f_eval(&y).unwrap();
        let expect: f64 = piy.iter().zip(&f).map(|(a, b)| a * b).sum();
        assert!((exp.eval_rd(&sys, &y).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let sys = burgers6();
        let exp = synthesize(&sys, 4, DEFAULT_TOL).unwrap().expansion;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let y = rand_vec(6, &mut rng);
            let z = rand_vec(6, &mut rng);
            let h = 1e-5;
            let plus: Vec<f64> = y.iter().zip(&z).map(|(a, b)| a + h * b).collect();
            let minus: Vec<f64> = y.iter().zip(&z).map(|(a, b)| a - h * b).collect();
            let fd = (exp.eval_vd(&plus).unwrap() - exp.eval_vd(&minus).unwrap()) / (2.0 * h);
            let an = dot(&exp.eval_dvd(&y).unwrap(), &z);
            assert!((fd - an).abs() <= 1e-8 * an.abs().max(1.0), "{fd} vs {an}");
        }
    }

    #[test]
    fn closed_loop_decomposition() {
        let sys = burgers6();
        let syn = synthesize(&sys, 4, DEFAULT_TOL).unwrap();
        let exp = &syn.expansion;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let y = rand_vec(6, &mut rng);
            let direct = exp.closed_loop_rhs(&sys, &y).unwrap();
            let yv = nalgebra::DVector::from_vec(y.clone());
            let lin = &syn.riccati.a_pi * yv;
            let f = sys.f_eval(&y).unwrap();
            let g3 = exp.eval_gk(3, &y).unwrap();
            let g4 = exp.eval_gk(4, &y).unwrap();
            for i in 0..6 {
                let split = lin[i] - f[i] + g3[i] + g4[i];
                assert!((direct[i] - split).abs() <= 1e-11, "{} vs {split}", direct[i]);
            }
        }
        assert!(exp.eval_gk(2, &[0.0; 6]).is_err());
        assert!(exp.eval_gk(5, &[0.0; 6]).is_err());
    }

    #[test]
    fn gk_homogeneity() {
        let exp = synthesize(&burgers6(), 4, DEFAULT_TOL).unwrap().expansion;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = rand_vec(6, &mut rng);
        for k in [3, 4] {
            let base = exp.eval_gk(k, &y).unwrap();
            for s in [2.0f64, 10.0] {
                let sy: Vec<f64> = y.iter().map(|v| s * v).collect();
                let scaled = exp.eval_gk(k, &sy).unwrap();
                let factor = s.powi(k as i32 - 1);
                for i in 0..6 {
                    assert!((scaled[i] - factor * base[i]).abs() <= 1e-13 * (factor * base[i]).abs().max(1e-300) + 1e-15);
                }
            }
        }
    }

    #[test]
    fn hjb_identity_holds() {
        let sys = burgers6();
        let exp = synthesize(&sys, 4, DEFAULT_TOL).unwrap().expansion;
        assert_eq!(exp.hjb_residual(&sys, &[0.0; 6]).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let y = rand_vec(6, &mut rng);
            assert!(exp.hjb_normalized(&sys, &y).unwrap() <= 1e-8);
        }
        for k in [3, 4] {
            let y = rand_vec(6, &mut rng);
            let r = exp.a_form_residual(&sys, k, &y).unwrap();
            assert!(r.abs() <= 1e-9 * (1.0 + norm(&y).powi(k as i32)));
        }
    }

    #[test]
    fn rd_growth_order() {
        let sys = burgers6();
        let exp = synthesize(&sys, 3, DEFAULT_TOL).unwrap().expansion;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = rand_vec(6, &mut rng);
        let ratios: Vec<f64> = [1e-1, 1e-2, 1e-3]
            .iter()
            .map(|&s| {
                let sy: Vec<f64> = y.iter().map(|v| s * v).collect();
                exp.eval_rd(&sys, &sy).unwrap().abs() / s.powi(4)
            })
            .collect();
        assert!(ratios.iter().all(|r| r.is_finite()));
        assert!(ratios[2] <= 2.0 * ratios[0] + 1e-12);
    }

    #[test]
    fn linear_system_has_no_residual() {
        let sys = burgers6().linearized();
        let exp = synthesize(&sys, 4, DEFAULT_TOL).unwrap().expansion;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = rand_vec(6, &mut rng);
        assert!(exp.eval_rd(&sys, &y).unwrap().abs() <= 1e-14);
    }

    #[test]
    fn provenance() {
        let sys = burgers6();
        let exp = synthesize(&sys, 2, DEFAULT_TOL).unwrap().expansion;
        assert!(exp.check_provenance(&sys).is_ok());
        let other = sys.with_alpha(0.2).unwrap();
        assert!(matches!(exp.check_provenance(&other), Err(Error::Provenance(_))));
        assert!(exp.eval_vd(&[1.0]).is_err());
    }
}
