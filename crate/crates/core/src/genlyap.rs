//! Generalized Lyapunov equations `Σᵢ T(z₁,…,A_π zᵢ,…,z_k) = R(z₁,…,z_k)`
//! for symmetric forms, and the recursive chain producing `T₃,…,T_d`.

use nalgebra::{ComplexField, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::feedback::{Provenance, ValueExpansion};
use crate::model::QuadraticControlSystem;
use crate::quadrature::gauss_legendre;
use crate::riccati::{self, schur_form, RiccatiSolution, C64};
use crate::symtensor::{binomial, layout, outer_contract_u, GeneralTensor, SymTensor};

/// Largest `n^k` accepted by [`solve_kronecker`].
pub const KRONECKER_MAX: usize = 4096;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const PROBE_SEED: u64 = 0xC0FFEE;
pub const PROBE_COUNT: usize = 64;
/// Threshold on the normalized perturbed-HJB residual that synthesis treats
/// as a broken chain.
pub const SYNTH_HJB_GUARD: f64 = 1e-6;

/// Applies `C` along every axis of a dense `n^k` tensor:
/// `out[…x…] = Σ_y C[x, y]·in[…y…]`.
fn mode_apply<T: ComplexField + Copy>(data: &mut [T], n: usize, k: usize, c: &DMatrix<T>) {
    let mut buf = vec![T::zero(); n];
    for p in 0..k {
        let stride = n.pow((k - 1 - p) as u32);
        let outer = n.pow(p as u32);
        for o in 0..outer {
            for s in 0..stride {
                let at = |y: usize| (o * n + y) * stride + s;
                for (x, slot) in buf.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for y in 0..n {
                        acc += c[(x, y)] * data[at(y)];
                    }
                    *slot = acc;
                }
                for (y, v) in buf.iter().enumerate() {
                    data[at(y)] = *v;
                }
            }
        }
    }
}

fn check_square(a: &DMatrix<f64>, t: &SymTensor) -> Result<()> {
    if a.nrows() != a.ncols() || a.nrows() != t.dim() {
        return Err(Error::Dimension(format!(
            "matrix is {}×{}, tensor dimension is {}",
            a.nrows(),
            a.ncols(),
            t.dim()
        )));
    }
    Ok(())
}

/// `(L T)(z) = Σᵢ T(z₁,…,M zᵢ,…,z_k)` in packed form.
pub fn apply_chain_operator(m: &DMatrix<f64>, t: &SymTensor) -> Result<SymTensor> {
    check_square(m, t)?;
    let l = t.layout().clone();
    let (n, k) = (t.dim(), t.order());
    let mut scratch = vec![0usize; k];
    let entries = (0..l.len())
        .map(|p| {
            let ix = l.index(p);
            let mut acc = 0.0;
            let mut s = 0;
            while s < k {
                let v = ix[s];
                let run = ix[s..].iter().take_while(|&&w| w == v).count();
                let mut part = 0.0;
                for b in 0..n {
                    let c = m[(b, v)];
                    if c == 0.0 {
                        continue;
                    }
                    scratch.copy_from_slice(ix);
                    scratch[s] = b;
                    scratch.sort_unstable();
                    part += c * t.entries()[l.rank(&scratch)];
                }
                acc += run as f64 * part;
                s += run;
            }
            acc
        })
        .collect();
    SymTensor::from_entries(n, k, entries)
}

/// Schur-basis solver for chain equations with a fixed Hurwitz matrix.
#[derive(Clone, Debug)]
pub struct ChainSolver {
    a: DMatrix<f64>,
    q: DMatrix<C64>,
    u: DMatrix<C64>,
    abscissa: f64,
}

impl ChainSolver {
    pub fn new(a_pi: &DMatrix<f64>) -> Result<Self> {
        let schur = schur_form(a_pi)?;
        let abscissa = schur.spectral_abscissa();
        if abscissa >= 0.0 {
            return Err(Error::NotHurwitz(abscissa));
        }
        Ok(ChainSolver {
            a: a_pi.clone(),
            q: schur.q,
            u: schur.t,
            abscissa,
        })
    }

    pub fn spectral_abscissa(&self) -> f64 {
        self.abscissa
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Solves and verifies `‖L T − R‖ ≤ tol·(1 + ‖R‖)`.
    pub fn solve(&self, r: &SymTensor, tol: f64) -> Result<SymTensor> {
        let t = self.solve_unchecked(r)?;
        let residual = apply_chain_operator(&self.a, &t)?.sub(r)?.norm();
        let bound = tol * (1.0 + r.norm());
        if residual > bound {
            return Err(Error::Residual {
                what: format!("chain equation of order {}", r.order()),
                residual,
                tol: bound,
            });
        }
        Ok(t)
    }

    /// Transforms `R` into the Schur basis, runs the triangular recursion
    /// over packed multi-indices in lexicographic order, and transforms back.
    pub fn solve_unchecked(&self, r: &SymTensor) -> Result<SymTensor> {
        check_square(&self.a, r)?;
        let (n, k) = (r.dim(), r.order());
        let l = layout(n, k);

        let mut dense: Vec<C64> = r.to_dense().into_data().into_iter().map(|v| C64::new(v, 0.0)).collect();
        mode_apply(&mut dense, n, k, &self.q.transpose());
        let offset = |ix: &[usize]| ix.iter().fold(0, |acc, &i| acc * n + i);

        let mut hat = vec![C64::new(0.0, 0.0); l.len()];
        let mut scratch = vec![0usize; k];
        for p in 0..l.len() {
            let ix = l.index(p);
            let mut acc = dense[offset(ix)];
            let mut diag = C64::new(0.0, 0.0);
            let mut s = 0;
            while s < k {
                let v = ix[s];
                let run = ix[s..].iter().take_while(|&&w| w == v).count();
                diag += self.u[(v, v)] * run as f64;
                for b in 0..v {
                    let c = self.u[(b, v)];
                    if c == C64::new(0.0, 0.0) {
                        continue;
                    }
                    scratch.copy_from_slice(ix);
                    scratch[s] = b;
                    scratch.sort_unstable();
                    acc -= c * hat[l.rank(&scratch)] * run as f64;
                }
                s += run;
            }
            hat[p] = acc / diag;
        }

        let mut back: Vec<C64> = vec![C64::new(0.0, 0.0); n.pow(k as u32)];
        let mut full = vec![0usize; k];
        for (off, slot) in back.iter_mut().enumerate() {
            let mut rem = off;
            for q in (0..k).rev() {
                full[q] = rem % n;
                rem /= n;
            }
            *slot = hat[l.rank_unsorted(&full, &mut scratch)];
        }
        mode_apply(&mut back, n, k, &self.q.map(|z| z.conj()));
        let real = GeneralTensor::new(vec![n; k], back.iter().map(|z| z.re).collect())?;
        real.full_symmetrize()
    }
}

/// Solves the chain equation with the Schur recursion; see [`ChainSolver`].
pub fn solve_chain_lyapunov(a_pi: &DMatrix<f64>, r: &SymTensor, tol: f64) -> Result<SymTensor> {
    ChainSolver::new(a_pi)?.solve(r, tol)
}

/// Dense Kronecker-sum solve over the full `n^k` index space.
pub fn solve_kronecker(a_pi: &DMatrix<f64>, r: &SymTensor) -> Result<SymTensor> {
    check_square(a_pi, r)?;
    let (n, k) = (r.dim(), r.order());
    let size = n.pow(k as u32);
    if size > KRONECKER_MAX {
        return Err(Error::InvalidInput(format!(
            "dense Kronecker solve limited to n^k ≤ {KRONECKER_MAX}, got {size}"
        )));
    }
    let mut op = DMatrix::<f64>::zeros(size, size);
    let mut ix = vec![0usize; k];
    let pow: Vec<usize> = (0..k).map(|i| n.pow((k - 1 - i) as u32)).collect();
    for row in 0..size {
        let mut rem = row;
        for q in (0..k).rev() {
            ix[q] = rem % n;
            rem /= n;
        }
        for slot in 0..k {
            let base = row - ix[slot] * pow[slot];
            for b in 0..n {
                op[(row, base + b * pow[slot])] += a_pi[(b, ix[slot])];
            }
        }
    }
    let rhs = nalgebra::DVector::from_vec(r.to_dense().into_data());
    let sol = op.lu().solve(&rhs).ok_or(Error::NotHurwitz(f64::NAN))?;
    GeneralTensor::new(vec![n; k], sol.as_slice().to_vec())?.full_symmetrize()
}

#[derive(Clone, Debug)]
pub struct QuadratureSolution {
    pub tensor: SymTensor,
    pub horizon: f64,
    pub tail_estimate: f64,
    /// Set when the estimated truncation tail exceeds `1e-12·(1 + ‖G‖)`.
    pub accuracy_warning: bool,
}

pub const QUADRATURE_PANELS: usize = 10;

/// `−∫₀^H G(e^{A_π t}z₁, …, e^{A_π t}z_k) dt` by Gauss–Legendre on panels
/// that double in length away from `t = 0`, so fast modes near the origin
/// are resolved. Default horizon is `40/(k·|abscissa|)`.
pub fn solve_via_quadrature(
    a_pi: &DMatrix<f64>,
    g: &SymTensor,
    horizon: Option<f64>,
    n_nodes: usize,
) -> Result<QuadratureSolution> {
    check_square(a_pi, g)?;
    let abscissa = schur_form(a_pi)?.spectral_abscissa();
    if abscissa >= 0.0 {
        return Err(Error::NotHurwitz(abscissa));
    }
    let (n, k) = (g.dim(), g.order());
    let h = horizon.unwrap_or(40.0 / (k as f64 * abscissa.abs()));
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("quadrature horizon must be positive, got {h}")));
    }
    let per_panel = (n_nodes / QUADRATURE_PANELS).max(1);
    let (x, w) = gauss_legendre(per_panel);
    let total = (1usize << QUADRATURE_PANELS) as f64 - 1.0;

    let g_dense = g.to_dense().into_data();
    let mut acc = vec![0.0; g_dense.len()];
    for p in 0..QUADRATURE_PANELS {
        let lo = h * ((1usize << p) as f64 - 1.0) / total;
        let hi = h * ((1usize << (p + 1)) as f64 - 1.0) / total;
        for (xi, wi) in x.iter().zip(&w) {
            let t = lo + 0.5 * (hi - lo) * (xi + 1.0);
            let weight = 0.5 * (hi - lo) * wi;
            let e = (a_pi * t).exp();
            let mut term = g_dense.clone();
            mode_apply(&mut term, n, k, &e.transpose());
            acc.iter_mut().zip(&term).for_each(|(a, v)| *a -= weight * v);
        }
    }
    let e_h = (a_pi * h).exp();
    let e_norm = e_h.singular_values().max();
    let tail_estimate = g.norm() * e_norm.powi(k as i32) / (k as f64 * abscissa.abs());
    let tensor = GeneralTensor::new(vec![n; k], acc)?.full_symmetrize()?;
    Ok(QuadratureSolution {
        tensor,
        horizon: h,
        tail_estimate,
        accuracy_warning: tail_estimate > 1e-12 * (1.0 + g.norm()),
    })
}

/// `C[u, z₁…z_{k−1}] = Σ_a B[a,u]·T[a, z₁…z_{k−1}]`: `Bᵀ` in the first slot.
pub fn control_contraction(b: &DMatrix<f64>, t: &SymTensor) -> Result<GeneralTensor> {
    let (n, k) = (t.dim(), t.order());
    if b.nrows() != n {
        return Err(Error::Dimension(format!("B has {} rows, tensor dimension is {n}", b.nrows())));
    }
    let m = b.ncols();
    let rest = n.pow((k - 1) as u32);
    let dense = t.to_dense().into_data();
    let mut shape = vec![m];
    shape.extend(std::iter::repeat_n(n, k - 1));
    let mut data = vec![0.0; m * rest];
    for u in 0..m {
        for a in 0..n {
            let c = b[(a, u)];
            if c == 0.0 {
                continue;
            }
            let src = &dense[a * rest..(a + 1) * rest];
            data[u * rest..(u + 1) * rest]
                .iter_mut()
                .zip(src)
                .for_each(|(o, v)| *o += c * v);
        }
    }
    GeneralTensor::new(shape, data)
}

/// Right-hand side of the order-`k` chain equation. `chain` holds
/// `T₂, …, T_{k−1}` (at least).
pub fn assemble_rhs(k: usize, chain: &[SymTensor], sys: &QuadraticControlSystem) -> Result<SymTensor> {
    if k < 3 {
        return Err(Error::InvalidInput(format!("right-hand sides start at order 3, got {k}")));
    }
    if chain.len() < k - 2 {
        return Err(Error::InvalidInput(format!(
            "order {k} needs T_2..T_{}, chain has {} tensors",
            k - 1,
            chain.len()
        )));
    }
    for (i, t) in chain.iter().take(k - 2).enumerate() {
        if t.order() != i + 2 || t.dim() != sys.n() {
            return Err(Error::Dimension(format!(
                "chain member {i} has order {} and dimension {}, expected order {} and dimension {}",
                t.order(),
                t.dim(),
                i + 2,
                sys.n()
            )));
        }
    }
    let n = sys.n();
    let total = n.pow(k as u32);
    let mut acc = GeneralTensor::zeros(vec![n; k]);

    // Control coupling: (1/2α) Σ_{i=2}^{k−2} binom(k,i) Sym_{i,k−i}(C_i ⊗ C_{k−i}).
    if k >= 4 {
        let contractions: Vec<GeneralTensor> = (2..=k - 2)
            .map(|i| control_contraction(sys.b(), &chain[i - 1]))
            .collect::<Result<_>>()?;
        for i in 2..=k - 2 {
            let outer = outer_contract_u(&contractions[i - 2], &contractions[k - i - 2])?;
            let sym = outer.sym_blocks(i, k - i)?;
            acc.add_scaled(binomial(k, i) as f64 / (2.0 * sys.alpha()), &sym)?;
        }
    }

    // Convection coupling: k(k−1)/2 · Sym_{k−2,2}(T_{k−1} ⊗ A₀), with
    // (T ⊗ A₀)(z₁…z_k) = T(z₁,…,z_{k−2}, A₀(z_{k−1}, z_k)).
    let prev = chain[k - 3].to_dense().into_data();
    let ndata = sys.ntensor().data();
    let head = total / (n * n);
    let mut couple = vec![0.0; total];
    for h in 0..head {
        let trow = &prev[h * n..(h + 1) * n];
        for p in 0..n {
            for q in 0..n {
                let mut v = 0.0;
                for (l, tl) in trow.iter().enumerate() {
                    v += tl * (ndata[(l * n + p) * n + q] + ndata[(l * n + q) * n + p]);
                }
                couple[(h * n + p) * n + q] = v;
            }
        }
    }
    let couple = GeneralTensor::new(vec![n; k], couple)?.sym_blocks(k - 2, 2)?;
    acc.add_scaled((k * (k - 1)) as f64 / 2.0, &couple)?;

    acc.full_symmetrize()
}

/// Unit-sphere probe vectors from the fixed residual seed.
pub fn probe_vectors(n: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Max over 64 seeded unit-vector tuples of
/// `|Σᵢ T(…,A_π zᵢ,…) − R(z)| / (1 + ‖R‖)`.
pub fn lyap_residual(t: &SymTensor, a_pi: &DMatrix<f64>, r: &SymTensor) -> Result<f64> {
    if t.order() != r.order() || t.dim() != r.dim() {
        return Err(Error::Dimension("solution and right-hand side differ in shape".into()));
    }
    check_square(a_pi, t)?;
    let (n, k) = (t.dim(), t.order());
    let probes = probe_vectors(n, PROBE_COUNT * k, PROBE_SEED);
    let r_norm = r.norm();
    let mut worst: f64 = 0.0;
    for tuple in probes.chunks(k) {
        let args: Vec<&[f64]> = tuple.iter().map(|v| v.as_slice()).collect();
        let mut lhs = 0.0;
        for i in 0..k {
            let moved: Vec<f64> = (0..n).map(|row| (0..n).map(|c| a_pi[(row, c)] * tuple[i][c]).sum()).collect();
            let mut slot_args = args.clone();
            slot_args[i] = &moved;
            lhs += t.eval_form(&slot_args)?;
        }
        let rhs = r.eval_form(&args)?;
        worst = worst.max((lhs - rhs).abs() / (1.0 + r_norm));
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct ChainEquation {
    pub k: usize,
    pub rhs: SymTensor,
    pub solution: SymTensor,
    pub residual_norm: f64,
}

#[derive(Clone, Debug)]
pub struct Synthesis {
    pub expansion: ValueExpansion,
    pub riccati: RiccatiSolution,
    pub equations: Vec<ChainEquation>,
}

/// Riccati solve followed by the chain `k = 3..=d`.
pub fn synthesize(sys: &QuadraticControlSystem, d: usize, tol: f64) -> Result<Synthesis> {
    if d < 2 {
        return Err(Error::InvalidInput(format!("degree must be at least 2, got {d}")));
    }
    if d > crate::symtensor::MAX_ORDER {
        return Err(Error::InvalidInput(format!(
            "degree {d} exceeds the supported maximum {}",
            crate::symtensor::MAX_ORDER
        )));
    }
    let ric = riccati::solve_are(sys, riccati::DEFAULT_TOL).map_err(Error::at_order(2))?;
    let solver = ChainSolver::new(&ric.a_pi).map_err(Error::at_order(2))?;
    let mut tensors = vec![ric.pi_tensor()?];
    let mut equations = Vec::new();
    for k in 3..=d {
        let step = || -> Result<ChainEquation> {
            let rhs = assemble_rhs(k, &tensors, sys)?;
            let solution = solver.solve(&rhs, tol)?;
            let residual_norm = lyap_residual(&solution, &ric.a_pi, &rhs)?;
            if residual_norm > tol {
                return Err(Error::Residual {
                    what: "chain equation probes".into(),
                    residual: residual_norm,
                    tol,
                });
            }
            Ok(ChainEquation {
                k,
                rhs,
                solution,
                residual_norm,
            })
        };
        let eq = step().map_err(Error::at_order(k))?;
        tensors.push(eq.solution.clone());
        equations.push(eq);
    }

    let provenance = Provenance {
        system_hash: sys.content_hash(),
        riccati_residual: ric.residual_norm,
        lyap_residuals: equations.iter().map(|e| (e.k, e.residual_norm)).collect(),
        hjb_check: None,
        solver: "schur".into(),
    };
    let mut expansion = ValueExpansion::new(sys.alpha(), sys.b().clone(), tensors, provenance)?;

    let probes = probe_vectors(sys.n(), 16, PROBE_SEED ^ 0x4A5B);
    let mut worst: f64 = 0.0;
    for (i, y) in probes.iter().enumerate() {
        let radius = 0.1 + 0.9 * i as f64 / 15.0;
        let y: Vec<f64> = y.iter().map(|v| v * radius).collect();
        worst = worst.max(expansion.hjb_normalized(sys, &y)?);
    }
    if !(worst <= SYNTH_HJB_GUARD) {
        return Err(Error::Residual {
            what: "perturbed HJB identity after synthesis".into(),
            residual: worst,
            tol: SYNTH_HJB_GUARD,
        });
    }
    expansion.provenance.hjb_check = Some(worst);

    Ok(Synthesis {
        expansion,
        riccati: ric,
        equations,
    })
}
