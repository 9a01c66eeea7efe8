//! Quadratic control systems `ẏ = Ay − N(y,y) + Bu` and benchmark instances.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre;
use crate::symtensor::GeneralTensor;

pub const SYSTEM_SCHEMA_VERSION: u32 = 1;

/// `ẏ = Ay − N(y,y) + Bu` with running cost `½‖y‖² + (α/2)‖u‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticControlSystem {
    n: usize,
    m: usize,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    ntensor: GeneralTensor,
    alpha: f64,
    label: String,
}

fn dim_check(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Dimension(format!("{what} has length {got}, expected {want}")));
    }
    Ok(())
}

impl QuadraticControlSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        ntensor: GeneralTensor,
        alpha: f64,
        label: impl Into<String>,
    ) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::Dimension(format!("A must be square and non-empty, got {}×{}", n, a.ncols())));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::Dimension(format!("B must be {n}×m with m ≥ 1, got {}×{}", b.nrows(), b.ncols())));
        }
        if ntensor.shape() != [n, n, n] {
            return Err(Error::Dimension(format!("N must have shape [{n}, {n}, {n}], got {:?}", ntensor.shape())));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Validation(format!("control weight alpha must be positive, got {alpha}")));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("system matrices contain non-finite entries".into()));
        }
        Ok(QuadraticControlSystem {
            n,
            m: b.ncols(),
            a,
            b,
            ntensor,
            alpha,
            label: label.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn ntensor(&self) -> &GeneralTensor {
        &self.ntensor
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Same system with the bilinear term removed.
    pub fn linearized(&self) -> Self {
        let mut s = self.clone();
        s.ntensor = GeneralTensor::zeros(vec![self.n; 3]);
        s.label = format!("{} (linear part)", self.label);
        s
    }

    /// Same system with a different control weight.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), self.ntensor.clone(), alpha, self.label.clone())
    }

    /// Same system with `B` replaced.
    pub fn with_b(&self, b: DMatrix<f64>) -> Result<Self> {
        Self::new(self.a.clone(), b, self.ntensor.clone(), self.alpha, self.label.clone())
    }

    /// `N(y, z)_i = Σ_{j,l} N[i,j,l] y_j z_l`.
    pub fn bilinear(&self, y: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        dim_check("y", y.len(), self.n)?;
        dim_check("z", z.len(), self.n)?;
        let n = self.n;
        let data = self.ntensor.data();
        Ok((0..n)
            .map(|i| {
                let block = &data[i * n * n..(i + 1) * n * n];
                y.iter()
                    .enumerate()
                    .filter(|(_, yj)| **yj != 0.0)
                    .map(|(j, yj)| yj * block[j * n..(j + 1) * n].iter().zip(z).map(|(c, zl)| c * zl).sum::<f64>())
                    .sum()
            })
            .collect())
    }

    /// `F(y) = N(y, y)`.
    pub fn f_eval(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.bilinear(y, y)
    }

    /// `A₀(y, z) = N(y, z) + N(z, y)`, the derivative of `F` at `y` applied to `z`.
    pub fn oseen_apply(&self, y: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.bilinear(y, z)?;
        for (o, v) in out.iter_mut().zip(self.bilinear(z, y)?) {
            *o += v;
        }
        Ok(out)
    }

    /// `(DF(y))ᵀ p`.
    pub fn dfdy_transpose(&self, y: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        dim_check("y", y.len(), self.n)?;
        dim_check("p", p.len(), self.n)?;
        let n = self.n;
        let data = self.ntensor.data();
        let mut out = vec![0.0; n];
        for (i, &pi) in p.iter().enumerate() {
            if pi == 0.0 {
                continue;
            }
            for j in 0..n {
                for l in 0..n {
                    let c = data[(i * n + j) * n + l];
                    // ∂/∂y_l of y_j y_l and ∂/∂y_j of the same term
                    out[l] += pi * c * y[j];
                    out[j] += pi * c * y[l];
                }
            }
        }
        Ok(out)
    }

    /// `Ay − F(y) + Bu`.
    pub fn rhs_closed(&self, y: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        dim_check("u", u.len(), self.m)?;
        let f = self.f_eval(y)?;
        let n = self.n;
        Ok((0..n)
            .map(|i| {
                let ay: f64 = (0..n).map(|j| self.a[(i, j)] * y[j]).sum();
                let bu: f64 = (0..self.m).map(|p| self.b[(i, p)] * u[p]).sum();
                ay - f[i] + bu
            })
            .collect())
    }

    /// `Bᵀ v`.
    pub fn bt_apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.m)
            .map(|p| (0..self.n).map(|i| self.b[(i, p)] * v[i]).sum())
            .collect()
    }

    fn to_file(&self) -> SystemFile {
        SystemFile {
            schema_version: SYSTEM_SCHEMA_VERSION,
            n: self.n,
            m: self.m,
            alpha: self.alpha,
            a: row_major(&self.a),
            b: row_major(&self.b),
            ntensor: self.ntensor.data().to_vec(),
            label: self.label.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SystemFile =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("system file: {e}")))?;
        file.into_system()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 over the numerical content (label excluded), hex encoded.
    pub fn content_hash(&self) -> String {
        let mut file = self.to_file();
        file.label.clear();
        let canonical = serde_json::to_string(&file).expect("system serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect()
}

#[derive(Serialize, Deserialize)]
struct SystemFile {
    schema_version: u32,
    n: usize,
    m: usize,
    alpha: f64,
    #[serde(rename = "A")]
    a: Vec<f64>,
    #[serde(rename = "B")]
    b: Vec<f64>,
    #[serde(rename = "N")]
    ntensor: Vec<f64>,
    #[serde(default)]
    label: String,
}

impl SystemFile {
    fn into_system(self) -> Result<QuadraticControlSystem> {
        if self.schema_version != SYSTEM_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "system schema version {} not supported (expected {SYSTEM_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let (n, m) = (self.n, self.m);
        for (name, got, want) in [
            ("A", self.a.len(), n * n),
            ("B", self.b.len(), n * m),
            ("N", self.ntensor.len(), n * n * n),
        ] {
            if got != want {
                return Err(Error::Format(format!("{name} has {got} entries, expected {want}")));
            }
        }
        if n == 0 || m == 0 {
            return Err(Error::Format("n and m must be positive".into()));
        }
        let a = DMatrix::from_row_slice(n, n, &self.a);
        let b = DMatrix::from_row_slice(n, m, &self.b);
        let ntensor = GeneralTensor::new(vec![n; 3], self.ntensor)?;
        QuadraticControlSystem::new(a, b, ntensor, self.alpha, self.label)
    }
}

/// Galerkin truncation of `y_t = ν y_xx + μ y − y y_x + Σ_p χ_p u_p` on
/// `(0, 1)` with homogeneous Dirichlet conditions, in the orthonormal basis
/// `φ_j = √2 sin(jπx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BurgersConfig {
    pub n_modes: usize,
    pub nu: f64,
    pub mu: f64,
    pub control_patches: Vec<(f64, f64)>,
    pub alpha: f64,
}

impl BurgersConfig {
    fn validate(&self) -> Result<()> {
        if self.n_modes < 1 {
            return Err(Error::InvalidInput("n_modes must be at least 1".into()));
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::InvalidInput(format!("viscosity must be positive, got {}", self.nu)));
        }
        if !self.mu.is_finite() {
            return Err(Error::InvalidInput("mu must be finite".into()));
        }
        if self.control_patches.is_empty() {
            return Err(Error::InvalidInput("at least one control patch is required".into()));
        }
        for &(lo, hi) in &self.control_patches {
            if !(0.0 < lo && lo < hi && hi < 1.0) {
                return Err(Error::InvalidInput(format!("control patch {lo}:{hi} must satisfy 0 < lo < hi < 1")));
            }
        }
        Ok(())
    }

    /// Eigenvalue `μ − ν(jπ)²` of mode `j` (1-based).
    pub fn mode_eigenvalue(&self, j: usize) -> f64 {
        let k = j as f64 * PI;
        self.mu - self.nu * k * k
    }
}

pub fn make_burgers(cfg: &BurgersConfig) -> Result<QuadraticControlSystem> {
    cfg.validate()?;
    let n = cfg.n_modes;
    let a = DMatrix::from_fn(n, n, |i, j| if i == j { cfg.mode_eigenvalue(i + 1) } else { 0.0 });
    let b = DMatrix::from_fn(n, cfg.control_patches.len(), |j, p| {
        let (lo, hi) = cfg.control_patches[p];
        let k = (j + 1) as f64 * PI;
        2f64.sqrt() / k * ((k * lo).cos() - (k * hi).cos())
    });

    let (x, w) = gauss_legendre(burgers_nodes(n));
    let nodes: Vec<f64> = x.iter().map(|x| 0.5 * (x + 1.0)).collect();
    let weights: Vec<f64> = w.iter().map(|w| 0.5 * w).collect();
    let s2 = 2f64.sqrt();
    let phi: Vec<Vec<f64>> = (1..=n)
        .map(|j| nodes.iter().map(|x| s2 * (j as f64 * PI * x).sin()).collect())
        .collect();
    let dphi: Vec<Vec<f64>> = (1..=n)
        .map(|j| {
            let k = j as f64 * PI;
            nodes.iter().map(|x| s2 * k * (k * x).cos()).collect()
        })
        .collect();
    let ntensor = GeneralTensor::from_fn(vec![n; 3], |ix| {
        (0..nodes.len())
            .map(|q| weights[q] * phi[ix[0]][q] * phi[ix[1]][q] * dphi[ix[2]][q])
            .sum()
    });

    let patches = cfg
        .control_patches
        .iter()
        .map(|(lo, hi)| format!("{lo}:{hi}"))
        .collect::<Vec<_>>()
        .join(",");
    let label = format!("burgers n={n} nu={} mu={} patches={patches}", cfg.nu, cfg.mu);
    QuadraticControlSystem::new(a, b, ntensor, cfg.alpha, label)
}

fn burgers_nodes(n: usize) -> usize {
    4 * n + 8
}

/// `ẏ = a y − n₁ y² + b u`.
pub fn make_scalar(a: f64, b: f64, n1: f64, alpha: f64) -> Result<QuadraticControlSystem> {
    if b == 0.0 && a >= 0.0 {
        return Err(Error::Unstabilizable { re: a, im: 0.0 });
    }
    QuadraticControlSystem::new(
        DMatrix::from_element(1, 1, a),
        DMatrix::from_element(1, 1, b),
        GeneralTensor::new(vec![1, 1, 1], vec![n1])?,
        alpha,
        format!("scalar a={a} b={b} n1={n1}"),
    )
}
