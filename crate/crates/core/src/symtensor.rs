//! Symmetric multilinear forms over ℝⁿ in packed storage, plus dense
//! general tensors for intermediates that are only blockwise symmetric.
//!
//! A [`SymTensor`] of order `k` stores one entry per non-decreasing
//! multi-index `j₁ ≤ … ≤ j_k`, in lexicographic order. Symmetry is therefore
//! structural: there is no way to build a `SymTensor` whose evaluation
//! depends on argument order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};

/// Highest supported tensor order.
pub const MAX_ORDER: usize = 8;

const SYMT_MAGIC: &[u8; 4] = b"SYMT";
const SYMT_VERSION: u32 = 1;

pub(crate) fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r = 1usize;
    for i in 1..=k {
        r = r * (n - k + i) / i;
    }
    r
}

pub(crate) fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// All permutations of `0..k` in lexicographic order.
pub(crate) fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut p: Vec<usize> = (0..k).collect();
    let mut out = vec![p.clone()];
    loop {
        let Some(i) = (1..k).rev().find(|&i| p[i - 1] < p[i]) else {
            return out;
        };
        let j = (i..k).rev().find(|&j| p[j] > p[i - 1]).unwrap();
        p.swap(i - 1, j);
        p[i..].reverse();
        out.push(p.clone());
    }
}

/// All `i`-element subsets of `0..k`, each sorted, in lexicographic order.
pub(crate) fn combinations(k: usize, i: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut c: Vec<usize> = (0..i).collect();
    if i > k {
        return out;
    }
    loop {
        out.push(c.clone());
        let Some(p) = (0..i).rev().find(|&p| c[p] < k - i + p) else {
            return out;
        };
        c[p] += 1;
        for q in p + 1..i {
            c[q] = c[q - 1] + 1;
        }
    }
}

/// Mean of `values` computed as `v₀ + Σ(vᵢ − v₀)/len`, so that a run of
/// identical values averages to exactly that value.
fn shifted_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut first = None;
    let mut acc = 0.0;
    let mut count = 0usize;
    for v in values {
        let f = *first.get_or_insert(v);
        acc += v - f;
        count += 1;
    }
    match first {
        Some(f) => f + acc / count as f64,
        None => 0.0,
    }
}

/// Canonical enumeration of non-decreasing multi-indices for a given
/// `(dim, order)`, shared between all tensors of that shape.
#[derive(Debug)]
pub struct PackedLayout {
    dim: usize,
    order: usize,
    indices: Vec<usize>,
    multiplicity: Vec<f64>,
    // prefix[len][x] = number of non-decreasing tuples of length `len`
    // whose first value is below `x`.
    prefix: Vec<Vec<usize>>,
}

impl PackedLayout {
    fn build(dim: usize, order: usize) -> Self {
        let count = |len: usize, lo: usize| binomial(dim - lo + len - 1, len);
        let prefix = (0..order)
            .map(|len| {
                let mut acc = vec![0usize; dim + 1];
                for x in 0..dim {
                    acc[x + 1] = acc[x] + if len == 0 { 1 } else { count(len, x) };
                }
                acc
            })
            .collect();

        let len = binomial(dim + order - 1, order);
        let mut indices = Vec::with_capacity(len * order);
        let mut multiplicity = Vec::with_capacity(len);
        let kfact = factorial(order);
        let mut cur = vec![0usize; order];
        loop {
            indices.extend_from_slice(&cur);
            let mut denom = 1.0;
            let mut run = 1usize;
            for p in 1..=order {
                if p < order && cur[p] == cur[p - 1] {
                    run += 1;
                } else {
                    denom *= factorial(run);
                    run = 1;
                }
            }
            multiplicity.push(kfact / denom);

            // next non-decreasing tuple
            let Some(p) = (0..order).rev().find(|&p| cur[p] + 1 < dim) else {
                break;
            };
            let v = cur[p] + 1;
            for q in p..order {
                cur[q] = v;
            }
        }
        debug_assert_eq!(multiplicity.len(), len);
        PackedLayout {
            dim,
            order,
            indices,
            multiplicity,
            prefix,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.multiplicity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.multiplicity.is_empty()
    }

    /// Multi-index of packed entry `p`.
    pub fn index(&self, p: usize) -> &[usize] {
        &self.indices[p * self.order..(p + 1) * self.order]
    }

    /// Number of distinct permutations of packed multi-index `p`.
    pub fn multiplicity(&self, p: usize) -> f64 {
        self.multiplicity[p]
    }

    /// Position of a sorted multi-index in packed storage.
    pub fn rank(&self, sorted: &[usize]) -> usize {
        let k = self.order;
        let mut r = 0;
        let mut prev = 0;
        for (p, &a) in sorted.iter().enumerate() {
            let table = &self.prefix[k - p - 1];
            r += table[a] - table[prev];
            prev = a;
        }
        r
    }

    /// Position of an arbitrary multi-index (sorted into `scratch`).
    pub fn rank_unsorted(&self, idx: &[usize], scratch: &mut [usize]) -> usize {
        scratch.copy_from_slice(idx);
        scratch.sort_unstable();
        self.rank(scratch)
    }
}

/// Shared layout for `(dim, order)`, built once per process.
pub fn layout(dim: usize, order: usize) -> Arc<PackedLayout> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<PackedLayout>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    guard
        .entry((dim, order))
        .or_insert_with(|| Arc::new(PackedLayout::build(dim, order)))
        .clone()
}

fn check_shape(dim: usize, order: usize) -> Result<()> {
    if dim == 0 {
        return Err(Error::InvalidInput("tensor dimension must be at least 1".into()));
    }
    if order == 0 || order > MAX_ORDER {
        return Err(Error::InvalidInput(format!(
            "tensor order {order} outside supported range 1..={MAX_ORDER}"
        )));
    }
    Ok(())
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(p) => Err(Error::Validation(format!("non-finite tensor entry at position {p}"))),
        None => Ok(()),
    }
}

/// Order-k symmetric multilinear form over ℝⁿ.
#[derive(Clone, Debug)]
pub struct SymTensor {
    layout: Arc<PackedLayout>,
    entries: Vec<f64>,
}

impl PartialEq for SymTensor {
    fn eq(&self, other: &Self) -> bool {
        self.dim() == other.dim() && self.order() == other.order() && self.entries == other.entries
    }
}

impl SymTensor {
    pub fn zeros(dim: usize, order: usize) -> Result<Self> {
        check_shape(dim, order)?;
        let layout = layout(dim, order);
        let entries = vec![0.0; layout.len()];
        Ok(SymTensor { layout, entries })
    }

    pub fn from_entries(dim: usize, order: usize, entries: Vec<f64>) -> Result<Self> {
        check_shape(dim, order)?;
        let layout = layout(dim, order);
        if entries.len() != layout.len() {
            return Err(Error::Dimension(format!(
                "symmetric tensor of order {order} over ℝ^{dim} needs {} entries, got {}",
                layout.len(),
                entries.len()
            )));
        }
        check_finite(&entries)?;
        Ok(SymTensor { layout, entries })
    }

    /// Builds a tensor by evaluating `f` at every sorted multi-index.
    pub fn from_fn(dim: usize, order: usize, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        check_shape(dim, order)?;
        let layout = layout(dim, order);
        let entries = (0..layout.len()).map(|p| f(layout.index(p))).collect();
        Self::from_entries(dim, order, entries)
    }

    /// Order-2 form `(z₁, z₂) ↦ z₁ᵀ M z₂`; the upper triangle of `M` is used.
    pub fn from_matrix(m: &nalgebra::DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension("order-2 form requires a square matrix".into()));
        }
        Self::from_fn(m.nrows(), 2, |ix| m[(ix[0], ix[1])])
    }

    pub fn to_matrix(&self) -> Result<nalgebra::DMatrix<f64>> {
        if self.order() != 2 {
            return Err(Error::Dimension(format!("order {} tensor is not a matrix", self.order())));
        }
        let n = self.dim();
        Ok(nalgebra::DMatrix::from_fn(n, n, |i, j| self.get(&[i, j])))
    }

    pub(crate) fn from_parts(layout: Arc<PackedLayout>, entries: Vec<f64>) -> Self {
        debug_assert_eq!(layout.len(), entries.len());
        SymTensor { layout, entries }
    }

    pub fn order(&self) -> usize {
        self.layout.order
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn layout(&self) -> &Arc<PackedLayout> {
        &self.layout
    }

    /// Entry at an arbitrary (not necessarily sorted) multi-index.
    pub fn get(&self, idx: &[usize]) -> f64 {
        let mut s = idx.to_vec();
        s.sort_unstable();
        self.entries[self.layout.rank(&s)]
    }

    /// Euclidean norm of the fully expanded tensor.
    pub fn norm(&self) -> f64 {
        self.entries
            .iter()
            .enumerate()
            .map(|(p, e)| self.layout.multiplicity(p) * e * e)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.abs()))
    }

    pub fn scaled(&self, c: f64) -> Self {
        SymTensor {
            layout: self.layout.clone(),
            entries: self.entries.iter().map(|e| c * e).collect(),
        }
    }

    /// Entrywise difference; shapes must agree.
    pub fn sub(&self, other: &SymTensor) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(SymTensor {
            layout: self.layout.clone(),
            entries: self.entries.iter().zip(&other.entries).map(|(a, b)| a - b).collect(),
        })
    }

    fn check_same_shape(&self, other: &SymTensor) -> Result<()> {
        if self.dim() != other.dim() || self.order() != other.order() {
            return Err(Error::Dimension(format!(
                "tensor shapes differ: order {} dim {} vs order {} dim {}",
                self.order(),
                self.dim(),
                other.order(),
                other.dim()
            )));
        }
        Ok(())
    }

    fn check_vec(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "vector of length {} given to a form over ℝ^{}",
                v.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `T(z₁, …, z_k)`.
    ///
    /// Arguments are put in a canonical order before contraction, so the
    /// result is bit-identical under any permutation of `args`.
    pub fn eval_form(&self, args: &[&[f64]]) -> Result<f64> {
        let k = self.order();
        if args.len() != k {
            return Err(Error::Dimension(format!(
                "order-{k} form evaluated with {} arguments",
                args.len()
            )));
        }
        for a in args {
            self.check_vec(a)?;
        }
        let mut args = args.to_vec();
        args.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });

        let n = self.dim();
        let mut idx = vec![0usize; k];
        let mut scratch = vec![0usize; k];
        let mut acc = 0.0;
        loop {
            let prod: f64 = idx.iter().zip(&args).map(|(&j, a)| a[j]).product();
            if prod != 0.0 {
                acc += self.entries[self.layout.rank_unsorted(&idx, &mut scratch)] * prod;
            }
            let Some(p) = (0..k).rev().find(|&p| idx[p] + 1 < n) else {
                break;
            };
            idx[p] += 1;
            idx[p + 1..].iter_mut().for_each(|v| *v = 0);
        }
        Ok(acc)
    }

    /// `T(y, …, y)`.
    pub fn eval_diag(&self, y: &[f64]) -> Result<f64> {
        self.check_vec(y)?;
        let l = &self.layout;
        Ok((0..l.len())
            .map(|p| {
                let prod: f64 = l.index(p).iter().map(|&j| y[j]).product();
                self.entries[p] * l.multiplicity(p) * prod
            })
            .sum())
    }

    /// Riesz representative of `z ↦ T(z, y, …, y)`.
    pub fn riesz_gradient(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_vec(y)?;
        let l = &self.layout;
        let k = self.order();
        let mut g = vec![0.0; self.dim()];
        for p in 0..l.len() {
            let e = self.entries[p];
            if e == 0.0 {
                continue;
            }
            let ix = l.index(p);
            let mut s = 0;
            while s < k {
                let v = ix[s];
                let run = ix[s..].iter().take_while(|&&w| w == v).count();
                // drop one occurrence of v
                let rest: f64 = ix
                    .iter()
                    .enumerate()
                    .filter(|&(q, _)| q != s)
                    .map(|(_, &j)| y[j])
                    .product();
                g[v] += e * l.multiplicity(p) * run as f64 / k as f64 * rest;
                s += run;
            }
        }
        Ok(g)
    }

    /// Expands to a dense tensor with uniform axis length `dim`.
    pub fn to_dense(&self) -> GeneralTensor {
        let k = self.order();
        let shape = vec![self.dim(); k];
        let mut scratch = vec![0usize; k];
        GeneralTensor::from_fn(shape, |ix| self.entries[self.layout.rank_unsorted(ix, &mut scratch)])
    }

    pub fn write_symt<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SYMT_MAGIC)?;
        w.write_all(&SYMT_VERSION.to_le_bytes())?;
        w.write_all(&(self.order() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&e.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_symt<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated tensor header".into()))?;
        if &magic != SYMT_MAGIC {
            return Err(Error::Format("missing SYMT magic".into()));
        }
        let mut word = [0u8; 4];
        let mut next_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut word)
                .map_err(|_| Error::Format("truncated tensor header".into()))?;
            Ok(u32::from_le_bytes(word))
        };
        let version = next_u32(&mut r)?;
        if version != SYMT_VERSION {
            return Err(Error::Format(format!("unsupported SYMT version {version}")));
        }
        let order = next_u32(&mut r)? as usize;
        let dim = next_u32(&mut r)? as usize;
        check_shape(dim, order).map_err(|e| Error::Format(e.to_string()))?;
        let len = layout(dim, order).len();
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != 8 * len {
            return Err(Error::Format(format!(
                "expected {len} entries ({} bytes), found {} bytes",
                8 * len,
                bytes.len()
            )));
        }
        let entries = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_entries(dim, order, entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 8 * self.entries.len());
        self.write_symt(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_symt(bytes.as_slice())
    }
}

/// Dense real tensor in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneralTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl GeneralTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {len} entries, got {}",
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(GeneralTensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        GeneralTensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..len {
            data.push(f(&idx));
            for p in (0..shape.len()).rev() {
                idx[p] += 1;
                if idx[p] < shape[p] {
                    break;
                }
                idx[p] = 0;
            }
        }
        GeneralTensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    fn offset(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &s)| acc * s + i)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    /// Axis length when all axes agree.
    pub fn uniform_dim(&self) -> Option<usize> {
        let first = *self.shape.first()?;
        self.shape.iter().all(|&s| s == first).then_some(first)
    }

    pub fn max_abs_diff(&self, other: &GeneralTensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!("shapes {:?} and {:?} differ", self.shape, other.shape)));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Entrywise `self + c·other`.
    pub fn add_scaled(&mut self, c: f64, other: &GeneralTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!("shapes {:?} and {:?} differ", self.shape, other.shape)));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += c * b);
        Ok(())
    }

    /// Average over the block-ordered permutations `S_{i,j}`: permutations
    /// that keep the first `i` slots and the last `j` slots each in order.
    pub fn sym_blocks(&self, i: usize, j: usize) -> Result<GeneralTensor> {
        let k = self.order();
        if i == 0 || j == 0 || i + j != k {
            return Err(Error::Dimension(format!(
                "block symmetrization ({i}, {j}) needs i, j ≥ 1 and order i + j, tensor has order {k}"
            )));
        }
        if self.uniform_dim().is_none() {
            return Err(Error::Dimension(format!("non-uniform shape {:?}", self.shape)));
        }
        let sigmas: Vec<Vec<usize>> = combinations(k, i)
            .into_iter()
            .map(|head| {
                let tail = (0..k).filter(|p| !head.contains(p));
                head.iter().copied().chain(tail).collect()
            })
            .collect();
        let mut permuted = vec![0usize; k];
        Ok(GeneralTensor::from_fn(self.shape.clone(), |ix| {
            shifted_mean(sigmas.iter().map(|sigma| {
                for (slot, &src) in sigma.iter().enumerate() {
                    permuted[slot] = ix[src];
                }
                self.get(&permuted)
            }))
        }))
    }

    /// Average over all `k!` argument permutations, packed.
    pub fn full_symmetrize(&self) -> Result<SymTensor> {
        let dim = self
            .uniform_dim()
            .ok_or_else(|| Error::Dimension(format!("non-uniform shape {:?}", self.shape)))?;
        let k = self.order();
        check_shape(dim, k)?;
        let perms = permutations(k);
        let layout = layout(dim, k);
        let mut permuted = vec![0usize; k];
        let entries = (0..layout.len())
            .map(|p| {
                let ix = layout.index(p);
                shifted_mean(perms.iter().map(|perm| {
                    for (slot, &src) in perm.iter().enumerate() {
                        permuted[slot] = ix[src];
                    }
                    self.get(&permuted)
                }))
            })
            .collect();
        Ok(SymTensor::from_parts(layout, entries))
    }

    /// Packs a tensor that is exactly symmetric; fails on any asymmetry.
    pub fn pack(&self) -> Result<SymTensor> {
        let dim = self
            .uniform_dim()
            .ok_or_else(|| Error::Dimension(format!("non-uniform shape {:?}", self.shape)))?;
        let k = self.order();
        check_shape(dim, k)?;
        let layout = layout(dim, k);
        let mut scratch = vec![0usize; k];
        let mut idx = vec![0usize; k];
        for (off, &v) in self.data.iter().enumerate() {
            let mut rem = off;
            for p in (0..k).rev() {
                idx[p] = rem % dim;
                rem /= dim;
            }
            let canon = layout.rank_unsorted(&idx, &mut scratch);
            let c = self.get(layout.index(canon));
            if c.to_bits() != v.to_bits() {
                return Err(Error::Validation(format!("tensor is not symmetric at {idx:?}")));
            }
        }
        let entries = (0..layout.len()).map(|p| self.get(layout.index(p))).collect();
        Ok(SymTensor::from_parts(layout, entries))
    }
}

/// `out(z₁…z_{i+j}) = Σᵤ C1[u](z₁…zᵢ)·C2[u](z_{i+1}…z_{i+j})`: the tensor
/// product of two control-valued forms with the inner product taken over the
/// leading (control) axis.
pub fn outer_contract_u(c1: &GeneralTensor, c2: &GeneralTensor) -> Result<GeneralTensor> {
    if c1.order() < 2 || c2.order() < 2 {
        return Err(Error::Dimension("factors need a control axis plus at least one state axis".into()));
    }
    let m = c1.shape[0];
    if c2.shape[0] != m {
        return Err(Error::Dimension(format!(
            "control axes differ: {} vs {}",
            m, c2.shape[0]
        )));
    }
    let left: usize = c1.shape[1..].iter().product();
    let right: usize = c2.shape[1..].iter().product();
    let mut shape = c1.shape[1..].to_vec();
    shape.extend_from_slice(&c2.shape[1..]);
    let mut data = vec![0.0; left * right];
    for u in 0..m {
        let a = &c1.data[u * left..(u + 1) * left];
        let b = &c2.data[u * right..(u + 1) * right];
        for (p, &av) in a.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut data[p * right..(p + 1) * right];
            row.iter_mut().zip(b).for_each(|(o, &bv)| *o += av * bv);
        }
    }
    Ok(GeneralTensor { shape, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(dim: usize, order: usize, seed: u64) -> SymTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SymTensor::from_fn(dim, order, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Dense contraction over the full multi-index space.
    fn dense_eval(t: &GeneralTensor, args: &[&[f64]]) -> f64 {
        let mut acc = 0.0;
        let n = t.shape()[0];
        let k = t.order();
        let total = n.pow(k as u32);
        let mut idx = vec![0usize; k];
        for off in 0..total {
            let mut rem = off;
            for p in (0..k).rev() {
                idx[p] = rem % n;
                rem /= n;
            }
            acc += t.get(&idx) * idx.iter().zip(args).map(|(&j, a)| a[j]).product::<f64>();
        }
        acc
    }

    #[test]
    fn layout_sizes_match_binomials() {
        for (n, k) in [(1, 1), (3, 2), (4, 3), (6, 4), (5, 6)] {
            let l = layout(n, k);
            assert_eq!(l.len(), binomial(n + k - 1, k));
            let total: f64 = (0..l.len()).map(|p| l.multiplicity(p)).sum();
            assert_eq!(total, (n as f64).powi(k as i32));
            for p in 0..l.len() {
                assert_eq!(l.rank(l.index(p)), p);
            }
        }
    }

    #[test]
    fn permutation_and_subset_counts() {
        assert_eq!(permutations(4).len(), 24);
        assert_eq!(combinations(4, 2).len(), 6);
        assert_eq!(combinations(5, 0).len(), 1);
    }

    #[test]
    fn identity_form() {
        let id = SymTensor::from_matrix(&nalgebra::DMatrix::identity(3, 3)).unwrap();
        let e1 = [1.0, 0.0, 0.0];
        assert_eq!(id.eval_form(&[&e1, &e1]).unwrap(), 1.0);
        let y = [0.3, -1.2, 2.0];
        assert_eq!(id.riesz_gradient(&y).unwrap(), y.to_vec());
    }

    #[test]
    fn zero_argument_gives_zero() {
        let t = random_sym(4, 3, 1);
        let z = [0.0; 4];
        let y = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(t.eval_form(&[&y, &z, &y]).unwrap(), 0.0);
        assert!(t.riesz_gradient(&z).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn eval_matches_dense_expansion() {
        let t = random_sym(4, 3, 7);
        let dense = t.to_dense();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let (a, b, c) = (random_vec(4, &mut rng), random_vec(4, &mut rng), random_vec(4, &mut rng));
            let packed = t.eval_form(&[&a, &b, &c]).unwrap();
            let full = dense_eval(&dense, &[&a, &b, &c]);
            assert!((packed - full).abs() <= 1e-13 * full.abs().max(1.0));
            let diag = t.eval_diag(&a).unwrap();
            let full_diag = dense_eval(&dense, &[&a, &a, &a]);
            assert!((diag - full_diag).abs() <= 1e-13 * full_diag.abs().max(1.0));
        }
    }

    #[test]
    fn riesz_gradient_matches_definition() {
        let t = random_sym(5, 3, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = random_vec(5, &mut rng);
        let g = t.riesz_gradient(&y).unwrap();
        for _ in 0..10 {
            let z = random_vec(5, &mut rng);
            let lhs: f64 = g.iter().zip(&z).map(|(a, b)| a * b).sum();
            let rhs = t.eval_form(&[&z, &y, &y]).unwrap();
            assert!((lhs - rhs).abs() <= 1e-13 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn dimension_errors() {
        let t = random_sym(3, 2, 0);
        assert!(matches!(t.eval_form(&[&[1.0, 2.0], &[1.0, 2.0, 3.0]]), Err(Error::Dimension(_))));
        assert!(matches!(t.eval_form(&[&[1.0, 2.0, 3.0]]), Err(Error::Dimension(_))));
        assert!(matches!(t.riesz_gradient(&[1.0]), Err(Error::Dimension(_))));
        assert!(SymTensor::from_entries(3, 2, vec![0.0; 5]).is_err());
        assert!(SymTensor::from_entries(2, 1, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn block_symmetrization_has_binomial_terms() {
        // Sym_{2,2} of a tensor with a single nonzero entry spreads it over
        // exactly six positions with weight 1/6.
        let t = GeneralTensor::from_fn(vec![4; 4], |ix| if ix == [0, 1, 2, 3] { 1.0 } else { 0.0 });
        let s = t.sym_blocks(2, 2).unwrap();
        let nonzero: Vec<f64> = s.data().iter().copied().filter(|&v| v != 0.0).collect();
        assert_eq!(nonzero.len(), 6);
        assert!(nonzero.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-16));
    }

    #[test]
    fn sym_11_is_two_term_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = GeneralTensor::from_fn(vec![3, 3], |_| rng.random_range(-1.0..1.0));
        let s = t.sym_blocks(1, 1).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = 0.5 * (t.get(&[i, j]) + t.get(&[j, i]));
                assert!((s.get(&[i, j]) - expect).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn symmetric_input_is_fixed_point() {
        let t = random_sym(3, 4, 2);
        let dense = t.to_dense();
        assert_eq!(dense.full_symmetrize().unwrap(), t);
        assert_eq!(dense.sym_blocks(2, 2).unwrap(), dense);
        assert_eq!(dense.pack().unwrap(), t);
    }

    #[test]
    fn full_symmetrize_two_term_average() {
        let t = GeneralTensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let s = t.full_symmetrize().unwrap();
        assert_eq!(s.eval_form(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(), 0.5);
        assert!(matches!(t.pack(), Err(Error::Validation(_))));
    }

    #[test]
    fn full_symmetrize_preserves_diagonal_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let t = GeneralTensor::from_fn(vec![3; 4], |_| rng.random_range(-1.0..1.0));
        let s = t.full_symmetrize().unwrap();
        for _ in 0..5 {
            let y = random_vec(3, &mut rng);
            let direct = dense_eval(&t, &[&y, &y, &y, &y]);
            assert!((s.eval_diag(&y).unwrap() - direct).abs() <= 1e-13 * direct.abs().max(1.0));
        }
        assert!(GeneralTensor::zeros(vec![2, 3]).full_symmetrize().is_err());
    }

    #[test]
    fn outer_contract_rank_one_and_loops() {
        let c = GeneralTensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let o = outer_contract_u(&c, &c).unwrap();
        assert_eq!(o.shape(), &[3, 3]);
        assert_eq!(o.get(&[1, 2]), 6.0);

        let zero = GeneralTensor::zeros(vec![1, 3]);
        assert!(outer_contract_u(&c, &zero).unwrap().data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c1 = GeneralTensor::from_fn(vec![2, 3, 3], |_| rng.random_range(-1.0..1.0));
        let c2 = GeneralTensor::from_fn(vec![2, 3], |_| rng.random_range(-1.0..1.0));
        let o = outer_contract_u(&c1, &c2).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let mut expect = 0.0;
                    for u in 0..2 {
                        expect += c1.get(&[u, a, b]) * c2.get(&[u, c]);
                    }
                    assert!((o.get(&[a, b, c]) - expect).abs() <= 1e-14);
                }
            }
        }
        assert!(outer_contract_u(&c1, &GeneralTensor::zeros(vec![3, 3])).is_err());
    }

    #[test]
    fn symt_round_trip_and_corruption() {
        let t = random_sym(4, 3, 17);
        let mut buf = Vec::new();
        t.write_symt(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SYMT");
        assert_eq!(SymTensor::read_symt(buf.as_slice()).unwrap(), t);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(SymTensor::read_symt(bad.as_slice()), Err(Error::Format(_))));
        buf.truncate(buf.len() - 8);
        assert!(matches!(SymTensor::read_symt(buf.as_slice()), Err(Error::Format(_))));
    }
}
