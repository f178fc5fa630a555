//! Symmetric tensors over `R^d`, the multilinear action of matrices on them,
//! and their associated homogeneous polynomials.
//!
//! A [`SymmetricTensor`] of order `r` stores only its `binom(d+r-1, r)` unique
//! entries, indexed by nondecreasing multi-indices in lexicographic order.
//! Multi-indices are 0-based inside the library; the JSON form is 1-based.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense real matrix used for `A`, `Q`, weighting matrices and Jacobians.
pub type Matrix = DMatrix<f64>;

/// Sorted (nondecreasing) list of 0-based coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex(Vec<usize>);

impl MultiIndex {
    /// Canonicalizes any index tuple by sorting it.
    pub fn new(mut entries: Vec<usize>) -> Self {
        entries.sort_unstable();
        MultiIndex(entries)
    }

    /// Builds from 1-based coordinates, checking `1 <= i <= d`.
    pub fn from_one_based(entries: &[usize], d: usize) -> Result<Self> {
        let mut out = Vec::with_capacity(entries.len());
        for &e in entries {
            if e == 0 || e > d {
                return Err(Error::IndexOutOfRange(format!(
                    "coordinate {e} outside 1..={d} in {entries:?}"
                )));
            }
            out.push(e - 1);
        }
        Ok(MultiIndex::new(out))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    pub fn to_one_based(&self) -> Vec<usize> {
        self.0.iter().map(|i| i + 1).collect()
    }

    /// Number of times each coordinate `0..d` occurs.
    pub fn counts(&self, d: usize) -> Vec<usize> {
        let mut c = vec![0; d];
        for &i in &self.0 {
            c[i] += 1;
        }
        c
    }

    /// True when every coordinate is equal.
    pub fn is_diagonal(&self) -> bool {
        self.0.windows(2).all(|w| w[0] == w[1])
    }

    /// True when every coordinate occurs an even number of times.
    pub fn is_even(&self) -> bool {
        let mut k = 0;
        while k < self.0.len() {
            let mut m = k;
            while m < self.0.len() && self.0[m] == self.0[k] {
                m += 1;
            }
            if (m - k) % 2 == 1 {
                return false;
            }
            k = m;
        }
        true
    }

    fn valid_for(&self, d: usize) -> bool {
        self.0.iter().all(|&i| i < d)
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, i) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", i + 1)?;
        }
        write!(f, ")")
    }
}

/// Enumeration and ranking of the unique indices for a fixed `(d, r)`.
#[derive(Debug)]
struct Layout {
    d: usize,
    r: usize,
    indices: Vec<MultiIndex>,
    multiplicity: Vec<f64>,
    // prefix[m][v]: number of nondecreasing tails of length m+1 starting
    // with a value < v (and >= 0).
    prefix: Vec<Vec<usize>>,
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for t in 0..k {
        acc = acc * (n - t) as u128 / (t + 1) as u128;
    }
    acc as usize
}

/// Number of unique entries of an order-`r` symmetric tensor over `R^d`.
pub fn num_unique(d: usize, r: usize) -> usize {
    if d == 0 {
        return 0;
    }
    binomial(d + r - 1, r)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

impl Layout {
    fn build(d: usize, r: usize) -> Layout {
        let mut indices = Vec::with_capacity(num_unique(d, r));
        let mut cur = vec![0usize; r];
        if r == 0 {
            indices.push(MultiIndex(Vec::new()));
        } else {
            loop {
                indices.push(MultiIndex(cur.clone()));
                // advance to the next nondecreasing tuple
                let mut k = r;
                while k > 0 && cur[k - 1] == d - 1 {
                    k -= 1;
                }
                if k == 0 {
                    break;
                }
                let v = cur[k - 1] + 1;
                for c in cur.iter_mut().skip(k - 1) {
                    *c = v;
                }
            }
        }
        let rf = factorial(r);
        let multiplicity = indices
            .iter()
            .map(|ix| {
                let denom: f64 = ix.counts(d).into_iter().map(factorial).product();
                rf / denom
            })
            .collect();
        // tails of length m+1 starting at value u: binom(d-u+m, m+1-1) ... counts
        // nondecreasing sequences of length m (the rest) with entries >= u.
        let mut prefix = Vec::with_capacity(r);
        for m in 0..r {
            // m = number of positions after the current one
            let mut p = vec![0usize; d + 1];
            for v in 0..d {
                p[v + 1] = p[v] + binomial(d - v + m - 1, m);
            }
            prefix.push(p);
        }
        Layout { d, r, indices, multiplicity, prefix }
    }

    fn rank_sorted(&self, idx: &[usize]) -> usize {
        let mut rank = 0;
        let mut prev = 0;
        for (k, &v) in idx.iter().enumerate() {
            let p = &self.prefix[self.r - k - 1];
            rank += p[v] - p[prev];
            prev = v;
        }
        rank
    }
}

thread_local! {
    static LAYOUTS: RefCell<HashMap<(usize, usize), Arc<Layout>>> = RefCell::new(HashMap::new());
}

fn layout(d: usize, r: usize) -> Arc<Layout> {
    LAYOUTS.with(|cache| {
        cache
            .borrow_mut()
            .entry((d, r))
            .or_insert_with(|| Arc::new(Layout::build(d, r)))
            .clone()
    })
}

/// All unique (sorted) multi-indices of `S^r(R^d)` in storage order.
pub fn unique_indices(d: usize, r: usize) -> Vec<MultiIndex> {
    layout(d, r).indices.clone()
}

/// Order-`r` symmetric tensor over `R^d`, stored by unique entries.
#[derive(Clone)]
pub struct SymmetricTensor {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl fmt::Debug for SymmetricTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut m = f.debug_map();
        for (ix, v) in self.iter() {
            m.entry(&format_args!("{ix}"), &v);
        }
        m.finish()
    }
}

impl PartialEq for SymmetricTensor {
    fn eq(&self, other: &Self) -> bool {
        self.dim() == other.dim() && self.order() == other.order() && self.values == other.values
    }
}

impl SymmetricTensor {
    pub fn zeros(d: usize, r: usize) -> Self {
        assert!(d > 0, "tensor dimension must be positive");
        let layout = layout(d, r);
        let n = layout.indices.len();
        SymmetricTensor { layout, values: vec![0.0; n] }
    }

    /// Builds a tensor by evaluating `f` on every unique sorted index.
    pub fn from_fn(d: usize, r: usize, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Self::zeros(d, r);
        for k in 0..t.values.len() {
            t.values[k] = f(t.layout.indices[k].as_slice());
        }
        t
    }

    /// Diagonal tensor with the given diagonal.
    pub fn diagonal(r: usize, diag: &[f64]) -> Self {
        let d = diag.len();
        Self::from_fn(d, r, |ix| {
            if ix.windows(2).all(|w| w[0] == w[1]) {
                diag[ix[0]]
            } else {
                0.0
            }
        })
    }

    /// Wraps unique values given in storage order.
    pub fn from_values(d: usize, r: usize, values: Vec<f64>) -> Result<Self> {
        let t = Self::zeros(d, r);
        if values.len() != t.values.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} unique values for d={d}, r={r}, got {}",
                t.values.len(),
                values.len()
            )));
        }
        Ok(SymmetricTensor { layout: t.layout, values })
    }

    pub fn dim(&self) -> usize {
        self.layout.d
    }

    pub fn order(&self) -> usize {
        self.layout.r
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.layout.indices
    }

    /// Number of full index tuples equal to the unique index at `rank`.
    pub fn multiplicity(&self, rank: usize) -> f64 {
        self.layout.multiplicity[rank]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&MultiIndex, f64)> + '_ {
        self.layout.indices.iter().zip(self.values.iter().copied())
    }

    /// Storage position of an index given in any order.
    pub fn rank_of(&self, idx: &[usize]) -> Result<usize> {
        if idx.len() != self.order() {
            return Err(Error::DimensionMismatch(format!(
                "index {idx:?} has length {}, tensor order is {}",
                idx.len(),
                self.order()
            )));
        }
        if idx.iter().any(|&i| i >= self.dim()) {
            return Err(Error::IndexOutOfRange(format!(
                "index {idx:?} outside dimension {}",
                self.dim()
            )));
        }
        Ok(self.rank_unchecked(idx))
    }

    fn rank_unchecked(&self, idx: &[usize]) -> usize {
        if idx.windows(2).all(|w| w[0] <= w[1]) {
            self.layout.rank_sorted(idx)
        } else {
            let mut s: Vec<usize> = idx.to_vec();
            s.sort_unstable();
            self.layout.rank_sorted(&s)
        }
    }

    /// Entry at any (not necessarily sorted) 0-based index tuple.
    ///
    /// Panics on out-of-range coordinates; use [`Self::rank_of`] for a
    /// checked lookup.
    pub fn get(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.order());
        self.values[self.rank_unchecked(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let k = self.rank_unchecked(idx);
        self.values[k] = value;
    }

    /// Frobenius norm over all `d^r` entries.
    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.layout.multiplicity)
            .map(|(v, m)| m * v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// `alpha * self + beta * other`.
    pub fn lin_comb(&self, alpha: f64, other: &Self, beta: f64) -> Result<Self> {
        self.check_same_shape(other)?;
        let mut out = self.clone();
        for (o, b) in out.values.iter_mut().zip(&other.values) {
            *o = alpha * *o + beta * b;
        }
        Ok(out)
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() || self.order() != other.order() {
            return Err(Error::DimensionMismatch(format!(
                "tensor shapes (d={}, r={}) and (d={}, r={})",
                self.dim(),
                self.order(),
                other.dim(),
                other.order()
            )));
        }
        Ok(())
    }

    /// Largest absolute off-diagonal entry.
    pub fn off_diagonal_max(&self) -> f64 {
        self.iter()
            .filter(|(ix, _)| !ix.is_diagonal())
            .fold(0.0, |m, (_, v)| m.max(v.abs()))
    }

    /// Largest absolute entry at an index where some coordinate occurs an
    /// odd number of times.
    pub fn odd_part_max(&self) -> f64 {
        self.iter()
            .filter(|(ix, _)| !ix.is_even())
            .fold(0.0, |m, (_, v)| m.max(v.abs()))
    }

    pub fn diagonal_entries(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.get(&vec![i; self.order()])).collect()
    }

    /// Expands to a dense `d x ... x d` array.
    pub fn to_dense(&self) -> DenseTensor {
        let d = self.dim();
        let r = self.order();
        let total = d.pow(r as u32);
        let mut data = vec![0.0; total];
        let mut idx = vec![0usize; r];
        let mut sorted = vec![0usize; r];
        for slot in data.iter_mut() {
            sorted.copy_from_slice(&idx);
            sorted.sort_unstable();
            *slot = self.values[self.layout.rank_sorted(&sorted)];
            // increment row-major counter
            for k in (0..r).rev() {
                idx[k] += 1;
                if idx[k] < d {
                    break;
                }
                idx[k] = 0;
            }
        }
        DenseTensor { dims: vec![d; r], data }
    }

    /// Coordinates at the given indices, in the given order.
    pub fn project(&self, indices: &[MultiIndex]) -> Result<Vec<f64>> {
        indices
            .iter()
            .map(|ix| {
                if ix.order() != self.order() || !ix.valid_for(self.dim()) {
                    Err(Error::IndexOutOfRange(format!(
                        "pattern index {ix} invalid for d={}, r={}",
                        self.dim(),
                        self.order()
                    )))
                } else {
                    Ok(self.values[self.layout.rank_sorted(ix.as_slice())])
                }
            })
            .collect()
    }
}

/// Dense (not necessarily symmetric) tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn offset(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.dims).fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn add_assign(&mut self, other: &DenseTensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimensionMismatch(format!(
                "dense tensor dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Applies `m` (rows x dims[mode]) along one mode.
    pub fn mode_product(&self, mode: usize, m: &Matrix) -> Result<DenseTensor> {
        let n = self.dims[mode];
        if m.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "matrix for mode {mode} has {} columns, tensor mode has size {n}",
                m.ncols()
            )));
        }
        let outer: usize = self.dims[..mode].iter().product();
        let inner: usize = self.dims[mode + 1..].iter().product();
        let rows = m.nrows();
        let mut dims = self.dims.clone();
        dims[mode] = rows;
        let mut data = vec![0.0; outer * rows * inner];
        for o in 0..outer {
            let src = &self.data[o * n * inner..(o + 1) * n * inner];
            let dst = &mut data[o * rows * inner..(o + 1) * rows * inner];
            for a in 0..rows {
                let out = &mut dst[a * inner..(a + 1) * inner];
                for b in 0..n {
                    let w = m[(a, b)];
                    if w == 0.0 {
                        continue;
                    }
                    let s = &src[b * inner..(b + 1) * inner];
                    for (x, y) in out.iter_mut().zip(s) {
                        *x += w * y;
                    }
                }
            }
        }
        Ok(DenseTensor { dims, data })
    }

    /// Reads the entries at sorted indices, assuming the tensor is symmetric.
    pub fn to_symmetric(&self) -> Result<SymmetricTensor> {
        let d = *self.dims.first().unwrap_or(&0);
        if d == 0 || self.dims.iter().any(|&n| n != d) {
            return Err(Error::DimensionMismatch(format!(
                "dense tensor with dims {:?} is not cubical",
                self.dims
            )));
        }
        let r = self.dims.len();
        Ok(SymmetricTensor::from_fn(d, r, |ix| self.get(ix)))
    }
}

fn check_square(a: &Matrix, d: usize) -> Result<()> {
    if a.nrows() != d || a.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "expected {d}x{d} matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

/// `A • T`: applies `A` along every mode of `T`.
pub fn multilinear_apply(a: &Matrix, t: &SymmetricTensor) -> Result<SymmetricTensor> {
    let d = t.dim();
    check_square(a, d)?;
    let r = t.order();
    if r == 0 {
        return Ok(t.clone());
    }
    let mut dense = t.to_dense();
    for mode in 0..r {
        dense = dense.mode_product(mode, a)?;
    }
    let mut out = SymmetricTensor::zeros(d, r);
    for k in 0..out.values.len() {
        out.values[k] = dense.get(out.layout.indices[k].as_slice());
    }
    Ok(out)
}

/// `(M_1, ..., M_r) · T` with one matrix per mode; the result is dense and
/// in general not symmetric.
pub fn multilinear_apply_general(mats: &[Matrix], t: &SymmetricTensor) -> Result<DenseTensor> {
    if mats.len() != t.order() {
        return Err(Error::DimensionMismatch(format!(
            "{} matrices supplied for an order-{} tensor",
            mats.len(),
            t.order()
        )));
    }
    let mut dense = t.to_dense();
    for (mode, m) in mats.iter().enumerate() {
        dense = dense.mode_product(mode, m)?;
    }
    Ok(dense)
}

/// `<T, x^{⊗r}>`, summing over all `d^r` index tuples.
pub fn associated_poly_eval(t: &SymmetricTensor, x: &[f64]) -> Result<f64> {
    if x.len() != t.dim() {
        return Err(Error::DimensionMismatch(format!(
            "point has length {}, tensor dimension is {}",
            x.len(),
            t.dim()
        )));
    }
    Ok(t.iter()
        .enumerate()
        .map(|(k, (ix, v))| {
            let mono: f64 = ix.as_slice().iter().map(|&i| x[i]).product();
            t.multiplicity(k) * v * mono
        })
        .sum())
}

/// Coordinates of `T` on a list of indices (the projection onto the
/// orthogonal complement of the zero-constrained subspace).
pub fn project_onto_indices(t: &SymmetricTensor, indices: &[MultiIndex]) -> Result<Vec<f64>> {
    t.project(indices)
}

#[derive(Serialize, Deserialize)]
struct EntryJson {
    index: Vec<usize>,
    value: f64,
}

#[derive(Serialize, Deserialize)]
struct TensorJson {
    d: usize,
    r: usize,
    entries: Vec<EntryJson>,
}

impl Serialize for SymmetricTensor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TensorJson {
            d: self.dim(),
            r: self.order(),
            entries: self
                .iter()
                .map(|(ix, v)| EntryJson { index: ix.to_one_based(), value: v })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SymmetricTensor {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = TensorJson::deserialize(de)?;
        SymmetricTensor::from_json_parts(raw).map_err(D::Error::custom)
    }
}

impl SymmetricTensor {
    fn from_json_parts(raw: TensorJson) -> Result<Self> {
        if raw.d == 0 || raw.r == 0 {
            return Err(Error::Parse("d and r must be positive".into()));
        }
        let mut t = SymmetricTensor::zeros(raw.d, raw.r);
        let mut seen = vec![false; t.len()];
        for (pos, e) in raw.entries.iter().enumerate() {
            if e.index.len() != raw.r {
                return Err(Error::Parse(format!(
                    "entries[{pos}]: index {:?} has length {}, expected r = {}",
                    e.index,
                    e.index.len(),
                    raw.r
                )));
            }
            let ix = MultiIndex::from_one_based(&e.index, raw.d)
                .map_err(|err| Error::Parse(format!("entries[{pos}]: {err}")))?;
            if !e.value.is_finite() {
                return Err(Error::Parse(format!("entries[{pos}]: non-finite value")));
            }
            let k = t.layout.rank_sorted(ix.as_slice());
            if seen[k] {
                return Err(Error::Parse(format!("entries[{pos}]: duplicate index {ix}")));
            }
            seen[k] = true;
            t.values[k] = e.value;
        }
        Ok(t)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: TensorJson = serde_json::from_str(s)?;
        Self::from_json_parts(raw)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("tensor serialization cannot fail")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(d: usize, r: usize, seed: u64) -> SymmetricTensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        SymmetricTensor::from_fn(d, r, |_| rng.random_range(-1.0..1.0))
    }

    fn random_matrix(d: usize, seed: u64) -> Matrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn storage_size_is_binomial() {
        for d in 1..5 {
            for r in 1..6 {
                let t = SymmetricTensor::zeros(d, r);
                assert_eq!(t.len(), num_unique(d, r));
                for (k, ix) in t.indices().iter().enumerate() {
                    assert_eq!(t.rank_of(ix.as_slice()).unwrap(), k);
                }
            }
        }
        assert_eq!(num_unique(2, 4), 5);
        assert_eq!(num_unique(3, 3), 10);
    }

    #[test]
    fn lookup_is_permutation_invariant() {
        let t = random_tensor(3, 4, 1);
        assert_eq!(t.get(&[2, 0, 1, 1]), t.get(&[0, 1, 1, 2]));
        assert_eq!(t.get(&[1, 2, 1, 0]), t.get(&[0, 1, 1, 2]));
    }

    #[test]
    fn identity_action_is_noop() {
        let t = random_tensor(3, 3, 2);
        let out = multilinear_apply(&Matrix::identity(3, 3), &t).unwrap();
        for (a, b) in out.values().iter().zip(t.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn permutation_moves_diagonal() {
        let t = SymmetricTensor::diagonal(3, &[1.0, 2.0, 3.0]);
        // row i of P picks coordinate perm[i]
        let perm = [2, 0, 1];
        let p = Matrix::from_fn(3, 3, |i, j| if perm[i] == j { 1.0 } else { 0.0 });
        let out = multilinear_apply(&p, &t).unwrap();
        assert_eq!(out.diagonal_entries(), vec![3.0, 1.0, 2.0]);
        assert_eq!(out.off_diagonal_max(), 0.0);
    }

    #[test]
    fn action_matches_brute_force() {
        let (d, r) = (2, 3);
        let t = random_tensor(d, r, 3);
        let a = random_matrix(d, 4);
        let out = multilinear_apply(&a, &t).unwrap();
        for ix in t.indices() {
            let i = ix.as_slice();
            let mut s = 0.0;
            for j0 in 0..d {
                for j1 in 0..d {
                    for j2 in 0..d {
                        s += a[(i[0], j0)] * a[(i[1], j1)] * a[(i[2], j2)] * t.get(&[j0, j1, j2]);
                    }
                }
            }
            assert!((out.get(i) - s).abs() < 1e-13, "{ix}: {} vs {s}", out.get(i));
        }
    }

    #[test]
    fn general_action_with_unit_matrix_matches_brute_force() {
        let (d, r) = (2, 3);
        let t = random_tensor(d, r, 5);
        let mut e12 = Matrix::zeros(2, 2);
        e12[(0, 1)] = 1.0;
        let id = Matrix::identity(2, 2);
        let out = multilinear_apply_general(&[e12.clone(), id.clone(), id.clone()], &t).unwrap();
        for i0 in 0..d {
            for i1 in 0..d {
                for i2 in 0..d {
                    let mut s = 0.0;
                    for j0 in 0..d {
                        s += e12[(i0, j0)] * t.get(&[j0, i1, i2]);
                    }
                    assert!((out.get(&[i0, i1, i2]) - s).abs() < 1e-15);
                }
            }
        }
        let same = multilinear_apply_general(&[id.clone(), id.clone(), id], &t).unwrap();
        assert_eq!(same.to_symmetric().unwrap(), t);
    }

    #[test]
    fn general_action_agrees_with_symmetric_action() {
        let t = random_tensor(3, 4, 6);
        let a = random_matrix(3, 7);
        let gen = multilinear_apply_general(&vec![a.clone(); 4], &t).unwrap();
        let sym = multilinear_apply(&a, &t).unwrap();
        for ix in t.indices() {
            assert!((gen.get(ix.as_slice()) - sym.get(ix.as_slice())).abs() < 1e-13);
        }
    }

    #[test]
    fn polynomial_of_diagonal_tensor() {
        let t = SymmetricTensor::diagonal(3, &[1.0, -2.0, 0.5]);
        let x = [0.3, 1.1, -2.0];
        let expect = 1.0 * 0.3f64.powi(3) - 2.0 * 1.1f64.powi(3) + 0.5 * (-2.0f64).powi(3);
        assert!((associated_poly_eval(&t, &x).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn polynomial_hand_example() {
        // T111=1, T222=2, T112=3, T122=0 at x=(1,1): 1 + 2 + 3*3 + 0 = 12
        let mut t = SymmetricTensor::zeros(2, 3);
        t.set(&[0, 0, 0], 1.0);
        t.set(&[1, 1, 1], 2.0);
        t.set(&[0, 0, 1], 3.0);
        assert_eq!(associated_poly_eval(&t, &[1.0, 1.0]).unwrap(), 12.0);
    }

    #[test]
    fn polynomial_transforms_contravariantly() {
        let t = random_tensor(3, 4, 8);
        let a = random_matrix(3, 9);
        let x = [0.4, -0.7, 1.3];
        let lhs = associated_poly_eval(&multilinear_apply(&a, &t).unwrap(), &x).unwrap();
        let atx: Vec<f64> = (0..3).map(|j| (0..3).map(|i| a[(i, j)] * x[i]).sum()).collect();
        let rhs = associated_poly_eval(&t, &atx).unwrap();
        assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
    }

    #[test]
    fn projection_reads_coordinates() {
        let mut t = SymmetricTensor::zeros(2, 3);
        t.set(&[0, 0, 0], 1.0);
        t.set(&[1, 1, 1], 2.0);
        t.set(&[0, 0, 1], 3.0);
        let i = vec![MultiIndex::new(vec![0, 1, 1])];
        assert_eq!(t.project(&i).unwrap(), vec![0.0]);
        let bad = vec![MultiIndex::new(vec![0, 1, 2])];
        assert!(t.project(&bad).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let t = random_tensor(2, 3, 10);
        assert!(multilinear_apply(&Matrix::identity(3, 3), &t).is_err());
        assert!(associated_poly_eval(&t, &[1.0]).is_err());
        assert!(multilinear_apply_general(&[Matrix::identity(2, 2)], &t).is_err());
    }

    #[test]
    fn json_roundtrip_and_validation() {
        let t = random_tensor(2, 3, 11);
        let s = t.to_json_string();
        let back = SymmetricTensor::from_json_str(&s).unwrap();
        assert_eq!(back, t);
        let unsorted = r#"{"d":2,"r":3,"entries":[{"index":[2,1,1],"value":3.0}]}"#;
        let u = SymmetricTensor::from_json_str(unsorted).unwrap();
        assert_eq!(u.get(&[0, 0, 1]), 3.0);
        let dup = r#"{"d":2,"r":3,"entries":[{"index":[1,1,2],"value":1},{"index":[2,1,1],"value":2}]}"#;
        assert!(SymmetricTensor::from_json_str(dup).is_err());
        let oob = r#"{"d":2,"r":3,"entries":[{"index":[1,1,3],"value":1}]}"#;
        assert!(SymmetricTensor::from_json_str(oob).is_err());
    }
}
