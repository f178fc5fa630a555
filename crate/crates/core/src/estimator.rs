//! Minimum-distance estimation of `A` from `A • ĥ_2 = I` and the zero
//! restrictions on `A • ĥ_r`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, SignedPermutation};
use crate::optim::{levenberg_marquardt, LmOptions};
use crate::restrictions::ZeroPattern;
use crate::statistics::{sample_statistics, DataMatrix, MonomialBuilder, StatKind};
use crate::tensor::{num_unique, DenseTensor, Matrix, SymmetricTensor};

/// The restrictions defining `g`: order, statistic, zero pattern, and
/// whether `A μ̂_1 = 0` is appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestrictionSpec {
    pub stat_kind: StatKind,
    pub pattern: ZeroPattern,
    #[serde(default)]
    pub include_mean: bool,
}

impl RestrictionSpec {
    pub fn new(pattern: ZeroPattern, stat_kind: StatKind) -> Self {
        RestrictionSpec { stat_kind, pattern, include_mean: false }
    }

    pub fn with_mean(mut self, include_mean: bool) -> Self {
        self.include_mean = include_mean;
        self
    }

    pub fn d(&self) -> usize {
        self.pattern.dim()
    }

    pub fn r(&self) -> usize {
        self.pattern.order()
    }

    /// Length of `g`: `binom(d+1, 2) + |I|` (plus `d` with the mean block).
    pub fn dg(&self) -> usize {
        let d = self.d();
        num_unique(d, 2) + self.pattern.len() + if self.include_mean { d } else { 0 }
    }

    /// Degrees of over-identification, `d_g - d^2`.
    pub fn overidentification(&self) -> isize {
        self.dg() as isize - (self.d() * self.d()) as isize
    }

    fn validate(&self) -> Result<()> {
        if self.overidentification() < 0 {
            return Err(Error::InvalidPattern(format!(
                "{} restrictions cannot identify {} parameters",
                self.dg(),
                self.d() * self.d()
            )));
        }
        Ok(())
    }
}

/// Second- and `r`-th order sample tensors, plus the sample mean.
#[derive(Debug, Clone)]
pub struct SampleTensors {
    pub n: usize,
    pub mean: Vec<f64>,
    pub s2: SymmetricTensor,
    pub tr: SymmetricTensor,
}

pub fn sample_tensors(y: &DataMatrix, spec: &RestrictionSpec) -> Result<SampleTensors> {
    if y.d() != spec.d() {
        return Err(Error::DimensionMismatch(format!(
            "data has {} columns, restrictions are for d = {}",
            y.d(),
            spec.d()
        )));
    }
    let (mean, s2, tr) = sample_statistics(y, spec.r(), spec.stat_kind)?;
    Ok(SampleTensors { n: y.n(), mean: mean.values().to_vec(), s2, tr })
}

fn check_inputs(a: &Matrix, s2: &SymmetricTensor, tr: &SymmetricTensor, spec: &RestrictionSpec) -> Result<()> {
    let d = spec.d();
    if a.nrows() != d || a.ncols() != d || s2.dim() != d || tr.dim() != d {
        return Err(Error::DimensionMismatch(format!("inputs do not all have dimension d = {d}")));
    }
    if s2.order() != 2 || tr.order() != spec.r() {
        return Err(Error::DimensionMismatch(format!(
            "expected tensors of order 2 and {}, got {} and {}",
            spec.r(),
            s2.order(),
            tr.order()
        )));
    }
    if spec.include_mean {
        return Err(Error::Precondition("restrictions include the mean; supply it".into()));
    }
    Ok(())
}

/// `(I, A, …, A) • T` as a dense tensor.
fn partial_action(a: &Matrix, t: &SymmetricTensor) -> Result<DenseTensor> {
    let mut dense = t.to_dense();
    for mode in 1..t.order() {
        dense = dense.mode_product(mode, a)?;
    }
    Ok(dense)
}

struct Parts<'a> {
    a: &'a Matrix,
    s2: &'a SymmetricTensor,
    tr: &'a SymmetricTensor,
    mean: Option<&'a [f64]>,
    spec: &'a RestrictionSpec,
}

impl Parts<'_> {
    fn check(&self) -> Result<()> {
        let d = self.spec.d();
        if self.a.nrows() != d || self.a.ncols() != d || self.s2.dim() != d || self.tr.dim() != d {
            return Err(Error::DimensionMismatch(format!("inputs do not all have dimension d = {d}")));
        }
        if self.s2.order() != 2 || self.tr.order() != self.spec.r() {
            return Err(Error::DimensionMismatch(format!(
                "expected tensors of order 2 and {}, got {} and {}",
                self.spec.r(),
                self.s2.order(),
                self.tr.order()
            )));
        }
        match (self.spec.include_mean, self.mean) {
            (true, None) => Err(Error::Precondition("restrictions include the mean; supply it".into())),
            (true, Some(m)) if m.len() != d => Err(Error::DimensionMismatch("mean has wrong length".into())),
            _ => Ok(()),
        }
    }

    fn eval(&self, want_jac: bool) -> Result<(DVector<f64>, Option<Matrix>)> {
        self.check()?;
        let (a, spec) = (self.a, self.spec);
        let d = spec.d();
        let dg = spec.dg();
        let mut g = DVector::zeros(dg);
        // second-order block
        let s = Matrix::from_fn(d, d, |p, q| self.s2.get(&[p, q]));
        let m2 = &s * a.transpose();
        let cov = a * &m2;
        let pairs = SymmetricTensor::zeros(d, 2);
        for (row, ix) in pairs.indices().iter().enumerate() {
            let (p, q) = (ix.as_slice()[0], ix.as_slice()[1]);
            g[row] = cov[(p, q)] - if p == q { 1.0 } else { 0.0 };
        }
        let off2 = pairs.len();
        // r-th order block
        let m = partial_action(a, self.tr)?;
        let full = m.mode_product(0, a)?;
        for (k, ix) in spec.pattern.indices().iter().enumerate() {
            g[off2 + k] = full.get(ix.as_slice()) - spec.pattern.target(k);
        }
        let off_mean = off2 + spec.pattern.len();
        if let Some(mu) = self.mean.filter(|_| spec.include_mean) {
            for p in 0..d {
                g[off_mean + p] = (0..d).map(|j| a[(p, j)] * mu[j]).sum();
            }
        }
        if !want_jac {
            return Ok((g, None));
        }
        let mut jac = Matrix::zeros(dg, d * d);
        for (row, ix) in pairs.indices().iter().enumerate() {
            let (p, q) = (ix.as_slice()[0], ix.as_slice()[1]);
            for j in 0..d {
                // column (i, j) with i = p or i = q
                jac[(row, p * d + j)] += m2[(j, q)];
                jac[(row, q * d + j)] += m2[(j, p)];
            }
        }
        let r = spec.r();
        let mut rest = Vec::with_capacity(r);
        let mut key = Vec::with_capacity(r);
        for (k, ix) in spec.pattern.indices().iter().enumerate() {
            let idx = ix.as_slice();
            let row = off2 + k;
            let mut pos = 0;
            while pos < r {
                let p = idx[pos];
                let mut end = pos;
                while end < r && idx[end] == p {
                    end += 1;
                }
                let count = (end - pos) as f64;
                rest.clear();
                rest.extend_from_slice(&idx[..pos]);
                rest.extend_from_slice(&idx[pos + 1..]);
                for j in 0..d {
                    key.clear();
                    key.push(j);
                    key.extend_from_slice(&rest);
                    jac[(row, p * d + j)] += count * m.get(&key);
                }
                pos = end;
            }
        }
        if let Some(mu) = self.mean.filter(|_| spec.include_mean) {
            for p in 0..d {
                for j in 0..d {
                    jac[(off_mean + p, p * d + j)] = mu[j];
                }
            }
        }
        Ok((g, Some(jac)))
    }
}

/// `g(A) = (vec_u(A • S2 - I), (A • T_r)_I - c, [A μ])`.
pub fn residual(a: &Matrix, s2: &SymmetricTensor, tr: &SymmetricTensor, spec: &RestrictionSpec) -> Result<DVector<f64>> {
    check_inputs(a, s2, tr, spec)?;
    Ok(Parts { a, s2, tr, mean: None, spec }.eval(false)?.0)
}

/// `∂g / ∂vec(A)` with columns ordered row-major over `A` (column `i d + j`
/// is the derivative along `E_ij`).
pub fn jacobian(a: &Matrix, s2: &SymmetricTensor, tr: &SymmetricTensor, spec: &RestrictionSpec) -> Result<Matrix> {
    check_inputs(a, s2, tr, spec)?;
    Ok(Parts { a, s2, tr, mean: None, spec }.eval(true)?.1.unwrap())
}

/// [`residual`] and [`jacobian`] with an optional mean block.
pub fn residual_and_jacobian(
    a: &Matrix,
    st: &SampleTensors,
    spec: &RestrictionSpec,
) -> Result<(DVector<f64>, Matrix)> {
    let (g, j) = Parts { a, s2: &st.s2, tr: &st.tr, mean: Some(&st.mean), spec }.eval(true)?;
    Ok((g, j.unwrap()))
}

pub fn residual_full(a: &Matrix, st: &SampleTensors, spec: &RestrictionSpec) -> Result<DVector<f64>> {
    Ok(Parts { a, s2: &st.s2, tr: &st.tr, mean: Some(&st.mean), spec }.eval(false)?.0)
}

/// `g' W g` (identity weighting when `w` is `None`).
pub fn objective(g: &DVector<f64>, w: Option<&Matrix>) -> f64 {
    match w {
        Some(w) => (g.transpose() * w * g)[(0, 0)],
        None => g.norm_squared(),
    }
}

/// A single local minimization.
#[derive(Debug, Clone)]
pub struct Fit {
    pub x: Matrix,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn vec_rows(a: &Matrix) -> DVector<f64> {
    let d = a.nrows();
    DVector::from_fn(d * d, |k, _| a[(k / d, k % d)])
}

fn unvec_rows(x: &DVector<f64>, d: usize) -> Matrix {
    Matrix::from_fn(d, d, |i, j| x[i * d + j])
}

/// Minimizes `g(A)' W g(A)` from `a0` by Levenberg–Marquardt on `vec(A)`.
pub fn minimize(
    a0: &Matrix,
    s2: &SymmetricTensor,
    tr: &SymmetricTensor,
    mean: Option<&[f64]>,
    spec: &RestrictionSpec,
    weight: Option<&Matrix>,
    lm: &LmOptions,
) -> Result<Fit> {
    let d = spec.d();
    Parts { a: a0, s2, tr, mean, spec }.check()?;
    let lt = match weight {
        Some(w) => {
            if w.nrows() != spec.dg() || w.ncols() != spec.dg() {
                return Err(Error::DimensionMismatch(format!(
                    "weight matrix is {}x{}, expected {}",
                    w.nrows(),
                    w.ncols(),
                    spec.dg()
                )));
            }
            let sym = (w + w.transpose()) * 0.5;
            let ch = sym
                .cholesky()
                .ok_or_else(|| Error::Singular("weight matrix is not positive definite".into()))?;
            Some(ch.l().transpose())
        }
        None => None,
    };
    let eval = |x: &DVector<f64>| -> Result<(DVector<f64>, Matrix)> {
        let a = unvec_rows(x, d);
        let (g, j) = Parts { a: &a, s2, tr, mean, spec }.eval(true)?;
        let j = j.unwrap();
        Ok(match &lt {
            Some(l) => (l * g, l * j),
            None => (g, j),
        })
    };
    let max_cond = lm.max_condition;
    let feasible = |x: &DVector<f64>| linalg::condition_number(&unvec_rows(x, d)) <= max_cond;
    let out = levenberg_marquardt(vec_rows(a0), eval, feasible, lm)?;
    Ok(Fit { x: unvec_rows(&out.x, d), objective: out.cost, iterations: out.iterations, converged: out.converged })
}

/// Objective and matrix reached from one start.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartSummary {
    pub objective: f64,
    #[serde(with = "crate::linalg::rows_serde")]
    pub a: Matrix,
    pub converged: bool,
}

/// Best of several local fits.
#[derive(Debug, Clone)]
pub struct MultiFit {
    pub best: Fit,
    pub starts: Vec<StartSummary>,
}

/// Starting matrices: the whitening matrix of `s2` premultiplied by the
/// identity and `k - 1` Haar-random orthogonal matrices.
pub fn starting_points(s2: &SymmetricTensor, k: usize, seed: u64) -> Result<Vec<Matrix>> {
    let d = s2.dim();
    let s = Matrix::from_fn(d, d, |p, q| s2.get(&[p, q]));
    let w0 = linalg::whitening(&s)?;
    let mut out = vec![w0.clone()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 1..k.max(1) {
        out.push(linalg::random_orthogonal(d, &mut rng) * &w0);
    }
    Ok(out)
}

/// Multi-start minimization; `starts` are usually from [`starting_points`].
pub fn multistart(
    starts: &[Matrix],
    s2: &SymmetricTensor,
    tr: &SymmetricTensor,
    mean: Option<&[f64]>,
    spec: &RestrictionSpec,
    weight: Option<&Matrix>,
    lm: &LmOptions,
) -> Result<MultiFit> {
    let mut best: Option<Fit> = None;
    let mut summaries = Vec::with_capacity(starts.len());
    for a0 in starts {
        let fit = minimize(a0, s2, tr, mean, spec, weight, lm)?;
        summaries.push(StartSummary { objective: fit.objective, a: fit.x.clone(), converged: fit.converged });
        let better = match &best {
            None => true,
            Some(b) => fit.objective < b.objective,
        };
        if better {
            best = Some(fit);
        }
    }
    let best = best.ok_or_else(|| Error::InvalidArgument("no starting points".into()))?;
    summaries.sort_by(|a, b| a.objective.total_cmp(&b.objective));
    Ok(MultiFit { best, starts: summaries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Identity,
    /// Two-step: identity first, then `W = Σ̂⁻¹` at the first-stage estimate.
    Efficient,
    /// Repeats the efficient step until `A` stops changing.
    Iterated,
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(Weighting::Identity),
            "efficient" | "two_step" | "two-step" => Ok(Weighting::Efficient),
            "iterated" => Ok(Weighting::Iterated),
            other => Err(Error::InvalidArgument(format!("unknown weighting '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMethod {
    /// Plug-in for moment restrictions, bootstrap for cumulants.
    Auto,
    PlugIn,
    Bootstrap,
}

/// How the reported estimate was weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingUsed {
    Identity,
    PlugIn,
    Bootstrap,
    Iterated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationOptions {
    pub weighting: Weighting,
    pub sigma_method: SigmaMethod,
    pub starts: usize,
    pub bootstrap_b: usize,
    pub seed: u64,
    pub iter_tol: f64,
    pub max_rounds: usize,
    pub ridge: f64,
    pub standard_errors: bool,
    pub lm: LmOptions,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        EstimationOptions {
            weighting: Weighting::Efficient,
            sigma_method: SigmaMethod::Auto,
            starts: 20,
            bootstrap_b: 200,
            seed: 0,
            iter_tol: 1e-8,
            max_rounds: 20,
            ridge: 1e-10,
            standard_errors: true,
            lm: LmOptions::default(),
        }
    }
}

impl EstimationOptions {
    fn resolved_sigma(&self, kind: StatKind) -> SigmaMethod {
        match (self.sigma_method, kind) {
            (SigmaMethod::Auto, StatKind::Moment) => SigmaMethod::PlugIn,
            (SigmaMethod::Auto, StatKind::Cumulant) => SigmaMethod::Bootstrap,
            (m, _) => m,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationResult {
    #[serde(with = "crate::linalg::rows_serde")]
    pub a_hat: Matrix,
    pub objective: f64,
    pub weighting: WeightingUsed,
    pub n: usize,
    pub d_g: usize,
    #[serde(with = "crate::linalg::opt_rows_serde", default)]
    pub sigma_hat: Option<Matrix>,
    /// Asymptotic covariance of `√n vec(Â)` (row-major `vec`).
    #[serde(with = "crate::linalg::opt_rows_serde", default)]
    pub s_hat: Option<Matrix>,
    #[serde(with = "crate::linalg::opt_rows_serde", default)]
    pub std_errors: Option<Matrix>,
    pub n_iterations: usize,
    pub converged: bool,
    pub rounds: usize,
    pub multistart_bests: Vec<StartSummary>,
    /// Signed permutation applied to the optimizer output.
    pub alignment: Option<SignedPermutation>,
    pub first_stage: Option<Box<EstimationResult>>,
}

/// `argmin_{P ∈ SP(d)} ‖P Â - A_ref‖_F`.
pub fn align_to_reference(a_hat: &Matrix, a_ref: &Matrix) -> Result<(Matrix, SignedPermutation)> {
    let d = a_hat.nrows();
    if a_ref.nrows() != d || a_ref.ncols() != a_hat.ncols() {
        return Err(Error::DimensionMismatch("matrices differ in shape".into()));
    }
    let mut best: Option<(f64, SignedPermutation)> = None;
    for p in linalg::signed_permutations(d)? {
        let dist = (p.apply(a_hat) - a_ref).norm();
        if best.as_ref().is_none_or(|(b, _)| dist < *b) {
            best = Some((dist, p));
        }
    }
    let (_, p) = best.unwrap();
    Ok((p.apply(a_hat), p))
}

/// Puts `Â` in a canonical signed-permutation representative when the
/// objective is invariant under `SP(d)`.
fn canonicalize(a: &Matrix, spec: &RestrictionSpec) -> (Matrix, Option<SignedPermutation>) {
    let d = a.nrows();
    if d > linalg::MAX_ENUMERATION_DIM || !spec.pattern.is_sp_invariant() {
        return (a.clone(), None);
    }
    // largest |entry| of each row lands on the diagonal with a positive sign
    let norm = Matrix::from_fn(d, d, |i, j| {
        let row = (0..d).map(|k| a[(i, k)].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        a[(i, j)] / row
    });
    match align_to_reference(&norm, &Matrix::identity(d, d)) {
        Ok((_, p)) => (p.apply(a), Some(p)),
        Err(_) => (a.clone(), None),
    }
}

fn z_dimension(spec: &RestrictionSpec) -> usize {
    spec.dg()
}

/// Per-observation vectors `z_s` whose average is `g` up to constants:
/// `(vech(e e'), e^i for i ∈ I, [e])` with `e = Â y_s`.
fn monomial_rows(e: &DataMatrix, spec: &RestrictionSpec) -> Result<Matrix> {
    let (n, d, r) = (e.n(), e.d(), spec.r());
    let builder = MonomialBuilder::new(d, r);
    let mut buf = builder.buffers();
    let probe = SymmetricTensor::zeros(d, r);
    let ranks: Vec<usize> =
        spec.pattern.indices().iter().map(|ix| probe.rank_of(ix.as_slice())).collect::<Result<_>>()?;
    let k2 = num_unique(d, 2);
    let mut z = Matrix::zeros(n, z_dimension(spec));
    let mut y = vec![0.0; d];
    for s in 0..n {
        for (j, v) in y.iter_mut().enumerate() {
            *v = e.matrix()[(s, j)];
        }
        builder.fill(&y, &mut buf);
        for c in 0..k2 {
            z[(s, c)] = buf[1][c];
        }
        for (c, &rk) in ranks.iter().enumerate() {
            z[(s, k2 + c)] = buf[r - 1][rk];
        }
        if spec.include_mean {
            for p in 0..d {
                z[(s, k2 + ranks.len() + p)] = y[p];
            }
        }
    }
    Ok(z)
}

/// Sample covariance (divisor `n`) of the rows of `z`.
fn row_covariance(z: &Matrix) -> Matrix {
    let n = z.nrows() as f64;
    let mean = z.row_mean();
    let mut c = z.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    (c.transpose() * &c) / n
}

const KURTOSIS_WARNING: f64 = 100.0;
static KURTOSIS_WARNED: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(false);

/// Covariance of the monomials `z_s` of already-transformed data.
pub fn monomial_covariance(e: &DataMatrix, spec: &RestrictionSpec) -> Result<Matrix> {
    let z = monomial_rows(e, spec)?;
    let cov = row_covariance(&z);
    // heavy tails make the fourth-order moments of z unreliable
    let n = z.nrows() as f64;
    let mut worst: Option<(usize, f64)> = None;
    for c in 0..z.ncols() {
        let m = z.column(c).mean();
        let v = cov[(c, c)];
        if v <= 0.0 {
            continue;
        }
        let k4 = z.column(c).iter().map(|x| (x - m).powi(4)).sum::<f64>() / n / (v * v);
        if k4 > KURTOSIS_WARNING && worst.is_none_or(|(_, w)| k4 > w) {
            worst = Some((c, k4));
        }
    }
    if let Some((c, k4)) = worst {
        if KURTOSIS_WARNED.swap(true, std::sync::atomic::Ordering::Relaxed) {
            log::debug!("restriction {c}: sample kurtosis {k4:.1}; plug-in variance may be unreliable");
        } else {
            log::warn!(
                "restriction {c}: sample kurtosis {k4:.1}; plug-in variance may be unreliable (repeats logged at debug level)"
            );
        }
    }
    Ok(cov)
}

/// Plug-in `Σ̂` for moment restrictions.
pub fn estimate_sigma_plugin(y: &DataMatrix, a_hat: &Matrix, spec: &RestrictionSpec) -> Result<Matrix> {
    if spec.stat_kind == StatKind::Cumulant {
        return Err(Error::Unsupported(
            "plug-in variance is available for moment restrictions; use the bootstrap for cumulants".into(),
        ));
    }
    let e = y.transform(a_hat)?;
    monomial_covariance(&e, spec)
}

/// `n` times the covariance of `g(I)` over resamples of `ε̂` rows.
pub fn sigma_from_resamples(eps: &DataMatrix, spec: &RestrictionSpec, draws: &[Vec<usize>]) -> Result<Matrix> {
    if draws.len() < 2 {
        return Err(Error::InvalidArgument("bootstrap needs at least 2 draws".into()));
    }
    let d = spec.d();
    let id = Matrix::identity(d, d);
    let gs: Vec<DVector<f64>> = draws
        .par_iter()
        .map(|rows| {
            let sample = eps.select_rows(rows);
            let st = sample_tensors(&sample, spec)?;
            residual_full(&id, &st, spec)
        })
        .collect::<Result<_>>()?;
    let b = gs.len() as f64;
    let k = spec.dg();
    let mut mean = DVector::zeros(k);
    for g in &gs {
        mean += g;
    }
    mean /= b;
    let mut cov = Matrix::zeros(k, k);
    for g in &gs {
        let c = g - &mean;
        cov += &c * c.transpose();
    }
    Ok(cov * (eps.n() as f64 / (b - 1.0)))
}

/// Row indices of bootstrap draw `b`.
pub fn bootstrap_draw(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Bootstrap `Σ̂` from `B` resamples of the estimated errors.
pub fn estimate_sigma_bootstrap(
    y: &DataMatrix,
    a_hat: &Matrix,
    spec: &RestrictionSpec,
    b: usize,
    seed: u64,
) -> Result<Matrix> {
    if b < 2 {
        return Err(Error::InvalidArgument(format!("bootstrap needs B >= 2, got {b}")));
    }
    let eps = y.transform(a_hat)?;
    let draws: Vec<Vec<usize>> = (0..b).map(|k| bootstrap_draw(y.n(), seed, k)).collect();
    sigma_from_resamples(&eps, spec, &draws)
}

fn estimate_sigma(y: &DataMatrix, a: &Matrix, spec: &RestrictionSpec, opts: &EstimationOptions) -> Result<(Matrix, WeightingUsed)> {
    match opts.resolved_sigma(spec.stat_kind) {
        SigmaMethod::PlugIn => Ok((estimate_sigma_plugin(y, a, spec)?, WeightingUsed::PlugIn)),
        _ => Ok((
            estimate_sigma_bootstrap(y, a, spec, opts.bootstrap_b, opts.seed ^ 0x5bd1_e995)?,
            WeightingUsed::Bootstrap,
        )),
    }
}

/// `(G'WG)^{-1}` for efficient weighting, or the sandwich form for `W = I`.
pub fn asymptotic_variance(g: &Matrix, sigma: &Matrix, weight: Option<&Matrix>) -> Result<Matrix> {
    match weight {
        Some(w) => linalg::inverse(&(g.transpose() * w * g)),
        None => {
            let bread = linalg::inverse(&(g.transpose() * g))?;
            Ok(&bread * g.transpose() * sigma * g * &bread)
        }
    }
}

fn standard_errors(s: &Matrix, n: usize, d: usize) -> Matrix {
    Matrix::from_fn(d, d, |i, j| (s[(i * d + j, i * d + j)].max(0.0) / n as f64).sqrt())
}

/// Estimate from population or precomputed tensors with a given weight.
pub fn estimate_from_tensors(
    st: &SampleTensors,
    spec: &RestrictionSpec,
    weight: Option<&Matrix>,
    opts: &EstimationOptions,
) -> Result<MultiFit> {
    spec.validate()?;
    let starts = starting_points(&st.s2, opts.starts, opts.seed)?;
    multistart(&starts, &st.s2, &st.tr, Some(&st.mean), spec, weight, &opts.lm)
}

fn finish(
    a: Matrix,
    fit: &Fit,
    st: &SampleTensors,
    spec: &RestrictionSpec,
    weighting: WeightingUsed,
    sigma: Option<Matrix>,
    weight: Option<&Matrix>,
    opts: &EstimationOptions,
) -> Result<EstimationResult> {
    let (a, alignment) = canonicalize(&a, spec);
    let g = residual_full(&a, st, spec)?;
    let objective = objective(&g, weight);
    let (s_hat, std_errors) = match (&sigma, opts.standard_errors) {
        (Some(sig), true) => {
            let (_, jac) = residual_and_jacobian(&a, st, spec)?;
            match asymptotic_variance(&jac, sig, weight) {
                Ok(s) => {
                    let se = standard_errors(&s, st.n, spec.d());
                    (Some(s), Some(se))
                }
                Err(e) => {
                    log::warn!("standard errors unavailable: {e}");
                    (None, None)
                }
            }
        }
        _ => (None, None),
    };
    Ok(EstimationResult {
        a_hat: a,
        objective,
        weighting,
        n: st.n,
        d_g: spec.dg(),
        sigma_hat: sigma,
        s_hat,
        std_errors,
        n_iterations: fit.iterations,
        converged: fit.converged,
        rounds: 1,
        multistart_bests: Vec::new(),
        alignment,
        first_stage: None,
    })
}

/// Two-step (or iterated) minimum-distance estimate from data.
pub fn estimate(y: &DataMatrix, spec: &RestrictionSpec, opts: &EstimationOptions) -> Result<EstimationResult> {
    spec.validate()?;
    let st = sample_tensors(y, spec)?;
    let stage1 = estimate_from_tensors(&st, spec, None, opts)?;
    let (a1, _) = canonicalize(&stage1.best.x, spec);
    let need_sigma = opts.weighting != Weighting::Identity || opts.standard_errors;
    let sigma1 = if need_sigma {
        match estimate_sigma(y, &a1, spec, opts) {
            Ok(s) => Some(s),
            Err(e) if opts.weighting == Weighting::Identity => {
                log::warn!("variance estimate unavailable: {e}");
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let mut first = finish(
        a1.clone(),
        &stage1.best,
        &st,
        spec,
        WeightingUsed::Identity,
        sigma1.as_ref().map(|s| s.0.clone()),
        None,
        opts,
    )?;
    first.multistart_bests = stage1.starts.clone();
    if opts.weighting == Weighting::Identity {
        return Ok(first);
    }
    let (mut sigma, mut used) = sigma1.expect("variance computed for efficient weighting");
    let mut a_prev = a1;
    let mut rounds = 0;
    let mut total_iter = 0;
    loop {
        rounds += 1;
        let w = linalg::ridge_inverse(&sigma, opts.ridge)?;
        let fit = minimize(&a_prev, &st.s2, &st.tr, Some(&st.mean), spec, Some(&w), &opts.lm)?;
        total_iter += fit.iterations;
        let (a_new, _) = canonicalize(&fit.x, spec);
        let change = (&a_new - &a_prev).norm();
        let done = opts.weighting == Weighting::Efficient
            || change <= opts.iter_tol * (1.0 + a_new.norm())
            || rounds >= opts.max_rounds;
        if done {
            let used = if opts.weighting == Weighting::Iterated { WeightingUsed::Iterated } else { used };
            let mut res = finish(a_new, &fit, &st, spec, used, Some(sigma), Some(&w), opts)?;
            res.rounds = rounds;
            res.n_iterations = total_iter;
            res.converged = fit.converged && (opts.weighting == Weighting::Efficient || change <= opts.iter_tol * (1.0 + res.a_hat.norm()));
            res.multistart_bests = stage1.starts;
            res.first_stage = Some(Box::new(first));
            return Ok(res);
        }
        let next = estimate_sigma(y, &a_new, spec, opts)?;
        sigma = next.0;
        used = next.1;
        a_prev = a_new;
    }
}
