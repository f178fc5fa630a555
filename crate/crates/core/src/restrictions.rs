//! Zero patterns on tensor coordinates, genericity conditions, and the
//! identified set `G_T(V) = {Q ∈ O(d) : Q • T ∈ V}`.

use std::collections::BTreeSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, is_signed_permutation, orthogonality_error, signed_permutations};
use crate::tensor::{multilinear_apply, multilinear_apply_general, num_unique, Matrix, MultiIndex, SymmetricTensor};

/// Default tolerance, relative to `‖T‖`.
pub const DEFAULT_TOL: f64 = 1e-8;

/// Matrices closer than this (Frobenius) are merged in enumerations.
pub const DEDUP_DIST: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Diagonal,
    Reflectional,
    MeanIndependence,
    Minimal,
    Custom,
}

impl fmt::Display for PatternKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PatternKind::Diagonal => "diagonal",
            PatternKind::Reflectional => "reflectional",
            PatternKind::MeanIndependence => "mean_independence",
            PatternKind::Minimal => "minimal",
            PatternKind::Custom => "custom",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for PatternKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "diagonal" => Ok(PatternKind::Diagonal),
            "reflectional" => Ok(PatternKind::Reflectional),
            "mean_independence" | "meanind" => Ok(PatternKind::MeanIndependence),
            "minimal" => Ok(PatternKind::Minimal),
            "custom" => Ok(PatternKind::Custom),
            other => Err(Error::InvalidPattern(format!("unknown pattern kind '{other}'"))),
        }
    }
}

/// The index set `I` defining `V(I) = {T : T_i = c_i for i ∈ I}`, with
/// `c_i = 0` unless targets are given.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroPattern {
    d: usize,
    r: usize,
    kind: PatternKind,
    indices: Vec<MultiIndex>,
    targets: Option<Vec<f64>>,
}

/// Builds the canonical pattern of a named kind.
pub fn make_pattern(kind: PatternKind, d: usize, r: usize) -> Result<ZeroPattern> {
    if d < 2 {
        return Err(Error::InvalidPattern(format!("patterns need d >= 2, got {d}")));
    }
    if r < 3 {
        return Err(Error::InvalidPattern(format!("patterns need order r >= 3, got {r}")));
    }
    let all = SymmetricTensor::zeros(d, r);
    let indices: Vec<MultiIndex> = match kind {
        PatternKind::Diagonal => all.indices().iter().filter(|ix| !ix.is_diagonal()).cloned().collect(),
        PatternKind::Reflectional => {
            if r % 2 == 1 {
                return Err(Error::InvalidPattern(format!(
                    "reflectional pattern needs an even order, got r = {r}"
                )));
            }
            all.indices().iter().filter(|ix| !ix.is_even()).cloned().collect()
        }
        PatternKind::MeanIndependence => {
            let mut set = BTreeSet::new();
            for i in 0..d {
                for j in i + 1..d {
                    let mut a = vec![j; r];
                    a[0] = i;
                    set.insert(MultiIndex::new(a));
                    let mut b = vec![i; r];
                    b[r - 1] = j;
                    set.insert(MultiIndex::new(b));
                }
            }
            set.into_iter().collect()
        }
        PatternKind::Minimal => {
            let mut out = Vec::new();
            for i in 0..d {
                for j in i + 1..d {
                    let mut a = vec![j; r];
                    a[0] = i;
                    out.push(MultiIndex::new(a));
                }
            }
            out
        }
        PatternKind::Custom => {
            return Err(Error::InvalidPattern(
                "custom patterns are built from an explicit index list".into(),
            ))
        }
    };
    ZeroPattern::build(d, r, kind, indices, None)
}

impl ZeroPattern {
    fn build(
        d: usize,
        r: usize,
        kind: PatternKind,
        indices: Vec<MultiIndex>,
        targets: Option<Vec<f64>>,
    ) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidPattern("pattern has no indices".into()));
        }
        let probe = SymmetricTensor::zeros(d, r);
        let mut keyed = Vec::with_capacity(indices.len());
        for (k, ix) in indices.into_iter().enumerate() {
            let rank = probe.rank_of(ix.as_slice()).map_err(|e| Error::InvalidPattern(e.to_string()))?;
            let target = targets.as_ref().map(|t| t[k]);
            keyed.push((rank, ix, target));
        }
        keyed.sort_by_key(|(rank, _, _)| *rank);
        for w in keyed.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::InvalidPattern(format!("duplicate pattern index {}", w[0].1)));
            }
        }
        let targets = targets.map(|_| keyed.iter().map(|(_, _, t)| t.unwrap()).collect::<Vec<_>>());
        Ok(ZeroPattern {
            d,
            r,
            kind,
            indices: keyed.into_iter().map(|(_, ix, _)| ix).collect(),
            targets,
        })
    }

    /// Pattern from an explicit list of 0-based index tuples (any order).
    pub fn custom(d: usize, r: usize, indices: Vec<Vec<usize>>) -> Result<Self> {
        let ix = indices.into_iter().map(MultiIndex::new).collect();
        Self::build(d, r, PatternKind::Custom, ix, None)
    }

    /// Pattern from 1-based index tuples, as written in configs.
    pub fn custom_one_based(d: usize, r: usize, indices: &[Vec<usize>]) -> Result<Self> {
        let ix = indices
            .iter()
            .map(|i| {
                if i.len() != r {
                    return Err(Error::InvalidPattern(format!("index {i:?} does not have length {r}")));
                }
                MultiIndex::from_one_based(i, d).map_err(|e| Error::InvalidPattern(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::build(d, r, PatternKind::Custom, ix, None)
    }

    /// Attaches known target values, one per index in the order given by
    /// [`Self::indices`].
    pub fn with_targets(mut self, targets: Vec<f64>) -> Result<Self> {
        if targets.len() != self.indices.len() {
            return Err(Error::InvalidPattern(format!(
                "{} targets for {} pattern indices",
                targets.len(),
                self.indices.len()
            )));
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidPattern("non-finite target value".into()));
        }
        self.targets = if targets.iter().all(|&t| t == 0.0) { None } else { Some(targets) };
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn order(&self) -> usize {
        self.r
    }

    pub fn kind(&self) -> PatternKind {
        self.kind
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn targets(&self) -> Option<&[f64]> {
        self.targets.as_deref()
    }

    pub fn target(&self, k: usize) -> f64 {
        self.targets.as_ref().map_or(0.0, |t| t[k])
    }

    pub fn contains(&self, ix: &MultiIndex) -> bool {
        self.position(ix).is_some()
    }

    pub fn position(&self, ix: &MultiIndex) -> Option<usize> {
        self.indices.iter().position(|j| j == ix)
    }

    /// `T_i - c_i` for `i ∈ I`.
    pub fn residual(&self, t: &SymmetricTensor) -> Result<Vec<f64>> {
        self.check_tensor(t)?;
        let mut v = t.project(&self.indices)?;
        if let Some(c) = &self.targets {
            for (x, c) in v.iter_mut().zip(c) {
                *x -= c;
            }
        }
        Ok(v)
    }

    fn check_tensor(&self, t: &SymmetricTensor) -> Result<()> {
        if t.dim() != self.d || t.order() != self.r {
            return Err(Error::DimensionMismatch(format!(
                "pattern for (d={}, r={}) applied to tensor with (d={}, r={})",
                self.d,
                self.r,
                t.dim(),
                t.order()
            )));
        }
        Ok(())
    }

    /// True when `P • V(I) = V(I)` for every signed permutation `P`.
    pub fn is_sp_invariant(&self) -> bool {
        if self.targets.is_some() {
            return false;
        }
        let set: BTreeSet<&MultiIndex> = self.indices.iter().collect();
        crate::linalg::permutations(self.d).into_iter().all(|p| {
            self.indices.iter().all(|ix| {
                let img = MultiIndex::new(ix.as_slice().iter().map(|&i| p[i]).collect());
                set.contains(&img)
            })
        })
    }
}

/// Coordinates `T_i` for `i ∈ I`, in the pattern's order.
pub fn project_onto_pattern(t: &SymmetricTensor, pattern: &ZeroPattern) -> Result<Vec<f64>> {
    pattern.check_tensor(t)?;
    t.project(pattern.indices())
}

#[derive(Serialize, Deserialize)]
struct PatternJson {
    kind: PatternKind,
    d: usize,
    r: usize,
    #[serde(default)]
    indices: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    targets: Option<Vec<f64>>,
}

impl Serialize for ZeroPattern {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PatternJson {
            kind: self.kind,
            d: self.d,
            r: self.r,
            indices: self.indices.iter().map(MultiIndex::to_one_based).collect(),
            targets: self.targets.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ZeroPattern {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = PatternJson::deserialize(de)?;
        if raw.indices.is_empty() && raw.kind != PatternKind::Custom {
            // a named kind without explicit indices expands to the standard set
            let p = make_pattern(raw.kind, raw.d, raw.r).map_err(D::Error::custom)?;
            return match raw.targets {
                Some(t) => p.with_targets(t).map_err(D::Error::custom),
                None => Ok(p),
            };
        }
        let ix = raw
            .indices
            .iter()
            .map(|i| MultiIndex::from_one_based(i, raw.d))
            .collect::<Result<Vec<_>>>()
            .map_err(D::Error::custom)?;
        let p = ZeroPattern::build(raw.d, raw.r, raw.kind, ix, None).map_err(D::Error::custom)?;
        match raw.targets {
            Some(t) => p.with_targets(t).map_err(D::Error::custom),
            None => Ok(p),
        }
    }
}

/// Outcome of a genericity check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenericityCheck {
    pub passed: bool,
    pub reasons: Vec<String>,
}

fn scale_of(t: &SymmetricTensor) -> f64 {
    t.norm().max(f64::MIN_POSITIVE)
}

/// At most one diagonal entry of a diagonal tensor may vanish.
pub fn check_genericity_diagonal(t: &SymmetricTensor, tol: f64) -> Result<GenericityCheck> {
    let thr = tol * scale_of(t);
    let off = t.off_diagonal_max();
    if off > thr {
        return Err(Error::Precondition(format!(
            "tensor is not diagonal (largest off-diagonal entry {off:.3e})"
        )));
    }
    let diag = t.diagonal_entries();
    let zeros: Vec<usize> = (0..diag.len()).filter(|&i| diag[i].abs() <= thr).collect();
    let mut reasons = Vec::new();
    if zeros.len() > 1 {
        let list: Vec<String> = zeros.iter().map(|i| (i + 1).to_string()).collect();
        reasons.push(format!("diagonal entries {} are zero", list.join(", ")));
    } else {
        reasons.push(format!("{} zero diagonal entries", zeros.len()));
    }
    Ok(GenericityCheck { passed: zeros.len() <= 1, reasons })
}

/// Marginal sums `T_{+…+ii}` over all `d^{r-2}` leading index tuples.
pub fn marginal_sums(t: &SymmetricTensor) -> Vec<f64> {
    let (d, r) = (t.dim(), t.order());
    let lead = SymmetricTensor::zeros(d, r - 2);
    let mut buf = Vec::with_capacity(r);
    (0..d)
        .map(|i| {
            lead.indices()
                .iter()
                .enumerate()
                .map(|(k, ix)| {
                    buf.clear();
                    buf.extend_from_slice(ix.as_slice());
                    buf.push(i);
                    buf.push(i);
                    lead.multiplicity(k) * t.get(&buf)
                })
                .sum()
        })
        .collect()
}

/// Pairwise distinct marginal sums `T_{+…+ii}`.
pub fn check_genericity_reflectional(t: &SymmetricTensor, tol: f64) -> Result<GenericityCheck> {
    if t.order() % 2 == 1 || t.order() < 2 {
        return Err(Error::Precondition(format!(
            "reflectional genericity needs an even order, got {}",
            t.order()
        )));
    }
    let thr = tol * scale_of(t);
    let odd = t.odd_part_max();
    if odd > thr {
        return Err(Error::Precondition(format!(
            "tensor is not reflectionally invariant (largest odd entry {odd:.3e})"
        )));
    }
    let s = marginal_sums(t);
    let mut reasons = Vec::new();
    for i in 0..s.len() {
        for j in i + 1..s.len() {
            if (s[i] - s[j]).abs() <= thr {
                reasons.push(format!("marginal sums {} and {} coincide ({:.6e})", i + 1, j + 1, s[i]));
            }
        }
    }
    let passed = reasons.is_empty();
    if passed {
        let list: Vec<String> = s.iter().map(|v| format!("{v:.6e}")).collect();
        reasons.push(format!("marginal sums [{}] pairwise distinct", list.join(", ")));
    }
    Ok(GenericityCheck { passed, reasons })
}

/// `B^{(j)}_{kl} = T_{k l j … j}` for `k, l < j` (0-based `j`).
pub fn b_matrix(t: &SymmetricTensor, j: usize) -> Matrix {
    let r = t.order();
    let mut idx = vec![j; r];
    Matrix::from_fn(j, j, |k, l| {
        idx[0] = k;
        idx[1] = l;
        t.get(&idx)
    })
}

/// `det(T_{j…j} I_{j-1} - (r-1) B^{(j)}) ≠ 0` for `j = 2..d`.
pub fn check_genericity_minimal(t: &SymmetricTensor, tol: f64) -> Result<GenericityCheck> {
    let (d, r) = (t.dim(), t.order());
    if d < 2 || r < 3 {
        return Err(Error::Precondition("minimal pattern needs d >= 2 and r >= 3".into()));
    }
    let pattern = make_pattern(PatternKind::Minimal, d, r)?;
    let thr = tol * scale_of(t);
    let viol = pattern.residual(t)?.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if viol > thr {
        return Err(Error::Precondition(format!(
            "tensor violates the minimal pattern (largest entry {viol:.3e})"
        )));
    }
    let mut passed = true;
    let mut reasons = Vec::new();
    for j in 1..d {
        let tjj = t.get(&vec![j; r]);
        let m = Matrix::identity(j, j) * tjj - b_matrix(t, j) * (r as f64 - 1.0);
        let sv = linalg::singular_values(&m);
        let smin = *sv.last().unwrap();
        let det = m.determinant();
        if smin <= thr {
            passed = false;
            reasons.push(format!("j = {}: determinant {det:.6e} is numerically zero", j + 1));
        } else {
            reasons.push(format!("j = {}: determinant {det:.6e}", j + 1));
        }
    }
    Ok(GenericityCheck { passed, reasons })
}

/// Orthogonality slack accepted for candidate matrices.
pub const ORTHO_TOL: f64 = 1e-8;

/// Largest `|(Q•T)_i - c_i|` over the pattern.
pub fn pattern_residual(q: &Matrix, t: &SymmetricTensor, pattern: &ZeroPattern) -> Result<f64> {
    let qt = multilinear_apply(q, t)?;
    Ok(pattern.residual(&qt)?.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// `Q ∈ G_T(V)`: the pattern residual of `Q • T` is at most `tol · ‖T‖`.
pub fn verify_in_gt(q: &Matrix, t: &SymmetricTensor, pattern: &ZeroPattern, tol: f64) -> Result<bool> {
    pattern.check_tensor(t)?;
    if q.nrows() != t.dim() || q.ncols() != t.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} matrix for a tensor of dimension {}",
            q.nrows(),
            q.ncols(),
            t.dim()
        )));
    }
    let oe = orthogonality_error(q);
    if oe > ORTHO_TOL {
        return Err(Error::Precondition(format!("matrix is not orthogonal (|QQ' - I| = {oe:.3e})")));
    }
    Ok(pattern_residual(q, t, pattern)? <= tol * scale_of(t))
}

/// Result of the linearized identification test at one point of `G_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalIdentification {
    pub locally_identified: bool,
    pub kernel_dimension: usize,
    pub singular_values: Vec<f64>,
}

/// `K_{S}(U) = Σ_k (I, …, U, …, I) • S`, the derivative of `Q • S` along `U`.
pub fn tangent_map(s: &SymmetricTensor, u: &Matrix) -> Result<crate::tensor::DenseTensor> {
    let (d, r) = (s.dim(), s.order());
    let id = Matrix::identity(d, d);
    let mut mats = vec![id.clone(); r];
    mats[0] = u.clone();
    let mut acc = multilinear_apply_general(&mats, s)?;
    for k in 1..r {
        mats[k - 1] = id.clone();
        mats[k] = u.clone();
        acc.add_assign(&multilinear_apply_general(&mats, s)?)?;
    }
    Ok(acc)
}

/// Kernel of `U ↦ π_V(K_{Q•T}(U))` over antisymmetric `U`.
pub fn local_identification_test(
    t: &SymmetricTensor,
    pattern: &ZeroPattern,
    q: &Matrix,
    tol: f64,
) -> Result<LocalIdentification> {
    if !verify_in_gt(q, t, pattern, tol)? {
        return Err(Error::Precondition(format!(
            "matrix is not in G_T (pattern residual {:.3e})",
            pattern_residual(q, t, pattern)?
        )));
    }
    let d = t.dim();
    let s = multilinear_apply(q, t)?;
    let m = d * (d - 1) / 2;
    if m == 0 {
        return Ok(LocalIdentification { locally_identified: true, kernel_dimension: 0, singular_values: vec![] });
    }
    let mut jac = Matrix::zeros(pattern.len(), m);
    let mut col = 0;
    for a in 0..d {
        for b in a + 1..d {
            let mut u = Matrix::zeros(d, d);
            u[(a, b)] = 1.0;
            u[(b, a)] = -1.0;
            let k = tangent_map(&s, &u)?;
            for (row, ix) in pattern.indices().iter().enumerate() {
                jac[(row, col)] = k.get(ix.as_slice());
            }
            col += 1;
        }
    }
    let sv = linalg::singular_values(&jac);
    let smax = sv.first().copied().unwrap_or(0.0);
    let rank = if smax > 0.0 { sv.iter().filter(|&&x| x > tol * smax).count() } else { 0 };
    let kernel = m - rank;
    Ok(LocalIdentification { locally_identified: kernel == 0, kernel_dimension: kernel, singular_values: sv })
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_eval(p: &[f64], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn poly_deriv(p: &[f64]) -> Vec<f64> {
    if p.len() <= 1 {
        return vec![0.0];
    }
    p.iter().enumerate().skip(1).map(|(k, c)| k as f64 * c).collect()
}

/// Real roots of a polynomial (coefficients lowest degree first).
fn real_roots(p: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut p = p.to_vec();
    let big = p.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    while p.len() > 1 && p.last().unwrap().abs() <= 1e-13 * big {
        p.pop();
    }
    let deg = p.len() - 1;
    let mut cands = Vec::new();
    if deg >= 1 {
        let lead = p[deg];
        let mut comp = Matrix::zeros(deg, deg);
        for k in 0..deg {
            comp[(0, k)] = -p[deg - 1 - k] / lead;
            if k + 1 < deg {
                comp[(k + 1, k)] = 1.0;
            }
        }
        // the grid scan below still runs if the QR iteration stalls
        if let Some(schur) = comp.try_schur(f64::EPSILON, 10_000) {
            for z in schur.complex_eigenvalues().iter() {
                if z.re.is_finite() && z.im.abs() <= 1e-4 * (1.0 + z.re.abs()) {
                    cands.push(z.re);
                }
            }
        }
    }
    // grid scan for sign changes on a bounded range
    const GRID: usize = 4000;
    let mut prev_x = lo;
    let mut prev_v = poly_eval(&p, lo);
    for k in 1..=GRID {
        let x = lo + (hi - lo) * k as f64 / GRID as f64;
        let v = poly_eval(&p, x);
        if prev_v == 0.0 {
            cands.push(prev_x);
        } else if prev_v * v < 0.0 {
            let (mut a, mut b, mut fa) = (prev_x, x, prev_v);
            for _ in 0..80 {
                let m = 0.5 * (a + b);
                let fm = poly_eval(&p, m);
                if fm == 0.0 {
                    a = m;
                    b = m;
                    break;
                }
                if fa * fm < 0.0 {
                    b = m;
                } else {
                    a = m;
                    fa = fm;
                }
            }
            cands.push(0.5 * (a + b));
        }
        prev_x = x;
        prev_v = v;
    }
    let dp = poly_deriv(&p);
    cands
        .into_iter()
        .map(|mut x| {
            for _ in 0..60 {
                let f = poly_eval(&p, x);
                let g = poly_eval(&dp, x);
                if g == 0.0 {
                    break;
                }
                let step = f / g;
                let nx = x - step;
                if !nx.is_finite() || poly_eval(&p, nx).abs() > f.abs() {
                    break;
                }
                x = nx;
                if step.abs() <= 1e-16 * (1.0 + x.abs()) {
                    break;
                }
            }
            x
        })
        .collect()
}

/// `Q(θ)` for the rotation (`reflect = false`) or reflection class.
fn class_matrix(theta: f64, reflect: bool) -> Matrix {
    let (s, c) = theta.sin_cos();
    if reflect {
        Matrix::from_row_slice(2, 2, &[c, s, s, -c])
    } else {
        Matrix::from_row_slice(2, 2, &[c, -s, s, c])
    }
}

/// Numerators of `Q(θ)` entries in `t = tan(θ/2)`, times `(1 + t^2)`.
fn class_numerators(reflect: bool) -> [[Vec<f64>; 2]; 2] {
    let c = vec![1.0, 0.0, -1.0];
    let s = vec![0.0, 2.0, 0.0];
    let neg = |p: &Vec<f64>| p.iter().map(|x| -x).collect::<Vec<_>>();
    if reflect {
        [[c.clone(), s.clone()], [s, neg(&c)]]
    } else {
        [[c.clone(), neg(&s)], [s, c]]
    }
}

/// For every pattern index `i`, the polynomial `P_i(t)` with
/// `(Q(θ)•T)_i - c_i = P_i(t) / (1 + t^2)^r`.
fn class_polynomials(t: &SymmetricTensor, pattern: &ZeroPattern, reflect: bool) -> Vec<Vec<f64>> {
    let r = t.order();
    let num = class_numerators(reflect);
    let mut onept = vec![1.0];
    for _ in 0..r {
        onept = poly_mul(&onept, &[1.0, 0.0, 1.0]);
    }
    pattern
        .indices()
        .iter()
        .enumerate()
        .map(|(k, ix)| {
            let i = ix.as_slice();
            let mut acc = vec![0.0; 2 * r + 1];
            let mut j = vec![0usize; r];
            for code in 0..(1usize << r) {
                for (m, slot) in j.iter_mut().enumerate() {
                    *slot = code >> m & 1;
                }
                let tv = t.get(&j);
                if tv == 0.0 {
                    continue;
                }
                let mut prod = vec![tv];
                for m in 0..r {
                    prod = poly_mul(&prod, &num[i[m]][j[m]]);
                }
                for (a, b) in acc.iter_mut().zip(&prod) {
                    *a += b;
                }
            }
            let c = pattern.target(k);
            if c != 0.0 {
                for (a, b) in acc.iter_mut().zip(&onept) {
                    *a -= c * b;
                }
            }
            acc
        })
        .collect()
}

fn canonical_key(q: &Matrix) -> (f64, bool, f64) {
    let theta = q[(1, 0)].atan2(q[(0, 0)]);
    let full = if theta < 0.0 { theta + 2.0 * std::f64::consts::PI } else { theta };
    let mut half = full % std::f64::consts::PI;
    if std::f64::consts::PI - half < 1e-12 {
        half = 0.0;
    }
    let reflect = q.determinant() < 0.0;
    (half, reflect, full)
}

/// All `Q ∈ O(2)` with `Q • T ∈ V(I)`, for `d = 2`.
///
/// Sorted by the angle of the first column modulo π, then rotations before
/// reflections, then the full angle.
pub fn enumerate_gt_2d(t: &SymmetricTensor, pattern: &ZeroPattern, tol: f64) -> Result<Vec<Matrix>> {
    if t.dim() != 2 {
        return Err(Error::Precondition(format!("enumeration needs d = 2, got d = {}", t.dim())));
    }
    pattern.check_tensor(t)?;
    let thr = tol * scale_of(t);
    let mut found: Vec<Matrix> = Vec::new();
    let push = |q: Matrix, found: &mut Vec<Matrix>| {
        if found.iter().all(|f| (f - &q).norm() > DEDUP_DIST) {
            found.push(q);
        }
    };
    for p in signed_permutations(2)? {
        let q = p.matrix();
        if pattern_residual(&q, t, pattern)? <= thr {
            push(q, &mut found);
        }
    }
    for reflect in [false, true] {
        let polys = class_polynomials(t, pattern, reflect);
        let pscale = polys.iter().flatten().fold(0.0f64, |m, c| m.max(c.abs()));
        let live: Vec<&Vec<f64>> = polys
            .iter()
            .filter(|p| p.iter().any(|c| c.abs() > 1e-12 * pscale.max(scale_of(t))))
            .collect();
        if live.is_empty() {
            return Err(Error::NonFiniteSet(format!(
                "every {} satisfies the pattern",
                if reflect { "reflection" } else { "rotation" }
            )));
        }
        for p in live {
            // t in [-1, 1] covers |θ| <= π/2; 1/t handled by the reciprocal range
            let mut roots = real_roots(p, -1.0, 1.0);
            let rev: Vec<f64> = p.iter().rev().copied().collect();
            roots.extend(real_roots(&rev, -1.0, 1.0).into_iter().filter(|&u| u != 0.0).map(|u| 1.0 / u));
            for tt in roots {
                let theta = 2.0 * tt.atan();
                let q = class_matrix(theta, reflect);
                if pattern_residual(&q, t, pattern)? <= thr {
                    push(q, &mut found);
                }
            }
        }
    }
    // snap entries that are zero up to rounding
    for q in found.iter_mut() {
        q.iter_mut().for_each(|v| {
            if v.abs() < 1e-15 {
                *v = 0.0
            }
        });
    }
    found.sort_by(|a, b| {
        let (ka, kb) = (canonical_key(a), canonical_key(b));
        let h = if (ka.0 - kb.0).abs() <= 1e-9 { std::cmp::Ordering::Equal } else { ka.0.total_cmp(&kb.0) };
        h.then(ka.1.cmp(&kb.1)).then(ka.2.total_cmp(&kb.2))
    });
    Ok(found)
}

/// Identification analysis for one tensor and pattern.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentReport {
    pub pattern: ZeroPattern,
    pub tensor_in_pattern: bool,
    pub pattern_residual: f64,
    pub genericity: Option<GenericityCheck>,
    pub locally_identified: bool,
    pub kernel_dimension: usize,
    pub singular_values: Vec<f64>,
    #[serde(with = "crate::linalg::opt_vec_rows_serde", default)]
    pub enumerated_set: Option<Vec<Matrix>>,
    pub enumeration_note: Option<String>,
    /// `Some(true)` when the identified set is known to be exactly `SP(d)`.
    pub identified_up_to_sp: Option<bool>,
}

/// Runs the checks that apply to the pattern kind, the local test at
/// `Q = I`, and the `d = 2` enumeration.
pub fn identify(t: &SymmetricTensor, pattern: &ZeroPattern, tol: f64) -> Result<IdentReport> {
    pattern.check_tensor(t)?;
    let d = t.dim();
    let id = Matrix::identity(d, d);
    let residual = pattern_residual(&id, t, pattern)?;
    let in_pattern = residual <= tol * scale_of(t);
    let genericity = if in_pattern {
        match pattern.kind() {
            PatternKind::Diagonal => Some(check_genericity_diagonal(t, tol)?),
            PatternKind::Reflectional => Some(check_genericity_reflectional(t, tol)?),
            PatternKind::Minimal | PatternKind::MeanIndependence if pattern.targets().is_none() => {
                Some(check_genericity_minimal(t, tol)?)
            }
            _ => None,
        }
    } else {
        None
    };
    let local = if in_pattern {
        local_identification_test(t, pattern, &id, tol)?
    } else {
        LocalIdentification {
            locally_identified: false,
            kernel_dimension: d * (d - 1) / 2,
            singular_values: vec![],
        }
    };
    let (enumerated_set, enumeration_note) = if d == 2 {
        match enumerate_gt_2d(t, pattern, tol) {
            Ok(set) => (Some(set), None),
            Err(Error::NonFiniteSet(msg)) => (None, Some(format!("identified set is not finite: {msg}"))),
            Err(e) => return Err(e),
        }
    } else {
        (None, None)
    };
    let identified_up_to_sp = match (&enumerated_set, &enumeration_note) {
        (Some(set), _) => Some(set.len() == 8 && set.iter().all(|q| is_signed_permutation(q, 1e-9))),
        (None, Some(_)) => Some(false),
        (None, None) => match (pattern.kind(), &genericity) {
            (PatternKind::Diagonal | PatternKind::Reflectional, Some(g)) if g.passed => Some(true),
            _ => None,
        },
    };
    Ok(IdentReport {
        pattern: pattern.clone(),
        tensor_in_pattern: in_pattern,
        pattern_residual: residual,
        genericity,
        locally_identified: local.locally_identified,
        kernel_dimension: local.kernel_dimension,
        singular_values: local.singular_values,
        enumerated_set,
        enumeration_note,
        identified_up_to_sp,
    })
}

/// Distinct solutions of `Q • T ∈ V(I)` found from random orthogonal starts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Exploration {
    pub starts: usize,
    pub converged_starts: usize,
    #[serde(with = "crate::linalg::vec_rows_serde")]
    pub solutions: Vec<Matrix>,
    pub signed_permutation_count: usize,
    pub note: String,
}

/// Searches `G_T(V)` numerically for `d >= 2`; the list carries no
/// completeness guarantee.
pub fn explore_gt(
    t: &SymmetricTensor,
    pattern: &ZeroPattern,
    starts: usize,
    seed: u64,
    tol: f64,
) -> Result<Exploration> {
    pattern.check_tensor(t)?;
    let d = t.dim();
    let s2 = SymmetricTensor::diagonal(2, &vec![1.0; d]);
    let spec = crate::estimator::RestrictionSpec::new(pattern.clone(), crate::statistics::StatKind::Moment);
    let thr = tol * scale_of(t);
    let mut sols: Vec<Matrix> = Vec::new();
    let mut converged = 0;
    for k in 0..starts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let q0 = linalg::random_orthogonal(d, &mut rng);
        let fit = crate::estimator::minimize(&q0, &s2, t, None, &spec, None, &crate::optim::LmOptions::default())?;
        let mut q = fit.x;
        // polish onto O(d)
        let svd = q.clone().svd(true, true);
        q = svd.u.unwrap() * svd.v_t.unwrap();
        if orthogonality_error(&q) <= ORTHO_TOL && pattern_residual(&q, t, pattern)? <= thr.max(1e-10) {
            converged += 1;
            if sols.iter().all(|s| (s - &q).norm() > DEDUP_DIST) {
                sols.push(q);
            }
        }
    }
    let spc = sols.iter().filter(|q| is_signed_permutation(q, 1e-6)).count();
    Ok(Exploration {
        starts,
        converged_starts: converged,
        signed_permutation_count: spc,
        note: format!(
            "{} distinct solutions from {} starts ({} signed permutations); not an exhaustive enumeration",
            sols.len(),
            starts,
            spc
        ),
        solutions: sols,
    })
}

/// Number of free parameters of `O(d)`.
pub fn orthogonal_dim(d: usize) -> usize {
    d * (d - 1) / 2
}

/// Number of unique entries of an order-`r` tensor outside the pattern.
pub fn free_coordinates(pattern: &ZeroPattern) -> usize {
    num_unique(pattern.dim(), pattern.order()) - pattern.len()
}
