//! Sample moments, multivariate k-statistics, and conversion between moment
//! and cumulant tensors.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::partitions::{enumerate_partitions, kstat_weight, SetPartition};
use crate::tensor::{Matrix, SymmetricTensor};

/// `n x d` sample, one observation per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    data: Matrix,
}

impl DataMatrix {
    pub fn new(data: Matrix) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidArgument("empty data matrix".into()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            // column-major position
            let (i, j) = (pos % data.nrows(), pos / data.nrows());
            return Err(Error::InvalidArgument(format!(
                "non-finite value at row {}, column {}",
                i + 1,
                j + 1
            )));
        }
        Ok(DataMatrix { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch("rows of unequal length".into()));
        }
        Self::new(Matrix::from_fn(n, d, |i, j| rows[i][j]))
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn d(&self) -> usize {
        self.data.ncols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn row(&self, s: usize) -> Vec<f64> {
        (0..self.d()).map(|j| self.data[(s, j)]).collect()
    }

    /// Rows mapped through `a`: observation `y_s` becomes `a y_s`.
    pub fn transform(&self, a: &Matrix) -> Result<DataMatrix> {
        if a.ncols() != self.d() {
            return Err(Error::DimensionMismatch(format!(
                "matrix with {} columns applied to {}-dimensional data",
                a.ncols(),
                self.d()
            )));
        }
        Ok(DataMatrix { data: &self.data * a.transpose() })
    }

    /// Subset of rows in the given order (used for resampling).
    pub fn select_rows(&self, rows: &[usize]) -> DataMatrix {
        DataMatrix { data: self.data.select_rows(rows) }
    }

    /// Reads comma-separated numeric rows; a first line that fails to parse
    /// as numbers is treated as a header.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.iter().all(|f| f.is_empty()) {
                continue;
            }
            let parsed: std::result::Result<Vec<f64>, _> =
                rec.iter().map(|f| f.parse::<f64>()).collect();
            match parsed {
                Ok(v) => {
                    if let Some(first) = rows.first() {
                        if first.len() != v.len() {
                            return Err(Error::Parse(format!(
                                "line {}: expected {} columns, found {}",
                                line + 1,
                                first.len(),
                                v.len()
                            )));
                        }
                    }
                    rows.push(v)
                }
                Err(e) if line == 0 => {
                    log::debug!("treating first CSV line as header ({e})");
                }
                Err(e) => {
                    return Err(Error::Parse(format!("line {}: {e}", line + 1)));
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::Parse("no data rows".into()));
        }
        Self::from_rows(&rows).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref())?;
        Self::read_csv(std::io::BufReader::new(f))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for s in 0..self.n() {
            w.write_record(self.row(s).iter().map(|v| format!("{v:.17e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Symmetric tensors of orders `1..=r`, e.g. moments `μ_1..μ_r` or cumulants.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFamily {
    tensors: Vec<SymmetricTensor>,
}

impl TensorFamily {
    /// `tensors[p]` must have order `p + 1` and a common dimension.
    pub fn new(tensors: Vec<SymmetricTensor>) -> Result<Self> {
        let d = tensors.first().map(SymmetricTensor::dim).unwrap_or(0);
        for (p, t) in tensors.iter().enumerate() {
            if t.order() != p + 1 || t.dim() != d {
                return Err(Error::DimensionMismatch(format!(
                    "family entry {p} has (d={}, r={}), expected (d={d}, r={})",
                    t.dim(),
                    t.order(),
                    p + 1
                )));
            }
        }
        Ok(TensorFamily { tensors })
    }

    pub fn dim(&self) -> usize {
        self.tensors.first().map(SymmetricTensor::dim).unwrap_or(0)
    }

    pub fn max_order(&self) -> usize {
        self.tensors.len()
    }

    /// Tensor of order `p` (1-based order).
    pub fn order(&self, p: usize) -> &SymmetricTensor {
        &self.tensors[p - 1]
    }

    pub fn tensors(&self) -> &[SymmetricTensor] {
        &self.tensors
    }

    fn require(&self, r: usize) -> Result<()> {
        if r == 0 || self.tensors.len() < r {
            return Err(Error::Precondition(format!(
                "family holds orders up to {}, order {r} requested",
                self.tensors.len()
            )));
        }
        Ok(())
    }
}

/// For each order `p`, the rank in order `p-1` of each index with its last
/// coordinate removed.
fn parent_ranks(d: usize, r: usize) -> Vec<Vec<usize>> {
    (1..=r)
        .map(|p| {
            let t = SymmetricTensor::zeros(d, p);
            if p == 1 {
                return vec![0; t.len()];
            }
            let parent = SymmetricTensor::zeros(d, p - 1);
            t.indices()
                .iter()
                .map(|ix| parent.rank_of(&ix.as_slice()[..p - 1]).unwrap())
                .collect()
        })
        .collect()
}

/// Builds every unique monomial of orders `1..=r` of a single observation.
///
/// `out[p-1][k]` is the product of `y` over the `k`-th unique index of order `p`.
pub(crate) struct MonomialBuilder {
    d: usize,
    last: Vec<Vec<usize>>,
    parents: Vec<Vec<usize>>,
}

impl MonomialBuilder {
    pub(crate) fn new(d: usize, r: usize) -> Self {
        let last = (1..=r)
            .map(|p| {
                SymmetricTensor::zeros(d, p)
                    .indices()
                    .iter()
                    .map(|ix| ix.as_slice()[p - 1])
                    .collect()
            })
            .collect();
        MonomialBuilder { d, last, parents: parent_ranks(d, r) }
    }

    pub(crate) fn fill(&self, y: &[f64], out: &mut [Vec<f64>]) {
        debug_assert_eq!(y.len(), self.d);
        for (k, &i) in self.last[0].iter().enumerate() {
            out[0][k] = y[i];
        }
        for p in 1..self.last.len() {
            let (lo, hi) = out.split_at_mut(p);
            let prev = &lo[p - 1];
            for (k, (&i, &par)) in self.last[p].iter().zip(&self.parents[p]).enumerate() {
                hi[0][k] = prev[par] * y[i];
            }
        }
    }

    pub(crate) fn buffers(&self) -> Vec<Vec<f64>> {
        self.last.iter().map(|l| vec![0.0; l.len()]).collect()
    }
}

/// Raw sample moments `μ̂_1..μ̂_r`.
pub fn sample_moments(y: &DataMatrix, r: usize) -> Result<TensorFamily> {
    if r == 0 {
        return Err(Error::InvalidArgument("moment order must be positive".into()));
    }
    let (n, d) = (y.n(), y.d());
    let builder = MonomialBuilder::new(d, r);
    let mut buf = builder.buffers();
    let mut acc = builder.buffers();
    let mut row = vec![0.0; d];
    for s in 0..n {
        for (j, v) in row.iter_mut().enumerate() {
            *v = y.data[(s, j)];
        }
        builder.fill(&row, &mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            for (x, z) in a.iter_mut().zip(b) {
                *x += z;
            }
        }
    }
    let inv = 1.0 / n as f64;
    let tensors = acc
        .into_iter()
        .enumerate()
        .map(|(p, v)| {
            SymmetricTensor::from_values(d, p + 1, v.into_iter().map(|x| x * inv).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    TensorFamily::new(tensors)
}

/// `Σ_π w(π) Π_{B∈π} F_{|B|}[i_B]` over all partitions of the index positions.
fn partition_sum(
    family: &TensorFamily,
    r: usize,
    weight: impl Fn(&SetPartition) -> Result<f64>,
) -> Result<SymmetricTensor> {
    family.require(r)?;
    let d = family.dim();
    let poset = enumerate_partitions(r)?;
    let terms: Vec<(f64, &SetPartition)> = poset
        .partitions()
        .iter()
        .map(|p| weight(p).map(|w| (w, p)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|(w, _)| *w != 0.0)
        .collect();
    let mut sub = Vec::with_capacity(r);
    Ok(SymmetricTensor::from_fn(d, r, |ix| {
        let mut total = 0.0;
        for (w, p) in &terms {
            let mut prod = *w;
            for b in p.blocks() {
                sub.clear();
                sub.extend(b.iter().map(|&e| ix[e]));
                prod *= family.order(b.len()).get(&sub);
                if prod == 0.0 {
                    break;
                }
            }
            total += prod;
        }
        total
    }))
}

fn signed_factorial(k: usize) -> f64 {
    let f: f64 = (1..k).map(|t| t as f64).product();
    if (k - 1) % 2 == 0 {
        f
    } else {
        -f
    }
}

/// `κ_r = Σ_π (-1)^{|π|-1} (|π|-1)! Π_B μ_{i_B}`.
pub fn cumulants_from_moments(moments: &TensorFamily, r: usize) -> Result<SymmetricTensor> {
    partition_sum(moments, r, |p| Ok(signed_factorial(p.num_blocks())))
}

/// `μ_r = Σ_π Π_B κ_{i_B}`.
pub fn moments_from_cumulants(cumulants: &TensorFamily, r: usize) -> Result<SymmetricTensor> {
    partition_sum(cumulants, r, |_| Ok(1.0))
}

/// All cumulants up to order `r` from the moments.
pub fn cumulant_family(moments: &TensorFamily, r: usize) -> Result<TensorFamily> {
    TensorFamily::new((1..=r).map(|p| cumulants_from_moments(moments, p)).collect::<Result<_>>()?)
}

/// All moments up to order `r` from the cumulants.
pub fn moment_family(cumulants: &TensorFamily, r: usize) -> Result<TensorFamily> {
    TensorFamily::new((1..=r).map(|p| moments_from_cumulants(cumulants, p)).collect::<Result<_>>()?)
}

/// k-statistic of order `r` computed from sample moments of the same sample
/// of size `n`.
pub fn kstatistic_from_moments(moments: &TensorFamily, n: usize, r: usize) -> Result<SymmetricTensor> {
    if n <= r {
        return Err(Error::SampleTooSmall { n, r });
    }
    partition_sum(moments, r, |p| kstat_weight(p, n))
}

/// Unbiased estimator of the order-`r` cumulant tensor.
pub fn kstatistic(y: &DataMatrix, r: usize) -> Result<SymmetricTensor> {
    if y.n() <= r {
        return Err(Error::SampleTooSmall { n: y.n(), r });
    }
    let m = sample_moments(y, r)?;
    kstatistic_from_moments(&m, y.n(), r)
}

/// Which statistic fills the order-`r` slot of the restrictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatKind {
    Moment,
    Cumulant,
}

/// `(ĥ_2, ĥ_r)`: raw second and r-th moments, or second and r-th k-statistics.
pub fn sample_statistics(
    y: &DataMatrix,
    r: usize,
    kind: StatKind,
) -> Result<(SymmetricTensor, SymmetricTensor, SymmetricTensor)> {
    let top = r.max(2);
    if y.n() <= top {
        return Err(Error::SampleTooSmall { n: y.n(), r: top });
    }
    let m = sample_moments(y, top)?;
    let mean = m.order(1).clone();
    match kind {
        StatKind::Moment => Ok((mean, m.order(2).clone(), m.order(r).clone())),
        StatKind::Cumulant => Ok((
            mean,
            kstatistic_from_moments(&m, y.n(), 2)?,
            kstatistic_from_moments(&m, y.n(), r)?,
        )),
    }
}
