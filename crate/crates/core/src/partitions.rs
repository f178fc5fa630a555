//! The lattice of set partitions of `{1..r}`, its Möbius function, and the
//! k-statistic coefficients `c(π)`.

use std::fmt;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 10;

/// Partition of `{0..r-1}` into nonempty blocks, each sorted, blocks ordered by
/// their minimum element.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SetPartition {
    r: usize,
    blocks: Vec<Vec<usize>>,
}

impl SetPartition {
    /// Builds from blocks of 0-based elements; checks the covering and
    /// disjointness conditions and canonicalizes the order.
    pub fn new(r: usize, blocks: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; r];
        let mut blocks: Vec<Vec<usize>> = blocks
            .into_iter()
            .map(|mut b| {
                b.sort_unstable();
                b
            })
            .collect();
        for b in &blocks {
            if b.is_empty() {
                return Err(Error::InvalidArgument("empty block".into()));
            }
            for &e in b {
                if e >= r || seen[e] {
                    return Err(Error::InvalidArgument(format!(
                        "element {e} out of range or repeated in partition of {r}"
                    )));
                }
                seen[e] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("blocks do not cover 0..r".into()));
        }
        blocks.sort_by_key(|b| b[0]);
        Ok(SetPartition { r, blocks })
    }

    /// Partition from a restricted growth string `a` (a[0] = 0,
    /// a[k] <= 1 + max a[..k]).
    fn from_rgs(a: &[usize]) -> Self {
        let nb = a.iter().copied().max().map_or(0, |m| m + 1);
        let mut blocks = vec![Vec::new(); nb];
        for (e, &b) in a.iter().enumerate() {
            blocks[b].push(e);
        }
        SetPartition { r: a.len(), blocks }
    }

    /// Block label of every element.
    pub fn labels(&self) -> Vec<usize> {
        let mut lab = vec![0; self.r];
        for (k, b) in self.blocks.iter().enumerate() {
            for &e in b {
                lab[e] = k;
            }
        }
        lab
    }

    pub fn order(&self) -> usize {
        self.r
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }

    /// The partition with a single block.
    pub fn one(r: usize) -> Self {
        SetPartition { r, blocks: vec![(0..r).collect()] }
    }

    /// The partition into singletons.
    pub fn zero(r: usize) -> Self {
        SetPartition { r, blocks: (0..r).map(|e| vec![e]).collect() }
    }
}

impl fmt::Display for SetPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, b) in self.blocks.iter().enumerate() {
            if k > 0 {
                write!(f, "/")?;
            }
            for e in b {
                write!(f, "{}", e + 1)?;
            }
        }
        Ok(())
    }
}

/// All partitions of `{0..r-1}`.
#[derive(Debug, Clone)]
pub struct PartitionPoset {
    r: usize,
    partitions: Vec<SetPartition>,
}

impl PartitionPoset {
    pub fn order(&self) -> usize {
        self.r
    }

    pub fn partitions(&self) -> &[SetPartition] {
        &self.partitions
    }

    pub fn len(&self) -> usize {
        self.partitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partitions.is_empty()
    }
}

/// Enumerates `Π_r` by restricted growth strings, in lexicographic order of
/// the strings.
pub fn enumerate_partitions(r: usize) -> Result<PartitionPoset> {
    if r == 0 || r > MAX_ORDER {
        return Err(Error::InvalidArgument(format!(
            "partition order must be in 1..={MAX_ORDER}, got {r}"
        )));
    }
    let mut out = Vec::new();
    let mut a = vec![0usize; r];
    // m[k] = max(a[0..k]) + 1, the largest label a[k] may take
    let mut m = vec![1usize; r];
    loop {
        out.push(SetPartition::from_rgs(&a));
        let mut k = r - 1;
        while k > 0 && a[k] == m[k] {
            k -= 1;
        }
        if k == 0 {
            break;
        }
        a[k] += 1;
        for j in k + 1..r {
            a[j] = 0;
            m[j] = m[j - 1].max(a[j - 1] + 1);
        }
    }
    Ok(PartitionPoset { r, partitions: out })
}

/// Bell number `B_r`.
pub fn bell(r: usize) -> u64 {
    // Bell triangle
    let mut row = vec![1u64];
    for _ in 0..r {
        let mut next = vec![*row.last().unwrap()];
        for &x in &row {
            next.push(next.last().unwrap() + x);
        }
        row = next;
    }
    row[0]
}

/// True iff every block of `rho` lies inside a block of `pi`.
pub fn refines(rho: &SetPartition, pi: &SetPartition) -> bool {
    if rho.r != pi.r {
        return false;
    }
    let lab = pi.labels();
    rho.blocks.iter().all(|b| b.iter().all(|&e| lab[e] == lab[b[0]]))
}

fn factorial_i64(n: usize) -> i64 {
    (1..=n as i64).product()
}

/// Möbius function of the partition lattice; zero unless `rho` refines `pi`.
pub fn mobius(rho: &SetPartition, pi: &SetPartition) -> i64 {
    if !refines(rho, pi) {
        return 0;
    }
    let lab = pi.labels();
    let mut per_block = vec![0usize; pi.num_blocks()];
    for b in &rho.blocks {
        per_block[lab[b[0]]] += 1;
    }
    let sign = if (rho.num_blocks() - pi.num_blocks()) % 2 == 0 { 1 } else { -1 };
    sign * per_block.iter().map(|&k| factorial_i64(k - 1)).product::<i64>()
}

/// Stirling numbers of the second kind `S(b, k)` for `0 <= k <= b`.
fn stirling2_row(b: usize) -> Vec<f64> {
    let mut row = vec![1.0];
    for nn in 1..=b {
        let mut next = vec![0.0; nn + 1];
        for k in 1..=nn {
            let stay = if k < nn { k as f64 * row[k] } else { 0.0 };
            next[k] = stay + row[k - 1];
        }
        row = next;
    }
    row
}

/// `n^{|π|-1} / binom(n-1, nu-1)` as a product of `nu-1` factors.
fn scaled_inv_binom(n: usize, nu: usize, pi_blocks: usize) -> f64 {
    let n = n as f64;
    let mut v = 1.0;
    // binom(n-1, b) = prod_{t=1}^{b} (n - t) / t
    for t in 1..nu {
        v *= t as f64 / (n - t as f64);
    }
    let mut p = 1.0;
    for _ in 1..pi_blocks {
        p *= n;
    }
    v * p
}

fn coefficient_scaled(pi: &SetPartition, n: usize, scale: bool) -> Result<f64> {
    if n < pi.r {
        return Err(Error::SampleTooSmall { n, r: pi.r });
    }
    // Group the refinements rho <= pi by the number of sub-blocks k_B per
    // block: the count is prod S(|B|, k_B) and the Möbius value is
    // prod (-1)^{k_B - 1} (k_B - 1)!.
    let mut poly = vec![1.0];
    for b in pi.block_sizes() {
        let s = stirling2_row(b);
        let mut fac = 1.0;
        let mut w = vec![0.0; b + 1];
        for k in 1..=b {
            let sign = if (k - 1) % 2 == 0 { 1.0 } else { -1.0 };
            w[k] = sign * fac * s[k];
            fac *= k as f64;
        }
        let mut next = vec![0.0; poly.len() + b];
        for (i, &p) in poly.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (k, &wk) in w.iter().enumerate() {
                next[i + k] += p * wk;
            }
        }
        poly = next;
    }
    let pb = if scale { pi.num_blocks() } else { 1 };
    let mut c = 0.0;
    for (nu, &coef) in poly.iter().enumerate() {
        if coef == 0.0 {
            continue;
        }
        let sign = if (nu - 1) % 2 == 0 { 1.0 } else { -1.0 };
        c += coef * sign * scaled_inv_binom(n, nu, pb);
    }
    Ok(c)
}

/// `c(π) = Σ_{ρ ≤ π} m(ρ, π) (-1)^{|ρ|-1} / binom(n-1, |ρ|-1)`.
pub fn kstat_coefficient(pi: &SetPartition, n: usize) -> Result<f64> {
    coefficient_scaled(pi, n, false)
}

/// `n^{|π|-1} c(π)`, the weight of `π` in the moment form of the k-statistic.
pub fn kstat_weight(pi: &SetPartition, n: usize) -> Result<f64> {
    coefficient_scaled(pi, n, true)
}
