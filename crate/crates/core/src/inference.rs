//! Over-identification (J) and nested-subset (C) tests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, gamma_ur};

use crate::error::{Error, Result};
use crate::estimator::{
    estimate, estimate_from_tensors, minimize, sample_tensors, EstimationOptions, EstimationResult, RestrictionSpec,
    Weighting, WeightingUsed,
};
use crate::linalg;
use crate::tensor::Matrix;
use crate::statistics::DataMatrix;

pub const LEVELS: [f64; 3] = [0.10, 0.05, 0.01];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Keyed by level formatted as `"0.05"`.
    pub reject_at: BTreeMap<String, bool>,
}

impl TestResult {
    pub fn new(statistic: f64, dof: usize) -> Result<Self> {
        if dof == 0 {
            return Err(Error::Precondition("test needs at least one degree of freedom".into()));
        }
        let p_value = chi_square_sf(statistic.max(0.0), dof);
        let reject_at = LEVELS.iter().map(|&l| (format!("{l:.2}"), p_value < l)).collect();
        Ok(TestResult { statistic, dof, p_value, reject_at })
    }

    pub fn rejects(&self, level: f64) -> bool {
        self.p_value < level
    }
}

/// `P(k/2, x/2)`.
pub fn chi_square_cdf(x: f64, k: usize) -> f64 {
    if x <= 0.0 || k == 0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    gamma_lr(k as f64 / 2.0, x / 2.0)
}

/// `1 - P(k/2, x/2)`, computed directly so small p-values keep precision.
pub fn chi_square_sf(x: f64, k: usize) -> f64 {
    if x <= 0.0 || k == 0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    gamma_ur(k as f64 / 2.0, x / 2.0).clamp(0.0, 1.0)
}

fn efficient_opts(opts: &EstimationOptions) -> EstimationOptions {
    let mut o = opts.clone();
    if o.weighting == Weighting::Identity {
        o.weighting = Weighting::Efficient;
    }
    o
}

fn is_efficient(est: &EstimationResult) -> bool {
    est.weighting != WeightingUsed::Identity
}

/// `Λ_n = n L̂` at the efficient estimate, against `χ²(d_g - d²)`.
///
/// An identity-weighted `est` (or none) triggers an efficient re-estimation.
pub fn j_test(
    y: &DataMatrix,
    spec: &RestrictionSpec,
    est: Option<&EstimationResult>,
    opts: &EstimationOptions,
) -> Result<TestResult> {
    let dof = spec.overidentification();
    if dof <= 0 {
        return Err(Error::Precondition(format!(
            "exactly identified (d_g = {} = d^2): the J-test is undefined",
            spec.dg()
        )));
    }
    let fresh;
    let est = match est {
        Some(e) if is_efficient(e) => e,
        _ => {
            fresh = estimate(y, spec, &efficient_opts(opts))?;
            &fresh
        }
    };
    TestResult::new(est.n as f64 * est.objective, dof as usize)
}

/// Position of each restriction of `sub` inside `full`'s `g`.
pub fn nested_coordinates(full: &RestrictionSpec, sub: &RestrictionSpec) -> Result<Vec<usize>> {
    let fail = |m: String| Err(Error::Precondition(format!("restriction sets are not nested: {m}")));
    if full.d() != sub.d() || full.r() != sub.r() {
        return fail(format!("(d, r) = ({}, {}) vs ({}, {})", full.d(), full.r(), sub.d(), sub.r()));
    }
    if full.stat_kind != sub.stat_kind {
        return fail("different statistics".into());
    }
    if sub.include_mean && !full.include_mean {
        return fail("mean restrictions only in the subset".into());
    }
    let d = full.d();
    let k2 = crate::tensor::num_unique(d, 2);
    let mut coords: Vec<usize> = (0..k2).collect();
    for (k, ix) in sub.pattern.indices().iter().enumerate() {
        let Some(pos) = full.pattern.position(ix) else {
            return fail(format!("index {ix} missing from the full pattern"));
        };
        if (sub.pattern.target(k) - full.pattern.target(pos)).abs() > 0.0 {
            return fail(format!("index {ix} has different targets"));
        }
        coords.push(k2 + pos);
    }
    if sub.include_mean {
        let off = k2 + full.pattern.len();
        coords.extend(off..off + d);
    }
    Ok(coords)
}

fn sub_matrix(m: &Matrix, coords: &[usize]) -> Matrix {
    Matrix::from_fn(coords.len(), coords.len(), |i, j| m[(coords[i], coords[j])])
}

/// Full and restricted statistics of a C-test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CTestDetail {
    pub result: TestResult,
    pub lambda_full: f64,
    pub lambda_sub: f64,
}

/// `C_n = Λ_n - Λ_n⁰` for `sub ⊂ full`, against `χ²(d_g - d_{g1})`.
///
/// Both fits use the variance estimated at the first-stage full-model
/// estimate; the subset weight is the inverse of its sub-block.
pub fn c_test(
    y: &DataMatrix,
    full: &RestrictionSpec,
    sub: &RestrictionSpec,
    opts: &EstimationOptions,
) -> Result<TestResult> {
    Ok(c_test_detail(y, full, sub, opts)?.result)
}

pub fn c_test_detail(
    y: &DataMatrix,
    full: &RestrictionSpec,
    sub: &RestrictionSpec,
    opts: &EstimationOptions,
) -> Result<CTestDetail> {
    let coords = nested_coordinates(full, sub)?;
    if sub.overidentification() < 0 {
        return Err(Error::Precondition(format!(
            "the subset has {} restrictions for {} parameters",
            sub.dg(),
            full.d() * full.d()
        )));
    }
    let dof = full.dg() - sub.dg();
    if dof == 0 {
        return Err(Error::Precondition("identical restriction sets: degenerate degrees of freedom".into()));
    }
    let mut o = efficient_opts(opts);
    o.weighting = Weighting::Efficient;
    let est = estimate(y, full, &o)?;
    let sigma = est
        .sigma_hat
        .as_ref()
        .ok_or_else(|| Error::Precondition("efficient estimate carries no variance".into()))?;
    let lambda_full = est.n as f64 * est.objective;

    let w_sub = linalg::ridge_inverse(&sub_matrix(sigma, &coords), o.ridge)?;
    let st = sample_tensors(y, sub)?;
    let mut starts = vec![est.a_hat.clone()];
    if let Some(first) = &est.first_stage {
        starts.push(first.a_hat.clone());
    }
    starts.push(estimate_from_tensors(&st, sub, None, &o)?.best.x);
    let mut best = f64::INFINITY;
    for a0 in &starts {
        let fit = minimize(a0, &st.s2, &st.tr, Some(&st.mean), sub, Some(&w_sub), &o.lm)?;
        best = best.min(fit.objective);
    }
    let lambda_sub = st.n as f64 * best;
    let raw = lambda_full - lambda_sub;
    if raw < 0.0 {
        log::debug!("negative C statistic {raw:e} floored at zero");
    }
    Ok(CTestDetail { result: TestResult::new(raw.max(0.0), dof)?, lambda_full, lambda_sub })
}
