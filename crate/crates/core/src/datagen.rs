//! Error generators with known cumulants, and the Monte Carlo harness.
//!
//! Every model is standardized analytically: population mean zero and
//! population covariance `I_d`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::estimator::{
    estimate, estimate_from_tensors, EstimationOptions, RestrictionSpec, SampleTensors, Weighting,
};
use crate::linalg;
use crate::metrics::{error_metrics, ErrorMetrics};
use crate::restrictions::PatternKind;
use crate::statistics::{cumulant_family, moment_family, DataMatrix, StatKind, TensorFamily};
use crate::tensor::{multilinear_apply, Matrix, SymmetricTensor};

pub const NUM_DENSITIES: usize = 9;

#[derive(Debug, Clone, Copy)]
enum Base {
    StudentT(f64),
    /// `(weight, mean, sd)` components.
    Mixture(&'static [(f64, f64, f64)]),
    /// On `[-1, 1]`.
    Uniform,
    Exponential,
    /// Scale 1.
    Laplace,
}

const MENU: [Base; NUM_DENSITIES] = [
    Base::StudentT(5.0),
    Base::Mixture(&[(0.2, 0.0, 1.0), (0.2, 0.5, 2.0 / 3.0), (0.6, 13.0 / 12.0, 5.0 / 9.0)]),
    Base::Mixture(&[(0.5, -1.5, 0.5), (0.5, 1.5, 0.5)]),
    Base::Mixture(&[(0.5, -2.0, 1.0), (0.5, 2.0, 1.0)]),
    Base::Mixture(&[(0.9, 0.0, 1.0), (0.1, 3.0, 1.0)]),
    Base::Uniform,
    Base::Exponential,
    Base::Laplace,
    Base::Mixture(&[(0.35, -1.8, 0.5), (0.65, 0.8, 0.6)]),
];

fn double_factorial(k: usize) -> f64 {
    (1..=k).rev().step_by(2).map(|v| v as f64).product()
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `E G^k` for standard normal `G`.
fn normal_moment(k: usize) -> f64 {
    if k % 2 == 1 {
        0.0
    } else if k == 0 {
        1.0
    } else {
        double_factorial(k - 1)
    }
}

/// `E |G|^q` for real `q > -1`.
fn normal_abs_moment(q: f64) -> f64 {
    2f64.powf(q / 2.0) * gamma((q + 1.0) / 2.0) / std::f64::consts::PI.sqrt()
}

/// Cumulants `κ_1..κ_m` from raw moments `μ_1..μ_m` (index 0 holds order 1).
pub fn univariate_cumulants(moments: &[f64]) -> Vec<f64> {
    let m = moments.len();
    let mu = |k: usize| if k == 0 { 1.0 } else { moments[k - 1] };
    let mut kappa = vec![0.0; m];
    for n in 1..=m {
        let mut v = mu(n);
        for j in 1..n {
            v -= binom(n - 1, j - 1) * kappa[j - 1] * mu(n - j);
        }
        kappa[n - 1] = v;
    }
    kappa
}

impl Base {
    fn raw_moment(&self, k: usize) -> Option<f64> {
        match *self {
            Base::StudentT(nu) => {
                if k % 2 == 1 {
                    return if (k as f64) < nu { Some(0.0) } else { None };
                }
                if k as f64 >= nu {
                    return None;
                }
                Some((1..=k / 2).map(|m| nu * (2 * m - 1) as f64 / (nu - 2.0 * m as f64)).product())
            }
            Base::Mixture(comps) => Some(
                comps
                    .iter()
                    .map(|&(w, mu, sd)| {
                        w * (0..=k).map(|j| binom(k, j) * mu.powi((k - j) as i32) * sd.powi(j as i32) * normal_moment(j)).sum::<f64>()
                    })
                    .sum(),
            ),
            Base::Uniform => Some(if k % 2 == 1 { 0.0 } else { 1.0 / (k + 1) as f64 }),
            Base::Exponential => Some(factorial(k)),
            Base::Laplace => Some(if k % 2 == 1 { 0.0 } else { factorial(k) }),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Base::StudentT(nu) => {
                let g: f64 = rng.sample(StandardNormal);
                let c: f64 = ChiSquared::new(nu).expect("positive dof").sample(rng);
                g / (c / nu).sqrt()
            }
            Base::Mixture(comps) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = comps[comps.len() - 1];
                for &c in comps {
                    acc += c.0;
                    if u < acc {
                        pick = c;
                        break;
                    }
                }
                let g: f64 = rng.sample(StandardNormal);
                pick.1 + pick.2 * g
            }
            Base::Uniform => rng.random_range(-1.0..1.0),
            Base::Exponential => rng.sample(Exp1),
            Base::Laplace => {
                let e: f64 = rng.sample(Exp1);
                if rng.random::<bool>() {
                    e
                } else {
                    -e
                }
            }
        }
    }
}

/// One of the nine standardized univariate densities.
#[derive(Debug, Clone, Copy)]
pub struct Density {
    id: usize,
    base: Base,
    mean: f64,
    sd: f64,
}

impl Density {
    pub fn new(id: usize) -> Result<Self> {
        if !(1..=NUM_DENSITIES).contains(&id) {
            return Err(Error::InvalidArgument(format!("density id {id} outside 1..={NUM_DENSITIES}")));
        }
        let base = MENU[id - 1];
        let m1 = base.raw_moment(1).expect("finite mean");
        let m2 = base.raw_moment(2).expect("finite variance");
        Ok(Density { id, base, mean: m1, sd: (m2 - m1 * m1).sqrt() })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// `E X^k` of the standardized variable, `None` if infinite.
    pub fn moment(&self, k: usize) -> Option<f64> {
        let mut v = 0.0;
        for j in 0..=k {
            v += binom(k, j) * self.base.raw_moment(j)? * (-self.mean).powi((k - j) as i32);
        }
        Some(v / self.sd.powi(k as i32))
    }

    pub fn cumulant(&self, k: usize) -> Option<f64> {
        let m: Option<Vec<f64>> = (1..=k).map(|j| self.moment(j)).collect();
        m.map(|m| univariate_cumulants(&m)[k - 1])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        (self.base.sample(rng) - self.mean) / self.sd
    }
}

/// Law of the variance multiplier `V` in `X = √V Σ^{1/2} G`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingLaw {
    /// `V ≡ 1`: Gaussian.
    Constant,
    /// `V = ν / χ²_ν`: multivariate Student t.
    StudentT { nu: f64 },
    /// `V ~ Exp(1)`: multivariate Laplace.
    Laplace,
}

impl MixingLaw {
    fn validate(&self) -> Result<()> {
        match *self {
            MixingLaw::StudentT { nu } if !(nu > 2.0 && nu.is_finite()) => {
                Err(Error::InvalidArgument(format!("Student t needs nu > 2 for a finite covariance, got {nu}")))
            }
            _ => Ok(()),
        }
    }

    /// `E V^p`, `None` when infinite.
    pub fn moment(&self, p: f64) -> Option<f64> {
        match *self {
            MixingLaw::Constant => Some(1.0),
            MixingLaw::StudentT { nu } => {
                if p >= nu / 2.0 {
                    None
                } else {
                    Some((nu / 2.0).powf(p) * gamma(nu / 2.0 - p) / gamma(nu / 2.0))
                }
            }
            MixingLaw::Laplace => Some(gamma(p + 1.0)),
        }
    }

    /// `κ_l(V)`.
    pub fn cumulant(&self, l: usize) -> Option<f64> {
        let m: Option<Vec<f64>> = (1..=l).map(|j| self.moment(j as f64)).collect();
        m.map(|m| univariate_cumulants(&m)[l - 1])
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            MixingLaw::Constant => 1.0,
            MixingLaw::StudentT { nu } => nu / ChiSquared::new(nu).expect("positive dof").sample(rng),
            MixingLaw::Laplace => rng.sample(Exp1),
        }
    }
}

/// `Σ` over perfect matchings of `idx` of `Π m[i_a, i_b]`.
pub fn pairing_sum(m: &Matrix, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 1.0;
    }
    if idx.len() % 2 == 1 {
        return 0.0;
    }
    let first = idx[0];
    let rest = &idx[1..];
    let mut total = 0.0;
    for k in 0..rest.len() {
        let w = m[(first, rest[k])];
        if w == 0.0 {
            continue;
        }
        let others: Vec<usize> = rest.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, &v)| v).collect();
        total += w * pairing_sum(m, &others);
    }
    total
}

fn check_psd(name: &str, m: &Matrix, d: usize) -> Result<()> {
    if m.nrows() != d || m.ncols() != d {
        return Err(Error::DimensionMismatch(format!("{name} must be {d}x{d}")));
    }
    if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) || m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{name} must be symmetric and finite")));
    }
    linalg::psd_sqrt(m).map_err(|_| Error::InvalidArgument(format!("{name} is not positive semidefinite")))?;
    Ok(())
}

/// Order-`r` cumulant of `√V Σ^{1/2} G`: zero for odd `r`, otherwise
/// `κ_{r/2}(V)` times the pairing sum of `Σ`.
pub fn population_cumulant_scale_mixture(law: &MixingLaw, sigma: &Matrix, r: usize) -> Result<SymmetricTensor> {
    law.validate()?;
    let d = sigma.nrows();
    check_psd("sigma", sigma, d)?;
    if r == 0 {
        return Err(Error::InvalidArgument("order must be positive".into()));
    }
    if r % 2 == 1 {
        return Ok(SymmetricTensor::zeros(d, r));
    }
    let k = law
        .cumulant(r / 2)
        .ok_or_else(|| Error::Unsupported(format!("order-{} cumulant of the mixing law is infinite", r / 2)))?;
    Ok(SymmetricTensor::from_fn(d, r, |ix| k * pairing_sum(sigma, ix)))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("mixing weight must lie in (0, 1), got {gamma}")));
    }
    Ok(())
}

/// Order-`r` cumulant of `N(0, Σ_1)` w.p. `1-γ` and `N(0, Σ_2)` w.p. `γ`.
pub fn population_cumulant_gaussian_mixture(gamma: f64, sigma1: &Matrix, sigma2: &Matrix, r: usize) -> Result<SymmetricTensor> {
    check_gamma(gamma)?;
    let d = sigma1.nrows();
    check_psd("sigma1", sigma1, d)?;
    check_psd("sigma2", sigma2, d)?;
    let delta = sigma2 - sigma1;
    match r {
        0 => Err(Error::InvalidArgument("order must be positive".into())),
        2 => {
            let c = sigma1 + &delta * gamma;
            Ok(SymmetricTensor::from_fn(d, 2, |ix| c[(ix[0], ix[1])]))
        }
        _ if r % 2 == 1 => Ok(SymmetricTensor::zeros(d, r)),
        _ => {
            let bern = univariate_cumulants(&vec![gamma; r / 2]);
            let k = bern[r / 2 - 1];
            Ok(SymmetricTensor::from_fn(d, r, |ix| k * pairing_sum(&delta, ix)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorModel {
    /// Independent components drawn from the density menu (ids 1..=9).
    Independent { densities: Vec<usize> },
    ScaleMixture {
        #[serde(with = "crate::linalg::rows_serde")]
        sigma: Matrix,
        law: MixingLaw,
    },
    GaussianMixture {
        gamma: f64,
        #[serde(with = "crate::linalg::rows_serde")]
        sigma1: Matrix,
        #[serde(with = "crate::linalg::rows_serde")]
        sigma2: Matrix,
    },
    /// `ε_i ∝ sign(Z_i)|Z_i|^{p_i}` with `Z = √V G` spherical.
    Transelliptical { law: MixingLaw, exponents: Vec<f64> },
}

impl ErrorModel {
    pub fn dim(&self) -> usize {
        match self {
            ErrorModel::Independent { densities } => densities.len(),
            ErrorModel::ScaleMixture { sigma, .. } => sigma.nrows(),
            ErrorModel::GaussianMixture { sigma1, .. } => sigma1.nrows(),
            ErrorModel::Transelliptical { exponents, .. } => exponents.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(Error::InvalidArgument("error model has dimension 0".into()));
        }
        match self {
            ErrorModel::Independent { densities } => {
                for &id in densities {
                    Density::new(id)?;
                }
            }
            ErrorModel::ScaleMixture { sigma, law } => {
                law.validate()?;
                check_psd("sigma", sigma, sigma.nrows())?;
                linalg::inv_sqrt_spd(sigma).map_err(|_| Error::InvalidArgument("sigma is singular".into()))?;
            }
            ErrorModel::GaussianMixture { gamma, sigma1, sigma2 } => {
                check_gamma(*gamma)?;
                check_psd("sigma1", sigma1, sigma1.nrows())?;
                check_psd("sigma2", sigma2, sigma1.nrows())?;
                let c = sigma1 * (1.0 - gamma) + sigma2 * *gamma;
                linalg::inv_sqrt_spd(&c).map_err(|_| Error::InvalidArgument("mixture covariance is singular".into()))?;
            }
            ErrorModel::Transelliptical { law, exponents } => {
                law.validate()?;
                for &p in exponents {
                    if !(p > 0.0 && p.is_finite()) {
                        return Err(Error::InvalidArgument(format!("exponents must be positive, got {p}")));
                    }
                    if law.moment(p).is_none() {
                        return Err(Error::InvalidArgument(format!("exponent {p} gives infinite variance")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Population cumulants of orders `1..=r` of the standardized errors.
    pub fn cumulant_family(&self, r: usize) -> Result<TensorFamily> {
        self.validate()?;
        if let ErrorModel::Transelliptical { .. } = self {
            return cumulant_family(&self.moment_family(r)?, r);
        }
        TensorFamily::new((1..=r).map(|p| self.cumulant(p)).collect::<Result<_>>()?)
    }

    /// Population moments of orders `1..=r` of the standardized errors.
    pub fn moment_family(&self, r: usize) -> Result<TensorFamily> {
        self.validate()?;
        if let ErrorModel::Transelliptical { law, exponents } = self {
            return TensorFamily::new((1..=r).map(|p| transelliptical_moment(law, exponents, p)).collect::<Result<_>>()?);
        }
        moment_family(&self.cumulant_family(r)?, r)
    }

    pub fn cumulant(&self, r: usize) -> Result<SymmetricTensor> {
        self.validate()?;
        if r == 0 {
            return Err(Error::InvalidArgument("order must be positive".into()));
        }
        let d = self.dim();
        match self {
            ErrorModel::Independent { densities } => {
                let diag = densities
                    .iter()
                    .map(|&id| {
                        Density::new(id)?.cumulant(r).ok_or_else(|| {
                            Error::Unsupported(format!("density {id} has no finite cumulant of order {r}"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SymmetricTensor::diagonal(r, &diag))
            }
            ErrorModel::ScaleMixture { sigma, law } => {
                let s = linalg::inv_sqrt_spd(&(sigma * law.moment(1.0).expect("validated")))?;
                multilinear_apply(&s, &population_cumulant_scale_mixture(law, sigma, r)?)
            }
            ErrorModel::GaussianMixture { gamma, sigma1, sigma2 } => {
                let c = sigma1 * (1.0 - gamma) + sigma2 * *gamma;
                let s = linalg::inv_sqrt_spd(&c)?;
                multilinear_apply(&s, &population_cumulant_gaussian_mixture(*gamma, sigma1, sigma2, r)?)
            }
            ErrorModel::Transelliptical { .. } => {
                let fam = self.cumulant_family(r)?;
                let t = fam.order(r).clone();
                debug_assert_eq!(t.dim(), d);
                Ok(t)
            }
        }
    }

    /// One standardized draw.
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R, sampler: &Sampler, out: &mut [f64]) {
        let d = self.dim();
        match (self, sampler) {
            (ErrorModel::Independent { .. }, Sampler::Independent(dens)) => {
                for (o, den) in out.iter_mut().zip(dens) {
                    *o = den.sample(rng);
                }
            }
            (ErrorModel::ScaleMixture { law, .. }, Sampler::Linear(roots)) => {
                let v = law.sample(rng).sqrt();
                let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let root = &roots[0];
                for i in 0..d {
                    out[i] = v * (0..d).map(|j| root[(i, j)] * g[j]).sum::<f64>();
                }
            }
            (ErrorModel::GaussianMixture { gamma, .. }, Sampler::Linear(roots)) => {
                let h = rng.random::<f64>() < *gamma;
                let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let root = &roots[usize::from(h)];
                for i in 0..d {
                    out[i] = (0..d).map(|j| root[(i, j)] * g[j]).sum::<f64>();
                }
            }
            (ErrorModel::Transelliptical { law, exponents }, Sampler::Power(sd)) => {
                let v = law.sample(rng).sqrt();
                for i in 0..d {
                    let z: f64 = v * rng.sample::<f64, _>(StandardNormal);
                    out[i] = z.signum() * z.abs().powf(exponents[i]) / sd[i];
                }
            }
            _ => unreachable!("sampler built for another model"),
        }
    }

    /// Precomputed standardizing quantities for sampling.
    pub fn sampler(&self) -> Result<Sampler> {
        self.validate()?;
        Ok(match self {
            ErrorModel::Independent { densities } => {
                Sampler::Independent(densities.iter().map(|&id| Density::new(id)).collect::<Result<_>>()?)
            }
            ErrorModel::ScaleMixture { sigma, law } => {
                let s = linalg::inv_sqrt_spd(&(sigma * law.moment(1.0).expect("validated")))?;
                Sampler::Linear(vec![s * linalg::psd_sqrt(sigma)?])
            }
            ErrorModel::GaussianMixture { gamma, sigma1, sigma2 } => {
                let c = sigma1 * (1.0 - gamma) + sigma2 * *gamma;
                let s = linalg::inv_sqrt_spd(&c)?;
                Sampler::Linear(vec![&s * linalg::psd_sqrt(sigma1)?, &s * linalg::psd_sqrt(sigma2)?])
            }
            ErrorModel::Transelliptical { law, exponents } => Sampler::Power(
                exponents
                    .iter()
                    .map(|&p| (law.moment(p).expect("validated") * normal_abs_moment(2.0 * p)).sqrt())
                    .collect(),
            ),
        })
    }
}

/// Model-specific state reused across draws.
#[derive(Debug, Clone)]
pub enum Sampler {
    Independent(Vec<Density>),
    /// Standardized square-root factors, one per mixture component.
    Linear(Vec<Matrix>),
    /// Per-component standard deviations before scaling.
    Power(Vec<f64>),
}

fn transelliptical_moment(law: &MixingLaw, exponents: &[f64], r: usize) -> Result<SymmetricTensor> {
    let d = exponents.len();
    let sd2: Vec<f64> = exponents.iter().map(|&p| law.moment(p).unwrap_or(f64::NAN) * normal_abs_moment(2.0 * p)).collect();
    let mut infinite = false;
    let t = SymmetricTensor::from_fn(d, r, |ix| {
        let mut counts = vec![0usize; d];
        for &i in ix {
            counts[i] += 1;
        }
        if counts.iter().any(|c| c % 2 == 1) {
            return 0.0;
        }
        let s: f64 = counts.iter().zip(exponents).map(|(&c, &p)| c as f64 * p / 2.0).sum();
        let Some(ev) = law.moment(s) else {
            infinite = true;
            return f64::NAN;
        };
        let mut v = ev;
        for (i, &c) in counts.iter().enumerate() {
            if c > 0 {
                v *= normal_abs_moment(exponents[i] * c as f64) / sd2[i].powf(c as f64 / 2.0);
            }
        }
        v
    });
    if infinite {
        return Err(Error::Unsupported(format!("order-{r} moments are infinite for this design")));
    }
    Ok(t)
}

/// `n` i.i.d. standardized draws from a fixed seed.
pub fn sample_errors(model: &ErrorModel, n: usize, seed: u64) -> Result<DataMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_errors_with(model, n, &mut rng)
}

pub fn sample_errors_with<R: Rng + ?Sized>(model: &ErrorModel, n: usize, rng: &mut R) -> Result<DataMatrix> {
    let sampler = model.sampler()?;
    let d = model.dim();
    let mut data = Matrix::zeros(n, d);
    let mut row = vec![0.0; d];
    for s in 0..n {
        model.sample_one(rng, &sampler, &mut row);
        for j in 0..d {
            data[(s, j)] = row[j];
        }
    }
    DataMatrix::new(data)
}

/// Random `A_0` with standard normal entries and condition number ≤ 10.
pub fn random_mixing_matrix(d: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa076_1d64_78bd_642f);
    loop {
        let a = Matrix::from_fn(d, d, |_, _| rng.sample(StandardNormal));
        if linalg::condition_number(&a) <= 10.0 {
            return a;
        }
    }
}

/// Stream for replicate `rep` of a run seeded with `seed`.
pub fn replicate_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64 + 1);
    rng
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub label: Option<String>,
    pub model: ErrorModel,
    /// Drawn by [`random_mixing_matrix`] from `seed` when absent.
    #[serde(default, with = "crate::linalg::opt_rows_serde")]
    pub a0: Option<Matrix>,
    pub n: usize,
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    pub spec: RestrictionSpec,
    #[serde(default)]
    pub options: EstimationOptions,
    /// Estimate from exact population tensors instead of samples.
    #[serde(default)]
    pub population: bool,
}

impl ScenarioConfig {
    pub fn mixing_matrix(&self) -> Result<Matrix> {
        let d = self.model.dim();
        let a0 = match &self.a0 {
            Some(a) => a.clone(),
            None => random_mixing_matrix(d, self.seed),
        };
        if a0.nrows() != d || a0.ncols() != d {
            return Err(Error::DimensionMismatch(format!("A_0 must be {d}x{d}")));
        }
        linalg::inverse(&a0)?;
        Ok(a0)
    }

    fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.spec.d() != self.model.dim() {
            return Err(Error::DimensionMismatch(format!(
                "restrictions are for d = {}, the error model has d = {}",
                self.spec.d(),
                self.model.dim()
            )));
        }
        if self.replicates == 0 {
            return Err(Error::InvalidArgument("at least one replicate is required".into()));
        }
        if !self.population && self.n <= self.spec.r() {
            return Err(Error::SampleTooSmall { n: self.n, r: self.spec.r() });
        }
        Ok(())
    }
}

/// Exact tensors of `Y = A_0^{-1} ε`.
pub fn population_tensors(model: &ErrorModel, a0: &Matrix, spec: &RestrictionSpec, n: usize) -> Result<SampleTensors> {
    let r = spec.r();
    let b = linalg::inverse(a0)?;
    let fam = match spec.stat_kind {
        StatKind::Moment => model.moment_family(r)?,
        StatKind::Cumulant => model.cumulant_family(r)?,
    };
    Ok(SampleTensors {
        n,
        mean: vec![0.0; model.dim()],
        s2: multilinear_apply(&b, fam.order(2))?,
        tr: multilinear_apply(&b, fam.order(r))?,
    })
}

/// Errors of one replicate under both weightings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub identity: ErrorMetrics,
    pub efficient: Option<ErrorMetrics>,
    pub converged: bool,
}

pub fn run_replicate(cfg: &ScenarioConfig, a0: &Matrix, rep: usize) -> Result<ReplicateOutcome> {
    let mut opts = cfg.options.clone();
    opts.seed = cfg.options.seed.wrapping_add(cfg.seed).wrapping_add(rep as u64);
    opts.standard_errors = false;
    if cfg.population {
        let st = population_tensors(&cfg.model, a0, &cfg.spec, cfg.n.max(1))?;
        let fit = estimate_from_tensors(&st, &cfg.spec, None, &opts)?;
        return Ok(ReplicateOutcome {
            identity: error_metrics(&fit.best.x, a0)?,
            efficient: None,
            converged: fit.best.converged,
        });
    }
    if opts.weighting == Weighting::Identity {
        opts.weighting = Weighting::Efficient;
    }
    let mut rng = replicate_rng(cfg.seed, rep);
    let eps = sample_errors_with(&cfg.model, cfg.n, &mut rng)?;
    let y = eps.transform(&linalg::inverse(a0)?)?;
    let est = estimate(&y, &cfg.spec, &opts)?;
    let first = est.first_stage.as_ref().expect("efficient estimate keeps its first stage");
    Ok(ReplicateOutcome {
        identity: error_metrics(&first.a_hat, a0)?,
        efficient: Some(error_metrics(&est.a_hat, a0)?),
        converged: est.converged && first.converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightingSummary {
    pub mean_d_f: f64,
    pub mean_d_a: f64,
    pub median_d_f: f64,
}

impl WeightingSummary {
    fn from_metrics<'a>(m: impl Iterator<Item = &'a ErrorMetrics>) -> Option<Self> {
        let (mut f, a): (Vec<f64>, Vec<f64>) = m.map(|e| (e.d_f, e.d_a)).unzip();
        if f.is_empty() {
            return None;
        }
        let k = f.len() as f64;
        let mean_d_f = f.iter().sum::<f64>() / k;
        let mean_d_a = a.iter().sum::<f64>() / k;
        f.sort_by(f64::total_cmp);
        let mid = f.len() / 2;
        let median_d_f = if f.len() % 2 == 1 { f[mid] } else { 0.5 * (f[mid - 1] + f[mid]) };
        Some(WeightingSummary { mean_d_f, mean_d_a, median_d_f })
    }
}

/// Per-cell averages over replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub label: String,
    pub d: usize,
    pub r: usize,
    pub stat_kind: StatKind,
    pub pattern: PatternKind,
    pub n: usize,
    pub replicates: usize,
    pub failures: usize,
    pub non_converged: usize,
    pub identity: Option<WeightingSummary>,
    pub efficient: Option<WeightingSummary>,
}

/// Summary and the per-replicate outcomes (`None` for failed replicates).
pub fn run_scenario_detail(cfg: &ScenarioConfig) -> Result<(ScenarioSummary, Vec<Option<ReplicateOutcome>>)> {
    cfg.validate()?;
    let a0 = cfg.mixing_matrix()?;
    let outcomes: Vec<Option<ReplicateOutcome>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| match run_replicate(cfg, &a0, rep) {
            Ok(o) => Some(o),
            Err(e) => {
                log::warn!("replicate {rep} failed: {e}");
                None
            }
        })
        .collect();
    let ok: Vec<&ReplicateOutcome> = outcomes.iter().flatten().collect();
    let summary = ScenarioSummary {
        label: cfg.label.clone().unwrap_or_default(),
        d: cfg.spec.d(),
        r: cfg.spec.r(),
        stat_kind: cfg.spec.stat_kind,
        pattern: cfg.spec.pattern.kind(),
        n: cfg.n,
        replicates: cfg.replicates,
        failures: cfg.replicates - ok.len(),
        non_converged: ok.iter().filter(|o| !o.converged).count(),
        identity: WeightingSummary::from_metrics(ok.iter().map(|o| &o.identity)),
        efficient: WeightingSummary::from_metrics(ok.iter().filter_map(|o| o.efficient.as_ref())),
    };
    Ok((summary, outcomes))
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioSummary> {
    Ok(run_scenario_detail(cfg)?.0)
}

/// A list of design cells, run in order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Campaign {
    pub cells: Vec<ScenarioConfig>,
}

pub fn run_campaign(c: &Campaign) -> Result<Vec<ScenarioSummary>> {
    c.cells.iter().map(run_scenario).collect()
}

pub const SUMMARY_HEADER: [&str; 13] = [
    "label",
    "d",
    "r",
    "stat",
    "pattern",
    "n",
    "replicates",
    "failures",
    "non_converged",
    "d_f_identity",
    "d_a_identity",
    "d_f_efficient",
    "d_a_efficient",
];

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

/// One CSV row per cell; missing weightings are left empty.
pub fn write_summary_csv<W: Write>(summaries: &[ScenarioSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for s in summaries {
        let stat = match s.stat_kind {
            StatKind::Moment => "moment",
            StatKind::Cumulant => "cumulant",
        };
        w.write_record([
            s.label.clone(),
            s.d.to_string(),
            s.r.to_string(),
            stat.to_string(),
            s.pattern.to_string(),
            s.n.to_string(),
            s.replicates.to_string(),
            s.failures.to_string(),
            s.non_converged.to_string(),
            num(s.identity.as_ref().map(|m| m.mean_d_f)),
            num(s.identity.as_ref().map(|m| m.mean_d_a)),
            num(s.efficient.as_ref().map(|m| m.mean_d_f)),
            num(s.efficient.as_ref().map(|m| m.mean_d_a)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::restrictions::make_pattern;

    #[test]
    fn menu_is_standardized() {
        for id in 1..=NUM_DENSITIES {
            let den = Density::new(id).unwrap();
            assert!(den.moment(1).unwrap().abs() < 1e-12, "density {id}");
            assert!((den.moment(2).unwrap() - 1.0).abs() < 1e-12, "density {id}");
        }
        assert!(Density::new(0).is_err() && Density::new(10).is_err());
    }

    #[test]
    fn known_density_cumulants() {
        // t5: kurtosis 6; uniform: -6/5; exponential: skew 2, excess kurtosis 6; Laplace: 3
        assert!((Density::new(1).unwrap().cumulant(4).unwrap() - 6.0).abs() < 1e-12);
        assert!(Density::new(1).unwrap().cumulant(6).is_none());
        assert!((Density::new(6).unwrap().cumulant(4).unwrap() + 1.2).abs() < 1e-12);
        let e = Density::new(7).unwrap();
        assert!((e.cumulant(3).unwrap() - 2.0).abs() < 1e-12);
        assert!((e.cumulant(4).unwrap() - 6.0).abs() < 1e-12);
        assert!((e.cumulant(5).unwrap() - 24.0).abs() < 1e-9);
        assert!((Density::new(8).unwrap().cumulant(4).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn univariate_cumulant_recursion() {
        // standard normal moments give (0, 1, 0, 0, 0, 0)
        let m: Vec<f64> = (1..=6).map(normal_moment).collect();
        let k = univariate_cumulants(&m);
        assert!(k.iter().enumerate().all(|(i, v)| if i == 1 { (v - 1.0).abs() < 1e-12 } else { v.abs() < 1e-12 }));
        // Poisson(1): all cumulants are 1, moments are Bell numbers
        let k = univariate_cumulants(&[1.0, 2.0, 5.0, 15.0, 52.0]);
        assert!(k.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn pairing_counts() {
        let i = Matrix::identity(3, 3);
        assert_eq!(pairing_sum(&i, &[0, 0, 0, 0]), 3.0);
        assert_eq!(pairing_sum(&i, &[0, 0, 1, 1]), 1.0);
        assert_eq!(pairing_sum(&i, &[0, 0, 0, 1]), 0.0);
        assert_eq!(pairing_sum(&i, &[0; 6]), 15.0);
        assert_eq!(pairing_sum(&i, &[0, 0, 0, 0, 1, 1]), 3.0);
    }

    #[test]
    fn scale_mixture_identity_covariance() {
        let law = MixingLaw::Laplace;
        let k4 = population_cumulant_scale_mixture(&law, &Matrix::identity(2, 2), 4).unwrap();
        // κ_2(V) = 1 for Exp(1)
        assert!((k4.get(&[0, 0, 0, 0]) - 3.0).abs() < 1e-12);
        assert!((k4.get(&[0, 0, 1, 1]) - 1.0).abs() < 1e-12);
        assert_eq!(k4.get(&[0, 0, 0, 1]), 0.0);
        let k3 = population_cumulant_scale_mixture(&law, &Matrix::identity(2, 2), 3).unwrap();
        assert_eq!(k3.max_abs(), 0.0);
        let g = population_cumulant_scale_mixture(&MixingLaw::Constant, &Matrix::identity(2, 2), 4).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(population_cumulant_scale_mixture(&MixingLaw::StudentT { nu: 5.0 }, &Matrix::identity(2, 2), 6).is_err());
    }

    #[test]
    fn gaussian_mixture_scalar() {
        let (g, s1, s2) = (0.3, 0.5, 2.0);
        let k4 = population_cumulant_gaussian_mixture(g, &Matrix::from_element(1, 1, s1), &Matrix::from_element(1, 1, s2), 4)
            .unwrap();
        let delta: f64 = s2 - s1;
        assert!((k4.values()[0] - 3.0 * g * (1.0 - g) * delta * delta).abs() < 1e-12);
        let same = population_cumulant_gaussian_mixture(0.4, &Matrix::identity(2, 2), &Matrix::identity(2, 2), 4).unwrap();
        assert_eq!(same.max_abs(), 0.0);
        assert!(population_cumulant_gaussian_mixture(1.0, &Matrix::identity(2, 2), &Matrix::identity(2, 2), 4).is_err());
        let bad = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(population_cumulant_gaussian_mixture(0.5, &bad, &Matrix::identity(2, 2), 4).is_err());
    }

    #[test]
    fn models_have_identity_covariance() {
        let models = [
            ErrorModel::Independent { densities: vec![2, 7, 9] },
            ErrorModel::ScaleMixture {
                sigma: Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
                law: MixingLaw::StudentT { nu: 9.0 },
            },
            ErrorModel::GaussianMixture {
                gamma: 0.3,
                sigma1: Matrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 1.0]),
                sigma2: Matrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.5]),
            },
            ErrorModel::Transelliptical { law: MixingLaw::Laplace, exponents: vec![1.0 / 3.0, 0.5] },
        ];
        for m in &models {
            let d = m.dim();
            let fam = m.moment_family(2).unwrap();
            assert!(fam.order(1).max_abs() < 1e-12);
            let c = fam.order(2);
            for (ix, v) in c.iter() {
                let expect = if ix.is_diagonal() { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-10, "{m:?} {ix} {v}");
            }
            let eps = sample_errors(m, 20_000, 3).unwrap();
            assert_eq!(eps.d(), d);
            let n = eps.n() as f64;
            let mean = eps.matrix().row_sum() / n;
            assert!(mean.amax() < 0.1, "{m:?}");
            let cov = eps.matrix().transpose() * eps.matrix() / n;
            assert!((cov - Matrix::identity(d, d)).amax() < 0.15, "{m:?}");
        }
    }

    #[test]
    fn transelliptical_moments_are_reflectional() {
        let m = ErrorModel::Transelliptical { law: MixingLaw::StudentT { nu: 30.0 }, exponents: vec![1.0 / 3.0, 1.0 / 3.0] };
        let k4 = m.cumulant(4).unwrap();
        for (ix, v) in k4.iter() {
            if !ix.is_even() {
                assert_eq!(v, 0.0);
            }
        }
        assert_eq!(m.cumulant(3).unwrap().max_abs(), 0.0);
        // unit exponents reduce to the scale mixture
        let t = ErrorModel::Transelliptical { law: MixingLaw::Laplace, exponents: vec![1.0, 1.0] };
        let s = ErrorModel::ScaleMixture { sigma: Matrix::identity(2, 2), law: MixingLaw::Laplace };
        assert!(t.cumulant(4).unwrap().lin_comb(1.0, &s.cumulant(4).unwrap(), -1.0).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let m = ErrorModel::Independent { densities: vec![1, 5] };
        assert_eq!(sample_errors(&m, 50, 9).unwrap(), sample_errors(&m, 50, 9).unwrap());
        assert_ne!(sample_errors(&m, 50, 9).unwrap(), sample_errors(&m, 50, 10).unwrap());
    }

    #[test]
    fn population_scenario_recovers_a0() {
        let spec = RestrictionSpec::new(make_pattern(PatternKind::Diagonal, 2, 3).unwrap(), StatKind::Cumulant);
        let cfg = ScenarioConfig {
            label: None,
            model: ErrorModel::Independent { densities: vec![2, 7] },
            a0: None,
            n: 1000,
            replicates: 2,
            seed: 4,
            spec,
            options: EstimationOptions::default(),
            population: true,
        };
        let s = run_scenario(&cfg).unwrap();
        assert_eq!(s.failures, 0);
        assert!(s.identity.unwrap().mean_d_f < 1e-6);
    }

    #[test]
    fn summary_csv_layout() {
        let s = ScenarioSummary {
            label: "x".into(),
            d: 2,
            r: 3,
            stat_kind: StatKind::Moment,
            pattern: PatternKind::Diagonal,
            n: 500,
            replicates: 3,
            failures: 0,
            non_converged: 0,
            identity: Some(WeightingSummary { mean_d_f: 0.5, mean_d_a: 0.25, median_d_f: 0.5 }),
            efficient: None,
        };
        let mut buf = Vec::new();
        write_summary_csv(&[s], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], SUMMARY_HEADER.join(","));
        assert!(lines[1].starts_with("x,2,3,moment,diagonal,500,3,0,0,5.0000000000000000e-1,"));
        assert!(lines[1].ends_with(",,"));
    }
}
