//! Monte Carlo checks of the error generators, the scenario runner and the
//! specification tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use zeroid::datagen::{random_mixing_matrix, replicate_rng, run_scenario, sample_errors, sample_errors_with, Density};
use zeroid::estimator::{estimate, EstimationOptions, RestrictionSpec, SigmaMethod, Weighting};
use zeroid::inference::{c_test, j_test};
use zeroid::statistics::kstatistic;
use zeroid::{
    make_pattern, DataMatrix, ErrorModel, Matrix, MixingLaw, PatternKind, ScenarioConfig, StatKind, SymmetricTensor,
    ZeroPattern,
};

/// Full-sample k-statistic and batch-based standard errors of its entries.
fn kstat_with_se(eps: &DataMatrix, r: usize, batches: usize) -> (SymmetricTensor, Vec<f64>) {
    let size = eps.n() / batches;
    let full = kstatistic(eps, r).unwrap();
    let parts: Vec<SymmetricTensor> = (0..batches)
        .into_par_iter()
        .map(|b| kstatistic(&eps.select_rows(&(b * size..(b + 1) * size).collect::<Vec<_>>()), r).unwrap())
        .collect();
    let se = (0..full.len())
        .map(|k| {
            let vals: Vec<f64> = parts.iter().map(|p| p.values()[k]).collect();
            let m = vals.iter().sum::<f64>() / batches as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (batches - 1) as f64;
            (var / batches as f64).sqrt()
        })
        .collect();
    (full, se)
}

fn assert_near_zero(t: &SymmetricTensor, se: &[f64], keep: impl Fn(&[usize]) -> bool) {
    let mut checked = 0;
    for (k, (ix, v)) in t.iter().enumerate() {
        if keep(ix.as_slice()) {
            assert!(v.abs() <= 4.0 * se[k], "entry {ix}: {v} with se {}", se[k]);
            checked += 1;
        }
    }
    assert!(checked > 0);
}

fn efficient_plugin(seed: u64) -> EstimationOptions {
    EstimationOptions {
        weighting: Weighting::Efficient,
        sigma_method: SigmaMethod::PlugIn,
        standard_errors: false,
        seed,
        ..EstimationOptions::default()
    }
}

fn diagonal3() -> RestrictionSpec {
    RestrictionSpec::new(make_pattern(PatternKind::Diagonal, 2, 3).unwrap(), StatKind::Moment)
}

#[test]
fn third_kstat_is_unbiased() {
    let dens = Density::new(7).unwrap();
    let kappa3 = dens.cumulant(3).unwrap();
    let reps = 20_000;
    let vals: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replicate_rng(5, rep);
            let rows: Vec<Vec<f64>> = (0..30).map(|_| vec![dens.sample(&mut rng)]).collect();
            kstatistic(&DataMatrix::from_rows(&rows).unwrap(), 3).unwrap().get(&[0, 0, 0])
        })
        .collect();
    let m = vals.iter().sum::<f64>() / reps as f64;
    let sd = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (reps - 1) as f64).sqrt();
    let se = sd / (reps as f64).sqrt();
    assert!((m - kappa3).abs() <= 4.0 * se, "mean {m}, kappa3 {kappa3}, se {se}");
}

#[test]
fn equal_covariance_mixture_is_gaussian() {
    let s = Matrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]);
    let model = ErrorModel::GaussianMixture { gamma: 0.3, sigma1: s.clone(), sigma2: s };
    let eps = sample_errors(&model, 200_000, 13).unwrap();
    let (k4, se) = kstat_with_se(&eps, 4, 100);
    assert_near_zero(&k4, &se, |_| true);
}

#[test]
fn constant_scale_mixture_is_standard_normal() {
    let model = ErrorModel::ScaleMixture { sigma: Matrix::identity(2, 2), law: MixingLaw::Constant };
    let eps = sample_errors(&model, 200_000, 14).unwrap();
    for r in [3, 4] {
        let (k, se) = kstat_with_se(&eps, r, 100);
        assert_near_zero(&k, &se, |_| true);
    }
    let (k2, se) = kstat_with_se(&eps, 2, 100);
    for (k, (ix, v)) in k2.iter().enumerate() {
        let target = if ix.as_slice()[0] == ix.as_slice()[1] { 1.0 } else { 0.0 };
        assert!((v - target).abs() <= 4.0 * se[k], "{ix}: {v}");
    }
}

#[test]
fn cube_root_design_has_reflectional_fourth_cumulants() {
    let model = ErrorModel::Transelliptical { law: MixingLaw::Laplace, exponents: vec![1.0 / 3.0, 1.0 / 3.0] };
    let eps = sample_errors(&model, 1_000_000, 15).unwrap();
    let (k4, se) = kstat_with_se(&eps, 4, 100);
    let odd = |ix: &[usize]| (0..2).any(|i| ix.iter().filter(|&&j| j == i).count() % 2 == 1);
    assert_near_zero(&k4, &se, odd);
    // the even entries are not all zero, so the test has power
    assert!(k4.get(&[0, 0, 1, 1]).abs() > 4.0 * se[k4.iter().position(|(ix, _)| ix.as_slice() == [0, 0, 1, 1]).unwrap()]);
}

#[test]
fn samples_are_standardized() {
    let n = 100_000;
    let bound = 3.0 / (n as f64).sqrt();
    let models = [
        ErrorModel::Independent { densities: vec![6, 3] },
        ErrorModel::GaussianMixture {
            gamma: 0.5,
            sigma1: Matrix::identity(2, 2) * 0.5,
            sigma2: Matrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]),
        },
    ];
    for (k, model) in models.iter().enumerate() {
        let eps = sample_errors(model, n, 16 + k as u64).unwrap();
        let mean = eps.matrix().row_mean();
        assert!(mean.amax() <= bound, "model {k}: mean {mean}");
        let cov = kstatistic(&eps, 2).unwrap();
        for (ix, v) in cov.iter() {
            let target = if ix.as_slice()[0] == ix.as_slice()[1] { 1.0 } else { 0.0 };
            assert!((v - target).abs() <= bound, "model {k}: {ix} = {v}");
        }
    }
}

fn skewed_scenario(replicates: usize) -> ScenarioConfig {
    ScenarioConfig {
        label: Some("skewed".into()),
        model: ErrorModel::Independent { densities: vec![7, 9] },
        a0: None,
        n: 500,
        replicates,
        seed: 3,
        spec: diagonal3(),
        options: efficient_plugin(0),
        population: false,
    }
}

#[test]
fn scenario_error_band_for_skewed_errors() {
    let summary = run_scenario(&skewed_scenario(100)).unwrap();
    assert_eq!(summary.failures, 0);
    for w in [summary.identity.unwrap(), summary.efficient.unwrap()] {
        assert!((0.01..=0.10).contains(&w.mean_d_f), "{w:?}");
    }
}

#[test]
fn scenario_is_seed_deterministic() {
    let cfg = skewed_scenario(12);
    let a = run_scenario(&cfg).unwrap();
    let b = run_scenario(&cfg).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let mut other = cfg.clone();
    other.seed = 4;
    assert_ne!(run_scenario(&other).unwrap(), a);
}

#[test]
fn population_scenario_has_no_error() {
    let mut cfg = skewed_scenario(4);
    cfg.population = true;
    cfg.options.weighting = Weighting::Identity;
    let s = run_scenario(&cfg).unwrap();
    let w = s.identity.unwrap();
    assert!(w.mean_d_f <= 1e-6 && w.mean_d_a <= 1e-6, "{w:?}");
}

/// Errors with `E[ε1² ε2] ≠ 0`, outside the diagonal pattern.
fn violating_errors(n: usize, rng: &mut ChaCha8Rng) -> DataMatrix {
    let a = 0.5f64;
    let mut m = Matrix::zeros(n, 2);
    for s in 0..n {
        let u: f64 = rng.sample(rand_distr::StandardNormal);
        let v: f64 = rng.sample(rand_distr::StandardNormal);
        m[(s, 0)] = u;
        m[(s, 1)] = a * (u * u - 1.0) / 2f64.sqrt() + (1.0 - a * a).sqrt() * v;
    }
    DataMatrix::new(m).unwrap()
}

#[test]
fn j_test_detects_misspecification() {
    let spec = diagonal3();
    let b = random_mixing_matrix(2, 21).try_inverse().unwrap();
    let reps = 200;
    let rejections: Vec<bool> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replicate_rng(21, rep);
            let y = violating_errors(5000, &mut rng).transform(&b).unwrap();
            let opts = efficient_plugin(rep as u64);
            let est = estimate(&y, &spec, &opts).unwrap();
            j_test(&y, &spec, Some(&est), &opts).unwrap().rejects(0.05)
        })
        .collect();
    let rate = rejections.iter().filter(|&&r| r).count() as f64 / reps as f64;
    assert!(rate >= 0.8, "rejection rate {rate}");
}

#[test]
fn c_test_size_for_valid_restrictions() {
    let full = diagonal3();
    let sub = RestrictionSpec::new(ZeroPattern::custom_one_based(2, 3, &[vec![1, 2, 2]]).unwrap(), StatKind::Moment);
    let model = ErrorModel::Independent { densities: vec![2, 9] };
    let b = random_mixing_matrix(2, 22).try_inverse().unwrap();
    let reps = 500;
    let rejections: Vec<bool> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replicate_rng(22, rep);
            let y = sample_errors_with(&model, 2000, &mut rng).unwrap().transform(&b).unwrap();
            c_test(&y, &full, &sub, &efficient_plugin(rep as u64)).unwrap().rejects(0.05)
        })
        .collect();
    let rate = rejections.iter().filter(|&&r| r).count() as f64 / reps as f64;
    assert!((0.02..=0.09).contains(&rate), "rejection rate {rate}");
}

#[test]
fn seeded_samples_repeat() {
    let model = ErrorModel::ScaleMixture { sigma: Matrix::identity(3, 3), law: MixingLaw::StudentT { nu: 6.0 } };
    let a = sample_errors(&model, 50, 9).unwrap();
    assert_eq!(a, sample_errors(&model, 50, 9).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_ne!(a, sample_errors(&model, 50, rng.random()).unwrap());
}
