//! Property tests for the algebraic invariants.

use proptest::prelude::*;

use zeroid::estimator::{objective, residual, RestrictionSpec};
use zeroid::linalg::{signed_permutations, SignedPermutation};
use zeroid::metrics::{amari_error, frobenius_error};
use zeroid::partitions::{enumerate_partitions, kstat_coefficient, mobius, refines};
use zeroid::restrictions::{make_pattern, verify_in_gt, DEFAULT_TOL};
use zeroid::statistics::{cumulant_family, kstatistic, moment_family, TensorFamily};
use zeroid::tensor::{associated_poly_eval, multilinear_apply, project_onto_indices};
use zeroid::{DataMatrix, Matrix, PatternKind, StatKind, SymmetricTensor};

fn dim_order() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=3, 1usize..=4)
}

fn tensor(d: usize, r: usize) -> impl Strategy<Value = SymmetricTensor> {
    let len = zeroid::tensor::num_unique(d, r);
    prop::collection::vec(-2.0f64..2.0, len).prop_map(move |v| SymmetricTensor::from_values(d, r, v).unwrap())
}

fn matrix(d: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.5f64..1.5, d * d).prop_map(move |v| Matrix::from_row_slice(d, d, &v))
}

fn invertible(d: usize) -> impl Strategy<Value = Matrix> {
    matrix(d).prop_map(move |m| m * 0.3 + Matrix::identity(d, d))
}

fn signed_perm(d: usize) -> impl Strategy<Value = SignedPermutation> {
    let all = signed_permutations(d).unwrap();
    (0..all.len()).prop_map(move |k| all[k].clone())
}

fn close(a: &SymmetricTensor, b: &SymmetricTensor, tol: f64) -> bool {
    let scale = 1.0 + a.max_abs().max(b.max_abs());
    a.lin_comb(1.0, b, -1.0).unwrap().max_abs() <= tol * scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn action_composes((t, a, b) in dim_order().prop_flat_map(|(d, r)| (tensor(d, r), matrix(d), matrix(d)))) {
        let lhs = multilinear_apply(&(&a * &b), &t).unwrap();
        let rhs = multilinear_apply(&a, &multilinear_apply(&b, &t).unwrap()).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-10));
    }

    #[test]
    fn action_output_is_symmetric((t, a) in dim_order().prop_flat_map(|(d, r)| (tensor(d, r), matrix(d)))) {
        let dense = zeroid::tensor::multilinear_apply_general(&vec![a.clone(); t.order()], &t).unwrap();
        let sym = multilinear_apply(&a, &t).unwrap();
        let r = t.order();
        let d = t.dim();
        let total = d.pow(r as u32);
        for flat in 0..total {
            let mut idx = vec![0; r];
            let mut rest = flat;
            for k in (0..r).rev() {
                idx[k] = rest % d;
                rest /= d;
            }
            prop_assert!((dense.get(&idx) - sym.get(&idx)).abs() <= 1e-10 * (1.0 + sym.max_abs()));
        }
    }

    #[test]
    fn polynomial_identity((t, a, x) in dim_order().prop_flat_map(|(d, r)| {
        (tensor(d, r), matrix(d), prop::collection::vec(-1.0f64..1.0, d))
    })) {
        // f_{A•T}(x) = f_T(A'x)
        let at = multilinear_apply(&a, &t).unwrap();
        let xv = nalgebra::DVector::from_vec(x.clone());
        let ax: Vec<f64> = (a.transpose() * xv).iter().copied().collect();
        let lhs = associated_poly_eval(&at, &x).unwrap();
        let rhs = associated_poly_eval(&t, &ax).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn projection_is_linear((s, t, alpha) in (2usize..=3, 3usize..=4).prop_flat_map(|(d, r)| {
        (tensor(d, r), tensor(d, r), -3.0f64..3.0)
    })) {
        let p = make_pattern(PatternKind::Diagonal, s.dim(), s.order()).unwrap();
        let combo = s.lin_comb(alpha, &t, 1.0).unwrap();
        let lhs = project_onto_indices(&combo, p.indices()).unwrap();
        let ps = project_onto_indices(&s, p.indices()).unwrap();
        let pt = project_onto_indices(&t, p.indices()).unwrap();
        for k in 0..lhs.len() {
            prop_assert!((lhs[k] - (alpha * ps[k] + pt[k])).abs() <= 1e-12);
        }
    }

    #[test]
    fn sum_of_coefficients(r in 1usize..=5, n in 6usize..200) {
        let parts = enumerate_partitions(r).unwrap();
        for pi in parts.partitions() {
            let lhs: f64 = parts.partitions().iter().filter(|rho| refines(rho, pi)).map(|rho| kstat_coefficient(rho, n).unwrap()).sum();
            let b = pi.num_blocks();
            let binom: f64 = (0..b - 1).fold(1.0, |acc, i| acc * (n - 1 - i) as f64 / (i + 1) as f64);
            let rhs = if b % 2 == 1 { 1.0 } else { -1.0 } / binom;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1e-300));
        }
    }

    #[test]
    fn roundtrip_families(((d, r), seed) in ((1usize..=3, 2usize..=6), any::<u64>())) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let fam = TensorFamily::new((1..=r).map(|p| SymmetricTensor::from_fn(d, p, |_| rng.random_range(-1.0..1.0))).collect()).unwrap();
        let back = cumulant_family(&moment_family(&fam, r).unwrap(), r).unwrap();
        for p in 1..=r {
            prop_assert!(close(back.order(p), fam.order(p), 1e-10));
        }
    }

    #[test]
    fn kstat_is_multilinear((rows, a, r) in (2usize..=3).prop_flat_map(|d| {
        (prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), 8..20), matrix(d), 2usize..=4)
    })) {
        let y = DataMatrix::from_rows(&rows).unwrap();
        let k = kstatistic(&y, r).unwrap();
        let ky = kstatistic(&y.transform(&a).unwrap(), r).unwrap();
        prop_assert!(close(&ky, &multilinear_apply(&a, &k).unwrap(), 1e-9));
    }

    #[test]
    fn kstat_ignores_shifts_and_order((rows, shift, r) in (2usize..=3).prop_flat_map(|d| {
        (prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), 8..20), prop::collection::vec(-3.0f64..3.0, d), 2usize..=4)
    })) {
        let y = DataMatrix::from_rows(&rows).unwrap();
        let shifted: Vec<Vec<f64>> = rows.iter().map(|x| x.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        let mut reversed = rows.clone();
        reversed.reverse();
        let k = kstatistic(&y, r).unwrap();
        prop_assert!(close(&k, &kstatistic(&DataMatrix::from_rows(&shifted).unwrap(), r).unwrap(), 1e-8));
        prop_assert!(close(&k, &kstatistic(&DataMatrix::from_rows(&reversed).unwrap(), r).unwrap(), 1e-10));
    }

    #[test]
    fn reflectional_tensors_are_sign_invariant((t, signs) in (2usize..=3).prop_flat_map(|d| {
        (tensor(d, 4), prop::collection::vec(prop::bool::ANY, d))
    })) {
        let refl = SymmetricTensor::from_fn(t.dim(), 4, |ix| {
            let even = (0..t.dim()).all(|i| ix.iter().filter(|&&j| j == i).count() % 2 == 0);
            if even { t.get(ix) } else { 0.0 }
        });
        let dmat = Matrix::from_diagonal(&nalgebra::DVector::from_iterator(t.dim(), signs.iter().map(|&s| if s { 1.0 } else { -1.0 })));
        prop_assert!(close(&multilinear_apply(&dmat, &refl).unwrap(), &refl, 1e-14));
        // and a tensor with a nonzero odd entry is moved by some sign flip
        let mut odd = refl.clone();
        odd.set(&[0, 1, 1, 1], 1.0);
        let flip = Matrix::from_diagonal(&nalgebra::DVector::from_fn(t.dim(), |i, _| if i == 0 { -1.0 } else { 1.0 }));
        prop_assert!(!close(&multilinear_apply(&flip, &odd).unwrap(), &odd, 1e-6));
    }

    #[test]
    fn signed_permutations_preserve_patterns((diag, p, r) in (2usize..=3).prop_flat_map(|d| {
        (prop::collection::vec(-2.0f64..2.0, d), signed_perm(d), 3usize..=4)
    })) {
        let d = diag.len();
        let t = SymmetricTensor::diagonal(r, &diag);
        let pattern = make_pattern(PatternKind::Diagonal, d, r).unwrap();
        prop_assert!(verify_in_gt(&p.matrix(), &t, &pattern, DEFAULT_TOL).unwrap());
        let moved = multilinear_apply(&p.matrix(), &t).unwrap();
        prop_assert!(moved.off_diagonal_max() <= 1e-14);
    }

    #[test]
    fn objective_is_sp_invariant((a, p, s2, tr, kind) in (2usize..=3).prop_flat_map(|d| {
        (invertible(d), signed_perm(d), matrix(d), tensor(d, 4), prop::sample::select(vec![PatternKind::Diagonal, PatternKind::Reflectional]))
    })) {
        let d = a.nrows();
        let s2m = &s2 * s2.transpose() + Matrix::identity(d, d);
        let s2t = SymmetricTensor::from_fn(d, 2, |ix| s2m[(ix[0], ix[1])]);
        let spec = RestrictionSpec::new(make_pattern(kind, d, 4).unwrap(), StatKind::Cumulant);
        let g = residual(&a, &s2t, &tr, &spec).unwrap();
        let gp = residual(&p.apply(&a), &s2t, &tr, &spec).unwrap();
        let (l, lp) = (objective(&g, None), objective(&gp, None));
        prop_assert!((l - lp).abs() <= 1e-10 * (1.0 + l));
    }

    #[test]
    fn metrics_ignore_signed_permutations((a_hat, a0, p) in (2usize..=4).prop_flat_map(|d| {
        (invertible(d), invertible(d), signed_perm(d))
    })) {
        let pa = p.apply(&a_hat);
        prop_assert_eq!(amari_error(&pa, &a0).unwrap(), amari_error(&a_hat, &a0).unwrap());
        let f = frobenius_error(&a_hat, &a0).unwrap();
        prop_assert!((frobenius_error(&pa, &a0).unwrap() - f).abs() <= 1e-12);
        prop_assert!(f >= 0.0);
        prop_assert!(frobenius_error(&p.apply(&a0), &a0).unwrap() <= 1e-12);
        prop_assert!(amari_error(&p.apply(&a0), &a0).unwrap() <= 1e-12);
    }

    #[test]
    fn mobius_inverts_zeta(r in 1usize..=5) {
        let parts = enumerate_partitions(r).unwrap();
        let ps = parts.partitions();
        for a in ps {
            for b in ps {
                let s: i64 = ps.iter().filter(|s| refines(a, s) && refines(s, b)).map(|s| mobius(a, s)).sum();
                prop_assert_eq!(s, i64::from(a == b));
            }
        }
    }
}
