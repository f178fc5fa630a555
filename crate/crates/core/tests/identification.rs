//! Identified sets, genericity and local identification on concrete tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zeroid::linalg::{is_signed_permutation, orthogonality_error, random_orthogonal, signed_permutations};
use zeroid::restrictions::{
    check_genericity_diagonal, check_genericity_minimal, check_genericity_reflectional, enumerate_gt_2d, explore_gt,
    identify, local_identification_test, pattern_residual, verify_in_gt, DEFAULT_TOL,
};
use zeroid::{make_pattern, Matrix, PatternKind, SymmetricTensor, ZeroPattern};

fn example_tensor() -> SymmetricTensor {
    let mut t = SymmetricTensor::zeros(2, 3);
    t.set(&[0, 0, 0], 1.0);
    t.set(&[1, 1, 1], 2.0);
    t.set(&[0, 0, 1], 3.0);
    t
}

fn rotation_45() -> Matrix {
    Matrix::from_row_slice(2, 2, &[1.0, -1.0, 1.0, 1.0]) / 2f64.sqrt()
}

fn in_pattern(pattern: &ZeroPattern, rng: &mut ChaCha8Rng) -> SymmetricTensor {
    SymmetricTensor::from_fn(pattern.dim(), pattern.order(), |ix| {
        if pattern.contains(&zeroid::MultiIndex::new(ix.to_vec())) {
            0.0
        } else {
            let v: f64 = rng.random_range(0.5..2.0);
            if rng.random_bool(0.5) { v } else { -v }
        }
    })
}

fn assert_signed_permutations(set: &[Matrix]) {
    assert_eq!(set.len(), 8, "{set:?}");
    for q in set {
        assert!(is_signed_permutation(q, 1e-8), "{q}");
    }
    for p in signed_permutations(2).unwrap() {
        assert!(set.iter().any(|q| (q - p.matrix()).amax() < 1e-8));
    }
}

#[test]
fn rotation_leaves_generic_diagonal_pattern() {
    let t = SymmetricTensor::diagonal(3, &[1.0, -1.7]);
    let p = make_pattern(PatternKind::Diagonal, 2, 3).unwrap();
    assert!(!verify_in_gt(&rotation_45(), &t, &p, DEFAULT_TOL).unwrap());
    assert!(verify_in_gt(&Matrix::identity(2, 2), &t, &p, DEFAULT_TOL).unwrap());
}

#[test]
fn rotation_keeps_example_in_minimal_pattern() {
    let p = ZeroPattern::custom_one_based(2, 3, &[vec![1, 2, 2]]).unwrap();
    let h = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]) / 2f64.sqrt();
    assert!(verify_in_gt(&h, &example_tensor(), &p, DEFAULT_TOL).unwrap());
    assert!(pattern_residual(&h, &example_tensor(), &p).unwrap() < 1e-12);
}

#[test]
fn non_orthogonal_matrix_is_rejected() {
    let p = make_pattern(PatternKind::Diagonal, 2, 3).unwrap();
    let q = Matrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]);
    assert!(verify_in_gt(&q, &SymmetricTensor::diagonal(3, &[1.0, 2.0]), &p, DEFAULT_TOL).is_err());
}

#[test]
fn generic_diagonal_set_is_signed_permutations() {
    let p = make_pattern(PatternKind::Diagonal, 2, 3).unwrap();
    let t = SymmetricTensor::diagonal(3, &[0.8, -1.3]);
    assert!(check_genericity_diagonal(&t, DEFAULT_TOL).unwrap().passed);
    assert_signed_permutations(&enumerate_gt_2d(&t, &p, DEFAULT_TOL).unwrap());
}

#[test]
fn mean_independence_set_is_signed_permutations() {
    let p = make_pattern(PatternKind::MeanIndependence, 2, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let t = in_pattern(&p, &mut rng);
        assert_signed_permutations(&enumerate_gt_2d(&t, &p, DEFAULT_TOL).unwrap());
    }
}

#[test]
fn enumerated_sets_are_orthogonal_and_closed() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cases = [
        (make_pattern(PatternKind::Diagonal, 2, 3).unwrap(), 5),
        (make_pattern(PatternKind::Diagonal, 2, 4).unwrap(), 5),
        (make_pattern(PatternKind::Reflectional, 2, 4).unwrap(), 5),
        (ZeroPattern::custom_one_based(2, 3, &[vec![1, 2, 2]]).unwrap(), 5),
    ];
    for (p, reps) in cases {
        for _ in 0..reps {
            let t = in_pattern(&p, &mut rng);
            let set = enumerate_gt_2d(&t, &p, DEFAULT_TOL).unwrap();
            assert!(!set.is_empty());
            for q in &set {
                assert!(orthogonality_error(q) <= 1e-10);
                assert!(pattern_residual(q, &t, &p).unwrap() <= 1e-8);
            }
            if p.is_sp_invariant() {
                for q in &set {
                    for s in signed_permutations(2).unwrap() {
                        assert!(verify_in_gt(&s.apply(q), &t, &p, DEFAULT_TOL).unwrap());
                    }
                }
            }
        }
    }
}

#[test]
fn enumerated_points_are_locally_isolated() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let diag = make_pattern(PatternKind::Diagonal, 2, 3).unwrap();
    let refl = make_pattern(PatternKind::Reflectional, 2, 4).unwrap();
    let minimal = ZeroPattern::custom_one_based(2, 3, &[vec![1, 2, 2]]).unwrap();
    for _ in 0..5 {
        let cases = [
            (in_pattern(&diag, &mut rng), &diag),
            (in_pattern(&refl, &mut rng), &refl),
            (in_pattern(&minimal, &mut rng), &minimal),
        ];
        for (t, p) in cases {
            let generic = match p.kind() {
                PatternKind::Diagonal => check_genericity_diagonal(&t, DEFAULT_TOL).unwrap().passed,
                PatternKind::Reflectional => check_genericity_reflectional(&t, DEFAULT_TOL).unwrap().passed,
                _ => check_genericity_minimal(&t, DEFAULT_TOL).unwrap().passed,
            };
            if !generic {
                continue;
            }
            for q in enumerate_gt_2d(&t, p, DEFAULT_TOL).unwrap() {
                let local = local_identification_test(&t, p, &q, 1e-6).unwrap();
                assert_eq!(local.kernel_dimension, 0, "{q}");
            }
        }
    }
}

#[test]
fn minimal_pattern_is_locally_identified() {
    let p = ZeroPattern::custom_one_based(2, 3, &[vec![1, 2, 2]]).unwrap();
    assert!(check_genericity_minimal(&example_tensor(), DEFAULT_TOL).unwrap().passed);
    let local = local_identification_test(&example_tensor(), &p, &Matrix::identity(2, 2), DEFAULT_TOL).unwrap();
    assert!(local.locally_identified);
    assert_eq!(local.kernel_dimension, 0);
}

#[test]
fn two_zero_diagonal_entries_are_not_identified() {
    let p = make_pattern(PatternKind::Diagonal, 3, 4).unwrap();
    let t = SymmetricTensor::diagonal(4, &[0.0, 0.0, 1.5]);
    assert!(!check_genericity_diagonal(&t, DEFAULT_TOL).unwrap().passed);
    let local = local_identification_test(&t, &p, &Matrix::identity(3, 3), DEFAULT_TOL).unwrap();
    assert!(local.kernel_dimension >= 1);
    assert!(!local.locally_identified);
}

#[test]
fn point_outside_set_is_a_precondition_error() {
    let p = make_pattern(PatternKind::Diagonal, 2, 3).unwrap();
    let t = SymmetricTensor::diagonal(3, &[1.0, 2.0]);
    assert!(local_identification_test(&t, &p, &rotation_45(), DEFAULT_TOL).is_err());
}

#[test]
fn identify_report_for_generic_diagonal() {
    let p = make_pattern(PatternKind::Diagonal, 2, 4).unwrap();
    let t = SymmetricTensor::diagonal(4, &[1.2, -0.4]);
    let report = identify(&t, &p, DEFAULT_TOL).unwrap();
    assert!(report.tensor_in_pattern);
    assert!(report.locally_identified);
    assert_eq!(report.identified_up_to_sp, Some(true));
    assert_eq!(report.enumerated_set.as_ref().map(Vec::len), Some(8));
}

#[test]
fn exploration_in_three_dimensions_finds_the_orbit() {
    let p = make_pattern(PatternKind::Diagonal, 3, 3).unwrap();
    let t = SymmetricTensor::diagonal(3, &[1.0, -0.6, 1.9]);
    let ex = explore_gt(&t, &p, 200, 3, DEFAULT_TOL).unwrap();
    assert!(ex.converged_starts > 0);
    for q in &ex.solutions {
        assert!(is_signed_permutation(q, 1e-6), "{q}");
    }
    assert!(ex.signed_permutation_count > 0);
    // random rotations are not in the set
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let q = random_orthogonal(3, &mut rng);
        assert!(!verify_in_gt(&q, &t, &p, DEFAULT_TOL).unwrap());
    }
}
