use num_complex::Complex64 as C64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xlmimo_core::linalg::{complex_normal, unvec_index, vec_index};
use xlmimo_core::transform::build_combiner;
use xlmimo_core::{CMatrix, Dictionary, MeasurementOperator};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn inner(a: &CMatrix, b: &CMatrix) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

fn random_operator(seed: u64, m_r: usize, i_n: usize, k: usize, q_n: usize) -> MeasurementOperator {
    let mut r = rng(seed);
    MeasurementOperator::from_factors(
        complex_normal(&mut r, m_r, i_n),
        complex_normal(&mut r, q_n, k),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn adjoint_is_conjugate_transpose(
        seed in any::<u64>(),
        m_r in 1usize..10, i_n in 1usize..10, k in 1usize..10, q_n in 1usize..10,
    ) {
        let op = random_operator(seed, m_r, i_n, k, q_n);
        let mut r = rng(seed ^ 1);
        let x = complex_normal(&mut r, i_n, q_n);
        let v = complex_normal(&mut r, m_r, k);
        let lhs = inner(&op.forward(&x).unwrap(), &v);
        let rhs = inner(&x, &op.adjoint(&v).unwrap());
        prop_assert!((lhs - rhs).norm() <= 1e-10 * (1.0 + lhs.norm()));
    }

    #[test]
    fn forward_matches_materialized_matrix(
        seed in any::<u64>(),
        m_r in 1usize..8, i_n in 1usize..8, k in 1usize..8, q_n in 1usize..8,
    ) {
        let op = random_operator(seed, m_r, i_n, k, q_n);
        let phi = op.materialize().unwrap();
        let x = complex_normal(&mut rng(seed ^ 2), i_n, q_n);
        let xv = CMatrix::from_iterator(i_n * q_n, 1, x.iter().cloned());
        let want = &phi * xv;
        let got = op.forward(&x).unwrap();
        for (idx, w) in want.iter().enumerate() {
            let (row, col) = unvec_index(idx, m_r);
            prop_assert!((got[(row, col)] - w).norm() < 1e-12 * (1.0 + w.norm()));
        }
    }

    #[test]
    fn svd_factors_reconstruct_and_diagonalize(
        seed in any::<u64>(),
        m_r in 1usize..9, i_n in 1usize..9, k in 1usize..9, q_n in 1usize..9,
    ) {
        let op = random_operator(seed, m_r, i_n, k, q_n);
        let phi = op.materialize().unwrap();
        let unitary = op.svd_preprocess().unwrap();
        let (u, lam, v) = unitary.materialize_factors().unwrap();
        prop_assert!((&u * &lam * v.adjoint() - &phi).norm() < 1e-10 * phi.norm());
        let m = u.nrows();
        prop_assert!((u.adjoint() * &u - CMatrix::identity(m, m)).norm() < 1e-10 * (m as f64).sqrt());
        // U^H Phi V is Lambda, which has at most one nonzero per row and column
        let core = u.adjoint() * &phi * &v;
        prop_assert!((&core - &lam).norm() < 1e-9 * phi.norm());
        let nonzero = |z: &C64| z.norm() > 1e-12 * phi.norm();
        for r in 0..lam.nrows() {
            prop_assert!(lam.row(r).iter().filter(|z| nonzero(z)).count() <= 1);
        }
        for c in 0..lam.ncols() {
            prop_assert!(lam.column(c).iter().filter(|z| nonzero(z)).count() <= 1);
        }
        prop_assert!(unitary.lambda_vec().iter().all(|l| *l >= 0.0));
        let y = complex_normal(&mut rng(seed ^ 3), m_r, k);
        let ry = unitary.transform_observation(&y).unwrap();
        prop_assert!((ry.norm() - y.norm()).abs() < 1e-10 * y.norm());
        let back = unitary.untransform_observation(&ry).unwrap();
        prop_assert!((back - &y).norm() < 1e-10 * y.norm());
    }

    #[test]
    fn rotated_operator_is_consistent(
        seed in any::<u64>(),
        m_r in 1usize..9, i_n in 1usize..9, k in 1usize..9, q_n in 1usize..9,
    ) {
        let op = random_operator(seed, m_r, i_n, k, q_n);
        let unitary = op.svd_preprocess().unwrap();
        let mut r = rng(seed ^ 4);
        let x = complex_normal(&mut r, i_n, q_n);
        let y = op.forward(&x).unwrap();
        let direct = unitary.transform_observation(&y).unwrap();
        let via = unitary.apply(&x).unwrap();
        prop_assert!((direct - &via).norm() < 1e-10 * (1.0 + via.norm()));
        let v = complex_normal(&mut r, m_r, k);
        let lhs = inner(&unitary.apply(&x).unwrap(), &v);
        let rhs = inner(&x, &unitary.apply_adjoint(&v).unwrap());
        prop_assert!((lhs - rhs).norm() <= 1e-10 * (1.0 + lhs.norm()));
    }

    #[test]
    fn vec_index_round_trips(row in 0usize..50, col in 0usize..50, rows in 50usize..80) {
        prop_assert_eq!(unvec_index(vec_index(row, col, rows), rows), (row, col));
    }

    #[test]
    fn combiner_entries_are_scaled_phases(seed in any::<u64>(), p in 1usize..6, n_rf in 1usize..5, n_ant in 1usize..40) {
        let w = build_combiner(p * n_rf, n_rf, n_ant, &mut rng(seed)).unwrap();
        prop_assert_eq!(w.shape(), (p * n_rf, n_ant));
        let target = 1.0 / (n_ant as f64).sqrt();
        prop_assert!(w.iter().all(|z| (z.norm() - target).abs() < 1e-12));
        prop_assert_eq!(w, build_combiner(p * n_rf, n_rf, n_ant, &mut rng(seed)).unwrap());
    }
}

#[test]
fn combiner_rejects_partial_slots() {
    assert!(build_combiner(10, 4, 16, &mut rng(0)).is_err());
}

#[test]
fn oversampled_dictionary_operator_has_no_extra_measurements() {
    let dict = Dictionary::new(16, 32, 4, 8).unwrap();
    let w = build_combiner(8, 2, 16, &mut rng(5)).unwrap();
    let op = MeasurementOperator::new(w, &dict).unwrap();
    assert_eq!(op.x_shape(), (32, 8));
    assert_eq!(op.y_shape(), (8, 4));
    let unitary = op.svd_preprocess().unwrap();
    // rank is bounded by the measurement count
    let positive = unitary.lambda_vec().iter().filter(|l| **l > 1e-12).count();
    assert!(positive <= 32);
}

#[test]
fn rotated_noise_stays_white() {
    let (m_r, k) = (4, 3);
    let op = random_operator(7, m_r, 6, k, 5);
    let unitary = op.svd_preprocess().unwrap();
    let mut r = rng(8);
    let draws = 100_000;
    let sigma2: f64 = 0.3;
    let mut acc = vec![0.0; m_r * k];
    for _ in 0..draws {
        let n = complex_normal(&mut r, m_r, k) * C64::new(sigma2.sqrt(), 0.0);
        let rn = unitary.transform_observation(&n).unwrap();
        for (a, z) in acc.iter_mut().zip(rn.iter()) {
            *a += z.norm_sqr();
        }
    }
    for a in acc {
        let v = a / draws as f64;
        assert!((v / sigma2 - 1.0).abs() < 0.1, "entry variance {v}");
    }
}
