use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use skd_core::linalg::{
    descending_ranking, matmul, orthogonality_error, permutation_from_ranking, random_orthogonal,
    rotation2, sym_eig, Matrix,
};

fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut a = Matrix::zeros(n, n);
    let scale = 10f64.powf(rng.random_range(-3.0..3.0));
    for i in 0..n {
        for j in i..n {
            let v: f64 = StandardNormal.sample(rng);
            a[(i, j)] = v * scale;
            a[(j, i)] = v * scale;
        }
    }
    a
}

fn check(a: &Matrix) -> (f64, f64) {
    let e = sym_eig(a).unwrap();
    let recon = e.reconstruct().sub(a).unwrap().max_abs() / a.max_abs().max(f64::MIN_POSITIVE);
    assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]), "not descending: {:?}", e.eigenvalues);
    (recon, orthogonality_error(&e.eigenvectors).unwrap())
}

#[test]
fn five_hundred_random_symmetric_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..500 {
        let n = rng.random_range(2..=16);
        let a = random_symmetric(n, &mut rng);
        let (recon, orth) = check(&a);
        assert!(recon <= 1e-8, "matrix {i} ({n}x{n}): reconstruction {recon:e}");
        assert!(orth <= 1e-9, "matrix {i} ({n}x{n}): orthogonality {orth:e}");
    }
}

#[test]
fn closed_form_two_by_two() {
    let cases = [[2.0, 1.0, 2.0], [1.0, 0.0, 3.0], [4.0, -2.0, 1.0], [0.5, 0.25, -0.75], [1e-3, 5.0, 1e-3]];
    for [a, b, c] in cases {
        let m = Matrix::from_rows(&[[a, b], [b, c]]);
        let e = sym_eig(&m).unwrap();
        let mid = (a + c) / 2.0;
        let rad = (((a - c) / 2.0).powi(2) + b * b).sqrt();
        assert!((e.eigenvalues[0] - (mid + rad)).abs() <= 1e-12 * rad.max(1.0), "{:?}", e.eigenvalues);
        assert!((e.eigenvalues[1] - (mid - rad)).abs() <= 1e-12 * rad.max(1.0), "{:?}", e.eigenvalues);
        for (k, &l) in e.eigenvalues.iter().enumerate() {
            let v = e.eigenvectors.row(k);
            let av = m.matvec(v).unwrap();
            assert!((av[0] - l * v[0]).abs() <= 1e-12 && (av[1] - l * v[1]).abs() <= 1e-12);
            let big = if v[0].abs() >= v[1].abs() { v[0] } else { v[1] };
            assert!(big > 0.0, "sign convention violated: {v:?}");
        }
    }
    // [[2,1],[1,2]] has eigenvectors (1,1)/√2 and (1,-1)/√2.
    let e = sym_eig(&Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]])).unwrap();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    assert!((e.eigenvalues[0] - 3.0).abs() <= 1e-12 && (e.eigenvalues[1] - 1.0).abs() <= 1e-12);
    assert!((e.eigenvectors.row(0)[0] - h).abs() <= 1e-12 && (e.eigenvectors.row(0)[1] - h).abs() <= 1e-12);
    assert!((e.eigenvectors.row(1)[0] - h).abs() <= 1e-12 && (e.eigenvectors.row(1)[1] + h).abs() <= 1e-12);
}

#[test]
fn repeated_and_zero_spectra() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in [3, 6, 12] {
        let q = random_orthogonal(n, &mut rng);
        let mut lambda = vec![2.0; n];
        lambda[n - 1] = 0.0;
        lambda[n - 2] = 0.0;
        let a = matmul(&matmul(&q.transpose(), &Matrix::diag(&lambda)).unwrap(), &q).unwrap();
        let (recon, orth) = check(&a);
        assert!(recon <= 1e-8 && orth <= 1e-9);
        let e = sym_eig(&a).unwrap();
        assert!(e.eigenvalues[..n - 2].iter().all(|l| (l - 2.0).abs() < 1e-12));
        assert!(e.eigenvalues[n - 2..].iter().all(|l| l.abs() < 1e-12));
    }
}

#[test]
fn identical_bits_in_identical_bits_out() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let n = rng.random_range(2..=16);
        let a = random_symmetric(n, &mut rng);
        let x = sym_eig(&a).unwrap();
        let y = sym_eig(&a.clone()).unwrap();
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.eigenvectors), bits(&y.eigenvectors));
        assert_eq!(
            x.eigenvalues.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.eigenvalues.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

proptest! {
    #[test]
    fn eig_of_rotated_diagonal_recovers_spectrum(
        seed in any::<u64>(),
        lambda in prop::collection::vec(-50.0f64..50.0, 2..12),
    ) {
        let n = lambda.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_orthogonal(n, &mut rng);
        let a = matmul(&matmul(&q.transpose(), &Matrix::diag(&lambda)).unwrap(), &q).unwrap();
        let e = sym_eig(&a).unwrap();
        let mut want = lambda.clone();
        want.sort_by(|x, y| y.partial_cmp(x).unwrap());
        for (g, w) in e.eigenvalues.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-9 * 50.0, "{g} vs {w}");
        }
        prop_assert!(orthogonality_error(&e.eigenvectors).unwrap() <= 1e-9);
    }

    #[test]
    fn permutations_are_exactly_orthogonal(perm in Just((0..16usize).collect::<Vec<_>>()).prop_shuffle()) {
        let p = permutation_from_ranking(&perm).unwrap();
        let ppt = matmul(&p, &p.transpose()).unwrap();
        prop_assert_eq!(ppt, Matrix::identity(16));
        prop_assert!(orthogonality_error(&p).unwrap() <= 1e-15);
    }

    #[test]
    fn ranking_sorts_descending(scores in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let r = descending_ranking(&scores);
        let p = permutation_from_ranking(&r).unwrap();
        let sorted = p.matvec(&scores).unwrap();
        prop_assert!(sorted.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rotations_are_orthogonal(theta in -10.0f64..10.0) {
        prop_assert!(orthogonality_error(&rotation2(theta)).unwrap() <= 1e-15);
    }
}

#[test]
fn invalid_rankings_are_rejected() {
    assert!(permutation_from_ranking(&[0, 0, 1]).is_err());
    assert!(permutation_from_ranking(&[0, 3]).is_err());
    assert!(sym_eig(&Matrix::zeros(2, 3)).is_err());
}
