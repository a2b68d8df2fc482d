mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skd_core::linalg::{matmul, random_orthogonal, sym_eig, Matrix};
use skd_core::vit::{forward, FeatureId, FeatureKind};
use skd_core::wpac::{
    apply_qk, apply_statistics, apply_vo, collect_statistics, wpac_transform, CovarianceAccumulator,
    TransformKind, TransformMatrix, Weighting, WpacConfig,
};
use skd_core::{Real, Vit};

fn orthogonal_transform(kind: TransformKind, n: usize, rng: &mut ChaCha8Rng) -> TransformMatrix {
    let mut t = TransformMatrix::identity(kind, n);
    t.matrix = random_orthogonal(n, rng);
    t
}

fn randomly_rotated<T: Real>(model: &Vit<T>, seed: u64) -> Vit<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = model.clone();
    for blk in &mut out.blocks {
        for head in &mut blk.attn.heads {
            let n = head.dim();
            apply_vo(head, &orthogonal_transform(TransformKind::Vo, n, &mut rng)).unwrap();
            apply_qk(head, &orthogonal_transform(TransformKind::Qk, n, &mut rng)).unwrap();
        }
    }
    out
}

#[test]
fn wpac_preserves_logits_on_random_inputs() {
    let arch = unit_arch();
    let inputs = random_data(&arch, 100, 77);
    for seed in 0..3 {
        let proxy = random_data(&arch, 48, seed);
        for weighting in [Weighting::Importance, Weighting::Uniform, Weighting::ClassToken] {
            let cfg = WpacConfig {
                weighting,
                chunk: 16,
                ..WpacConfig::default()
            };
            let m64 = random_model::<f64>(arch, seed);
            let t64 = wpac_transform(&m64, &proxy.batch(), &cfg).unwrap().model;
            let d64 = max_logit_diff(&m64, &t64, &inputs.batch(), None);
            assert!(d64 <= 1e-9, "f64 deviation {d64:e} ({weighting:?})");
            let m32: Vit<f32> = m64.cast();
            let t32 = wpac_transform(&m32, &proxy.batch(), &cfg).unwrap().model;
            let d32 = max_logit_diff(&m32, &t32, &inputs.batch(), None);
            assert!(d32 <= 1e-5, "f32 deviation {d32:e} ({weighting:?})");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn any_orthogonal_head_transform_preserves_logits(seed in any::<u64>()) {
        let arch = tiny_arch();
        let m = random_model::<f64>(arch, seed % 1000);
        let rotated = randomly_rotated(&m, seed);
        let data = random_data(&arch, 20, seed);
        let d = max_logit_diff(&m, &rotated, &data.batch(), None);
        prop_assert!(d <= 1e-9, "deviation {d:e}");
    }
}

/// `(B·n) x k` feature matrix of one head after a forward pass.
fn feature(model: &Vit<f64>, data: &Data, id: FeatureId) -> (Vec<f64>, usize) {
    let cache = forward(model, &data.batch(), None).unwrap().cache.unwrap();
    (cache.feature(id).to_vec(), cache.feature_width(id))
}

fn column_variances(x: &[f64], k: usize) -> Vec<f64> {
    let n = (x.len() / k) as f64;
    (0..k)
        .map(|c| {
            let mean = x.chunks(k).map(|r| r[c]).sum::<f64>() / n;
            x.chunks(k).map(|r| (r[c] - mean).powi(2)).sum::<f64>() / (n - 1.0)
        })
        .collect()
}

#[test]
fn transformed_value_variances_equal_the_spectrum() {
    let arch = unit_arch();
    let m = random_model::<f64>(arch, 5);
    let proxy = random_data(&arch, 40, 5);
    let cfg = WpacConfig {
        weighting: Weighting::Uniform,
        transform_qk: false,
        sort_mlp: false,
        chunk: 13,
        ..WpacConfig::default()
    };
    let out = wpac_transform(&m, &proxy.batch(), &cfg).unwrap();
    for t in &out.transforms {
        let id = FeatureId {
            block: t.block,
            kind: FeatureKind::Value(t.head.unwrap()),
        };
        let (x, k) = feature(&out.model, &proxy, id);
        let var = column_variances(&x, k);
        for (i, (v, l)) in var.iter().zip(&t.eigenvalues).enumerate() {
            let rel = (v - l).abs() / l.abs();
            assert!(rel <= 1e-8, "block {} head {:?} dim {i}: variance {v} vs eigenvalue {l}", t.block, t.head);
        }
    }
}

#[test]
fn top_k_residual_equals_discarded_spectrum() {
    let arch = unit_arch();
    let m = random_model::<f64>(arch, 6);
    let proxy = random_data(&arch, 30, 6);
    let id = FeatureId {
        block: 1,
        kind: FeatureKind::Key(0),
    };
    let (x, d) = feature(&m, &proxy, id);
    let n = x.len() / d;
    let mut acc = CovarianceAccumulator::new(d);
    acc.accumulate(&x, &vec![1.0; n]).unwrap();
    let eig = sym_eig(&acc.finalize().unwrap()).unwrap();
    let mean: Vec<f64> = (0..d).map(|c| x.chunks(d).map(|r| r[c]).sum::<f64>() / n as f64).collect();
    for k in 0..=d {
        let p = eig.eigenvectors.top_rows(k);
        let mut residual = 0.0;
        for row in x.chunks(d) {
            let c: Vec<f64> = row.iter().zip(&mean).map(|(a, b)| a - b).collect();
            let proj = if k == 0 { vec![0.0; k] } else { p.matvec(&c).unwrap() };
            let mut back = vec![0.0; d];
            for (i, &pi) in proj.iter().enumerate() {
                for (j, b) in back.iter_mut().enumerate() {
                    *b += p.row(i)[j] * pi;
                }
            }
            residual += c.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        let want: f64 = eig.eigenvalues[k..].iter().sum::<f64>() * (n as f64 - 1.0);
        let scale = want.abs().max(1e-12 * eig.eigenvalues[0] * n as f64);
        assert!((residual - want).abs() <= 1e-6 * scale, "k={k}: {residual} vs {want}");
    }
}

#[test]
fn pca_basis_beats_fifty_random_bases() {
    let arch = unit_arch();
    let m = random_model::<f64>(arch, 8);
    let proxy = random_data(&arch, 40, 8);
    let cfg = WpacConfig {
        weighting: Weighting::Uniform,
        ..WpacConfig::default()
    };
    let stats = collect_statistics(&m, &proxy.batch(), &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for b in 0..arch.depth {
        for h in 0..arch.heads {
            let corr = stats.vo_corr(b, h).unwrap();
            let eig = sym_eig(&corr).unwrap();
            let n = corr.rows();
            for _ in 0..50 {
                let r = random_orthogonal(n, &mut rng);
                let rotated = matmul(&matmul(&r, &corr).unwrap(), &r.transpose()).unwrap();
                let mut pca = 0.0;
                let mut rand = 0.0;
                for k in 0..n {
                    pca += eig.eigenvalues[k];
                    rand += rotated[(k, k)];
                    assert!(pca >= rand - 1e-9 * eig.eigenvalues[0], "k={k}: {pca} < {rand}");
                }
            }
        }
    }
}

fn max_rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().max_abs() / a.max_abs().max(f64::MIN_POSITIVE)
}

#[test]
fn one_chunk_and_seven_chunks_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (d, n) = (6, 91);
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-3.0..5.0)).collect();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
    let mut whole = CovarianceAccumulator::new(d);
    whole.accumulate(&x, &w).unwrap();
    let mut merged = CovarianceAccumulator::new(d);
    for c in 0..7 {
        let (lo, hi) = (c * n / 7, (c + 1) * n / 7);
        let mut part = CovarianceAccumulator::new(d);
        part.accumulate(&x[lo * d..hi * d], &w[lo..hi]).unwrap();
        merged.merge(&part).unwrap();
    }
    assert!(max_rel_diff(&whole.finalize().unwrap(), &merged.finalize().unwrap()) <= 1e-12);

    let arch = unit_arch();
    let m = random_model::<f64>(arch, 12);
    let proxy = random_data(&arch, 35, 12);
    let one = WpacConfig {
        chunk: 35,
        ..WpacConfig::default()
    };
    let seven = WpacConfig { chunk: 5, ..one };
    let a = collect_statistics(&m, &proxy.batch(), &one).unwrap();
    let b = collect_statistics(&m, &proxy.batch(), &seven).unwrap();
    for blk in 0..arch.depth {
        for h in 0..arch.heads {
            assert!(max_rel_diff(&a.vo_corr(blk, h).unwrap(), &b.vo_corr(blk, h).unwrap()) <= 1e-12);
            assert!(max_rel_diff(&a.qk_corr(blk, h).unwrap(), &b.qk_corr(blk, h).unwrap()) <= 1e-12);
        }
    }
    assert!((a.cost - b.cost).abs() <= 1e-12 * a.cost);
}

#[test]
fn weighted_covariance_matches_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (d, n) = (4, 25);
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
    let mut acc = CovarianceAccumulator::new(d);
    acc.accumulate(&x, &w).unwrap();
    let got = acc.finalize().unwrap();
    let mean: Vec<f64> = (0..d).map(|c| (0..n).map(|r| x[r * d + c]).sum::<f64>() / n as f64).collect();
    for i in 0..d {
        for j in 0..d {
            let want: f64 = (0..n)
                .map(|r| {
                    let a = w[r].sqrt() * (x[r * d + i] - mean[i]);
                    let b = w[r].sqrt() * (x[r * d + j] - mean[j]);
                    a * b
                })
                .sum::<f64>()
                / (n as f64 - 1.0);
            assert!((got[(i, j)] - want).abs() <= 1e-12, "({i},{j}) {} vs {want}", got[(i, j)]);
        }
    }
}

#[test]
fn qk_covariance_is_the_sum_of_query_and_key_covariances() {
    let arch = unit_arch();
    let m = random_model::<f64>(arch, 3);
    let proxy = random_data(&arch, 20, 3);
    let stats = collect_statistics(&m, &proxy.batch(), &WpacConfig::default()).unwrap();
    let sum = stats.qk_corr(0, 1).unwrap();
    let q = stats.q[0][1].finalize().unwrap();
    let k = stats.k[0][1].finalize().unwrap();
    let mut want = q.clone();
    for i in 0..q.rows() {
        for j in 0..q.cols() {
            want[(i, j)] = q[(i, j)] + k[(i, j)];
        }
    }
    assert!(max_rel_diff(&want, &sum) <= 1e-15);
}

#[test]
fn mlp_sort_orders_hidden_units_by_score() {
    let arch = unit_arch();
    let m = random_model::<f64>(arch, 4);
    let proxy = random_data(&arch, 24, 4);
    let cfg = WpacConfig {
        transform_vo: false,
        transform_qk: false,
        ..WpacConfig::default()
    };
    let stats = collect_statistics(&m, &proxy.batch(), &cfg).unwrap();
    let out = apply_statistics(&m, &stats, &cfg).unwrap();
    let after = collect_statistics(&out.model, &proxy.batch(), &cfg).unwrap();
    for theta in &after.mlp_theta {
        assert!(theta.windows(2).all(|w| w[0] >= w[1] - 1e-12 * w[0].abs()), "{theta:?}");
    }
    let inputs = random_data(&arch, 30, 40);
    assert!(max_logit_diff(&m, &out.model, &inputs.batch(), None) <= 1e-9);
}
