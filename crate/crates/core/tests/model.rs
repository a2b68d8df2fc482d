mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use skd_core::optim::Sgd;
use skd_core::piad::{train_masked, PiadConfig};
use skd_core::vit::{infer, loss_and_grad};
use skd_core::{ModuleId, SubnetMask, Vit};

#[test]
fn forward_matches_reference_loops() {
    let arch = tiny_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..4 {
        let m = random_model::<f64>(arch, seed);
        let data = random_data(&arch, 5, seed);
        let masks = [None, Some(random_mask(&m, &mut rng)), Some(random_mask(&m, &mut rng))];
        for mask in &masks {
            let got = infer(&m, &data.batch(), mask.as_ref()).unwrap().logits;
            for s in 0..5 {
                let img = &data.images[s * arch.image_len()..(s + 1) * arch.image_len()];
                let want = reference_logits(&m, img, mask.as_ref());
                for c in 0..arch.num_classes {
                    let (g, w) = (got[s * arch.num_classes + c], want[c]);
                    assert!((g - w).abs() <= 1e-10 * w.abs().max(1.0), "seed {seed} sample {s}: {g} vs {w}");
                }
            }
            let cost = infer(&m, &data.batch(), mask.as_ref()).unwrap().cost;
            assert!((cost - reference_cost(&m, &data.batch(), mask.as_ref())).abs() < 1e-10);
        }
        let m32: Vit<f32> = m.cast();
        let got = infer(&m32, &data.batch(), None).unwrap().logits;
        let want = infer(&m, &data.batch(), None).unwrap().logits;
        for (g, w) in got.iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-4, "{g} vs {w}");
        }
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let arch = tiny_arch();
    for seed in 0..3 {
        let m = random_model::<f64>(arch, 100 + seed);
        let data = random_data(&arch, 3, seed);
        let (e, name, i) = param_gradient_error(&m, &data.batch(), None);
        assert!(e <= 1e-4, "seed {seed}: {name}[{i}] relative error {e:e}");
    }
}

#[test]
fn activation_gradients_match_finite_differences() {
    let arch = tiny_arch();
    for seed in 0..2 {
        let m = random_model::<f64>(arch, 200 + seed);
        let data = random_data(&arch, 2, seed);
        let (e, at) = activation_gradient_error(&m, &data.batch(), None);
        assert!(e <= 1e-4, "seed {seed}: {at} relative error {e:e}");
    }
}

#[test]
fn masked_gradients_match_finite_differences() {
    let arch = tiny_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..3 {
        let m = random_model::<f64>(arch, 300 + seed);
        let data = random_data(&arch, 2, seed);
        let mut mask = random_mask(&m, &mut rng);
        if seed == 0 {
            mask.set_skip(ModuleId::mlp(1), true).unwrap();
        }
        let (e, name, i) = param_gradient_error(&m, &data.batch(), Some(&mask));
        assert!(e <= 1e-4, "seed {seed}: {name}[{i}] relative error {e:e}");
        let (e, at) = activation_gradient_error(&m, &data.batch(), Some(&mask));
        assert!(e <= 1e-4, "seed {seed}: {at} relative error {e:e}");
    }
}

#[test]
fn inactive_parameters_get_zero_gradient() {
    let arch = tiny_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = random_model::<f64>(arch, 1);
    let data = random_data(&arch, 4, 1);
    for _ in 0..10 {
        let mask = random_mask(&m, &mut rng);
        let (_, grads, _) = loss_and_grad(&m, &data.batch(), Some(&mask)).unwrap();
        for (t, &active) in grads.tensors().iter().zip(&m.active_lens(Some(&mask))) {
            assert!(t[active..].iter().all(|&g| g == 0.0));
        }
    }
}

#[test]
fn masked_sgd_step_leaves_inactive_parameters_bit_identical() {
    let arch = tiny_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut m = random_model::<f32>(arch, 2);
    let data = random_data(&arch, 6, 2);
    let mut opt = Sgd::new(&m, 0.9, 0.01);
    for _ in 0..5 {
        let mask = random_mask(&m, &mut rng);
        let before = m.clone();
        let (_, grads, _) = loss_and_grad(&m, &data.batch(), Some(&mask)).unwrap();
        let active = m.active_lens(Some(&mask));
        opt.step(&mut m, &grads, 0.05, &active);
        for ((a, b), &k) in m.tensors().iter().zip(before.tensors()).zip(&active) {
            assert_eq!(a[k..].iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b[k..].iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}

#[test]
fn full_mask_is_identical_to_no_mask() {
    let arch = tiny_arch();
    let m = random_model::<f32>(arch, 4);
    let data = random_data(&arch, 4, 4);
    let a = infer(&m, &data.batch(), None).unwrap().logits;
    let b = infer(&m, &data.batch(), Some(&SubnetMask::full(&m))).unwrap().logits;
    assert_eq!(a, b);
}

#[test]
fn training_trajectory_is_deterministic() {
    let arch = tiny_arch();
    let data = random_data(&arch, 40, 8);
    let cfg = PiadConfig {
        ratio: 0.0,
        epochs: 2,
        progressive_epochs: 0,
        batch_size: 8,
        seed: 4,
        ..PiadConfig::default()
    };
    let run = || {
        let mut m = random_model::<f32>(arch, 6);
        let log = train_masked(&mut m, &data.batch(), &cfg, |_, _| Ok((0, 0)), |_, _| None).unwrap();
        (m, log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    for (x, y) in a.tensors().iter().zip(b.tensors()) {
        assert_eq!(x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
