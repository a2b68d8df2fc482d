//! Test oracles shared by the integration tests: a loop-by-loop reference
//! forward pass, central finite differences, and small model/data builders.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use skd_core::vit::{forward_with_hook, infer, loss_and_grad, FeatureId, FeatureKind};
use skd_core::{ArchConfig, Batch, Real, SubnetMask, Vit};

/// Finite-difference step. Large enough that cost rounding (about 1e-16)
/// stays far below the tolerance once divided by the step.
pub const FD_STEP: f64 = 1e-3;

/// Fourth-order central difference of `f` at 0.
pub fn five_point(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

/// Architecture small enough for element-wise finite differences.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        depth: 2,
        embed_dim: 8,
        heads: 2,
        mlp_hidden: 32,
        num_classes: 3,
    }
}

/// Small architecture whose heads split into the 8 MHSA units.
pub fn unit_arch() -> ArchConfig {
    ArchConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        depth: 2,
        embed_dim: 16,
        heads: 2,
        mlp_hidden: 64,
        num_classes: 4,
    }
}

/// Initialized model with every tensor (biases, layernorm included) jittered
/// so no code path sees structurally zero parameters.
pub fn random_model<T: Real>(arch: ArchConfig, seed: u64) -> Vit<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Vit::<T>::init(arch, &mut rng).unwrap();
    let noise = Normal::new(0.0, 0.25).unwrap();
    for t in m.tensors_mut() {
        for v in t.iter_mut() {
            *v = T::from_f64_lossy(v.as_f64() + noise.sample(&mut rng));
        }
    }
    m
}

pub struct Data {
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Data {
    pub fn batch(&self) -> Batch<'_> {
        Batch::new(&self.images, &self.labels)
    }
}

pub fn random_data(arch: &ArchConfig, n: usize, seed: u64) -> Data {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let images = (0..n * arch.image_len())
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..arch.num_classes as u32)).collect();
    Data { images, labels }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) * r * gamma[j] + beta[j])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// `W x + b` with `W` row-major `rows x x.len()`, using only the first `rows`.
fn affine(w: &[f64], b: Option<&[f64]>, x: &[f64], rows: usize) -> Vec<f64> {
    (0..rows)
        .map(|i| {
            let mut s: f64 = (0..x.len()).map(|j| w[i * x.len() + j] * x[j]).sum();
            if let Some(b) = b {
                s += b[i];
            }
            s
        })
        .collect()
}

/// Logits of one image computed with explicit loops, independent of the
/// library's batched kernels.
pub fn reference_logits(model: &Vit<f64>, image: &[f32], mask: Option<&SubnetMask>) -> Vec<f64> {
    let a = model.arch;
    let (d, p, s, g) = (a.embed_dim, a.patch_size, a.image_size, a.grid());
    let n = a.tokens();
    let mut x: Vec<Vec<f64>> = Vec::with_capacity(n);
    x.push(model.cls_token.clone());
    for gy in 0..g {
        for gx in 0..g {
            let mut patch = Vec::with_capacity(a.patch_len());
            for ch in 0..a.channels {
                for py in 0..p {
                    for px in 0..p {
                        patch.push(image[ch * s * s + (gy * p + py) * s + gx * p + px] as f64);
                    }
                }
            }
            x.push(affine(&model.patch_w, Some(&model.patch_b), &patch, d));
        }
    }
    for (t, row) in x.iter_mut().enumerate() {
        for j in 0..d {
            row[j] += model.pos_embed[t * d + j];
        }
    }
    let scale = 1.0 / (a.head_dim() as f64).sqrt();
    for (b, blk) in model.blocks.iter().enumerate() {
        let attn_on = blk.attn.enabled && !mask.is_some_and(|m| m.skip_attn[b]);
        if attn_on {
            let ln: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, &blk.ln1.gamma, &blk.ln1.beta)).collect();
            let mut delta = vec![blk.attn.b_o.clone(); n];
            for (h, head) in blk.attn.heads.iter().enumerate() {
                let k = mask.map_or(head.dim(), |m| m.attn_keep[b][h]);
                let q: Vec<Vec<f64>> = ln.iter().map(|r| affine(&head.w_q, Some(&head.b_q), r, k)).collect();
                let kk: Vec<Vec<f64>> = ln.iter().map(|r| affine(&head.w_k, Some(&head.b_k), r, k)).collect();
                let v: Vec<Vec<f64>> = ln.iter().map(|r| affine(&head.w_v, Some(&head.b_v), r, k)).collect();
                for i in 0..n {
                    let scores: Vec<f64> = (0..n)
                        .map(|j| (0..k).map(|c| q[i][c] * kk[j][c]).sum::<f64>() * scale)
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|v| (v - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    let ctx: Vec<f64> = (0..k).map(|c| (0..n).map(|j| e[j] / z * v[j][c]).sum()).collect();
                    for (c, cv) in ctx.iter().enumerate() {
                        for o in 0..d {
                            delta[i][o] += cv * head.w_o_t[c * d + o];
                        }
                    }
                }
            }
            for (row, dl) in x.iter_mut().zip(&delta) {
                for j in 0..d {
                    row[j] += dl[j];
                }
            }
        }
        let mlp_on = blk.mlp.enabled && !mask.is_some_and(|m| m.skip_mlp[b]);
        if mlp_on {
            let k = mask.map_or(blk.mlp.hidden(), |m| m.mlp_keep[b]);
            for row in x.iter_mut() {
                let ln = layer_norm(row, &blk.ln2.gamma, &blk.ln2.beta);
                let hidden: Vec<f64> = affine(&blk.mlp.w1, Some(&blk.mlp.b1), &ln, k).into_iter().map(gelu).collect();
                for o in 0..d {
                    let s: f64 = (0..k).map(|c| hidden[c] * blk.mlp.w2_t[c * d + o]).sum();
                    row[o] += s + blk.mlp.b2[o];
                }
            }
        }
    }
    let cls = layer_norm(&x[0], &model.norm.gamma, &model.norm.beta);
    affine(&model.head_w, Some(&model.head_b), &cls, a.num_classes)
}

/// Mean cross-entropy from reference logits.
pub fn reference_cost(model: &Vit<f64>, data: &Batch<'_>, mask: Option<&SubnetMask>) -> f64 {
    let len = model.arch.image_len();
    let mut total = 0.0;
    for s in 0..data.len() {
        let l = reference_logits(model, &data.images[s * len..(s + 1) * len], mask);
        let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = l.iter().map(|v| (v - mx).exp()).sum();
        total += z.ln() + mx - l[data.labels[s] as usize];
    }
    total / data.len() as f64
}

/// Worst parameter-gradient mismatch: `(relative error, tensor name, index)`.
pub fn param_gradient_error(model: &Vit<f64>, data: &Batch<'_>, mask: Option<&SubnetMask>) -> (f64, String, usize) {
    let (_, grads, _) = loss_and_grad(model, data, mask).unwrap();
    let names = Vit::<f64>::named_shapes(&model.arch, &model.widths());
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut probe = model.clone();
    let mut worst = (0.0, String::new(), 0);
    for (ti, (name, _)) in names.iter().enumerate() {
        for i in 0..analytic[ti].len() {
            let orig = probe.tensors()[ti][i];
            let numeric = five_point(
                |d| {
                    probe.tensors_mut()[ti][i] = orig + d;
                    infer(&probe, data, mask).unwrap().cost
                },
                FD_STEP,
            );
            probe.tensors_mut()[ti][i] = orig;
            let e = rel_err(analytic[ti][i], numeric);
            if e > worst.0 {
                worst = (e, name.clone(), i);
            }
        }
    }
    worst
}

/// Every cached feature with a gradient.
pub fn feature_ids(model: &Vit<f64>) -> Vec<FeatureId> {
    let mut ids = Vec::new();
    for (b, blk) in model.blocks.iter().enumerate() {
        for h in 0..blk.attn.heads.len() {
            for kind in [FeatureKind::Query(h), FeatureKind::Key(h), FeatureKind::Value(h)] {
                ids.push(FeatureId { block: b, kind });
            }
        }
        ids.push(FeatureId {
            block: b,
            kind: FeatureKind::Hidden,
        });
    }
    ids
}

/// Worst activation-gradient mismatch over every element of every cached
/// feature, perturbing the feature in flight through the forward hook.
pub fn activation_gradient_error(model: &Vit<f64>, data: &Batch<'_>, mask: Option<&SubnetMask>) -> (f64, String) {
    let (_, _, cache) = loss_and_grad(model, data, mask).unwrap();
    let mut worst = (0.0, String::new());
    for id in feature_ids(model) {
        let grad = match cache.feature_grad(id) {
            Some(g) if !g.is_empty() => g.to_vec(),
            _ => continue,
        };
        for i in 0..grad.len() {
            let cost_at = |delta: f64| {
                let mut hook = |fid: FeatureId, x: &mut [f64]| {
                    if fid == id {
                        x[i] += delta;
                    }
                };
                forward_with_hook(model, data, mask, &mut hook).unwrap().cost
            };
            let numeric = five_point(cost_at, FD_STEP);
            let e = rel_err(grad[i], numeric);
            if e > worst.0 {
                worst = (e, format!("{id:?}[{i}]"));
            }
        }
    }
    worst
}

/// A valid random prefix mask, sometimes skipping a branch.
pub fn random_mask<R: Rng + ?Sized, T: Real>(model: &Vit<T>, rng: &mut R) -> SubnetMask {
    let mut m = SubnetMask::full(model);
    for (b, heads) in m.attn_keep.iter_mut().enumerate() {
        for k in heads.iter_mut() {
            *k = rng.random_range(1..=*k);
        }
        m.mlp_keep[b] = rng.random_range(1..=m.mlp_keep[b]);
    }
    if rng.random_bool(0.3) {
        let b = rng.random_range(0..m.skip_attn.len());
        if rng.random_bool(0.5) {
            m.skip_attn[b] = true;
        } else {
            m.skip_mlp[b] = true;
        }
    }
    m
}

/// Largest absolute logit difference between two models on the same batch.
pub fn max_logit_diff<T: Real>(a: &Vit<T>, b: &Vit<T>, data: &Batch<'_>, mask: Option<&SubnetMask>) -> f64 {
    let la = infer(a, data, mask).unwrap().logits;
    let lb = infer(b, data, mask).unwrap().logits;
    la.iter()
        .zip(&lb)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}
