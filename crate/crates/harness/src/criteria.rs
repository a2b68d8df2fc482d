//! Attention-dimension pruning criteria compared without fine-tuning.
//!
//! Each criterion ranks the Q/K and V/O dimensions of every head, the ranking
//! is applied as an exact row permutation so the kept dimensions lead, and the
//! head is then evaluated with a prefix-keep mask.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use skd_core::importance::taylor_scores;
use skd_core::linalg::descending_ranking;
use skd_core::wpac::{permute_head, wpac_transform, TransformKind, WpacConfig};
use skd_core::{Batch, Error, Real, Result, SubnetMask, Vit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Random,
    Magnitude,
    TaylorFo,
    Wpac,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [Criterion::Random, Criterion::Magnitude, Criterion::TaylorFo, Criterion::Wpac];
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Random => "random",
            Criterion::Magnitude => "magnitude",
            Criterion::TaylorFo => "taylor_fo",
            Criterion::Wpac => "wpac",
        })
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown criterion `{s}`")))
    }
}

/// Per-head kept count for a ratio.
pub fn kept_dims(head_dim: usize, keep_ratio: f64) -> Result<usize> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Invalid(format!("keep ratio {keep_ratio} outside (0, 1]")));
    }
    let k = (keep_ratio * head_dim as f64).round() as usize;
    if k == 0 {
        return Err(Error::Invalid(format!(
            "keep ratio {keep_ratio} keeps no dimension of a {head_dim}-wide head"
        )));
    }
    Ok(k.min(head_dim))
}

/// Mask keeping `k` leading dims of every head and the whole MLP.
pub fn attention_mask<T: Real>(model: &Vit<T>, k: usize) -> SubnetMask {
    let mut mask = SubnetMask::full(model);
    for heads in &mut mask.attn_keep {
        heads.iter_mut().for_each(|v| *v = k.min(*v));
    }
    mask
}

fn rows_abs_sum<T: Real>(w: &[T], rows: usize) -> Vec<f64> {
    let width = w.len() / rows.max(1);
    w.chunks(width.max(1)).map(|r| r.iter().map(|v| v.as_f64().abs()).sum()).collect()
}

/// Kept-first ranking from per-dimension scores (descending).
fn ranking_from_scores(scores: &[f64]) -> Vec<usize> {
    descending_ranking(scores)
}

/// Ranking that puts a seeded random choice of `k` dims first.
fn random_ranking(dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut chosen = sample(rng, dim, k).into_vec();
    chosen.sort_unstable();
    let mut rest: Vec<usize> = (0..dim).filter(|i| !chosen.contains(i)).collect();
    chosen.append(&mut rest);
    chosen
}

/// Reorders attention dimensions by `criterion` and returns the model with the
/// prefix-keep mask for `keep_ratio`. No fine-tuning is performed.
#[allow(clippy::too_many_arguments)]
pub fn prune_by_criterion<T: Real>(
    model: &Vit<T>,
    proxy: &Batch<'_>,
    criterion: Criterion,
    keep_ratio: f64,
    seed: u64,
    wpac: &WpacConfig,
) -> Result<(Vit<T>, SubnetMask)> {
    let dh = model.arch.head_dim();
    let k = kept_dims(dh, keep_ratio)?;
    let mut out = model.clone();
    match criterion {
        Criterion::Wpac => {
            out = wpac_transform(model, proxy, wpac)?.model;
        }
        Criterion::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for blk in &mut out.blocks {
                for head in &mut blk.attn.heads {
                    let d = head.dim();
                    permute_head(head, TransformKind::Qk, &random_ranking(d, k.min(d), &mut rng))?;
                    permute_head(head, TransformKind::Vo, &random_ranking(d, k.min(d), &mut rng))?;
                }
            }
        }
        Criterion::Magnitude => {
            for blk in &mut out.blocks {
                for head in &mut blk.attn.heads {
                    let d = head.dim();
                    let qk: Vec<f64> = rows_abs_sum(&head.w_q, d)
                        .iter()
                        .zip(rows_abs_sum(&head.w_k, d))
                        .map(|(a, b)| a + b)
                        .collect();
                    let vo: Vec<f64> = rows_abs_sum(&head.w_v, d)
                        .iter()
                        .zip(rows_abs_sum(&head.w_o_t, d))
                        .map(|(a, b)| a + b)
                        .collect();
                    permute_head(head, TransformKind::Qk, &ranking_from_scores(&qk))?;
                    permute_head(head, TransformKind::Vo, &ranking_from_scores(&vo))?;
                }
            }
        }
        Criterion::TaylorFo => {
            let scores = taylor_scores(model, proxy, None, wpac.chunk)?;
            for (b, blk) in out.blocks.iter_mut().enumerate() {
                for (h, head) in blk.attn.heads.iter_mut().enumerate() {
                    let r = h * dh..(h + 1) * dh;
                    permute_head(head, TransformKind::Qk, &ranking_from_scores(&scores.qk[b][r.clone()]))?;
                    permute_head(head, TransformKind::Vo, &ranking_from_scores(&scores.v[b][r]))?;
                }
            }
        }
    }
    let mask = attention_mask(&out, k);
    Ok((out, mask))
}
