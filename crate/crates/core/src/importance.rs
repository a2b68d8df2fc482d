//! First-order Taylor importance, module sensitivity and MACs accounting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::vit::{
    backward, evaluate, forward, ArchConfig, Batch, FeatureId, FeatureKind, ModuleId, ModuleKind,
    SubnetMask, Vit,
};

/// Multiply-accumulate counts. Layernorm, softmax and bias additions are not
/// counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacsModel {
    pub tokens: u64,
    pub embed_dim: u64,
    pub heads: u64,
    pub head_dim: u64,
    pub mlp_hidden: u64,
    pub depth: u64,
    pub overhead: u64,
}

impl MacsModel {
    pub fn new(arch: &ArchConfig) -> Self {
        let d = arch.embed_dim as u64;
        Self {
            tokens: arch.tokens() as u64,
            embed_dim: d,
            heads: arch.heads as u64,
            head_dim: arch.head_dim() as u64,
            mlp_hidden: arch.mlp_hidden as u64,
            depth: arch.depth as u64,
            overhead: (arch.num_patches() * arch.patch_len()) as u64 * d
                + d * arch.num_classes as u64,
        }
    }

    /// Cost of one per-head attention dimension: its Q, K, V and O rows plus
    /// its share of the score and context products.
    pub fn attn_dim(&self) -> u64 {
        let (n, d) = (self.tokens, self.embed_dim);
        4 * n * d + 2 * n * n
    }

    pub fn mlp_dim(&self) -> u64 {
        2 * self.tokens * self.embed_dim
    }

    /// MHSA unit spanning `g` per-head dimensions in each of the `H` heads.
    pub fn mhsa_unit(&self, g: u64) -> u64 {
        self.heads * g * self.attn_dim()
    }

    pub fn mlp_unit(&self, g: u64) -> u64 {
        g * self.mlp_dim()
    }

    /// MACs of the full, unmasked architecture.
    pub fn full(&self) -> u64 {
        self.overhead
            + self.depth
                * (self.heads * self.head_dim * self.attn_dim() + self.mlp_hidden * self.mlp_dim())
    }

    /// MACs of a (possibly sliced) model under an optional mask.
    pub fn of_model<T: Real>(&self, model: &Vit<T>, mask: Option<&SubnetMask>) -> u64 {
        let mut total = self.overhead;
        for (b, blk) in model.blocks.iter().enumerate() {
            if blk.attn.enabled && !mask.is_some_and(|m| m.skip_attn[b]) {
                for (h, head) in blk.attn.heads.iter().enumerate() {
                    let k = mask.map_or(head.dim(), |m| m.attn_keep[b][h]);
                    total += k as u64 * self.attn_dim();
                }
            }
            if blk.mlp.enabled && !mask.is_some_and(|m| m.skip_mlp[b]) {
                let k = mask.map_or(blk.mlp.hidden(), |m| m.mlp_keep[b]);
                total += k as u64 * self.mlp_dim();
            }
        }
        total
    }
}

/// Element score `|g·h|`.
pub fn taylor_element(activation: f64, grad: f64) -> f64 {
    (grad * activation).abs()
}

/// `(C_skip − C) / C`.
pub fn sensitivity_from_costs(base: f64, skipped: f64) -> Result<f64> {
    if base == 0.0 || !base.is_finite() {
        return Err(Error::DegenerateCost(base));
    }
    Ok((skipped - base) / base)
}

/// Normalizes Θ to contribution ratios. Returns the ratios and whether the
/// uniform fallback was used (all Θ zero).
pub fn normalize(theta: &[f64]) -> Result<(Vec<f64>, bool)> {
    if theta.is_empty() {
        return Err(Error::Invalid("module has no dimensions".into()));
    }
    if let Some(v) = theta.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Invalid(format!("importance {v} is not a finite non-negative score")));
    }
    let total: f64 = theta.iter().sum();
    if total == 0.0 {
        let u = 1.0 / theta.len() as f64;
        return Ok((vec![u; theta.len()], true));
    }
    Ok((theta.iter().map(|t| t / total).collect(), false))
}

/// `Σ I / MACs`.
pub fn unit_score(importances: &[f64], macs: u64) -> Result<f64> {
    if importances.is_empty() {
        return Err(Error::Invalid("empty unit".into()));
    }
    if macs == 0 {
        return Err(Error::Invalid("unit with zero MACs".into()));
    }
    Ok(importances.iter().sum::<f64>() / macs as f64)
}

/// Per-token weights `Σ_dims |g·h|` for a `(rows x width)` feature.
pub fn token_weights<T: Real>(features: &[T], grads: &[T], width: usize) -> Result<Vec<f64>> {
    if features.len() != grads.len() {
        return Err(Error::shape("token_weights", "feature/gradient length mismatch"));
    }
    if width == 0 {
        return Ok(vec![]);
    }
    Ok(features
        .chunks(width)
        .zip(grads.chunks(width))
        .map(|(h, g)| {
            h.iter()
                .zip(g)
                .map(|(&h, &g)| taylor_element(h.as_f64(), g.as_f64()))
                .sum()
        })
        .collect())
}

/// Adds `scale · Σ_tokens |g·h|` per column into `out`.
fn accumulate_columns<T: Real>(features: &[T], grads: &[T], width: usize, scale: f64, out: &mut [f64]) {
    if width == 0 {
        return;
    }
    for (h, g) in features.chunks(width).zip(grads.chunks(width)) {
        for ((o, &h), &g) in out.iter_mut().zip(h).zip(g) {
            *o += scale * taylor_element(h.as_f64(), g.as_f64());
        }
    }
}

/// Taylor dimension scores summed over all proxy tokens. Inactive dimensions
/// score 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorScores {
    /// Per block, indexed `head * head_dim + rank`: `|g_q q| + |g_k k|`.
    pub qk: Vec<Vec<f64>>,
    /// Per block, same layout: `|g_v v|`.
    pub v: Vec<Vec<f64>>,
    /// Per block, MLP hidden dims (after GELU).
    pub mlp: Vec<Vec<f64>>,
    pub cost: f64,
}

impl TaylorScores {
    /// Combined score of every attention dimension.
    pub fn mhsa(&self, block: usize) -> Vec<f64> {
        self.qk[block].iter().zip(&self.v[block]).map(|(a, b)| a + b).collect()
    }

    pub fn module(&self, m: ModuleId) -> Vec<f64> {
        match m.kind {
            ModuleKind::Mhsa => self.mhsa(m.block),
            ModuleKind::Mlp => self.mlp[m.block].clone(),
        }
    }
}

/// One forward/backward sweep over the proxy (in chunks) collecting Taylor
/// scores. Chunk gradients are reweighted so the scores refer to the mean
/// cost over the whole proxy.
pub fn taylor_scores<T: Real>(
    model: &Vit<T>,
    proxy: &Batch<'_>,
    mask: Option<&SubnetMask>,
    chunk: usize,
) -> Result<TaylorScores> {
    if proxy.is_empty() {
        return Err(Error::Invalid("empty proxy set".into()));
    }
    let arch = &model.arch;
    let dh = arch.head_dim();
    let depth = model.blocks.len();
    let mut s = TaylorScores {
        qk: vec![vec![0.0; arch.heads * dh]; depth],
        v: vec![vec![0.0; arch.heads * dh]; depth],
        mlp: vec![vec![0.0; arch.mlp_hidden]; depth],
        cost: 0.0,
    };
    let total = proxy.len() as f64;
    for part in proxy.chunks(chunk) {
        let scale = part.len() as f64 / total;
        let out = forward(model, &part, mask)?;
        let mut cache = out.cache.expect("cache kept");
        backward(model, &part, &mut cache)?;
        s.cost += out.cost * scale;
        for b in 0..depth {
            for h in 0..arch.heads {
                let range = h * dh..(h + 1) * dh;
                for kind in [FeatureKind::Query(h), FeatureKind::Key(h), FeatureKind::Value(h)] {
                    let id = FeatureId { block: b, kind };
                    let w = cache.feature_width(id);
                    if w == 0 {
                        continue;
                    }
                    let dst = match kind {
                        FeatureKind::Value(_) => &mut s.v[b][range.clone()],
                        _ => &mut s.qk[b][range.clone()],
                    };
                    let g = cache.feature_grad(id).expect("backward ran");
                    accumulate_columns(cache.feature(id), g, w, scale, dst);
                }
            }
            let id = FeatureId {
                block: b,
                kind: FeatureKind::Hidden,
            };
            let w = cache.feature_width(id);
            if w > 0 {
                let g = cache.feature_grad(id).expect("backward ran");
                accumulate_columns(cache.feature(id), g, w, scale, &mut s.mlp[b]);
            }
        }
    }
    Ok(s)
}

/// γ for a module relative to the (masked) network's cost.
pub fn module_sensitivity<T: Real>(
    model: &Vit<T>,
    proxy: &Batch<'_>,
    module: ModuleId,
    mask: Option<&SubnetMask>,
    chunk: usize,
) -> Result<f64> {
    let base_mask = mask.cloned().unwrap_or_else(|| SubnetMask::full(model));
    let base = evaluate(model, proxy, Some(&base_mask), chunk)?.cost;
    let mut skipped = base_mask;
    skipped.set_skip(module, true)?;
    let skip_cost = evaluate(model, proxy, Some(&skipped), chunk)?.cost;
    sensitivity_from_costs(base, skip_cost)
}

/// Sensitivities of every module still active under `mask`, with the base cost.
pub fn module_sensitivities<T: Real>(
    model: &Vit<T>,
    proxy: &Batch<'_>,
    mask: Option<&SubnetMask>,
    chunk: usize,
) -> Result<(f64, Vec<(ModuleId, f64)>)> {
    let base_mask = mask.cloned().unwrap_or_else(|| SubnetMask::full(model));
    let base = evaluate(model, proxy, Some(&base_mask), chunk)?.cost;
    let mut out = Vec::new();
    for b in 0..model.blocks.len() {
        for m in [ModuleId::mhsa(b), ModuleId::mlp(b)] {
            if base_mask.is_skipped(m) {
                continue;
            }
            let mut skipped = base_mask.clone();
            skipped.set_skip(m, true)?;
            let cost = evaluate(model, proxy, Some(&skipped), chunk)?.cost;
            out.push((m, sensitivity_from_costs(base, cost)?));
        }
    }
    Ok((base, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleImportance {
    pub module: ModuleId,
    pub gamma: f64,
    pub theta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub importance: Vec<f64>,
    pub uniform_fallback: bool,
}

impl ModuleImportance {
    pub fn new(module: ModuleId, gamma: f64, theta: Vec<f64>) -> Result<Self> {
        let (alpha, uniform_fallback) = normalize(&theta)?;
        let importance = alpha.iter().map(|a| gamma * a).collect();
        Ok(Self {
            module,
            gamma,
            theta,
            alpha,
            importance,
            uniform_fallback,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitImportance {
    pub unit: usize,
    pub module: ModuleId,
    pub score: f64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub proxy: String,
    pub seed: u64,
    pub modules: Vec<ModuleImportance>,
    pub units: Vec<UnitImportance>,
}

impl ImportanceReport {
    /// Tab-separated table: `module kind index theta alpha importance macs`.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# proxy={} seed={}", self.proxy, self.seed);
        let _ = writeln!(out, "module\tkind\tindex\ttheta\talpha\timportance\tmacs");
        for m in &self.modules {
            let _ = writeln!(out, "{}\tgamma\t-\t-\t-\t{:.9e}\t-", m.module, m.gamma);
            for (i, ((t, a), v)) in m.theta.iter().zip(&m.alpha).zip(&m.importance).enumerate() {
                let _ = writeln!(out, "{}\tdim\t{i}\t{t:.9e}\t{a:.9e}\t{v:.9e}\t-", m.module);
            }
        }
        for u in &self.units {
            let _ = writeln!(out, "{}\tunit\t{}\t-\t-\t{:.9e}\t{}", u.module, u.unit, u.score, u.macs);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_scores() {
        assert_eq!(taylor_element(0.0, 5.0), 0.0);
        assert_eq!(taylor_element(3.0, 0.0), 0.0);
        assert_eq!(taylor_element(3.0, 2.0), 6.0);
        assert_eq!(taylor_element(-3.0, 2.0), 6.0);
    }

    #[test]
    fn token_weight_examples() {
        let w = token_weights(&[3.0f64, -1.0], &[2.0, 4.0], 2).unwrap();
        assert_eq!(w, vec![10.0]);
        let w = token_weights(&[3.0f64, -1.0, 1.0, 1.0], &[0.0; 4], 2).unwrap();
        assert_eq!(w, vec![0.0, 0.0]);
    }

    #[test]
    fn sensitivity_formula() {
        assert_eq!(sensitivity_from_costs(0.5, 1.0).unwrap(), 1.0);
        assert_eq!(sensitivity_from_costs(0.5, 0.5).unwrap(), 0.0);
        assert!(sensitivity_from_costs(0.5, 0.25).unwrap() < 0.0);
        assert!(matches!(sensitivity_from_costs(0.0, 1.0), Err(Error::DegenerateCost(_))));
    }

    #[test]
    fn normalization_cases() {
        let m = ModuleImportance::new(ModuleId::mlp(0), 0.8, vec![1.0; 4]).unwrap();
        assert_eq!(m.alpha, vec![0.25; 4]);
        for v in &m.importance {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let m = ModuleImportance::new(ModuleId::mlp(0), 1.0, vec![3.0, 1.0]).unwrap();
        assert_eq!(m.alpha, vec![0.75, 0.25]);
        assert_eq!(m.importance, vec![0.75, 0.25]);
        let m = ModuleImportance::new(ModuleId::mlp(0), 1.0, vec![0.0; 3]).unwrap();
        assert!(m.uniform_fallback);
        assert!(normalize(&[]).is_err());
    }

    #[test]
    fn unit_scores() {
        assert!((unit_score(&[0.2, 0.3], 10).unwrap() - 0.05).abs() < 1e-15);
        assert!(unit_score(&[], 10).is_err());
        assert!(unit_score(&[1.0], 0).is_err());
        let a = unit_score(&[1.0], 10).unwrap();
        let b = unit_score(&[1.0], 20).unwrap();
        assert_eq!(a / b, 2.0);
    }

    #[test]
    fn macs_examples() {
        let m = MacsModel::new(&ArchConfig::default());
        assert_eq!(m.mlp_unit(4), 8704);
        assert_eq!(m.mhsa_unit(2), 39440);
        let per_block = m.mhsa_unit(16) + m.mlp_unit(128);
        assert_eq!(m.full(), m.overhead + 4 * per_block);
        // 8 MHSA units of 2 ranks and 32 MLP units of 4 dims tile a block.
        assert_eq!(8 * m.mhsa_unit(2) + 32 * m.mlp_unit(4), per_block);
    }

    #[test]
    fn report_table_has_rows() {
        let mut r = ImportanceReport {
            proxy: "p".into(),
            seed: 3,
            ..Default::default()
        };
        r.modules.push(ModuleImportance::new(ModuleId::mhsa(1), 0.5, vec![1.0, 3.0]).unwrap());
        r.units.push(UnitImportance {
            unit: 7,
            module: ModuleId::mhsa(1),
            score: 0.1,
            macs: 10,
        });
        let t = r.to_table();
        assert_eq!(t.lines().count(), 2 + 1 + 2 + 1);
        assert!(t.contains("mhsa.1\tunit\t7"));
    }
}
