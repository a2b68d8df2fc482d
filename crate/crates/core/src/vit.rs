//! Desk-scale vision transformer with an explicit forward pass and
//! hand-written reverse-mode gradients.
//!
//! Tokens of a batch are stacked into one `(B·n) x d` matrix so every linear
//! layer is a single gemm; attention runs per sample and per head.
//!
//! Per-head projections are stored as row blocks: `w_q`, `w_k`, `w_v` are
//! `dim x d` and `w_o_t` holds the head's `d x dim` column block of `W_o`
//! transposed (`dim x d`). The MLP stores `w1` (`d′ x d`) and `w2_t`
//! (`W_2ᵀ`, `d′ x d`). Every dimension-wise transform is therefore a left
//! multiplication and every prefix-keep sub-network is a row prefix.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{gemm, Op, Real};

const LN_EPS: f64 = 1e-5;

/// Architecture descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            depth: 4,
            embed_dim: 64,
            heads: 4,
            mlp_hidden: 128,
            num_classes: 8,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("depth", self.depth),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Invalid(format!("arch.{name} must be positive")));
            }
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.mlp_hidden % 32 != 0 {
            return Err(Error::Invalid(format!(
                "mlp_hidden {} not divisible by 32",
                self.mlp_hidden
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Invalid(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Token count `n`: patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

/// Residual branch kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Mlp,
    Mhsa,
}

/// One MHSA or MLP branch of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModuleId {
    pub block: usize,
    pub kind: ModuleKind,
}

impl ModuleId {
    pub fn mhsa(block: usize) -> Self {
        Self {
            block,
            kind: ModuleKind::Mhsa,
        }
    }

    pub fn mlp(block: usize) -> Self {
        Self {
            block,
            kind: ModuleKind::Mlp,
        }
    }
}

impl std::fmt::Display for ModuleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.kind {
            ModuleKind::Mhsa => "mhsa",
            ModuleKind::Mlp => "mlp",
        };
        write!(f, "{}.{}", kind, self.block)
    }
}

/// An intermediate feature that can be read from the activation cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    Query(usize),
    Key(usize),
    Value(usize),
    /// MLP hidden activations after the non-linearity.
    Hidden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureId {
    pub block: usize,
    pub kind: FeatureKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    fn new(d: usize) -> Self {
        Self {
            gamma: vec![T::one(); d],
            beta: vec![T::zero(); d],
        }
    }
}

/// Per-head projections; `dim` rows each.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub w_q: Vec<T>,
    pub b_q: Vec<T>,
    pub w_k: Vec<T>,
    pub b_k: Vec<T>,
    pub w_v: Vec<T>,
    pub b_v: Vec<T>,
    /// Transposed column block of `W_o`.
    pub w_o_t: Vec<T>,
}

impl<T: Real> Head<T> {
    pub fn dim(&self) -> usize {
        self.b_q.len()
    }

    fn truncated(&self, k: usize, d: usize) -> Self {
        Self {
            w_q: self.w_q[..k * d].to_vec(),
            b_q: self.b_q[..k].to_vec(),
            w_k: self.w_k[..k * d].to_vec(),
            b_k: self.b_k[..k].to_vec(),
            w_v: self.w_v[..k * d].to_vec(),
            b_v: self.b_v[..k].to_vec(),
            w_o_t: self.w_o_t[..k * d].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub heads: Vec<Head<T>>,
    pub b_o: Vec<T>,
    /// False once every dimension has been sliced away.
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    /// `W_2ᵀ`, stored `hidden x d`.
    pub w2_t: Vec<T>,
    pub b2: Vec<T>,
    pub enabled: bool,
}

impl<T: Real> Mlp<T> {
    pub fn hidden(&self) -> usize {
        self.b1.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

/// Full parameter set plus architecture descriptor.
///
/// The same type doubles as the gradient container returned by [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Vit<T> {
    pub arch: ArchConfig,
    pub patch_w: Vec<T>,
    pub patch_b: Vec<T>,
    pub cls_token: Vec<T>,
    pub pos_embed: Vec<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
    pub head_w: Vec<T>,
    pub head_b: Vec<T>,
}

/// Kept widths of every droppable interior, as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    pub head_dims: Vec<Vec<usize>>,
    pub mlp_dims: Vec<usize>,
    pub attn_enabled: Vec<bool>,
    pub mlp_enabled: Vec<bool>,
}

impl Widths {
    pub fn full(arch: &ArchConfig) -> Self {
        Self {
            head_dims: vec![vec![arch.head_dim(); arch.heads]; arch.depth],
            mlp_dims: vec![arch.mlp_hidden; arch.depth],
            attn_enabled: vec![true; arch.depth],
            mlp_enabled: vec![true; arch.depth],
        }
    }
}

fn linear_init<T: Real, R: Rng + ?Sized>(rng: &mut R, len: usize, std: f64) -> Vec<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..len)
        .map(|_| T::from_f64_lossy(normal.sample(rng)))
        .collect()
}

impl<T: Real> Vit<T> {
    /// Random initialization: Xavier-normal linears, small normal embeddings.
    pub fn init<R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let d = arch.embed_dim;
        let dh = arch.head_dim();
        let hid = arch.mlp_hidden;
        let xavier = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();
        let patch_w = linear_init(rng, d * arch.patch_len(), xavier(arch.patch_len(), d));
        let cls_token = linear_init(rng, d, 0.02);
        let pos_embed = linear_init(rng, arch.tokens() * d, 0.02);
        let mut blocks = Vec::with_capacity(arch.depth);
        for _ in 0..arch.depth {
            let heads = (0..arch.heads)
                .map(|_| Head {
                    w_q: linear_init(rng, dh * d, xavier(d, d)),
                    b_q: vec![T::zero(); dh],
                    w_k: linear_init(rng, dh * d, xavier(d, d)),
                    b_k: vec![T::zero(); dh],
                    w_v: linear_init(rng, dh * d, xavier(d, d)),
                    b_v: vec![T::zero(); dh],
                    w_o_t: linear_init(rng, dh * d, xavier(d, d)),
                })
                .collect();
            blocks.push(Block {
                ln1: LayerNorm::new(d),
                attn: Attention {
                    heads,
                    b_o: vec![T::zero(); d],
                    enabled: true,
                },
                ln2: LayerNorm::new(d),
                mlp: Mlp {
                    w1: linear_init(rng, hid * d, xavier(d, hid)),
                    b1: vec![T::zero(); hid],
                    w2_t: linear_init(rng, hid * d, xavier(hid, d)),
                    b2: vec![T::zero(); d],
                    enabled: true,
                },
            });
        }
        Ok(Self {
            arch,
            patch_w,
            patch_b: vec![T::zero(); d],
            cls_token,
            pos_embed,
            blocks,
            norm: LayerNorm::new(d),
            head_w: linear_init(rng, arch.num_classes * d, xavier(d, arch.num_classes)),
            head_b: vec![T::zero(); arch.num_classes],
        })
    }

    /// Full-width model with every parameter (layernorm included) set to zero.
    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        Ok(Self::zeros_with_widths(arch, &Widths::full(&arch)))
    }

    pub(crate) fn zeros_with_widths(arch: ArchConfig, widths: &Widths) -> Self {
        let d = arch.embed_dim;
        let z = |n: usize| vec![T::zero(); n];
        let blocks = (0..arch.depth)
            .map(|b| Block {
                ln1: LayerNorm {
                    gamma: z(d),
                    beta: z(d),
                },
                attn: Attention {
                    heads: widths.head_dims[b]
                        .iter()
                        .map(|&k| Head {
                            w_q: z(k * d),
                            b_q: z(k),
                            w_k: z(k * d),
                            b_k: z(k),
                            w_v: z(k * d),
                            b_v: z(k),
                            w_o_t: z(k * d),
                        })
                        .collect(),
                    b_o: z(d),
                    enabled: widths.attn_enabled[b],
                },
                ln2: LayerNorm {
                    gamma: z(d),
                    beta: z(d),
                },
                mlp: Mlp {
                    w1: z(widths.mlp_dims[b] * d),
                    b1: z(widths.mlp_dims[b]),
                    w2_t: z(widths.mlp_dims[b] * d),
                    b2: z(d),
                    enabled: widths.mlp_enabled[b],
                },
            })
            .collect();
        Self {
            arch,
            patch_w: z(d * arch.patch_len()),
            patch_b: z(d),
            cls_token: z(d),
            pos_embed: z(arch.tokens() * d),
            blocks,
            norm: LayerNorm {
                gamma: z(d),
                beta: z(d),
            },
            head_w: z(arch.num_classes * d),
            head_b: z(arch.num_classes),
        }
    }

    /// Zero-filled container with this model's shapes.
    pub fn zeros_like(&self) -> Self {
        Self::zeros_with_widths(self.arch, &self.widths())
    }

    pub fn widths(&self) -> Widths {
        Widths {
            head_dims: self
                .blocks
                .iter()
                .map(|b| b.attn.heads.iter().map(Head::dim).collect())
                .collect(),
            mlp_dims: self.blocks.iter().map(|b| b.mlp.hidden()).collect(),
            attn_enabled: self.blocks.iter().map(|b| b.attn.enabled).collect(),
            mlp_enabled: self.blocks.iter().map(|b| b.mlp.enabled).collect(),
        }
    }

    /// Element-wise cast to another precision.
    pub fn cast<U: Real>(&self) -> Vit<U> {
        let mut out = Vit::<U>::zeros_with_widths(self.arch, &self.widths());
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (o, &i) in dst.iter_mut().zip(src) {
                *o = U::from_f64_lossy(i.as_f64());
            }
        }
        out
    }

    /// Named tensors with shapes, in a fixed canonical order.
    pub fn named_shapes(arch: &ArchConfig, widths: &Widths) -> Vec<(String, Vec<usize>)> {
        let d = arch.embed_dim;
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![d, arch.patch_len()]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![d]),
            ("pos_embed".to_string(), vec![arch.tokens(), d]),
        ];
        for b in 0..arch.depth {
            let p = format!("blocks.{b}");
            out.push((format!("{p}.ln1.gamma"), vec![d]));
            out.push((format!("{p}.ln1.beta"), vec![d]));
            for (h, &k) in widths.head_dims[b].iter().enumerate() {
                let hp = format!("{p}.attn.heads.{h}");
                for name in ["w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o_t"] {
                    let shape = if name.starts_with('b') { vec![k] } else { vec![k, d] };
                    out.push((format!("{hp}.{name}"), shape));
                }
            }
            out.push((format!("{p}.attn.b_o"), vec![d]));
            out.push((format!("{p}.ln2.gamma"), vec![d]));
            out.push((format!("{p}.ln2.beta"), vec![d]));
            let k = widths.mlp_dims[b];
            out.push((format!("{p}.mlp.w1"), vec![k, d]));
            out.push((format!("{p}.mlp.b1"), vec![k]));
            out.push((format!("{p}.mlp.w2_t"), vec![k, d]));
            out.push((format!("{p}.mlp.b2"), vec![d]));
        }
        out.push(("norm.gamma".to_string(), vec![d]));
        out.push(("norm.beta".to_string(), vec![d]));
        out.push(("head.weight".to_string(), vec![arch.num_classes, d]));
        out.push(("head.bias".to_string(), vec![arch.num_classes]));
        out
    }

    /// Parameter slices in the order of [`Vit::named_shapes`].
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![&self.patch_w, &self.patch_b, &self.cls_token, &self.pos_embed];
        for blk in &self.blocks {
            out.push(&blk.ln1.gamma);
            out.push(&blk.ln1.beta);
            for h in &blk.attn.heads {
                out.extend([
                    &h.w_q[..],
                    &h.b_q[..],
                    &h.w_k[..],
                    &h.b_k[..],
                    &h.w_v[..],
                    &h.b_v[..],
                    &h.w_o_t[..],
                ]);
            }
            out.push(&blk.attn.b_o);
            out.push(&blk.ln2.gamma);
            out.push(&blk.ln2.beta);
            out.extend([&blk.mlp.w1[..], &blk.mlp.b1[..], &blk.mlp.w2_t[..], &blk.mlp.b2[..]]);
        }
        out.extend([&self.norm.gamma[..], &self.norm.beta[..], &self.head_w[..], &self.head_b[..]]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for blk in &mut self.blocks {
            out.push(&mut blk.ln1.gamma);
            out.push(&mut blk.ln1.beta);
            for h in &mut blk.attn.heads {
                out.push(&mut h.w_q);
                out.push(&mut h.b_q);
                out.push(&mut h.w_k);
                out.push(&mut h.b_k);
                out.push(&mut h.w_v);
                out.push(&mut h.b_v);
                out.push(&mut h.w_o_t);
            }
            out.push(&mut blk.attn.b_o);
            out.push(&mut blk.ln2.gamma);
            out.push(&mut blk.ln2.beta);
            out.push(&mut blk.mlp.w1);
            out.push(&mut blk.mlp.b1);
            out.push(&mut blk.mlp.w2_t);
            out.push(&mut blk.mlp.b2);
        }
        out.push(&mut self.norm.gamma);
        out.push(&mut self.norm.beta);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// For each tensor (canonical order), the number of leading elements that
    /// take part in the sub-network selected by `mask`. Everything past that
    /// prefix receives no gradient.
    pub fn active_lens(&self, mask: Option<&SubnetMask>) -> Vec<usize> {
        let d = self.arch.embed_dim;
        let mut out = vec![
            self.patch_w.len(),
            self.patch_b.len(),
            self.cls_token.len(),
            self.pos_embed.len(),
        ];
        for (b, blk) in self.blocks.iter().enumerate() {
            let attn_on = blk.attn.enabled && !mask.is_some_and(|m| m.skip_attn[b]);
            let on = |n: usize| if attn_on { n } else { 0 };
            out.push(on(d));
            out.push(on(d));
            for (h, head) in blk.attn.heads.iter().enumerate() {
                let k = if attn_on {
                    mask.map_or(head.dim(), |m| m.attn_keep[b][h])
                } else {
                    0
                };
                out.extend([k * d, k, k * d, k, k * d, k, k * d]);
            }
            out.push(on(d));
            let mlp_on = blk.mlp.enabled && !mask.is_some_and(|m| m.skip_mlp[b]);
            let k = if mlp_on {
                mask.map_or(blk.mlp.hidden(), |m| m.mlp_keep[b])
            } else {
                0
            };
            let on = |n: usize| if mlp_on { n } else { 0 };
            out.extend([on(d), on(d), k * d, k, k * d, on(d)]);
        }
        out.extend([d, d, self.head_w.len(), self.head_b.len()]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Physically slices every head and MLP to the prefix kept by `mask`.
    pub fn sliced(&self, mask: &SubnetMask) -> Result<Self> {
        mask.validate(self)?;
        let d = self.arch.embed_dim;
        let mut out = self.clone();
        for (b, blk) in out.blocks.iter_mut().enumerate() {
            if mask.skip_attn[b] || !blk.attn.enabled {
                blk.attn.enabled = false;
                for head in &mut blk.attn.heads {
                    *head = head.truncated(0, d);
                }
            } else {
                for (h, head) in blk.attn.heads.iter_mut().enumerate() {
                    *head = head.truncated(mask.attn_keep[b][h], d);
                }
            }
            let k = if mask.skip_mlp[b] || !blk.mlp.enabled {
                blk.mlp.enabled = false;
                0
            } else {
                mask.mlp_keep[b]
            };
            blk.mlp.w1.truncate(k * d);
            blk.mlp.b1.truncate(k);
            blk.mlp.w2_t.truncate(k * d);
        }
        Ok(out)
    }
}

/// Prefix-keep sub-network selector.
///
/// `attn_keep[b][h]` leading dimensions of head `h` in block `b` stay active
/// (the same count applies to its Q/K and V/O dimensions); `mlp_keep[b]`
/// leading hidden units of block `b` stay active. A skipped module's residual
/// branch contributes nothing, bias included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubnetMask {
    pub attn_keep: Vec<Vec<usize>>,
    pub mlp_keep: Vec<usize>,
    pub skip_attn: Vec<bool>,
    pub skip_mlp: Vec<bool>,
}

impl SubnetMask {
    /// Keeps everything the model currently has.
    pub fn full<T: Real>(model: &Vit<T>) -> Self {
        let w = model.widths();
        Self {
            attn_keep: w.head_dims,
            mlp_keep: w.mlp_dims,
            skip_attn: w.attn_enabled.iter().map(|e| !e).collect(),
            skip_mlp: w.mlp_enabled.iter().map(|e| !e).collect(),
        }
    }

    /// Full mask with one residual branch skipped.
    pub fn skipping<T: Real>(model: &Vit<T>, module: ModuleId) -> Result<Self> {
        let mut m = Self::full(model);
        m.set_skip(module, true)?;
        Ok(m)
    }

    pub fn set_skip(&mut self, module: ModuleId, skip: bool) -> Result<()> {
        let flags = match module.kind {
            ModuleKind::Mhsa => &mut self.skip_attn,
            ModuleKind::Mlp => &mut self.skip_mlp,
        };
        let slot = flags
            .get_mut(module.block)
            .ok_or_else(|| Error::Invalid(format!("unknown module {module}")))?;
        *slot = skip;
        Ok(())
    }

    pub fn is_skipped(&self, module: ModuleId) -> bool {
        match module.kind {
            ModuleKind::Mhsa => self.skip_attn[module.block],
            ModuleKind::Mlp => self.skip_mlp[module.block],
        }
    }

    pub fn validate<T: Real>(&self, model: &Vit<T>) -> Result<()> {
        let depth = model.blocks.len();
        if self.attn_keep.len() != depth
            || self.mlp_keep.len() != depth
            || self.skip_attn.len() != depth
            || self.skip_mlp.len() != depth
        {
            return Err(Error::Invalid(format!(
                "mask describes a different depth than the model ({depth} blocks)"
            )));
        }
        for (b, blk) in model.blocks.iter().enumerate() {
            if self.attn_keep[b].len() != blk.attn.heads.len() {
                return Err(Error::Invalid(format!("mask head count mismatch in block {b}")));
            }
            if !self.skip_attn[b] && blk.attn.enabled {
                for (h, head) in blk.attn.heads.iter().enumerate() {
                    let k = self.attn_keep[b][h];
                    if k == 0 || k > head.dim() {
                        return Err(Error::Invalid(format!(
                            "block {b} head {h}: keep {k} outside [1, {}]",
                            head.dim()
                        )));
                    }
                }
            }
            if !self.skip_mlp[b] && blk.mlp.enabled {
                let k = self.mlp_keep[b];
                if k == 0 || k > blk.mlp.hidden() {
                    return Err(Error::Invalid(format!(
                        "block {b} mlp: keep {k} outside [1, {}]",
                        blk.mlp.hidden()
                    )));
                }
            }
        }
        Ok(())
    }

    fn attn_width<T: Real>(&self, model: &Vit<T>, b: usize, h: usize) -> usize {
        if self.skip_attn[b] || !model.blocks[b].attn.enabled {
            0
        } else {
            self.attn_keep[b][h]
        }
    }

    fn mlp_width<T: Real>(&self, model: &Vit<T>, b: usize) -> usize {
        if self.skip_mlp[b] || !model.blocks[b].mlp.enabled {
            0
        } else {
            self.mlp_keep[b]
        }
    }
}

/// Images (`N x C x H x W`, row-major `f32`) with integer labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub images: &'a [f32],
    pub labels: &'a [u32],
}

impl<'a> Batch<'a> {
    pub fn new(images: &'a [f32], labels: &'a [u32]) -> Self {
        Self { images, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Batch<'a> {
        let per = self.images.len() / self.labels.len().max(1);
        Batch {
            images: &self.images[start * per..end * per],
            labels: &self.labels[start..end],
        }
    }

    /// Consecutive sub-batches of at most `size` samples.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Batch<'a>> + '_ {
        let n = self.len();
        let size = size.max(1);
        (0..n.div_ceil(size)).map(move |i| self.slice(i * size, ((i + 1) * size).min(n)))
    }
}

#[derive(Debug, Clone, Default)]
struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
    out: Vec<T>,
}

/// Cached intermediates of one block (and, after [`backward`], their gradients).
#[derive(Debug, Clone, Default)]
pub struct BlockCache<T> {
    ln1: LnCache<T>,
    /// Per head `(B·n) x k` query/key/value features.
    pub q: Vec<Vec<T>>,
    pub k: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Per head `B x n x n` attention probabilities.
    pub attn: Vec<Vec<T>>,
    ctx: Vec<Vec<T>>,
    ln2: LnCache<T>,
    pre: Vec<T>,
    /// `(B·n) x k` MLP activations after GELU.
    pub hidden: Vec<T>,
    pub grad_q: Vec<Vec<T>>,
    pub grad_k: Vec<Vec<T>>,
    pub grad_v: Vec<Vec<T>>,
    pub grad_hidden: Vec<T>,
    head_widths: Vec<usize>,
    mlp_width: usize,
}

/// Everything [`backward`] needs, plus the activations and (after backward)
/// activation gradients used for Taylor importance.
#[derive(Debug, Clone)]
pub struct ActivationCache<T> {
    pub batch: usize,
    pub tokens: usize,
    pub mask: SubnetMask,
    patches: Vec<T>,
    pub blocks: Vec<BlockCache<T>>,
    norm: LnCache<T>,
    probs: Vec<f64>,
    has_grads: bool,
}

impl<T: Real> ActivationCache<T> {
    pub fn has_grads(&self) -> bool {
        self.has_grads
    }

    /// Width of a feature (columns per token row), 0 if inactive.
    pub fn feature_width(&self, id: FeatureId) -> usize {
        let bc = &self.blocks[id.block];
        match id.kind {
            FeatureKind::Query(h) | FeatureKind::Key(h) | FeatureKind::Value(h) => bc.head_widths[h],
            FeatureKind::Hidden => bc.mlp_width,
        }
    }

    /// `(B·n) x width` activation matrix.
    pub fn feature(&self, id: FeatureId) -> &[T] {
        let bc = &self.blocks[id.block];
        match id.kind {
            FeatureKind::Query(h) => &bc.q[h],
            FeatureKind::Key(h) => &bc.k[h],
            FeatureKind::Value(h) => &bc.v[h],
            FeatureKind::Hidden => &bc.hidden,
        }
    }

    /// Loss gradient of a feature; `None` before [`backward`] ran.
    pub fn feature_grad(&self, id: FeatureId) -> Option<&[T]> {
        if !self.has_grads {
            return None;
        }
        let bc = &self.blocks[id.block];
        Some(match id.kind {
            FeatureKind::Query(h) => &bc.grad_q[h],
            FeatureKind::Key(h) => &bc.grad_k[h],
            FeatureKind::Value(h) => &bc.grad_v[h],
            FeatureKind::Hidden => &bc.grad_hidden,
        })
    }
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `B x num_classes`.
    pub logits: Vec<T>,
    /// Mean cross-entropy over the batch.
    pub cost: f64,
    pub correct: usize,
    pub cache: Option<ActivationCache<T>>,
}

/// Hook that may rewrite a feature right after it is computed.
pub type FeatureHook<'h, T> = &'h mut dyn FnMut(FeatureId, &mut [T]);

fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

fn layer_norm_forward<T: Real>(x: &[T], ln: &LayerNorm<T>, d: usize, rows: usize) -> LnCache<T> {
    let eps = T::from_f64_lossy(LN_EPS);
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut cache = LnCache {
        xhat: vec![T::zero(); rows * d],
        rstd: vec![T::zero(); rows],
        out: vec![T::zero(); rows * d],
    };
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        cache.rstd[r] = rstd;
        for j in 0..d {
            let xh = (xr[j] - mean) * rstd;
            cache.xhat[r * d + j] = xh;
            cache.out[r * d + j] = xh * ln.gamma[j] + ln.beta[j];
        }
    }
    cache
}

/// Accumulates parameter grads into `g` and returns the input gradient.
fn layer_norm_backward<T: Real>(
    dy: &[T],
    cache: &LnCache<T>,
    ln: &LayerNorm<T>,
    g: &mut LayerNorm<T>,
    d: usize,
    rows: usize,
) -> Vec<T> {
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut dx = vec![T::zero(); rows * d];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut sum = T::zero();
        let mut sum_xh = T::zero();
        for j in 0..d {
            g.gamma[j] = g.gamma[j] + dyr[j] * xh[j];
            g.beta[j] = g.beta[j] + dyr[j];
            dxhat[j] = dyr[j] * ln.gamma[j];
            sum = sum + dxhat[j];
            sum_xh = sum_xh + dxhat[j] * xh[j];
        }
        let rstd = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] = rstd * (dxhat[j] - sum * inv_d - xh[j] * sum_xh * inv_d);
        }
    }
    dx
}

fn add_bias<T: Real>(x: &mut [T], bias: &[T]) {
    let w = bias.len();
    if w == 0 {
        return;
    }
    for row in x.chunks_mut(w) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
}

fn col_sum_into<T: Real>(x: &[T], width: usize, out: &mut [T]) {
    if width == 0 {
        return;
    }
    for row in x.chunks(width) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
}

fn check_finite<T: Real>(x: &[T], what: impl FnOnce() -> String) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

fn patchify<T: Real>(arch: &ArchConfig, images: &[f32], batch: usize) -> Vec<T> {
    let (c, s, p, g) = (arch.channels, arch.image_size, arch.patch_size, arch.grid());
    let pl = arch.patch_len();
    let np = arch.num_patches();
    let mut out = vec![T::zero(); batch * np * pl];
    for b in 0..batch {
        let img = &images[b * arch.image_len()..(b + 1) * arch.image_len()];
        for gy in 0..g {
            for gx in 0..g {
                let base = (b * np + gy * g + gx) * pl;
                let mut idx = 0;
                for ch in 0..c {
                    for py in 0..p {
                        let row = ch * s * s + (gy * p + py) * s + gx * p;
                        for px in 0..p {
                            out[base + idx] = T::from_f64_lossy(img[row + px] as f64);
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Forward pass with the cache retained for [`backward`].
pub fn forward<T: Real>(
    model: &Vit<T>,
    batch: &Batch<'_>,
    mask: Option<&SubnetMask>,
) -> Result<ForwardOutput<T>> {
    forward_impl(model, batch, mask, true, None)
}

/// Forward pass without retaining activations.
pub fn infer<T: Real>(
    model: &Vit<T>,
    batch: &Batch<'_>,
    mask: Option<&SubnetMask>,
) -> Result<ForwardOutput<T>> {
    forward_impl(model, batch, mask, false, None)
}

/// Forward pass that lets `hook` rewrite intermediate features in flight.
pub fn forward_with_hook<T: Real>(
    model: &Vit<T>,
    batch: &Batch<'_>,
    mask: Option<&SubnetMask>,
    hook: FeatureHook<'_, T>,
) -> Result<ForwardOutput<T>> {
    forward_impl(model, batch, mask, true, Some(hook))
}

/// Cost with one residual branch disabled.
pub fn skip_module_forward<T: Real>(
    model: &Vit<T>,
    batch: &Batch<'_>,
    module: ModuleId,
) -> Result<f64> {
    let mask = SubnetMask::skipping(model, module)?;
    Ok(infer(model, batch, Some(&mask))?.cost)
}

fn forward_impl<T: Real>(
    model: &Vit<T>,
    batch: &Batch<'_>,
    mask: Option<&SubnetMask>,
    keep: bool,
    mut hook: Option<FeatureHook<'_, T>>,
) -> Result<ForwardOutput<T>> {
    let arch = &model.arch;
    let bsz = batch.len();
    if bsz == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    if batch.images.len() != bsz * arch.image_len() {
        return Err(Error::shape(
            "forward",
            format!(
                "{} image values for {} samples of {} values",
                batch.images.len(),
                bsz,
                arch.image_len()
            ),
        ));
    }
    if let Some(&l) = batch.labels.iter().find(|&&l| l as usize >= arch.num_classes) {
        return Err(Error::Invalid(format!("label {l} out of range")));
    }
    let full;
    let mask = match mask {
        Some(m) => {
            m.validate(model)?;
            m
        }
        None => {
            full = SubnetMask::full(model);
            &full
        }
    };

    let d = arch.embed_dim;
    let n = arch.tokens();
    let np = arch.num_patches();
    let rows = bsz * n;
    let scale = T::one() / T::from_usize(arch.head_dim()).unwrap().sqrt();

    // Embedding.
    let patches: Vec<T> = patchify(arch, batch.images, bsz);
    let mut emb = vec![T::zero(); bsz * np * d];
    gemm(bsz * np, arch.patch_len(), d, &patches, Op::N, &model.patch_w, Op::T, T::zero(), &mut emb);
    let mut x = vec![T::zero(); rows * d];
    for s in 0..bsz {
        x[s * n * d..s * n * d + d].copy_from_slice(&model.cls_token);
        x[(s * n + 1) * d..(s + 1) * n * d].copy_from_slice(&emb[s * np * d..(s + 1) * np * d]);
        for t in 1..n {
            add_bias(&mut x[(s * n + t) * d..(s * n + t + 1) * d], &model.patch_b);
        }
        add_bias(&mut x[s * n * d..(s + 1) * n * d], &model.pos_embed);
    }

    let mut block_caches = Vec::with_capacity(if keep { model.blocks.len() } else { 0 });
    for (b, blk) in model.blocks.iter().enumerate() {
        let mut bc = BlockCache::<T>::default();
        let heads = blk.attn.heads.len();
        bc.head_widths = (0..heads).map(|h| mask.attn_width(model, b, h)).collect();
        bc.mlp_width = mask.mlp_width(model, b);

        let attn_on = !(mask.skip_attn[b] || !blk.attn.enabled);
        if attn_on {
            bc.ln1 = layer_norm_forward(&x, &blk.ln1, d, rows);
            let mut out = vec![T::zero(); rows * d];
            for (h, head) in blk.attn.heads.iter().enumerate() {
                let k = bc.head_widths[h];
                let mut q = vec![T::zero(); rows * k];
                let mut kk = vec![T::zero(); rows * k];
                let mut v = vec![T::zero(); rows * k];
                gemm(rows, d, k, &bc.ln1.out, Op::N, &head.w_q[..k * d], Op::T, T::zero(), &mut q);
                gemm(rows, d, k, &bc.ln1.out, Op::N, &head.w_k[..k * d], Op::T, T::zero(), &mut kk);
                gemm(rows, d, k, &bc.ln1.out, Op::N, &head.w_v[..k * d], Op::T, T::zero(), &mut v);
                add_bias(&mut q, &head.b_q[..k]);
                add_bias(&mut kk, &head.b_k[..k]);
                add_bias(&mut v, &head.b_v[..k]);
                if let Some(hk) = hook.as_mut() {
                    hk(FeatureId { block: b, kind: FeatureKind::Query(h) }, &mut q);
                    hk(FeatureId { block: b, kind: FeatureKind::Key(h) }, &mut kk);
                    hk(FeatureId { block: b, kind: FeatureKind::Value(h) }, &mut v);
                }
                let mut probs = vec![T::zero(); bsz * n * n];
                let mut ctx = vec![T::zero(); rows * k];
                for s in 0..bsz {
                    let qs = &q[s * n * k..(s + 1) * n * k];
                    let ks = &kk[s * n * k..(s + 1) * n * k];
                    let vs = &v[s * n * k..(s + 1) * n * k];
                    let ps = &mut probs[s * n * n..(s + 1) * n * n];
                    gemm(n, k, n, qs, Op::N, ks, Op::T, T::zero(), ps);
                    for row in ps.chunks_mut(n) {
                        let mut mx = T::neg_infinity();
                        for p in row.iter_mut() {
                            *p = *p * scale;
                            mx = mx.max(*p);
                        }
                        let mut z = T::zero();
                        for p in row.iter_mut() {
                            *p = (*p - mx).exp();
                            z = z + *p;
                        }
                        for p in row.iter_mut() {
                            *p = *p / z;
                        }
                    }
                    gemm(n, n, k, ps, Op::N, vs, Op::N, T::zero(), &mut ctx[s * n * k..(s + 1) * n * k]);
                }
                gemm(rows, k, d, &ctx, Op::N, &head.w_o_t[..k * d], Op::N, T::one(), &mut out);
                bc.q.push(q);
                bc.k.push(kk);
                bc.v.push(v);
                bc.attn.push(probs);
                bc.ctx.push(ctx);
            }
            add_bias(&mut out, &blk.attn.b_o);
            for (xv, o) in x.iter_mut().zip(&out) {
                *xv = *xv + *o;
            }
        }

        let mlp_on = !(mask.skip_mlp[b] || !blk.mlp.enabled);
        if mlp_on {
            bc.ln2 = layer_norm_forward(&x, &blk.ln2, d, rows);
            let k = bc.mlp_width;
            let mut pre = vec![T::zero(); rows * k];
            gemm(rows, d, k, &bc.ln2.out, Op::N, &blk.mlp.w1[..k * d], Op::T, T::zero(), &mut pre);
            add_bias(&mut pre, &blk.mlp.b1[..k]);
            let mut hidden: Vec<T> = pre.iter().map(|&p| gelu(p)).collect();
            if let Some(hk) = hook.as_mut() {
                hk(FeatureId { block: b, kind: FeatureKind::Hidden }, &mut hidden);
            }
            let mut out = vec![T::zero(); rows * d];
            gemm(rows, k, d, &hidden, Op::N, &blk.mlp.w2_t[..k * d], Op::N, T::zero(), &mut out);
            add_bias(&mut out, &blk.mlp.b2);
            for (xv, o) in x.iter_mut().zip(&out) {
                *xv = *xv + *o;
            }
            bc.pre = pre;
            bc.hidden = hidden;
        }
        check_finite(&x, || format!("activations of block {b}"))?;
        if keep {
            block_caches.push(bc);
        }
    }

    // Classifier on the class token.
    let mut cls = vec![T::zero(); bsz * d];
    for s in 0..bsz {
        cls[s * d..(s + 1) * d].copy_from_slice(&x[s * n * d..s * n * d + d]);
    }
    let norm = layer_norm_forward(&cls, &model.norm, d, bsz);
    let c = arch.num_classes;
    let mut logits = vec![T::zero(); bsz * c];
    gemm(bsz, d, c, &norm.out, Op::N, &model.head_w, Op::T, T::zero(), &mut logits);
    add_bias(&mut logits, &model.head_b);
    check_finite(&logits, || "logits".to_string())?;

    let mut probs = vec![0.0f64; bsz * c];
    let mut cost = 0.0;
    let mut correct = 0;
    for s in 0..bsz {
        let row: Vec<f64> = logits[s * c..(s + 1) * c].iter().map(|v| v.as_f64()).collect();
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        let label = batch.labels[s] as usize;
        cost += z.ln() + mx - row[label];
        for j in 0..c {
            probs[s * c + j] = (row[j] - mx).exp() / z;
        }
        let argmax = (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best });
        if argmax == label {
            correct += 1;
        }
    }
    cost /= bsz as f64;

    let cache = keep.then(|| ActivationCache {
        batch: bsz,
        tokens: n,
        mask: mask.clone(),
        patches,
        blocks: block_caches,
        norm,
        probs,
        has_grads: false,
    });
    Ok(ForwardOutput {
        logits,
        cost,
        correct,
        cache,
    })
}

/// Exact gradients of the mean cross-entropy with respect to every parameter,
/// also storing the gradients of the cached Q/K/V and MLP hidden features.
pub fn backward<T: Real>(
    model: &Vit<T>,
    batch: &Batch<'_>,
    cache: &mut ActivationCache<T>,
) -> Result<Vit<T>> {
    let arch = &model.arch;
    let bsz = batch.len();
    if cache.batch != bsz || cache.blocks.len() != model.blocks.len() {
        return Err(Error::Invalid(
            "activation cache does not belong to this batch/model".into(),
        ));
    }
    let d = arch.embed_dim;
    let n = arch.tokens();
    let np = arch.num_patches();
    let rows = bsz * n;
    let c = arch.num_classes;
    let scale = T::one() / T::from_usize(arch.head_dim()).unwrap().sqrt();
    let mut g = model.zeros_like();

    // Softmax cross-entropy.
    let inv_b = 1.0 / bsz as f64;
    let mut dlogits = vec![T::zero(); bsz * c];
    for s in 0..bsz {
        let label = batch.labels[s] as usize;
        for j in 0..c {
            let onehot = if j == label { 1.0 } else { 0.0 };
            dlogits[s * c + j] = T::from_f64_lossy((cache.probs[s * c + j] - onehot) * inv_b);
        }
    }
    gemm(c, bsz, d, &dlogits, Op::T, &cache.norm.out, Op::N, T::zero(), &mut g.head_w);
    col_sum_into(&dlogits, c, &mut g.head_b);
    let mut dnorm = vec![T::zero(); bsz * d];
    gemm(bsz, c, d, &dlogits, Op::N, &model.head_w, Op::N, T::zero(), &mut dnorm);
    let dcls = layer_norm_backward(&dnorm, &cache.norm, &model.norm, &mut g.norm, d, bsz);
    let mut dx = vec![T::zero(); rows * d];
    for s in 0..bsz {
        dx[s * n * d..s * n * d + d].copy_from_slice(&dcls[s * d..(s + 1) * d]);
    }

    for b in (0..model.blocks.len()).rev() {
        let blk = &model.blocks[b];
        let gblk = &mut g.blocks[b];
        let bc = &mut cache.blocks[b];

        let mlp_on = !(cache.mask.skip_mlp[b] || !blk.mlp.enabled);
        if mlp_on {
            let k = bc.mlp_width;
            // dx is the gradient of the block output = residual + mlp output.
            gemm(k, rows, d, &bc.hidden, Op::T, &dx, Op::N, T::zero(), &mut gblk.mlp.w2_t[..k * d]);
            col_sum_into(&dx, d, &mut gblk.mlp.b2);
            let mut dhidden = vec![T::zero(); rows * k];
            gemm(rows, d, k, &dx, Op::N, &blk.mlp.w2_t[..k * d], Op::T, T::zero(), &mut dhidden);
            let dpre: Vec<T> = dhidden
                .iter()
                .zip(&bc.pre)
                .map(|(&dh, &p)| dh * gelu_grad(p))
                .collect();
            bc.grad_hidden = dhidden;
            gemm(k, rows, d, &dpre, Op::T, &bc.ln2.out, Op::N, T::zero(), &mut gblk.mlp.w1[..k * d]);
            col_sum_into(&dpre, k, &mut gblk.mlp.b1[..k]);
            let mut dln = vec![T::zero(); rows * d];
            gemm(rows, k, d, &dpre, Op::N, &blk.mlp.w1[..k * d], Op::N, T::zero(), &mut dln);
            let dres = layer_norm_backward(&dln, &bc.ln2, &blk.ln2, &mut gblk.ln2, d, rows);
            for (a, r) in dx.iter_mut().zip(&dres) {
                *a = *a + *r;
            }
        }

        let attn_on = !(cache.mask.skip_attn[b] || !blk.attn.enabled);
        if attn_on {
            col_sum_into(&dx, d, &mut gblk.attn.b_o);
            let mut dln = vec![T::zero(); rows * d];
            bc.grad_q.clear();
            bc.grad_k.clear();
            bc.grad_v.clear();
            for (h, head) in blk.attn.heads.iter().enumerate() {
                let k = bc.head_widths[h];
                let gh = &mut gblk.attn.heads[h];
                let ctx = &bc.ctx[h];
                gemm(k, rows, d, ctx, Op::T, &dx, Op::N, T::zero(), &mut gh.w_o_t[..k * d]);
                let mut dctx = vec![T::zero(); rows * k];
                gemm(rows, d, k, &dx, Op::N, &head.w_o_t[..k * d], Op::T, T::zero(), &mut dctx);
                let mut dq = vec![T::zero(); rows * k];
                let mut dk = vec![T::zero(); rows * k];
                let mut dv = vec![T::zero(); rows * k];
                let mut dp = vec![T::zero(); n * n];
                for s in 0..bsz {
                    let r = s * n * k..(s + 1) * n * k;
                    let ps = &bc.attn[h][s * n * n..(s + 1) * n * n];
                    let dctx_s = &dctx[r.clone()];
                    gemm(n, k, n, dctx_s, Op::N, &bc.v[h][r.clone()], Op::T, T::zero(), &mut dp);
                    gemm(n, n, k, ps, Op::T, dctx_s, Op::N, T::zero(), &mut dv[r.clone()]);
                    for i in 0..n {
                        let prow = &ps[i * n..(i + 1) * n];
                        let drow = &mut dp[i * n..(i + 1) * n];
                        let dot = prow.iter().zip(drow.iter()).map(|(&p, &g)| p * g).sum::<T>();
                        for (dd, &p) in drow.iter_mut().zip(prow) {
                            *dd = p * (*dd - dot) * scale;
                        }
                    }
                    gemm(n, n, k, &dp, Op::N, &bc.k[h][r.clone()], Op::N, T::zero(), &mut dq[r.clone()]);
                    gemm(n, n, k, &dp, Op::T, &bc.q[h][r.clone()], Op::N, T::zero(), &mut dk[r.clone()]);
                }
                for (dw, db, w, dfeat) in [
                    (&mut gh.w_q, &mut gh.b_q, &head.w_q, &dq),
                    (&mut gh.w_k, &mut gh.b_k, &head.w_k, &dk),
                    (&mut gh.w_v, &mut gh.b_v, &head.w_v, &dv),
                ] {
                    gemm(k, rows, d, dfeat, Op::T, &bc.ln1.out, Op::N, T::zero(), &mut dw[..k * d]);
                    col_sum_into(dfeat, k, &mut db[..k]);
                    gemm(rows, k, d, dfeat, Op::N, &w[..k * d], Op::N, T::one(), &mut dln);
                }
                bc.grad_q.push(dq);
                bc.grad_k.push(dk);
                bc.grad_v.push(dv);
            }
            let dres = layer_norm_backward(&dln, &bc.ln1, &blk.ln1, &mut gblk.ln1, d, rows);
            for (a, r) in dx.iter_mut().zip(&dres) {
                *a = *a + *r;
            }
        }
    }

    // Embedding.
    let mut dpatch = vec![T::zero(); bsz * np * d];
    for s in 0..bsz {
        let xs = &dx[s * n * d..(s + 1) * n * d];
        for (o, &v) in g.cls_token.iter_mut().zip(&xs[..d]) {
            *o = *o + v;
        }
        for (o, &v) in g.pos_embed.iter_mut().zip(xs) {
            *o = *o + v;
        }
        dpatch[s * np * d..(s + 1) * np * d].copy_from_slice(&xs[d..]);
    }
    col_sum_into(&dpatch, d, &mut g.patch_b);
    gemm(d, bsz * np, arch.patch_len(), &dpatch, Op::T, &cache.patches, Op::N, T::zero(), &mut g.patch_w);

    cache.has_grads = true;
    Ok(g)
}

/// Forward and backward in one call.
pub fn loss_and_grad<T: Real>(
    model: &Vit<T>,
    batch: &Batch<'_>,
    mask: Option<&SubnetMask>,
) -> Result<(f64, Vit<T>, ActivationCache<T>)> {
    let out = forward(model, batch, mask)?;
    let mut cache = out.cache.expect("forward keeps the cache");
    let grads = backward(model, batch, &mut cache)?;
    Ok((out.cost, grads, cache))
}

/// Mean cost and accuracy over a dataset, evaluated in chunks.
pub fn evaluate<T: Real>(
    model: &Vit<T>,
    data: &Batch<'_>,
    mask: Option<&SubnetMask>,
    chunk: usize,
) -> Result<Evaluation> {
    let mut cost = 0.0;
    let mut correct = 0;
    for part in data.chunks(chunk) {
        let out = infer(model, &part, mask)?;
        cost += out.cost * part.len() as f64;
        correct += out.correct;
    }
    let n = data.len().max(1) as f64;
    Ok(Evaluation {
        cost: cost / n,
        accuracy: correct as f64 / n,
        samples: data.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub cost: f64,
    /// Fraction in `[0, 1]`.
    pub accuracy: f64,
    pub samples: usize,
}
