//! Importance-weighted PCA transforms injected into the attention V/O and Q/K
//! pairs, plus the Taylor-sorted MLP permutation. Every transform is
//! orthogonal (or a permutation) and is paired with its transpose, so the
//! network function is unchanged while information moves into the leading
//! dimensions.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::token_weights;
use crate::linalg::{descending_ranking, permutation_from_ranking, sym_eig, Matrix};
use crate::real::Real;
use crate::vit::{backward, forward, Batch, FeatureId, FeatureKind, Head, Mlp, Vit};

/// Streaming token-weighted covariance.
///
/// Rows are centered by the unweighted mean of every accumulated token, then
/// scaled by `√w` before the outer product:
/// `S = Σ w·(x − μ)(x − μ)ᵀ`, finalized as `S / (n − 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceAccumulator {
    dim: usize,
    wxx: Vec<f64>,
    wx: Vec<f64>,
    weight: f64,
    sum: Vec<f64>,
    count: u64,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            wxx: vec![0.0; dim * dim],
            wx: vec![0.0; dim],
            weight: 0.0,
            sum: vec![0.0; dim],
            count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn total_weight(&self) -> f64 {
        self.weight
    }

    /// Adds `features` (`rows x dim`, row-major) with one weight per row.
    pub fn accumulate<T: Real>(&mut self, features: &[T], weights: &[f64]) -> Result<()> {
        let d = self.dim;
        if d == 0 {
            self.count += weights.len() as u64;
            return Ok(());
        }
        if features.len() != weights.len() * d {
            return Err(Error::shape(
                "accumulate",
                format!("{} values for {} rows of width {d}", features.len(), weights.len()),
            ));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::Invalid(format!("token weight {w} must be finite and non-negative")));
        }
        let mut x = vec![0.0; d];
        for (row, &w) in features.chunks(d).zip(weights) {
            for (xi, v) in x.iter_mut().zip(row) {
                *xi = v.as_f64();
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("covariance features".into()));
            }
            for i in 0..d {
                self.sum[i] += x[i];
                let wxi = w * x[i];
                self.wx[i] += wxi;
                let r = &mut self.wxx[i * d..(i + 1) * d];
                for j in i..d {
                    r[j] += wxi * x[j];
                }
            }
            self.weight += w;
            self.count += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::shape("merge", format!("{} vs {}", self.dim, other.dim)));
        }
        for (a, b) in self.wxx.iter_mut().zip(&other.wxx) {
            *a += b;
        }
        for (a, b) in self.wx.iter_mut().zip(&other.wx) {
            *a += b;
        }
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        self.weight += other.weight;
        self.count += other.count;
        Ok(())
    }

    pub fn finalize(&self) -> Result<Matrix> {
        if self.count <= 1 {
            return Err(Error::Invalid(format!(
                "covariance needs at least 2 tokens, have {}",
                self.count
            )));
        }
        let d = self.dim;
        let n = self.count as f64;
        let mu: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let mut out = Matrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let s = self.wxx[i * d + j] - mu[i] * self.wx[j] - self.wx[i] * mu[j]
                    + self.weight * mu[i] * mu[j];
                let v = s / (n - 1.0);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    Vo,
    Qk,
    MlpSort,
}

/// Orthogonal or permutation matrix with its diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformMatrix {
    pub kind: TransformKind,
    pub matrix: Matrix,
    /// Descending; empty for permutations.
    pub eigenvalues: Vec<f64>,
    pub block: usize,
    pub head: Option<usize>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub ill_conditioned: bool,
}

impl TransformMatrix {
    /// Permutation placing dimension `ranking[i]` at position `i`.
    pub fn permutation(kind: TransformKind, ranking: &[usize]) -> Result<Self> {
        Ok(Self {
            kind,
            matrix: permutation_from_ranking(ranking)?,
            eigenvalues: vec![],
            block: 0,
            head: None,
            lambda_min: 0.0,
            lambda_max: 0.0,
            ill_conditioned: false,
        })
    }

    pub fn identity(kind: TransformKind, dim: usize) -> Self {
        Self::permutation(kind, &(0..dim).collect::<Vec<_>>()).expect("identity ranking")
    }

    pub fn at(mut self, block: usize, head: Option<usize>) -> Self {
        self.block = block;
        self.head = head;
        self
    }
}

/// Eigenvectors of `corr (+ ridge·I)` as rows, by descending eigenvalue.
pub fn compute_transform(corr: &Matrix, kind: TransformKind, ridge: f64) -> Result<TransformMatrix> {
    let mut c = corr.symmetrized()?;
    if ridge != 0.0 {
        for i in 0..c.rows() {
            c[(i, i)] += ridge;
        }
    }
    let eig = sym_eig(&c)?;
    let lambda_max = eig.eigenvalues.first().copied().unwrap_or(0.0);
    let lambda_min = eig.eigenvalues.last().copied().unwrap_or(0.0);
    let ill_conditioned = lambda_min < -1e-9 || !(lambda_min >= 1e-12 * lambda_max) || lambda_max <= 0.0;
    Ok(TransformMatrix {
        kind,
        matrix: eig.eigenvectors,
        eigenvalues: eig.eigenvalues,
        block: 0,
        head: None,
        lambda_min,
        lambda_max,
        ill_conditioned,
    })
}

/// `rows ← T·rows` for a `k x d` row-major block.
fn left_multiply<T: Real>(t: &Matrix, rows: &mut [T], k: usize) {
    if k == 0 {
        return;
    }
    let d = rows.len() / k;
    let src: Vec<f64> = rows.iter().map(|v| v.as_f64()).collect();
    for i in 0..k {
        let ti = t.row(i);
        for c in 0..d {
            let mut acc = 0.0;
            for (j, &tij) in ti.iter().enumerate() {
                acc += tij * src[j * d + c];
            }
            rows[i * d + c] = T::from_f64_lossy(acc);
        }
    }
}

fn check_dims(op: &'static str, t: &Matrix, k: usize) -> Result<()> {
    if t.rows() != k || t.cols() != k {
        return Err(Error::shape(op, format!("{}x{} transform for width {k}", t.rows(), t.cols())));
    }
    Ok(())
}

/// `W_v ← T·W_v`, `b_v ← T·b_v`, `W_o ← W_o·Tᵀ`.
pub fn apply_vo<T: Real>(head: &mut Head<T>, t: &TransformMatrix) -> Result<()> {
    if t.kind != TransformKind::Vo {
        return Err(Error::Invalid(format!("apply_vo given a {:?} transform", t.kind)));
    }
    let k = head.dim();
    check_dims("apply_vo", &t.matrix, k)?;
    left_multiply(&t.matrix, &mut head.w_v, k);
    left_multiply(&t.matrix, &mut head.b_v, k);
    left_multiply(&t.matrix, &mut head.w_o_t, k);
    Ok(())
}

/// `W_q ← T·W_q`, `b_q ← T·b_q`, `W_k ← T·W_k`, `b_k ← T·b_k`.
pub fn apply_qk<T: Real>(head: &mut Head<T>, t: &TransformMatrix) -> Result<()> {
    if t.kind != TransformKind::Qk {
        return Err(Error::Invalid(format!("apply_qk given a {:?} transform", t.kind)));
    }
    let k = head.dim();
    check_dims("apply_qk", &t.matrix, k)?;
    left_multiply(&t.matrix, &mut head.w_q, k);
    left_multiply(&t.matrix, &mut head.b_q, k);
    left_multiply(&t.matrix, &mut head.w_k, k);
    left_multiply(&t.matrix, &mut head.b_k, k);
    Ok(())
}

fn permute_rows<T: Copy>(rows: &mut Vec<T>, ranking: &[usize]) {
    let w = rows.len() / ranking.len();
    let src = std::mem::take(rows);
    *rows = ranking.iter().flat_map(|&r| src[r * w..(r + 1) * w].iter().copied()).collect();
}

/// Reorders hidden units by descending score; returns the permutation used.
pub fn apply_mlp_sort<T: Real>(mlp: &mut Mlp<T>, scores: &[f64]) -> Result<TransformMatrix> {
    if scores.len() != mlp.hidden() {
        return Err(Error::shape(
            "apply_mlp_sort",
            format!("{} scores for {} hidden units", scores.len(), mlp.hidden()),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("mlp importance scores".into()));
    }
    let ranking = descending_ranking(scores);
    let t = TransformMatrix::permutation(TransformKind::MlpSort, &ranking)?;
    permute_rows(&mut mlp.w1, &ranking);
    permute_rows(&mut mlp.b1, &ranking);
    permute_rows(&mut mlp.w2_t, &ranking);
    Ok(t)
}

/// Row-level permutation of one head's Q/K or V/O dimensions (exact).
pub fn permute_head<T: Real>(head: &mut Head<T>, kind: TransformKind, ranking: &[usize]) -> Result<()> {
    crate::linalg::validate_ranking(ranking)?;
    if ranking.len() != head.dim() {
        return Err(Error::shape("permute_head", "ranking length differs from head width"));
    }
    match kind {
        TransformKind::Qk => {
            permute_rows(&mut head.w_q, ranking);
            permute_rows(&mut head.b_q, ranking);
            permute_rows(&mut head.w_k, ranking);
            permute_rows(&mut head.b_k, ranking);
        }
        TransformKind::Vo => {
            permute_rows(&mut head.w_v, ranking);
            permute_rows(&mut head.b_v, ranking);
            permute_rows(&mut head.w_o_t, ranking);
        }
        TransformKind::MlpSort => {
            return Err(Error::Invalid("mlp-sort is not a head transform".into()));
        }
    }
    Ok(())
}

/// Which tokens enter the covariance and with what weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Weighting {
    /// Every token, weighted by its Taylor importance.
    Importance,
    /// Every token, weight 1.
    Uniform,
    /// Only each sample's class token, weight 1.
    ClassToken,
    /// `count` random tokens per sample, weight 1.
    RandomTokens { count: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WpacConfig {
    pub weighting: Weighting,
    pub ridge: f64,
    /// Samples per forward/backward chunk.
    pub chunk: usize,
    pub transform_vo: bool,
    pub transform_qk: bool,
    pub sort_mlp: bool,
}

impl Default for WpacConfig {
    fn default() -> Self {
        Self {
            weighting: Weighting::Importance,
            ridge: 0.0,
            chunk: 64,
            transform_vo: true,
            transform_qk: true,
            sort_mlp: true,
        }
    }
}

/// Covariances and MLP scores gathered over one proxy sweep.
#[derive(Debug, Clone)]
pub struct WpacStatistics {
    /// `[block][head]`.
    pub vo: Vec<Vec<CovarianceAccumulator>>,
    pub q: Vec<Vec<CovarianceAccumulator>>,
    pub k: Vec<Vec<CovarianceAccumulator>>,
    /// `[block][hidden]` summed Taylor scores.
    pub mlp_theta: Vec<Vec<f64>>,
    pub cost: f64,
}

impl WpacStatistics {
    /// `Corr(X_q) + Corr(X_k)`.
    pub fn qk_corr(&self, block: usize, head: usize) -> Result<Matrix> {
        let q = self.q[block][head].finalize()?;
        let k = self.k[block][head].finalize()?;
        let data = q.as_slice().iter().zip(k.as_slice()).map(|(a, b)| a + b).collect();
        Matrix::new(q.rows(), q.cols(), data)
    }

    pub fn vo_corr(&self, block: usize, head: usize) -> Result<Matrix> {
        self.vo[block][head].finalize()
    }
}

fn select_rows<T: Copy>(x: &[T], width: usize, rows: &[usize]) -> Vec<T> {
    rows.iter().flat_map(|&r| x[r * width..(r + 1) * width].iter().copied()).collect()
}

/// One forward/backward sweep over the proxy gathering every covariance.
pub fn collect_statistics<T: Real>(
    model: &Vit<T>,
    proxy: &Batch<'_>,
    cfg: &WpacConfig,
) -> Result<WpacStatistics> {
    if proxy.is_empty() {
        return Err(Error::Invalid("empty proxy set".into()));
    }
    let depth = model.blocks.len();
    let widths = model.widths();
    let mut stats = WpacStatistics {
        vo: widths.head_dims.iter().map(|h| h.iter().map(|&k| CovarianceAccumulator::new(k)).collect()).collect(),
        q: widths.head_dims.iter().map(|h| h.iter().map(|&k| CovarianceAccumulator::new(k)).collect()).collect(),
        k: widths.head_dims.iter().map(|h| h.iter().map(|&k| CovarianceAccumulator::new(k)).collect()).collect(),
        mlp_theta: widths.mlp_dims.iter().map(|&k| vec![0.0; k]).collect(),
        cost: 0.0,
    };
    let n = model.arch.tokens();
    let total = proxy.len() as f64;
    let mut rng = match cfg.weighting {
        Weighting::RandomTokens { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    for part in proxy.chunks(cfg.chunk) {
        let scale = part.len() as f64 / total;
        let out = forward(model, &part, None)?;
        let mut cache = out.cache.expect("cache kept");
        backward(model, &part, &mut cache)?;
        stats.cost += out.cost * scale;
        let rows: Option<Vec<usize>> = match cfg.weighting {
            Weighting::Importance | Weighting::Uniform => None,
            Weighting::ClassToken => Some((0..part.len()).map(|s| s * n).collect()),
            Weighting::RandomTokens { count, .. } => {
                let rng = rng.as_mut().expect("seeded");
                let count = count.min(n);
                let mut picked = Vec::with_capacity(part.len() * count);
                for s in 0..part.len() {
                    let mut idx = sample(rng, n, count).into_vec();
                    idx.sort_unstable();
                    picked.extend(idx.into_iter().map(|t| s * n + t));
                }
                Some(picked)
            }
        };
        for b in 0..depth {
            let blk = &model.blocks[b];
            if blk.attn.enabled {
                for h in 0..blk.attn.heads.len() {
                    let kh = widths.head_dims[b][h];
                    let fid = |kind| FeatureId { block: b, kind };
                    let (qf, kf, vf) = (
                        cache.feature(fid(FeatureKind::Query(h))),
                        cache.feature(fid(FeatureKind::Key(h))),
                        cache.feature(fid(FeatureKind::Value(h))),
                    );
                    let (w_vo, w_qk) = if cfg.weighting == Weighting::Importance {
                        let grad = |kind| cache.feature_grad(fid(kind)).expect("backward ran");
                        let wv = token_weights(vf, grad(FeatureKind::Value(h)), kh)?;
                        let wq = token_weights(qf, grad(FeatureKind::Query(h)), kh)?;
                        let wk = token_weights(kf, grad(FeatureKind::Key(h)), kh)?;
                        let wqk = wq.iter().zip(&wk).map(|(a, b)| (a + b) * scale).collect();
                        (wv.iter().map(|w| w * scale).collect(), wqk)
                    } else {
                        let len = rows.as_ref().map_or(part.len() * n, Vec::len);
                        (vec![1.0; len], vec![1.0; len])
                    };
                    match &rows {
                        None => {
                            stats.vo[b][h].accumulate(vf, &w_vo)?;
                            stats.q[b][h].accumulate(qf, &w_qk)?;
                            stats.k[b][h].accumulate(kf, &w_qk)?;
                        }
                        Some(r) => {
                            stats.vo[b][h].accumulate(&select_rows(vf, kh, r), &w_vo)?;
                            stats.q[b][h].accumulate(&select_rows(qf, kh, r), &w_qk)?;
                            stats.k[b][h].accumulate(&select_rows(kf, kh, r), &w_qk)?;
                        }
                    }
                }
            }
            if blk.mlp.enabled {
                let id = FeatureId {
                    block: b,
                    kind: FeatureKind::Hidden,
                };
                let k = widths.mlp_dims[b];
                let hf = cache.feature(id);
                let g = cache.feature_grad(id).expect("backward ran");
                for (hr, gr) in hf.chunks(k).zip(g.chunks(k)) {
                    for ((o, &h), &g) in stats.mlp_theta[b].iter_mut().zip(hr).zip(gr) {
                        *o += scale * (h.as_f64() * g.as_f64()).abs();
                    }
                }
            }
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct WpacOutcome<T> {
    pub model: Vit<T>,
    pub transforms: Vec<TransformMatrix>,
    pub cost: f64,
}

impl<T> WpacOutcome<T> {
    pub fn ill_conditioned(&self) -> usize {
        self.transforms.iter().filter(|t| t.ill_conditioned).count()
    }
}

/// Transforms built from already-gathered statistics, applied to a copy.
pub fn apply_statistics<T: Real>(
    model: &Vit<T>,
    stats: &WpacStatistics,
    cfg: &WpacConfig,
) -> Result<WpacOutcome<T>> {
    let mut out = model.clone();
    let mut transforms = Vec::new();
    for (b, blk) in out.blocks.iter_mut().enumerate() {
        if blk.attn.enabled {
            for (h, head) in blk.attn.heads.iter_mut().enumerate() {
                if head.dim() == 0 {
                    continue;
                }
                if cfg.transform_vo {
                    let t = compute_transform(&stats.vo_corr(b, h)?, TransformKind::Vo, cfg.ridge)?
                        .at(b, Some(h));
                    apply_vo(head, &t)?;
                    transforms.push(t);
                }
                if cfg.transform_qk {
                    let t = compute_transform(&stats.qk_corr(b, h)?, TransformKind::Qk, cfg.ridge)?
                        .at(b, Some(h));
                    apply_qk(head, &t)?;
                    transforms.push(t);
                }
            }
        }
        if cfg.sort_mlp && blk.mlp.enabled && blk.mlp.hidden() > 0 {
            let t = apply_mlp_sort(&mut blk.mlp, &stats.mlp_theta[b])?.at(b, None);
            transforms.push(t);
        }
    }
    Ok(WpacOutcome {
        model: out,
        transforms,
        cost: stats.cost,
    })
}

/// Full WPAC pass: statistics over the proxy, then transform injection.
pub fn wpac_transform<T: Real>(
    model: &Vit<T>,
    proxy: &Batch<'_>,
    cfg: &WpacConfig,
) -> Result<WpacOutcome<T>> {
    let stats = collect_statistics(model, proxy, cfg)?;
    apply_statistics(model, &stats, cfg)
}

/// Structured per-transform summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub kind: TransformKind,
    pub block: usize,
    pub head: Option<usize>,
    pub eigenvalues: Vec<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub ill_conditioned: bool,
}

impl From<&TransformMatrix> for TransformRecord {
    fn from(t: &TransformMatrix) -> Self {
        Self {
            kind: t.kind,
            block: t.block,
            head: t.head,
            eigenvalues: t.eigenvalues.clone(),
            lambda_min: t.lambda_min,
            lambda_max: t.lambda_max,
            ill_conditioned: t.ill_conditioned,
        }
    }
}
