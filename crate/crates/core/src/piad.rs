//! Progressive importance-aware dropout.
//!
//! Every MHSA is split into 8 rank-aligned units (the same rank range in every
//! head) and every MLP into 32 contiguous hidden-dimension units. A dropout
//! list of units, ascending in importance, grows each progressive epoch until
//! its MACs reach `t·r/P_e` of the full model. Training samples a truncation
//! index into the list and updates only the resulting prefix sub-network.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{module_sensitivities, taylor_scores, unit_score, MacsModel};
use crate::optim::{cosine_lr, Sgd};
use crate::real::Real;
use crate::vit::{loss_and_grad, ArchConfig, Batch, ModuleId, ModuleKind, SubnetMask, Vit};

pub const MHSA_UNITS: usize = 8;
pub const MLP_UNITS: usize = 32;

/// A contiguous dimension range of one module. For MHSA the range is a
/// per-head rank range applied to every head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppableUnit {
    pub id: usize,
    pub module: ModuleId,
    pub start: usize,
    pub end: usize,
    pub macs: u64,
}

impl DroppableUnit {
    pub fn width(&self) -> usize {
        self.end - self.start
    }

    /// Dimension indices covered, in `head * head_dim + rank` layout for MHSA.
    pub fn dims(&self, arch: &ArchConfig) -> Vec<usize> {
        match self.module.kind {
            ModuleKind::Mlp => (self.start..self.end).collect(),
            ModuleKind::Mhsa => {
                let dh = arch.head_dim();
                (0..arch.heads)
                    .flat_map(|h| (self.start..self.end).map(move |r| h * dh + r))
                    .collect()
            }
        }
    }

    fn ranges(&self, arch: &ArchConfig) -> String {
        match self.module.kind {
            ModuleKind::Mlp => format!("{}:{}", self.start, self.end),
            ModuleKind::Mhsa => {
                let dh = arch.head_dim();
                (0..arch.heads)
                    .map(|h| format!("{}:{}", h * dh + self.start, h * dh + self.end))
                    .collect::<Vec<_>>()
                    .join("|")
            }
        }
    }
}

/// All units of an architecture. Per block: MHSA units then MLP units, each
/// ordered from the trailing (highest) dimension range to the leading one.
pub fn build_units(arch: &ArchConfig) -> Result<Vec<DroppableUnit>> {
    arch.validate()?;
    let dh = arch.head_dim();
    if dh % MHSA_UNITS != 0 {
        return Err(Error::Invalid(format!(
            "head dim {dh} not divisible into {MHSA_UNITS} units"
        )));
    }
    if arch.mlp_hidden % MLP_UNITS != 0 {
        return Err(Error::Invalid(format!(
            "mlp_hidden {} not divisible into {MLP_UNITS} units",
            arch.mlp_hidden
        )));
    }
    let macs = MacsModel::new(arch);
    let ga = dh / MHSA_UNITS;
    let gm = arch.mlp_hidden / MLP_UNITS;
    let mut units = Vec::with_capacity(arch.depth * (MHSA_UNITS + MLP_UNITS));
    for b in 0..arch.depth {
        for i in (0..MHSA_UNITS).rev() {
            units.push(DroppableUnit {
                id: units.len(),
                module: ModuleId::mhsa(b),
                start: i * ga,
                end: (i + 1) * ga,
                macs: macs.mhsa_unit(ga as u64),
            });
        }
        for i in (0..MLP_UNITS).rev() {
            units.push(DroppableUnit {
                id: units.len(),
                module: ModuleId::mlp(b),
                start: i * gm,
                end: (i + 1) * gm,
                macs: macs.mlp_unit(gm as u64),
            });
        }
    }
    Ok(units)
}

/// A group of adjacent units whose scores were averaged by the merge rule.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedGroup {
    /// Units from trailing to leading.
    pub units: Vec<DroppableUnit>,
    pub scores: Vec<f64>,
}

impl MergedGroup {
    pub fn score(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }
}

/// Merge rule over one module's units given trailing-first. A unit scoring
/// below the group before it is merged into that group (scores averaged),
/// cascading until group scores are non-decreasing from trailing to leading.
pub fn merge_module(units: &[DroppableUnit], scores: &[f64]) -> Vec<MergedGroup> {
    let mut stack: Vec<MergedGroup> = Vec::new();
    for (u, &s) in units.iter().zip(scores) {
        stack.push(MergedGroup {
            units: vec![*u],
            scores: vec![s],
        });
        while stack.len() >= 2 && stack[stack.len() - 1].score() < stack[stack.len() - 2].score() {
            let top = stack.pop().expect("len >= 2");
            let below = stack.last_mut().expect("len >= 1");
            below.units.extend(top.units);
            below.scores.extend(top.scores);
        }
    }
    stack
}

/// One appended unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListEntry {
    pub unit: DroppableUnit,
    /// Group score at append time.
    pub score: f64,
    pub epoch: usize,
    /// Ids of the units merged with this one.
    pub merged_from: Vec<usize>,
}

/// Droppable units in ascending importance; entry 0 is dropped first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DropoutList {
    pub entries: Vec<ListEntry>,
}

impl DropoutList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cumulative_macs(&self) -> u64 {
        self.entries.iter().map(|e| e.unit.macs).sum()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.entries.iter().any(|e| e.unit.id == id)
    }

    /// Mask with the first `count` entries dropped.
    pub fn mask_dropping<T: Real>(&self, model: &Vit<T>, count: usize) -> SubnetMask {
        let mut mask = SubnetMask::full(model);
        let mut attn_keep: BTreeMap<usize, usize> = BTreeMap::new();
        let mut mlp_keep: BTreeMap<usize, usize> = BTreeMap::new();
        for e in &self.entries[..count.min(self.entries.len())] {
            let slot = match e.unit.module.kind {
                ModuleKind::Mhsa => attn_keep.entry(e.unit.module.block).or_insert(usize::MAX),
                ModuleKind::Mlp => mlp_keep.entry(e.unit.module.block).or_insert(usize::MAX),
            };
            *slot = (*slot).min(e.unit.start);
        }
        for (b, k) in attn_keep {
            mask.attn_keep[b].iter_mut().for_each(|v| *v = (*v).min(k));
            if k == 0 {
                mask.skip_attn[b] = true;
            }
        }
        for (b, k) in mlp_keep {
            mask.mlp_keep[b] = mask.mlp_keep[b].min(k);
            if k == 0 {
                mask.skip_mlp[b] = true;
            }
        }
        mask
    }

    /// Every listed unit dropped.
    pub fn smallest_mask<T: Real>(&self, model: &Vit<T>) -> SubnetMask {
        self.mask_dropping(model, self.len())
    }

    pub fn write_csv<W: Write>(&self, arch: &ArchConfig, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["id", "module", "start", "end", "ranges", "score", "macs", "epoch", "merged_from"])?;
        for e in &self.entries {
            let merged = e.merged_from.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("|");
            w.write_record([
                e.unit.id.to_string(),
                e.unit.module.to_string(),
                e.unit.start.to_string(),
                e.unit.end.to_string(),
                e.unit.ranges(arch),
                format!("{:.17e}", e.score),
                e.unit.macs.to_string(),
                e.epoch.to_string(),
                merged,
            ])?;
        }
        w.flush().map_err(|e| Error::io("dropout list", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            id: usize,
            module: String,
            start: usize,
            end: usize,
            score: f64,
            macs: u64,
            epoch: usize,
            merged_from: String,
        }
        let mut r = csv::Reader::from_reader(input);
        let mut entries = Vec::new();
        for row in r.deserialize() {
            let row: Row = row?;
            let (kind, block) = row
                .module
                .split_once('.')
                .ok_or_else(|| Error::Malformed(format!("module `{}`", row.module)))?;
            let block: usize = block
                .parse()
                .map_err(|_| Error::Malformed(format!("module `{}`", row.module)))?;
            let module = match kind {
                "mhsa" => ModuleId::mhsa(block),
                "mlp" => ModuleId::mlp(block),
                _ => return Err(Error::Malformed(format!("module `{}`", row.module))),
            };
            let merged_from = row
                .merged_from
                .split('|')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| Error::Malformed(format!("merged_from `{s}`"))))
                .collect::<Result<_>>()?;
            entries.push(ListEntry {
                unit: DroppableUnit {
                    id: row.id,
                    module,
                    start: row.start,
                    end: row.end,
                    macs: row.macs,
                },
                score: row.score,
                epoch: row.epoch,
                merged_from,
            });
        }
        Ok(Self { entries })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PiadConfig {
    /// Target maximum compression ratio `r`.
    pub ratio: f64,
    pub progressive_epochs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Draw the truncation index from `{0..L}` (true) or `{1..L}` (false).
    pub include_smallest: bool,
    /// Samples per chunk for importance evaluation.
    pub chunk: usize,
}

impl Default for PiadConfig {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            progressive_epochs: 8,
            epochs: 20,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 64,
            seed: 0,
            include_smallest: true,
            chunk: 64,
        }
    }
}

impl PiadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::Invalid(format!("ratio {} outside [0, 1)", self.ratio)));
        }
        if self.progressive_epochs > self.epochs {
            return Err(Error::Invalid("progressive epochs exceed total epochs".into()));
        }
        if self.ratio > 0.0 && self.progressive_epochs == 0 {
            return Err(Error::Invalid("positive ratio needs at least one progressive epoch".into()));
        }
        if self.batch_size == 0 || self.chunk == 0 {
            return Err(Error::Invalid("batch and chunk sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of one list update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub epoch: usize,
    pub target_macs: f64,
    pub cumulative_macs: u64,
    pub appended: usize,
    /// Score of every remaining unit (by id) before merging.
    pub unit_scores: BTreeMap<usize, f64>,
    pub gammas: Vec<(ModuleId, f64)>,
}

/// `t·r/P_e·MACs_O`.
pub fn schedule_target(macs_full: u64, ratio: f64, epoch: usize, progressive: usize) -> f64 {
    if progressive == 0 {
        return 0.0;
    }
    epoch.min(progressive) as f64 * ratio / progressive as f64 * macs_full as f64
}

/// Scores every unit not yet listed, evaluated on the smallest sub-network.
pub fn score_units<T: Real>(
    model: &Vit<T>,
    units: &[DroppableUnit],
    list: &DropoutList,
    proxy: &Batch<'_>,
    chunk: usize,
) -> Result<(BTreeMap<usize, f64>, Vec<(ModuleId, f64)>)> {
    let arch = model.arch;
    let mask = list.smallest_mask(model);
    let (_, gammas) = module_sensitivities(model, proxy, Some(&mask), chunk)?;
    let theta = taylor_scores(model, proxy, Some(&mask), chunk)?;
    let mut scores = BTreeMap::new();
    for &(module, gamma) in &gammas {
        let remaining: Vec<&DroppableUnit> =
            units.iter().filter(|u| u.module == module && !list.contains(u.id)).collect();
        if remaining.is_empty() {
            continue;
        }
        let full = theta.module(module);
        let dims: Vec<usize> = remaining.iter().flat_map(|u| u.dims(&arch)).collect();
        let active: Vec<f64> = dims.iter().map(|&i| full[i]).collect();
        let (alpha, _) = crate::importance::normalize(&active)?;
        let mut by_dim = BTreeMap::new();
        for (&i, &a) in dims.iter().zip(&alpha) {
            by_dim.insert(i, gamma * a);
        }
        for u in remaining {
            let vals: Vec<f64> = u.dims(&arch).iter().map(|i| by_dim[i]).collect();
            scores.insert(u.id, unit_score(&vals, u.macs)?);
        }
    }
    Ok((scores, gammas))
}

/// Merges per module and appends the lowest-scoring units until the list's
/// MACs reach `target`. Pure given the scores.
pub fn grow_list(
    units: &[DroppableUnit],
    list: &mut DropoutList,
    scores: &BTreeMap<usize, f64>,
    target: f64,
    epoch: usize,
) -> Result<usize> {
    let mut cumulative = list.cumulative_macs();
    if cumulative as f64 >= target {
        return Ok(0);
    }
    let mut modules: BTreeMap<ModuleId, Vec<DroppableUnit>> = BTreeMap::new();
    for u in units.iter().filter(|u| !list.contains(u.id)) {
        modules.entry(u.module).or_default().push(*u);
    }
    let mut groups = Vec::new();
    for (_, mut us) in modules {
        us.sort_by(|a, b| b.start.cmp(&a.start));
        let s: Vec<f64> = us
            .iter()
            .map(|u| {
                scores
                    .get(&u.id)
                    .copied()
                    .ok_or_else(|| Error::Invalid(format!("unit {} has no score", u.id)))
            })
            .collect::<Result<_>>()?;
        groups.extend(merge_module(&us, &s));
    }
    // Ascending score; ties by block, MLP before MHSA, trailing dims first.
    groups.sort_by(|a, b| {
        let (ua, ub) = (&a.units[0], &b.units[0]);
        a.score()
            .total_cmp(&b.score())
            .then(ua.module.block.cmp(&ub.module.block))
            .then(ua.module.kind.cmp(&ub.module.kind))
            .then(ub.start.cmp(&ua.start))
    });
    let mut appended = 0;
    for g in groups {
        let score = g.score();
        let ids: Vec<usize> = g.units.iter().map(|u| u.id).collect();
        for u in g.units {
            list.entries.push(ListEntry {
                unit: u,
                score,
                epoch,
                merged_from: if ids.len() > 1 { ids.clone() } else { vec![] },
            });
            appended += 1;
            cumulative += u.macs;
            if cumulative as f64 >= target {
                return Ok(appended);
            }
        }
    }
    Err(Error::Invalid(format!(
        "ran out of units at {cumulative} MACs before reaching target {target:.0}"
    )))
}

/// One progressive update at epoch `t` (1-based).
#[allow(clippy::too_many_arguments)]
pub fn update_dropout_list<T: Real>(
    model: &Vit<T>,
    units: &[DroppableUnit],
    list: &mut DropoutList,
    proxy: &Batch<'_>,
    epoch: usize,
    cfg: &PiadConfig,
) -> Result<UpdateReport> {
    if epoch == 0 || epoch > cfg.progressive_epochs {
        return Err(Error::Invalid(format!(
            "list update at epoch {epoch} outside 1..={}",
            cfg.progressive_epochs
        )));
    }
    let macs = MacsModel::new(&model.arch);
    let target = schedule_target(macs.full(), cfg.ratio, epoch, cfg.progressive_epochs);
    let (unit_scores, gammas) = if (list.cumulative_macs() as f64) < target {
        score_units(model, units, list, proxy, cfg.chunk)?
    } else {
        (BTreeMap::new(), vec![])
    };
    let appended = grow_list(units, list, &unit_scores, target, epoch)?;
    Ok(UpdateReport {
        epoch,
        target_macs: target,
        cumulative_macs: list.cumulative_macs(),
        appended,
        unit_scores,
        gammas,
    })
}

/// Truncation index `s` and the mask keeping the `s` most important listed
/// units (everything unlisted is always kept).
pub fn sample_subnetwork<T: Real, R: Rng + ?Sized>(
    model: &Vit<T>,
    list: &DropoutList,
    include_smallest: bool,
    rng: &mut R,
) -> (usize, SubnetMask) {
    let l = list.len();
    let s = sample_truncation(l, include_smallest, rng);
    (s, list.mask_dropping(model, l - s))
}

pub fn sample_truncation<R: Rng + ?Sized>(len: usize, include_smallest: bool, rng: &mut R) -> usize {
    if len == 0 {
        return 0;
    }
    let lo = if include_smallest { 0 } else { 1 };
    rng.random_range(lo..=len)
}

/// Per-epoch training log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub list_len: usize,
    pub list_macs: u64,
}

/// Copies samples `idx` of `data` into owned buffers.
pub fn gather(data: &Batch<'_>, idx: &[usize]) -> (Vec<f32>, Vec<u32>) {
    let per = data.images.len() / data.len().max(1);
    let mut images = Vec::with_capacity(idx.len() * per);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        images.extend_from_slice(&data.images[i * per..(i + 1) * per]);
        labels.push(data.labels[i]);
    }
    (images, labels)
}

/// Masked SGD training loop shared by super-network variants. `before_epoch`
/// runs at the start of each (1-based) epoch; `sampler` picks the mask for
/// each batch (`None` trains the full model).
pub fn train_masked<T, B, S>(
    model: &mut Vit<T>,
    train: &Batch<'_>,
    cfg: &PiadConfig,
    mut before_epoch: B,
    mut sampler: S,
) -> Result<Vec<EpochLog>>
where
    T: Real,
    B: FnMut(usize, &Vit<T>) -> Result<(usize, u64)>,
    S: FnMut(&Vit<T>, &mut ChaCha8Rng) -> Option<SubnetMask>,
{
    if train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(model, cfg.momentum, cfg.weight_decay);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let (list_len, list_macs) = before_epoch(epoch, model)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = gather(train, idx);
            let batch = Batch::new(&x, &y);
            let mask = sampler(model, &mut rng);
            let (loss, grads, _) = match loss_and_grad(model, &batch, mask.as_ref()) {
                Err(e) if e.is_numerical() => {
                    return Err(Error::Divergence {
                        epoch,
                        batch: bi,
                        loss: f64::NAN,
                    })
                }
                r => r?,
            };
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss,
                });
            }
            let active = model.active_lens(mask.as_ref());
            opt.step(model, &grads, cosine_lr(cfg.lr, step, total), &active);
            step += 1;
            loss_sum += loss * idx.len() as f64;
        }
        logs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / train.len() as f64,
            list_len,
            list_macs,
        });
    }
    Ok(logs)
}

#[derive(Debug, Clone)]
pub struct PiadOutcome<T> {
    pub model: Vit<T>,
    pub list: DropoutList,
    pub updates: Vec<UpdateReport>,
    pub log: Vec<EpochLog>,
}

/// Super-network training with progressive list updates on `proxy`.
pub fn train_piad<T: Real>(
    model: &Vit<T>,
    train: &Batch<'_>,
    proxy: &Batch<'_>,
    cfg: &PiadConfig,
) -> Result<PiadOutcome<T>> {
    cfg.validate()?;
    let units = build_units(&model.arch)?;
    let mut list = DropoutList::default();
    let mut updates = Vec::new();
    let mut model = model.clone();
    let list_cell = std::cell::RefCell::new(&mut list);
    let log = train_masked(
        &mut model,
        train,
        cfg,
        |epoch, m| {
            let mut l = list_cell.borrow_mut();
            if epoch <= cfg.progressive_epochs && cfg.ratio > 0.0 {
                updates.push(update_dropout_list(m, &units, &mut l, proxy, epoch, cfg)?);
            }
            Ok((l.len(), l.cumulative_macs()))
        },
        |m, rng| {
            let l = list_cell.borrow();
            if l.is_empty() {
                return None;
            }
            Some(sample_subnetwork(m, &l, cfg.include_smallest, rng).1)
        },
    )?;
    Ok(PiadOutcome {
        model,
        list,
        updates,
        log,
    })
}

/// Mask dropping list entries from the front until MACs ≤ `target`.
pub fn extraction_mask<T: Real>(model: &Vit<T>, list: &DropoutList, target: u64) -> Result<(SubnetMask, usize)> {
    let macs = MacsModel::new(&model.arch);
    for count in 0..=list.len() {
        let mask = list.mask_dropping(model, count);
        if macs.of_model(model, Some(&mask)) <= target {
            return Ok((mask, count));
        }
    }
    let smallest = macs.of_model(model, Some(&list.smallest_mask(model)));
    Err(Error::Invalid(format!(
        "target {target} MACs below the smallest sub-network ({smallest})"
    )))
}

/// Physically sliced sub-network at `target` MACs. Uses only the weights and
/// the list.
pub fn extract_subnetwork<T: Real>(model: &Vit<T>, list: &DropoutList, target: u64) -> Result<Vit<T>> {
    let (mask, _) = extraction_mask(model, list, target)?;
    model.sliced(&mask)
}
