//! Experiment drivers: the criteria comparison and the weighting, proxy-size
//! and dropout-strategy ablations.
//!
//! Grid points run on up to `SKD_THREADS` worker threads. Each worker owns
//! its model copies and results are reassembled in grid order, so reports do
//! not depend on the thread count.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;

use skd_core::importance::MacsModel;
use skd_core::piad::{train_masked, train_piad, DropoutList, EpochLog, PiadConfig, UpdateReport};
use skd_core::wpac::wpac_transform;
use skd_core::{Batch, Error, Real, Result, SubnetMask, Vit};

use crate::config::{Config, WeightingName};
use crate::criteria::{prune_by_criterion, Criterion};
use crate::data::{Split, SyntheticDataset};
use crate::report::{ExperimentReport, ReportRow};
use crate::train::accuracy;

/// Worker count: `SKD_THREADS` if set to a positive integer, otherwise the
/// available parallelism.
pub fn workers() -> usize {
    std::env::var("SKD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Maps `f` over `items` on [`workers`] threads, preserving order. The first
/// error (in item order) is returned.
pub fn par_map<I, O, F>(items: &[I], f: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> Result<O> + Sync,
{
    let threads = workers().min(items.len()).max(1);
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<O>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Weighting,
    ProxySize,
    DropoutStrategy,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Weighting, Ablation::ProxySize, Ablation::DropoutStrategy];
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Weighting => "weighting",
            Ablation::ProxySize => "proxy-size",
            Ablation::DropoutStrategy => "dropout-strategy",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutStrategy {
    /// Plain fine-tuning.
    None,
    /// Every head and MLP truncated by the same random fraction per step.
    Uniform,
    Piad,
}

impl DropoutStrategy {
    pub const ALL: [DropoutStrategy; 3] = [DropoutStrategy::None, DropoutStrategy::Uniform, DropoutStrategy::Piad];
}

impl fmt::Display for DropoutStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropoutStrategy::None => "none",
            DropoutStrategy::Uniform => "uniform",
            DropoutStrategy::Piad => "piad",
        })
    }
}

/// Number of width levels the uniform strategy samples from.
pub const UNIFORM_LEVELS: usize = 32;

fn extend_rows(report: &mut ExperimentReport, rows: Vec<Vec<ReportRow>>) {
    rows.into_iter().flatten().for_each(|r| report.push(r));
}

fn test_accuracy<T: Real>(model: &Vit<T>, data: &SyntheticDataset, mask: Option<&SubnetMask>, cfg: &Config) -> Result<f64> {
    accuracy(model, &data.test.batch(), mask, cfg.experiment.eval_chunk)
}

/// Direct-evaluation test accuracy of every criterion at every keep ratio.
pub fn compare_criteria<T: Real>(
    model: &Vit<T>,
    data: &SyntheticDataset,
    cfg: &Config,
    ratios: &[f64],
    seeds: &[u64],
) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new("compare-criteria", cfg.hash());
    let rows = par_map(seeds, |&seed| {
        let proxy = data.sample_proxy(cfg.wpac.proxy_size, seed)?;
        let mut rows = Vec::new();
        for &ratio in ratios {
            for c in Criterion::ALL {
                let (m, mask) = prune_by_criterion(model, &proxy.batch(), c, ratio, seed, &cfg.wpac.core(seed))?;
                let acc = test_accuracy(&m, data, Some(&mask), cfg)?;
                rows.push(ReportRow::new("criteria", c.to_string(), seed, ratio, "accuracy", acc));
            }
        }
        Ok(rows)
    })?;
    extend_rows(&mut report, rows);
    Ok(report)
}

pub fn weighting_ablation<T: Real>(
    model: &Vit<T>,
    data: &SyntheticDataset,
    cfg: &Config,
    seeds: &[u64],
) -> Result<ExperimentReport> {
    const VARIANTS: [(WeightingName, &str); 4] = [
        (WeightingName::ClassToken, "class-token"),
        (WeightingName::RandomTokens, "random-tokens"),
        (WeightingName::Uniform, "uniform"),
        (WeightingName::Importance, "importance"),
    ];
    let mut report = ExperimentReport::new("ablate-weighting", cfg.hash());
    let rows = par_map(seeds, |&seed| {
        let proxy = data.sample_proxy(cfg.wpac.proxy_size, seed)?;
        let mut rows = Vec::new();
        for (w, name) in VARIANTS {
            let mut wcfg = cfg.wpac.core(seed);
            wcfg.weighting = cfg.wpac.weighting(w, seed);
            let (m, mask) = prune_by_criterion(model, &proxy.batch(), Criterion::Wpac, 0.5, seed, &wcfg)?;
            let acc = test_accuracy(&m, data, Some(&mask), cfg)?;
            rows.push(ReportRow::new("weighting", name, seed, 0.5, "accuracy", acc));
        }
        Ok(rows)
    })?;
    extend_rows(&mut report, rows);
    Ok(report)
}

pub fn proxy_size_ablation<T: Real>(
    model: &Vit<T>,
    data: &SyntheticDataset,
    cfg: &Config,
    sizes: &[usize],
    seeds: &[u64],
) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new("ablate-proxy-size", cfg.hash());
    let rows = par_map(seeds, |&seed| {
        let mut rows = Vec::new();
        for &size in sizes {
            let proxy = data.sample_proxy(size, seed)?;
            let (m, mask) = prune_by_criterion(model, &proxy.batch(), Criterion::Wpac, 0.5, seed, &cfg.wpac.core(seed))?;
            let acc = test_accuracy(&m, data, Some(&mask), cfg)?;
            rows.push(ReportRow::new("proxy-size", "wpac", seed, size as f64, "accuracy", acc));
        }
        Ok(rows)
    })?;
    extend_rows(&mut report, rows);
    Ok(report)
}

/// Fraction of every head and MLP width that removes `ratio` of the full MACs
/// when dropped uniformly (capped at 1).
pub fn uniform_drop_fraction(arch: &skd_core::ArchConfig, ratio: f64) -> f64 {
    let m = MacsModel::new(arch);
    let droppable = m.depth * (m.heads * m.head_dim * m.attn_dim() + m.mlp_hidden * m.mlp_dim());
    (ratio * m.full() as f64 / droppable as f64).min(1.0)
}

/// Mask that drops `fraction` of every head and every MLP, keeping at least
/// one dimension each.
pub fn uniform_width_mask<T: Real>(model: &Vit<T>, fraction: f64) -> SubnetMask {
    let cut = |dim: usize| dim - ((fraction * dim as f64).round() as usize).min(dim - 1);
    let mut mask = SubnetMask::full(model);
    for heads in &mut mask.attn_keep {
        heads.iter_mut().for_each(|k| *k = cut(*k));
    }
    mask.mlp_keep.iter_mut().for_each(|k| *k = cut(*k));
    mask
}

/// Result of training one dropout strategy.
#[derive(Debug, Clone)]
pub struct StrategyRun<T> {
    pub strategy: DropoutStrategy,
    pub model: Vit<T>,
    /// Set for PIAD only.
    pub list: Option<DropoutList>,
    /// Smallest sub-network the strategy is evaluated at.
    pub smallest: SubnetMask,
    pub updates: Vec<UpdateReport>,
    pub log: Vec<EpochLog>,
}

/// Trains `model` (normally WPAC-transformed) under `strategy`. All three
/// strategies share the optimizer, schedule and compression ratio of `piad`.
pub fn run_strategy<T: Real>(
    model: &Vit<T>,
    train: &Batch<'_>,
    proxy: &Batch<'_>,
    piad: &PiadConfig,
    strategy: DropoutStrategy,
) -> Result<StrategyRun<T>> {
    let fraction = uniform_drop_fraction(&model.arch, piad.ratio);
    match strategy {
        DropoutStrategy::Piad => {
            let out = train_piad(model, train, proxy, piad)?;
            let smallest = out.list.smallest_mask(&out.model);
            Ok(StrategyRun {
                strategy,
                model: out.model,
                list: Some(out.list),
                smallest,
                updates: out.updates,
                log: out.log,
            })
        }
        DropoutStrategy::None => {
            let out = train_piad(model, train, proxy, &PiadConfig { ratio: 0.0, ..*piad })?;
            let smallest = uniform_width_mask(&out.model, fraction);
            Ok(StrategyRun {
                strategy,
                model: out.model,
                list: None,
                smallest,
                updates: Vec::new(),
                log: out.log,
            })
        }
        DropoutStrategy::Uniform => {
            piad.validate()?;
            let mut m = model.clone();
            let log = train_masked(
                &mut m,
                train,
                piad,
                |_, _| Ok((0, 0)),
                |m, rng| {
                    let level = rng.random_range(0..=UNIFORM_LEVELS);
                    (level > 0).then(|| uniform_width_mask(m, fraction * level as f64 / UNIFORM_LEVELS as f64))
                },
            )?;
            let smallest = uniform_width_mask(&m, fraction);
            Ok(StrategyRun {
                strategy,
                model: m,
                list: None,
                smallest,
                updates: Vec::new(),
                log,
            })
        }
    }
}

/// Training split used by super-network runs.
pub fn piad_train_split(data: &SyntheticDataset, cfg: &Config) -> Split {
    match cfg.experiment.piad_train_samples {
        0 => data.train.clone(),
        n => data.train_prefix(n),
    }
}

pub fn dropout_strategy_ablation<T: Real>(
    model: &Vit<T>,
    data: &SyntheticDataset,
    cfg: &Config,
    strategies: &[DropoutStrategy],
    seeds: &[u64],
) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new("ablate-dropout-strategy", cfg.hash());
    let train = piad_train_split(data, cfg);
    let macs = MacsModel::new(&model.arch);
    let r = cfg.piad.ratio;
    let rows = par_map(seeds, |&seed| {
        let proxy = data.sample_proxy(cfg.wpac.proxy_size, seed)?;
        let wpac = wpac_transform(model, &proxy.batch(), &cfg.wpac.core(seed))?.model;
        let piad = PiadConfig { seed, ..cfg.piad };
        let mut rows = Vec::new();
        for &s in strategies {
            let run = run_strategy(&wpac, &train.batch(), &proxy.batch(), &piad, s)?;
            let name = s.to_string();
            if s == DropoutStrategy::Piad {
                let pre = test_accuracy(&wpac, data, Some(&run.smallest), cfg)?;
                rows.push(ReportRow::new("dropout-strategy", &name, seed, r, "pre_smallest_accuracy", pre));
            }
            let small = test_accuracy(&run.model, data, Some(&run.smallest), cfg)?;
            let full = test_accuracy(&run.model, data, None, cfg)?;
            let frac = macs.of_model(&run.model, Some(&run.smallest)) as f64 / macs.full() as f64;
            rows.push(ReportRow::new("dropout-strategy", &name, seed, r, "smallest_accuracy", small));
            rows.push(ReportRow::new("dropout-strategy", &name, seed, r, "full_accuracy", full));
            rows.push(ReportRow::new("dropout-strategy", &name, seed, r, "smallest_macs_fraction", frac));
        }
        Ok(rows)
    })?;
    extend_rows(&mut report, rows);
    Ok(report)
}

pub fn run_ablation<T: Real>(
    which: Ablation,
    model: &Vit<T>,
    data: &SyntheticDataset,
    cfg: &Config,
    seeds: &[u64],
) -> Result<ExperimentReport> {
    match which {
        Ablation::Weighting => weighting_ablation(model, data, cfg, seeds),
        Ablation::ProxySize => proxy_size_ablation(model, data, cfg, &cfg.experiment.proxy_sizes, seeds),
        Ablation::DropoutStrategy => dropout_strategy_ablation(model, data, cfg, &DropoutStrategy::ALL, seeds),
    }
}
