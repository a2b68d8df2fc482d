//! The `skd` command line.
//!
//! Every artifact lands under `--out`; `manifest.json` there records each
//! command with its config hash, seed and the SHA-256 of what it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use skd_core::checkpoint::{load_model, save_model};
use skd_core::importance::MacsModel;
use skd_core::piad::{extraction_mask, train_piad, DropoutList};
use skd_core::vit::infer;
use skd_core::wpac::{wpac_transform, TransformRecord};
use skd_core::{Batch, Error, Real, Result, Vit};

use crate::ablation::{compare_criteria, piad_train_split, run_ablation, Ablation};
use crate::config::Config;
use crate::data::{gen_data, SyntheticDataset};
use crate::report::ExperimentReport;
use crate::train::{eval, train_base};

/// Logit tolerance of `wpac --verify`.
pub const VERIFY_TOLERANCE: f64 = 1e-5;
/// Random inputs used by `wpac --verify`.
pub const VERIFY_INPUTS: usize = 100;

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config; missing sections use defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for this command (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic shapes dataset.
    GenData,
    /// Train the base model.
    TrainBase {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Apply the function-preserving WPAC transform.
    Wpac {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Check the transformed model against the original on random inputs.
        #[arg(long)]
        verify: bool,
    },
    /// Super-network training with progressive importance-aware dropout.
    Piad {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Cut a sub-network out of a trained super-network. Reads no data.
    Extract {
        /// Fraction of the full MACs if ≤ 1, otherwise an absolute MAC count.
        #[arg(long)]
        target_macs: f64,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        list: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Test-split accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate the masked sub-network at this budget (needs --list).
        #[arg(long)]
        target_macs: Option<f64>,
        #[arg(long)]
        list: Option<PathBuf>,
    },
    /// Attention pruning criteria without fine-tuning.
    CompareCriteria {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Run one ablation: weighting, proxy-size or dropout-strategy.
    Ablate {
        #[arg(long)]
        which: String,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Merge report CSVs and print their tables.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Parser)]
#[command(name = "skd", version, about = "Knowledge-density ordering and sub-network extraction for small ViTs")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn path(out: &Path) -> PathBuf {
        out.join("manifest.json")
    }

    pub fn load(out: &Path) -> Result<Self> {
        let path = Self::path(out);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))
    }

    fn record(out: &Path, command: &str, cfg: &Config, seed: Option<u64>, files: &[PathBuf]) -> Result<()> {
        let mut m = Self::load(out)?;
        let mut artifacts = Vec::new();
        for f in files {
            let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
            artifacts.push(Artifact {
                path: f.strip_prefix(out).unwrap_or(f).display().to_string(),
                sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
                bytes: bytes.len() as u64,
            });
        }
        m.entries.push(ManifestEntry {
            command: command.into(),
            config_hash: cfg.hash(),
            seed,
            artifacts,
        });
        let path = Self::path(out);
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_dataset(common: &Common, data: &Option<PathBuf>, cfg: &Config) -> Result<SyntheticDataset> {
    let path = data.clone().unwrap_or_else(|| common.out.join("dataset.skd"));
    if !path.exists() {
        return Err(Error::Invalid(format!(
            "dataset {} not found; run `skd gen-data` first",
            path.display()
        )));
    }
    let d = SyntheticDataset::load(&path)?;
    if d.image_size != cfg.arch.image_size || d.channels != cfg.arch.channels || d.num_classes() != cfg.arch.num_classes {
        return Err(Error::Invalid(format!("dataset {} does not match the configured arch", path.display())));
    }
    Ok(d)
}

fn load_checkpoint(path: &Path, what: &str) -> Result<Vit<f32>> {
    if !path.exists() {
        return Err(Error::Invalid(format!("{what} checkpoint {} not found", path.display())));
    }
    load_model(path, None)
}

fn meta(cfg: &Config, stage: &str, seed: Option<u64>) -> BTreeMap<String, serde_json::Value> {
    let mut m = BTreeMap::new();
    m.insert("stage".into(), serde_json::json!(stage));
    m.insert("config_hash".into(), serde_json::json!(cfg.hash()));
    if let Some(s) = seed {
        m.insert("seed".into(), serde_json::json!(s));
    }
    m
}

fn target_from_arg(full: u64, target: f64) -> Result<u64> {
    if !(target > 0.0) || !target.is_finite() {
        return Err(Error::Invalid(format!("target MACs {target} must be positive")));
    }
    Ok(if target <= 1.0 {
        (target * full as f64).floor() as u64
    } else {
        target as u64
    })
}

/// Largest absolute logit difference between two models on `n` standard
/// normal images.
pub fn max_logit_deviation(a: &Vit<f32>, b: &Vit<f32>, n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images: Vec<f32> = (0..n * a.arch.image_len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let labels = vec![0u32; n];
    let batch = Batch::new(&images, &labels);
    let la = infer(a, &batch, None)?.logits;
    let lb = infer(b, &batch, None)?.logits;
    Ok(la.iter().zip(&lb).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max))
}

fn seeds(cfg: &Config, seed: Option<u64>) -> Vec<u64> {
    seed.map_or_else(|| cfg.experiment.seeds.clone(), |s| vec![s])
}

fn save_report(report: &ExperimentReport, out: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let csv = out.join(format!("{stem}.csv"));
    report.save_csv(&csv)?;
    let json = out.join(format!("{stem}_summary.json"));
    write_text(&json, &serde_json::to_string_pretty(&report.summary_json()).expect("summary serializes"))?;
    Ok(vec![csv, json])
}

fn execute(common: &Common, command: &Command) -> Result<()> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let out = &common.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let seed = common.seed;
    match command {
        Command::GenData => {
            if let Some(s) = seed {
                cfg.experiment.data_seed = s;
            }
            let d = gen_data(cfg.experiment.data_seed, &cfg.data)?;
            let path = out.join("dataset.skd");
            d.save(&path)?;
            println!(
                "dataset: {} train / {} val / {} test images, {} classes -> {}",
                d.train.len(),
                d.val.len(),
                d.test.len(),
                d.num_classes(),
                path.display()
            );
            Manifest::record(out, "gen-data", &cfg, Some(cfg.experiment.data_seed), &[path])
        }
        Command::TrainBase { data } => {
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let d = load_dataset(common, data, &cfg)?;
            let t = Instant::now();
            let (model, logs) = train_base::<f32>(cfg.arch, &d.train.batch(), &cfg.train)?;
            for l in &logs {
                eprintln!("epoch {:>3}  loss {:.4}", l.epoch, l.mean_loss);
            }
            let val = eval(&model, &d.val.batch(), None, cfg.experiment.eval_chunk)?;
            println!(
                "trained in {:.1}s, val accuracy {:.2}%",
                t.elapsed().as_secs_f64(),
                val.accuracy * 100.0
            );
            let path = out.join("base.skd");
            save_model(&model, &path, meta(&cfg, "base", Some(cfg.train.seed)))?;
            Manifest::record(out, "train-base", &cfg, Some(cfg.train.seed), &[path])
        }
        Command::Wpac { model, data, verify } => {
            let s = seed.unwrap_or(cfg.experiment.seeds.first().copied().unwrap_or(0));
            let base = load_checkpoint(&model.clone().unwrap_or_else(|| out.join("base.skd")), "base")?;
            let d = load_dataset(common, data, &cfg)?;
            let proxy = d.sample_proxy(cfg.wpac.proxy_size, s)?;
            let t = Instant::now();
            let outcome = wpac_transform(&base, &proxy.batch(), &cfg.wpac.core(s))?;
            println!(
                "wpac: {} transforms ({} ill-conditioned) in {:.2}s, proxy cost {:.4}",
                outcome.transforms.len(),
                outcome.ill_conditioned(),
                t.elapsed().as_secs_f64(),
                outcome.cost
            );
            let path = out.join("wpac.skd");
            save_model(&outcome.model, &path, meta(&cfg, "wpac", Some(s)))?;
            let records: Vec<TransformRecord> = outcome.transforms.iter().map(TransformRecord::from).collect();
            let tpath = out.join("transforms.json");
            write_text(&tpath, &serde_json::to_string_pretty(&records).expect("records serialize"))?;
            Manifest::record(out, "wpac", &cfg, Some(s), &[path, tpath])?;
            if *verify {
                let dev = max_logit_deviation(&base, &outcome.model, VERIFY_INPUTS, s)?;
                println!("max logit deviation over {VERIFY_INPUTS} random inputs: {dev:.3e}");
                if !(dev <= VERIFY_TOLERANCE) {
                    return Err(Error::Tolerance {
                        what: "wpac logit deviation".into(),
                        value: dev,
                        limit: VERIFY_TOLERANCE,
                    });
                }
            }
            Ok(())
        }
        Command::Piad { model, data } => {
            if let Some(s) = seed {
                cfg.piad.seed = s;
            }
            let s = cfg.piad.seed;
            let start = load_checkpoint(&model.clone().unwrap_or_else(|| out.join("wpac.skd")), "wpac")?;
            let d = load_dataset(common, data, &cfg)?;
            let proxy = d.sample_proxy(cfg.wpac.proxy_size, s)?;
            let train = piad_train_split(&d, &cfg);
            let t = Instant::now();
            let outcome = train_piad(&start, &train.batch(), &proxy.batch(), &cfg.piad)?;
            for l in &outcome.log {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  list {:>3} units / {} MACs",
                    l.epoch, l.mean_loss, l.list_len, l.list_macs
                );
            }
            let test = d.test.batch();
            let small = outcome.list.smallest_mask(&outcome.model);
            let macs = MacsModel::new(&outcome.model.arch);
            println!(
                "piad in {:.1}s: full {:.2}%, smallest ({:.1}% MACs) {:.2}%",
                t.elapsed().as_secs_f64(),
                eval(&outcome.model, &test, None, cfg.experiment.eval_chunk)?.accuracy * 100.0,
                macs.of_model(&outcome.model, Some(&small)) as f64 / macs.full() as f64 * 100.0,
                eval(&outcome.model, &test, Some(&small), cfg.experiment.eval_chunk)?.accuracy * 100.0
            );
            let path = out.join("piad.skd");
            save_model(&outcome.model, &path, meta(&cfg, "piad", Some(s)))?;
            let lpath = out.join("dropout_list.csv");
            let f = std::fs::File::create(&lpath).map_err(|e| Error::io(&lpath, e))?;
            outcome.list.write_csv(&outcome.model.arch, f)?;
            let logpath = out.join("piad_log.json");
            write_text(&logpath, &serde_json::to_string_pretty(&outcome.log).expect("log serializes"))?;
            Manifest::record(out, "piad", &cfg, Some(s), &[path, lpath, logpath])
        }
        Command::Extract {
            target_macs,
            model,
            list,
            output,
        } => {
            let t = Instant::now();
            let m = load_checkpoint(&model.clone().unwrap_or_else(|| out.join("piad.skd")), "piad")?;
            let lpath = list.clone().unwrap_or_else(|| out.join("dropout_list.csv"));
            let f = std::fs::File::open(&lpath).map_err(|e| Error::io(&lpath, e))?;
            let l = DropoutList::read_csv(f)?;
            let macs = MacsModel::new(&m.arch);
            let target = target_from_arg(macs.full(), *target_macs)?;
            let (mask, dropped) = extraction_mask(&m, &l, target)?;
            let sub = m.sliced(&mask)?;
            let path = output.clone().unwrap_or_else(|| out.join("extracted.skd"));
            let mut md = meta(&cfg, "extracted", None);
            md.insert("dropped_units".into(), serde_json::json!(dropped));
            md.insert("target_macs".into(), serde_json::json!(target));
            save_model(&sub, &path, md)?;
            let got = macs.of_model(&sub, None);
            println!(
                "extracted {} MACs ({:.1}% of {}), {} units dropped, {} params, {:.3}s",
                got,
                got as f64 / macs.full() as f64 * 100.0,
                macs.full(),
                dropped,
                sub.param_count(),
                t.elapsed().as_secs_f64()
            );
            Manifest::record(out, "extract", &cfg, None, &[path])
        }
        Command::Eval {
            model,
            data,
            target_macs,
            list,
        } => {
            let m = load_checkpoint(&model.clone().unwrap_or_else(|| out.join("base.skd")), "model")?;
            let d = load_dataset(common, data, &cfg)?;
            let macs = MacsModel::new(&m.arch);
            let mask = match (target_macs, list) {
                (Some(t), Some(lp)) => {
                    let f = std::fs::File::open(lp).map_err(|e| Error::io(lp, e))?;
                    let l = DropoutList::read_csv(f)?;
                    Some(extraction_mask(&m, &l, target_from_arg(macs.full(), *t)?)?.0)
                }
                (None, None) => None,
                _ => return Err(Error::Invalid("--target-macs and --list go together".into())),
            };
            let e = eval(&m, &d.test.batch(), mask.as_ref(), cfg.experiment.eval_chunk)?;
            println!(
                "test accuracy {:.2}%  cost {:.4}  MACs {}  ({} samples)",
                e.accuracy * 100.0,
                e.cost,
                macs.of_model(&m, mask.as_ref()),
                e.samples
            );
            Ok(())
        }
        Command::CompareCriteria { model, data, ratios } => {
            if let Some(r) = ratios {
                cfg.experiment.ratios = r.clone();
            }
            cfg.experiment.seeds = seeds(&cfg, seed);
            cfg.validate()?;
            let m = load_checkpoint(&model.clone().unwrap_or_else(|| out.join("base.skd")), "base")?;
            let d = load_dataset(common, data, &cfg)?;
            let t = Instant::now();
            let mut report = compare_criteria(&m, &d, &cfg, &cfg.experiment.ratios, &cfg.experiment.seeds)?;
            report.time("compare-criteria", t.elapsed().as_secs_f64());
            print!("{}", report.table("criteria", "accuracy"));
            let files = save_report(&report, out, "criteria")?;
            Manifest::record(out, "compare-criteria", &cfg, seed, &files)
        }
        Command::Ablate { which, model, data } => {
            let which: Ablation = which.parse()?;
            cfg.experiment.seeds = seeds(&cfg, seed);
            let m = load_checkpoint(&model.clone().unwrap_or_else(|| out.join("base.skd")), "base")?;
            let d = load_dataset(common, data, &cfg)?;
            let t = Instant::now();
            let mut report = run_ablation(which, &m, &d, &cfg, &cfg.experiment.seeds)?;
            report.time(which.to_string(), t.elapsed().as_secs_f64());
            for metric in ["accuracy", "pre_smallest_accuracy", "smallest_accuracy", "full_accuracy"] {
                if report.rows.iter().any(|r| r.metric == metric) {
                    print!("{}", report.table(&report.rows[0].experiment, metric));
                }
            }
            let files = save_report(&report, out, &format!("ablation_{}", which.to_string().replace('-', "_")))?;
            Manifest::record(out, "ablate", &cfg, seed, &files)
        }
        Command::Report { inputs, output } => {
            let mut merged = ExperimentReport::default();
            for p in inputs {
                merged.merge(ExperimentReport::load_csv(p)?)?;
            }
            let mut seen = Vec::new();
            for r in &merged.rows {
                if !seen.contains(&(r.experiment.clone(), r.metric.clone())) {
                    seen.push((r.experiment.clone(), r.metric.clone()));
                }
            }
            for (e, m) in &seen {
                println!("{}", merged.table(e, m));
            }
            let path = output.clone().unwrap_or_else(|| out.join("report.csv"));
            merged.save_csv(&path)?;
            let json = path.with_extension("json");
            write_text(&json, &serde_json::to_string_pretty(&merged.summary_json()).expect("summary serializes"))?;
            println!("merged {} rows (config {}) -> {}", merged.rows.len(), merged.config_hash, path.display());
            Ok(())
        }
    }
}

/// Exit status for an error: 2 for numerical failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(args) {
        Ok(p) => p,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(&parsed.common, &parsed.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
