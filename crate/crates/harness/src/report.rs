//! Experiment reports: long-format CSV rows tagged with the config hash, plus a
//! JSON summary with per-variant means and stage timings.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use skd_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub variant: String,
    pub seed: u64,
    /// Keep ratio, proxy size or compression ratio depending on the experiment.
    pub setting: f64,
    pub metric: String,
    pub value: f64,
}

impl ReportRow {
    pub fn new(experiment: &str, variant: impl Into<String>, seed: u64, setting: f64, metric: &str, value: f64) -> Self {
        Self {
            experiment: experiment.into(),
            variant: variant.into(),
            seed,
            setting,
            metric: metric.into(),
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CsvRecord {
    run_id: String,
    config_hash: String,
    experiment: String,
    variant: String,
    seed: u64,
    setting: f64,
    metric: String,
    value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentReport {
    pub run_id: String,
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
    /// Wall-clock timings; kept out of the CSV so reruns compare byte-equal.
    pub timing: Vec<Timing>,
}

/// Mean and spread over seeds of one (experiment, variant, setting, metric).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub experiment: String,
    pub variant: String,
    pub setting: f64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub seeds: Vec<u64>,
}

impl ExperimentReport {
    pub fn new(run_id: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            config_hash: config_hash.into(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    pub fn time(&mut self, stage: impl Into<String>, seconds: f64) {
        self.timing.push(Timing {
            stage: stage.into(),
            seconds,
        });
    }

    /// Appends `other`'s rows. Reports produced under different configs are
    /// refused.
    pub fn merge(&mut self, other: ExperimentReport) -> Result<()> {
        if self.config_hash.is_empty() && self.rows.is_empty() {
            self.config_hash = other.config_hash.clone();
        }
        if other.config_hash != self.config_hash {
            return Err(Error::Invalid(format!(
                "cannot merge reports with config hashes {} and {}",
                self.config_hash, other.config_hash
            )));
        }
        if self.run_id.is_empty() {
            self.run_id = other.run_id;
        } else if !other.run_id.is_empty() && other.run_id != self.run_id {
            self.run_id = format!("{}+{}", self.run_id, other.run_id);
        }
        self.rows.extend(other.rows);
        self.timing.extend(other.timing);
        Ok(())
    }

    /// Value of one row, if present.
    pub fn value(&self, experiment: &str, variant: &str, seed: u64, setting: f64, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| {
                r.experiment == experiment
                    && r.variant == variant
                    && r.seed == seed
                    && r.setting == setting
                    && r.metric == metric
            })
            .map(|r| r.value)
    }

    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut groups: BTreeMap<(String, String, u64, String), Vec<(u64, f64)>> = BTreeMap::new();
        let mut order = Vec::new();
        for r in &self.rows {
            let key = (r.experiment.clone(), r.variant.clone(), r.setting.to_bits(), r.metric.clone());
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push((r.seed, r.value));
        }
        order
            .into_iter()
            .map(|key| {
                let vals = &groups[&key];
                let n = vals.len() as f64;
                let mean = vals.iter().map(|v| v.1).sum::<f64>() / n;
                let var = if vals.len() > 1 {
                    vals.iter().map(|v| (v.1 - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                Aggregate {
                    experiment: key.0,
                    variant: key.1,
                    setting: f64::from_bits(key.2),
                    metric: key.3,
                    mean,
                    std: var.sqrt(),
                    seeds: vals.iter().map(|v| v.0).collect(),
                }
            })
            .collect()
    }

    /// Variant × setting table of seed means for one experiment and metric.
    pub fn table(&self, experiment: &str, metric: &str) -> String {
        let aggs: Vec<Aggregate> = self
            .aggregates()
            .into_iter()
            .filter(|a| a.experiment == experiment && a.metric == metric)
            .collect();
        let mut settings: Vec<f64> = Vec::new();
        let mut variants: Vec<String> = Vec::new();
        for a in &aggs {
            if !settings.contains(&a.setting) {
                settings.push(a.setting);
            }
            if !variants.contains(&a.variant) {
                variants.push(a.variant.clone());
            }
        }
        let mut out = format!("{experiment} ({metric})\n{:<16}", "variant");
        for s in &settings {
            out += &format!("{:>16}", format!("{s}"));
        }
        out.push('\n');
        for v in &variants {
            out += &format!("{v:<16}");
            for s in &settings {
                match aggs.iter().find(|a| &a.variant == v && a.setting == *s) {
                    Some(a) => out += &format!("{:>16}", format!("{:.2} ± {:.2}", a.mean, a.std)),
                    None => out += &format!("{:>16}", "-"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(CsvRecord {
                run_id: self.run_id.clone(),
                config_hash: self.config_hash.clone(),
                experiment: r.experiment.clone(),
                variant: r.variant.clone(),
                seed: r.seed,
                setting: r.setting,
                metric: r.metric.clone(),
                value: r.value,
            })?;
        }
        w.flush().map_err(|e| Error::io(Path::new("<report>"), e))?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }

    /// Reads a report CSV. Every row must carry the same config hash.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let mut report = ExperimentReport::default();
        for (i, rec) in rd.deserialize::<CsvRecord>().enumerate() {
            let rec = rec?;
            if i == 0 {
                report.run_id = rec.run_id.clone();
                report.config_hash = rec.config_hash.clone();
            } else if rec.config_hash != report.config_hash {
                return Err(Error::Malformed(format!(
                    "row {} has config hash {} but the report started with {}",
                    i + 1,
                    rec.config_hash,
                    report.config_hash
                )));
            }
            report.rows.push(ReportRow {
                experiment: rec.experiment,
                variant: rec.variant,
                seed: rec.seed,
                setting: rec.setting,
                metric: rec.metric,
                value: rec.value,
            });
        }
        Ok(report)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f))
    }

    /// Structured summary for plotting: aggregates plus timings.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "aggregates": self.aggregates(),
            "timing": self.timing,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(hash: &str) -> ExperimentReport {
        let mut r = ExperimentReport::new("criteria", hash);
        r.push(ReportRow::new("criteria", "wpac", 0, 0.5, "accuracy", 95.5));
        r.push(ReportRow::new("criteria", "wpac", 1, 0.5, "accuracy", 96.5));
        r.push(ReportRow::new("criteria", "random", 0, 0.5, "accuracy", 50.0));
        r
    }

    #[test]
    fn csv_round_trip() {
        let r = sample("abc");
        let back = ExperimentReport::read_csv(&r.to_csv().unwrap()[..]).unwrap();
        assert_eq!(back.rows, r.rows);
        assert_eq!(back.config_hash, "abc");
        let text = String::from_utf8(r.to_csv().unwrap()).unwrap();
        assert!(text.starts_with("run_id,config_hash,experiment,variant,seed,setting,metric,value\n"));
        assert!(text.lines().skip(1).all(|l| l.contains(",abc,")));
    }

    #[test]
    fn merge_checks_hash() {
        let mut a = sample("abc");
        a.merge(sample("abc")).unwrap();
        assert_eq!(a.rows.len(), 6);
        assert!(a.merge(sample("def")).is_err());
        let mut empty = ExperimentReport::default();
        empty.merge(sample("def")).unwrap();
        assert_eq!(empty.config_hash, "def");
    }

    #[test]
    fn mixed_hash_csv_is_rejected() {
        let mut text = String::from_utf8(sample("abc").to_csv().unwrap()).unwrap();
        text += "criteria,zzz,criteria,wpac,2,0.5,accuracy,1.0\n";
        assert!(ExperimentReport::read_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn aggregates_and_table() {
        let r = sample("abc");
        let a = r.aggregates();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].mean, 96.0);
        assert!((a[0].std - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.value("criteria", "random", 0, 0.5, "accuracy"), Some(50.0));
        let t = r.table("criteria", "accuracy");
        assert!(t.contains("96.00"));
    }
}
