//! Synthetic shapes dataset and proxy sampling.
//!
//! Eight classes: a line at 0°, 90°, 45° and 135°, a triangle pointing up or
//! down, and a cross in `+` or `×` orientation. Position, size, thickness and
//! contrast vary per image and Gaussian pixel noise is added.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use skd_core::checkpoint::{Container, TensorData};
use skd_core::{Batch, Error, Result};

pub const DATASET_KIND: &str = "dataset";
pub const CLASS_NAMES: [&str; 8] = [
    "line-0", "line-90", "line-45", "line-135", "triangle-up", "triangle-down", "cross-plus",
    "cross-x",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub image_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Largest shape-center offset from the image center, in pixels.
    pub jitter: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            train_per_class: 500,
            val_per_class: 100,
            test_per_class: 100,
            noise: 0.35,
            jitter: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch::new(&self.images, &self.labels)
    }

    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    fn subset(&self, idx: &[usize]) -> Split {
        let (images, labels) = skd_core::piad::gather(&self.batch(), idx);
        Split { images, labels }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub image_size: usize,
    pub channels: usize,
    pub class_names: Vec<String>,
    pub seed: u64,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

fn segment_distance(px: f64, py: f64, cx: f64, cy: f64, angle: f64, half: f64) -> f64 {
    let (s, c) = angle.sin_cos();
    let (dx, dy) = (px - cx, py - cy);
    let along = (dx * c + dy * s).clamp(-half, half);
    let (qx, qy) = (cx + along * c, cy + along * s);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

fn inside_triangle(px: f64, py: f64, cx: f64, cy: f64, size: f64, up: bool) -> bool {
    // Image rows grow downward; "up" has its apex at the smaller row.
    let dir = if up { 1.0 } else { -1.0 };
    let t = (py - cy) * dir; // -size at the apex, +size at the base
    if !(-size..=size).contains(&t) {
        return false;
    }
    let half_width = (t + size) / 2.0;
    (px - cx).abs() <= half_width
}

fn render<R: Rng + ?Sized>(class: usize, cfg: &DataConfig, rng: &mut R, out: &mut [f32]) {
    let s = cfg.image_size as f64;
    let center = (s - 1.0) / 2.0;
    let cx = center + rng.random_range(-cfg.jitter..=cfg.jitter);
    let cy = center + rng.random_range(-cfg.jitter..=cfg.jitter);
    let size = rng.random_range(0.18 * s..0.3 * s);
    let thick = rng.random_range(1.0..2.2);
    let contrast = rng.random_range(0.7..1.3);
    let tilt = rng.random_range(-0.12..0.12);
    let noise = Normal::new(0.0, cfg.noise).expect("valid noise");
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
    for y in 0..cfg.image_size {
        for x in 0..cfg.image_size {
            let (px, py) = (x as f64, y as f64);
            let on = match class {
                0..=3 => {
                    let angle = [0.0, FRAC_PI_2, FRAC_PI_4, 3.0 * FRAC_PI_4][class] + tilt;
                    segment_distance(px, py, cx, cy, angle, size) <= thick
                }
                4 | 5 => inside_triangle(px, py, cx, cy, size * 0.8, class == 4),
                _ => {
                    let base = if class == 6 { 0.0 } else { FRAC_PI_4 } + tilt;
                    let h = size * 0.8;
                    segment_distance(px, py, cx, cy, base, h) <= thick
                        || segment_distance(px, py, cx, cy, base + FRAC_PI_2, h) <= thick
                }
            };
            let v = if on { contrast } else { 0.0 } + noise.sample(rng);
            out[y * cfg.image_size + x] = v as f32;
        }
    }
}

fn gen_split<R: Rng + ?Sized>(per_class: usize, cfg: &DataConfig, rng: &mut R) -> Split {
    let classes = CLASS_NAMES.len();
    let n = per_class * classes;
    let len = cfg.image_size * cfg.image_size;
    let mut images = vec![0.0f32; n * len];
    // Interleave classes so any prefix is close to balanced.
    let labels: Vec<u32> = (0..n).map(|i| (i % classes) as u32).collect();
    for (i, &l) in labels.iter().enumerate() {
        render(l as usize, cfg, rng, &mut images[i * len..(i + 1) * len]);
    }
    Split { images, labels }
}

/// Deterministic synthetic dataset; every split is class-balanced.
pub fn gen_data(seed: u64, cfg: &DataConfig) -> Result<SyntheticDataset> {
    if cfg.train_per_class == 0 || cfg.val_per_class == 0 || cfg.test_per_class == 0 {
        return Err(Error::Invalid("every split needs at least one image per class".into()));
    }
    if cfg.image_size < 8 {
        return Err(Error::Invalid("image_size must be at least 8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = gen_split(cfg.train_per_class, cfg, &mut rng);
    let val = gen_split(cfg.val_per_class, cfg, &mut rng);
    let test = gen_split(cfg.test_per_class, cfg, &mut rng);
    Ok(SyntheticDataset {
        image_size: cfg.image_size,
        channels: 1,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        seed,
        train,
        val,
        test,
    })
}

impl SyntheticDataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(DATASET_KIND);
        c.meta.insert("class_names".into(), serde_json::json!(self.class_names));
        c.meta.insert("seed".into(), serde_json::json!(self.seed));
        let (s, ch) = (self.image_size, self.channels);
        for (name, split) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            c.push(
                format!("{name}.images"),
                vec![split.len(), ch, s, s],
                TensorData::F32(split.images.clone()),
            )?;
            c.push(format!("{name}.labels"), vec![split.len()], TensorData::U32(split.labels.clone()))?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != DATASET_KIND {
            return Err(Error::Malformed(format!("expected a dataset container, found `{}`", c.kind)));
        }
        let class_names: Vec<String> = c
            .meta
            .get("class_names")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| Error::Malformed("dataset without class names".into()))?;
        let seed = c.meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
        let mut geometry = None;
        let mut splits = BTreeMap::new();
        for name in ["train", "val", "test"] {
            let (shape, images) = c.get(&format!("{name}.images"))?;
            let (lshape, labels) = c.get(&format!("{name}.labels"))?;
            let (TensorData::F32(images), TensorData::U32(labels)) = (images, labels) else {
                return Err(Error::Malformed(format!("split `{name}` has wrong dtypes")));
            };
            if shape.len() != 4 || shape[2] != shape[3] || lshape != [shape[0]] {
                return Err(Error::Malformed(format!("split `{name}` has inconsistent shapes")));
            }
            if labels.iter().any(|&l| l as usize >= class_names.len()) {
                return Err(Error::Malformed(format!("split `{name}` has out-of-range labels")));
            }
            let g = (shape[1], shape[2]);
            if *geometry.get_or_insert(g) != g {
                return Err(Error::Malformed("splits disagree on image geometry".into()));
            }
            splits.insert(
                name,
                Split {
                    images: images.clone(),
                    labels: labels.clone(),
                },
            );
        }
        let (channels, image_size) = geometry.expect("three splits");
        Ok(Self {
            image_size,
            channels,
            class_names,
            seed,
            train: splits.remove("train").unwrap(),
            val: splits.remove("val").unwrap(),
            test: splits.remove("test").unwrap(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    /// Uniform sample of train indices without replacement, sorted.
    pub fn proxy_indices(&self, size: usize, seed: u64) -> Result<Vec<usize>> {
        if size == 0 || size > self.train.len() {
            return Err(Error::Invalid(format!(
                "proxy size {size} outside [1, {}]",
                self.train.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, self.train.len(), size).into_vec();
        idx.sort_unstable();
        Ok(idx)
    }

    pub fn sample_proxy(&self, size: usize, seed: u64) -> Result<Split> {
        Ok(self.train.subset(&self.proxy_indices(size, seed)?))
    }

    /// First `n` training samples (balanced thanks to class interleaving).
    pub fn train_prefix(&self, n: usize) -> Split {
        let n = n.min(self.train.len());
        self.train.subset(&(0..n).collect::<Vec<_>>())
    }
}
