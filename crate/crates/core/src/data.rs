//! Synthetic multimodal scenes where each foreground class is visible in
//! only one modality, plus the on-disk dataset format.

use std::fs;
use std::path::{Component, Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModalitySpec;
use crate::tensor::{derive_seed, seeded_rng, Tensor};

pub const IGNORE_INDEX: u16 = 255;
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const NOISE_STD: f64 = 0.05;
pub const BACKGROUND: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// One `[C, H, W]` tensor per modality.
    pub images: Vec<Tensor>,
    /// Row-major `H × W` class ids.
    pub labels: Vec<u16>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub num_classes: usize,
    pub modalities: Vec<ModalitySpec>,
    pub height: usize,
    pub width: usize,
    pub split: String,
    /// For every class, the modalities it renders in. Background (class 0)
    /// is listed as visible everywhere.
    pub visibility: Vec<Vec<usize>>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.name == name)
    }

    /// Pixel counts per class; ignored pixels are dropped.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for s in &self.samples {
            for &l in &s.labels {
                if l != IGNORE_INDEX {
                    hist[l as usize] += 1;
                }
            }
        }
        hist
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub modalities: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub seed: u64,
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_channels() -> usize {
    3
}

fn default_split() -> String {
    "train".into()
}

impl SynthConfig {
    pub fn new(samples: usize, height: usize, width: usize, num_classes: usize, modalities: usize, seed: u64) -> Self {
        SynthConfig {
            samples,
            height,
            width,
            num_classes,
            modalities,
            channels: default_channels(),
            seed,
            split: default_split(),
        }
    }

    pub fn with_split(mut self, split: &str) -> Self {
        self.split = split.to_string();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 3 || self.num_classes > IGNORE_INDEX as usize {
            return Err(Error::Config(format!(
                "num_classes must be in 3..={}, got {}",
                IGNORE_INDEX,
                self.num_classes
            )));
        }
        if self.modalities < 2 {
            return Err(Error::Config(format!("need at least 2 modalities, got {}", self.modalities)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "image size {}x{} too small, need at least 8x8",
                self.height, self.width
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        Ok(())
    }
}

/// Foreground classes are shuffled and dealt round-robin to modalities, so
/// with at least two foreground classes every modality misses at least one.
pub fn class_visibility(num_classes: usize, modalities: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (1..num_classes).collect();
    order.shuffle(&mut seeded_rng(derive_seed(seed, 0)));
    let mut vis = vec![Vec::new(); num_classes];
    vis[0] = (0..modalities).collect();
    for (slot, &class) in order.iter().enumerate() {
        vis[class].push(slot % modalities);
    }
    vis
}

/// Rendering color of a foreground class, evenly spread around a hue circle
/// and kept away from the gray background.
pub fn class_color(class: usize, num_classes: usize, channels: usize) -> Vec<f64> {
    let h = (class - 1) as f64 / (num_classes - 1) as f64;
    if channels == 1 {
        let level = 0.15 + 0.7 * h;
        let level = if (level - BACKGROUND).abs() < 0.2 { level + 0.35 } else { level };
        return vec![level.min(1.0)];
    }
    (0..channels)
        .map(|ch| BACKGROUND + 0.45 * (std::f64::consts::TAU * (h + ch as f64 / channels as f64)).cos())
        .collect()
}

fn split_salt(split: &str) -> u64 {
    match split {
        "train" => 1,
        "eval" => 2,
        other => other.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3)),
    }
}

/// Splits of the same seed share the class visibility and never share
/// sample draws.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let visibility = class_visibility(cfg.num_classes, cfg.modalities, cfg.seed);
    let base = derive_seed(cfg.seed, split_salt(&cfg.split));
    let samples = (0..cfg.samples)
        .map(|i| render_sample(cfg, &visibility, derive_seed(base, i as u64)))
        .collect();
    Ok(Dataset {
        seed: cfg.seed,
        num_classes: cfg.num_classes,
        modalities: (0..cfg.modalities)
            .map(|i| ModalitySpec { name: format!("m{i}"), channels: cfg.channels })
            .collect(),
        height: cfg.height,
        width: cfg.width,
        split: cfg.split.clone(),
        visibility,
        samples,
    })
}

fn render_sample(cfg: &SynthConfig, visibility: &[Vec<usize>], seed: u64) -> Sample {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = seeded_rng(seed);
    let mut labels = vec![0u16; h * w];
    let objects = rng.random_range(3..=8);
    let (lo, hi) = (h.min(w) / 8, h.max(w) / 3);
    for _ in 0..objects {
        let class = rng.random_range(1..cfg.num_classes) as u16;
        let disc = rng.random_bool(0.5);
        let sh = rng.random_range(lo..=hi.max(lo));
        let sw = if disc { sh } else { rng.random_range(lo..=hi.max(lo)) };
        let cy = rng.random_range(0..h) as f64;
        let cx = rng.random_range(0..w) as f64;
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 + 0.5 - cy) / (sh as f64 / 2.0);
                let dx = (x as f64 + 0.5 - cx) / (sw as f64 / 2.0);
                let inside = if disc { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if inside {
                    labels[y * w + x] = class;
                }
            }
        }
    }
    let palette: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|c| if c == 0 { vec![BACKGROUND; cfg.channels] } else { class_color(c, cfg.num_classes, cfg.channels) })
        .collect();
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let images = (0..cfg.modalities)
        .map(|m| {
            let c = cfg.channels;
            let mut data = vec![0.0; c * h * w];
            for ch in 0..c {
                for (p, &l) in labels.iter().enumerate() {
                    let l = l as usize;
                    let base = if visibility[l].contains(&m) { palette[l][ch] } else { BACKGROUND };
                    // stored as f32 on disk, so keep it representable
                    data[ch * h * w + p] = (base + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32 as f64;
                }
            }
            Tensor::new(vec![c, h, w], data).expect("shape matches buffer")
        })
        .collect();
    Sample { images, labels }
}

/// Deterministic shuffled batches of sample indices; the last batch may be
/// short.
pub fn batch_iter(n: usize, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(derive_seed(shuffle_seed, epoch)));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobRef {
    pub path: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub images: Vec<BlobRef>,
    pub label: BlobRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub num_classes: usize,
    pub ignore_index: u16,
    pub modalities: Vec<ModalitySpec>,
    pub height: usize,
    pub width: usize,
    pub split: String,
    #[serde(default)]
    pub visibility: Vec<Vec<usize>>,
    pub samples: Vec<SampleRecord>,
}

/// Rejects absolute paths and any `..` component.
pub(crate) fn resolve_relative(root: &Path, rel: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    if rel.is_empty() || p.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(Error::format(root.join(MANIFEST_FILE), format!("blob path {rel:?} must be relative and stay inside the directory")));
    }
    Ok(root.join(p))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_blob(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected {
        return Err(Error::format(path, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    Ok(bytes)
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let mut records = Vec::with_capacity(dataset.len());
    for (i, sample) in dataset.samples.iter().enumerate() {
        let mut images = Vec::new();
        for (spec, image) in dataset.modalities.iter().zip(&sample.images) {
            let rel = format!("samples/{i:06}.{}.f32", spec.name);
            let bytes: Vec<u8> = image.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            write_file(&dir.join(&rel), &bytes)?;
            images.push(BlobRef { path: rel, shape: image.shape().to_vec() });
        }
        let rel = format!("samples/{i:06}.label.u16");
        let bytes: Vec<u8> = sample.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        write_file(&dir.join(&rel), &bytes)?;
        records.push(SampleRecord { images, label: BlobRef { path: rel, shape: vec![dataset.height, dataset.width] } });
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        seed: dataset.seed,
        num_classes: dataset.num_classes,
        ignore_index: IGNORE_INDEX,
        modalities: dataset.modalities.clone(),
        height: dataset.height,
        width: dataset.width,
        split: dataset.split.clone(),
        visibility: dataset.visibility.clone(),
        samples: records,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let bad = |msg: String| Error::format(&manifest_path, msg);
    if manifest.version != FORMAT_VERSION {
        return Err(bad(format!("unsupported dataset version {} (expected {FORMAT_VERSION})", manifest.version)));
    }
    if manifest.ignore_index != IGNORE_INDEX {
        return Err(bad(format!("ignore_index must be {IGNORE_INDEX}, got {}", manifest.ignore_index)));
    }
    let (h, w) = (manifest.height, manifest.width);
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (i, rec) in manifest.samples.iter().enumerate() {
        if rec.images.len() != manifest.modalities.len() {
            return Err(bad(format!("sample {i}: {} images for {} modalities", rec.images.len(), manifest.modalities.len())));
        }
        let mut images = Vec::new();
        for (spec, blob) in manifest.modalities.iter().zip(&rec.images) {
            if blob.shape != [spec.channels, h, w] {
                return Err(bad(format!("sample {i}: image shape {:?} != [{}, {h}, {w}]", blob.shape, spec.channels)));
            }
            let n: usize = blob.shape.iter().product();
            let bytes = read_blob(&resolve_relative(dir, &blob.path)?, n * 4)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                .collect();
            images.push(Tensor::new(blob.shape.clone(), data)?);
        }
        if rec.label.shape != [h, w] {
            return Err(bad(format!("sample {i}: label shape {:?} != [{h}, {w}]", rec.label.shape)));
        }
        let path = resolve_relative(dir, &rec.label.path)?;
        let bytes = read_blob(&path, h * w * 2)?;
        let labels: Vec<u16> = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        if let Some(&l) = labels.iter().find(|&&l| l != IGNORE_INDEX && l as usize >= manifest.num_classes) {
            return Err(Error::format(path, format!("label {l} out of range for {} classes", manifest.num_classes)));
        }
        samples.push(Sample { images, labels });
    }
    Ok(Dataset {
        seed: manifest.seed,
        num_classes: manifest.num_classes,
        modalities: manifest.modalities,
        height: h,
        width: w,
        split: manifest.split,
        visibility: manifest.visibility,
        samples,
    })
}
