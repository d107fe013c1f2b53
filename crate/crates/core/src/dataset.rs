//! Labelled image corpora: CIFAR binary files, class-per-directory folders and
//! a seeded synthetic generator.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jpeg::ImageRgb;

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageRgb>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::InvalidArgument("image and label counts differ".into()));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::InvalidArgument(format!("label {l} outside [0, {})", self.num_classes)));
        }
        Ok(())
    }

    /// Keeps `n` seeded random samples (all when `n >= len`), preserving their relative order.
    pub fn subsample(&self, n: usize, seed: u64) -> Dataset {
        let idx = crate::entropy::sample_indices(self.len(), n, seed);
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Keeps only samples whose label is in `classes`, relabelled by position in that list.
    pub fn restrict_classes(&self, classes: &[usize]) -> Dataset {
        let mut map = vec![None; self.num_classes];
        for (new, &old) in classes.iter().enumerate() {
            map[old] = Some(new);
        }
        let mut out = Dataset { num_classes: classes.len(), ..Default::default() };
        for (img, &l) in self.images.iter().zip(&self.labels) {
            if let Some(new) = map[l] {
                out.images.push(img.clone());
                out.labels.push(new);
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    CifarBinary,
    ImageFolder,
    Synthetic,
}

/// Where a corpus comes from and how much of it to keep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Number of classes kept (seeded choice) or, for `synthetic`, generated.
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub train_size: Option<usize>,
    #[serde(default)]
    pub test_size: Option<usize>,
    /// Edge length of synthetic images.
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_image_size() -> usize {
    CIFAR_SIDE
}

impl DatasetSpec {
    pub fn synthetic(classes: usize, train: usize, test: usize, seed: u64) -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            path: None,
            classes: Some(classes),
            train_size: Some(train),
            test_size: Some(test),
            image_size: CIFAR_SIDE,
            seed,
        }
    }
}

/// Loads the corpus described by `spec`.
pub fn ingest_dataset(spec: &DatasetSpec) -> Result<Split> {
    let split = match spec.kind {
        DatasetKind::Synthetic => {
            let classes = spec.classes.unwrap_or(10);
            let train = spec.train_size.unwrap_or(1000);
            let test = spec.test_size.unwrap_or(200);
            let gen = SyntheticGratings::new(classes, spec.image_size, spec.seed)?;
            // disjoint seeds for the two splits
            return Ok(Split { train: gen.generate(train, 0)?, test: gen.generate(test, 1)? });
        }
        DatasetKind::CifarBinary => load_cifar_dir(require_path(spec)?)?,
        DatasetKind::ImageFolder => load_folder_split(require_path(spec)?, spec.seed)?,
    };
    let mut split = split;
    if let Some(k) = spec.classes {
        if k < split.train.num_classes {
            let mut all: Vec<usize> = (0..split.train.num_classes).collect();
            all.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
            let mut keep = all[..k].to_vec();
            keep.sort_unstable();
            split.train = split.train.restrict_classes(&keep);
            split.test = split.test.restrict_classes(&keep);
        }
    }
    if let Some(n) = spec.train_size {
        split.train = split.train.subsample(n, spec.seed);
    }
    if let Some(n) = spec.test_size {
        split.test = split.test.subsample(n, spec.seed.wrapping_add(1));
    }
    if split.train.is_empty() {
        return Err(Error::EmptyCorpus("training split has no images".into()));
    }
    Ok(split)
}

fn require_path(spec: &DatasetSpec) -> Result<&Path> {
    spec.path.as_deref().ok_or_else(|| Error::Config(format!("dataset kind {:?} needs a path", spec.kind)))
}

/// Bytes of label prefix per CIFAR record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarLayout {
    /// CIFAR-10: one label byte.
    Ten,
    /// CIFAR-100: coarse label byte then fine label byte; the fine label is used.
    Hundred,
}

impl CifarLayout {
    fn label_bytes(self) -> usize {
        match self {
            CifarLayout::Ten => 1,
            CifarLayout::Hundred => 2,
        }
    }

    fn classes(self) -> usize {
        match self {
            CifarLayout::Ten => 10,
            CifarLayout::Hundred => 100,
        }
    }

    /// Infers the layout from the file length.
    pub fn detect(len: usize) -> Option<Self> {
        let ten = len % (CIFAR_PIXELS + 1) == 0;
        let hundred = len % (CIFAR_PIXELS + 2) == 0;
        match (ten, hundred) {
            (true, false) => Some(CifarLayout::Ten),
            (false, true) => Some(CifarLayout::Hundred),
            _ => None,
        }
    }
}

/// Parses CIFAR binary records: label byte(s), then 1024 R, 1024 G and 1024 B bytes.
pub fn parse_cifar(bytes: &[u8], layout: CifarLayout, path: &Path) -> Result<Dataset> {
    let rec = CIFAR_PIXELS + layout.label_bytes();
    let mut out = Dataset { num_classes: layout.classes(), ..Default::default() };
    for (i, chunk) in bytes.chunks(rec).enumerate() {
        let offset = (i * rec) as u64;
        if chunk.len() != rec {
            return Err(Error::CorruptRecord {
                path: path.to_path_buf(),
                offset,
                reason: format!("short record: {} of {rec} bytes", chunk.len()),
            });
        }
        let label = chunk[layout.label_bytes() - 1] as usize;
        if label >= layout.classes() {
            return Err(Error::CorruptRecord {
                path: path.to_path_buf(),
                offset,
                reason: format!("label {label} outside [0, {})", layout.classes()),
            });
        }
        let px = &chunk[layout.label_bytes()..];
        let data = px.iter().map(|&b| b as f64).collect();
        out.images.push(ImageRgb::from_planar(CIFAR_SIDE, CIFAR_SIDE, data)?);
        out.labels.push(label);
    }
    Ok(out)
}

pub fn load_cifar_file(path: &Path, layout: Option<CifarLayout>) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let layout = match layout.or_else(|| CifarLayout::detect(bytes.len())) {
        Some(l) => l,
        None => {
            return Err(Error::CorruptRecord {
                path: path.to_path_buf(),
                offset: bytes.len() as u64,
                reason: "length is not a whole number of CIFAR-10 or CIFAR-100 records".into(),
            })
        }
    };
    parse_cifar(&bytes, layout, path)
}

fn concat(parts: Vec<Dataset>) -> Dataset {
    let mut out = Dataset { num_classes: parts.iter().map(|d| d.num_classes).max().unwrap_or(0), ..Default::default() };
    for p in parts {
        out.images.extend(p.images);
        out.labels.extend(p.labels);
    }
    out
}

/// A CIFAR directory: `train.bin`/`test.bin` (CIFAR-100) or
/// `data_batch_{1..5}.bin`/`test_batch.bin` (CIFAR-10).
pub fn load_cifar_dir(dir: &Path) -> Result<Split> {
    if dir.is_file() {
        let d = load_cifar_file(dir, None)?;
        return Ok(Split { train: d.clone(), test: d });
    }
    let c100 = (dir.join("train.bin"), dir.join("test.bin"));
    if c100.0.exists() {
        return Ok(Split {
            train: load_cifar_file(&c100.0, Some(CifarLayout::Hundred))?,
            test: load_cifar_file(&c100.1, Some(CifarLayout::Hundred))?,
        });
    }
    let batches: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).filter(|p| p.exists()).collect();
    if batches.is_empty() {
        return Err(Error::Config(format!("no CIFAR binary files found in {}", dir.display())));
    }
    let train = concat(batches.iter().map(|p| load_cifar_file(p, Some(CifarLayout::Ten))).collect::<Result<_>>()?);
    let test = load_cifar_file(&dir.join("test_batch.bin"), Some(CifarLayout::Ten))?;
    Ok(Split { train, test })
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pnm")
    )
}

/// One subdirectory per class, named classes sorted lexicographically.
pub fn load_image_folder(dir: &Path) -> Result<(Dataset, Vec<String>)> {
    let mut classes = BTreeSet::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            classes.insert(entry.file_name().to_string_lossy().into_owned());
        }
    }
    let names: Vec<String> = classes.into_iter().collect();
    let mut out = Dataset { num_classes: names.len(), ..Default::default() };
    for (label, name) in names.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir.join(name))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.is_file() && is_image(p));
        files.sort();
        for f in files {
            out.images.push(ImageRgb::load(&f)?);
            out.labels.push(label);
        }
    }
    out.check()?;
    Ok((out, names))
}

/// `train/` and `test/` subfolders when present, else one folder split 80/20 (seeded).
pub fn load_folder_split(dir: &Path, seed: u64) -> Result<Split> {
    let (train_dir, test_dir) = (dir.join("train"), dir.join("test"));
    if train_dir.is_dir() && test_dir.is_dir() {
        let (train, names) = load_image_folder(&train_dir)?;
        let (test, test_names) = load_image_folder(&test_dir)?;
        if names != test_names {
            return Err(Error::Config("train and test folders list different classes".into()));
        }
        return Ok(Split { train, test });
    }
    let (all, _) = load_image_folder(dir)?;
    let mut idx: Vec<usize> = (0..all.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = all.len() / 5;
    let (test_idx, train_idx) = idx.split_at(n_test);
    let (mut a, mut b) = (train_idx.to_vec(), test_idx.to_vec());
    a.sort_unstable();
    b.sort_unstable();
    Ok(Split { train: all.select(&a), test: all.select(&b) })
}

/// Class-structured synthetic images.
///
/// Class `c` is a sinusoidal grating with a class-specific orientation and
/// spatial frequency, drawn over a random smooth colour gradient with a coarse
/// class-independent grating and white pixel noise. Amplitude, phase and colour
/// vary per image.
#[derive(Clone, Debug)]
pub struct SyntheticGratings {
    classes: usize,
    size: usize,
    seed: u64,
}

/// Orientations and frequencies (cycles per pixel) are combined to label classes.
const ORIENTATIONS: usize = 5;
const FREQUENCIES: [f64; 8] = [0.06, 0.11, 0.16, 0.21, 0.26, 0.31, 0.36, 0.41];
/// Ranges of grating amplitude and noise standard deviation, in grey levels.
const AMPLITUDE: (f64, f64) = (6.0, 18.0);
const NOISE: (f64, f64) = (8.0, 16.0);

impl SyntheticGratings {
    pub fn new(classes: usize, size: usize, seed: u64) -> Result<Self> {
        if classes < 2 || classes > ORIENTATIONS * FREQUENCIES.len() {
            return Err(Error::Config(format!(
                "synthetic data supports 2..={} classes, got {classes}",
                ORIENTATIONS * FREQUENCIES.len()
            )));
        }
        if size < crate::jpeg::MIN_DIM {
            return Err(Error::Config(format!("synthetic image size {size} below {}", crate::jpeg::MIN_DIM)));
        }
        Ok(Self { classes, size, seed })
    }

    fn class_params(&self, c: usize) -> (f64, f64) {
        let theta = PI * (c % ORIENTATIONS) as f64 / ORIENTATIONS as f64;
        (theta, FREQUENCIES[c / ORIENTATIONS])
    }

    /// `n` images with labels cycling through the classes; `stream` separates splits.
    pub fn generate(&self, n: usize, stream: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let s = self.size;
        let mut out = Dataset { num_classes: self.classes, ..Default::default() };
        for i in 0..n {
            let label = i % self.classes;
            let (theta, freq) = self.class_params(label);
            let theta = theta + rng.gen_range(-0.08..0.08);
            let freq = freq * rng.gen_range(0.95..1.05);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let amp = rng.gen_range(AMPLITUDE.0..AMPLITUDE.1);
            let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(60.0..196.0));
            let grad: [[f64; 2]; 3] = std::array::from_fn(|_| [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)]);
            let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.4..1.0));
            let noise = rng.gen_range(NOISE.0..NOISE.1);
            // class-independent coarse grating
            let d_theta = rng.gen_range(0.0..PI);
            let d_freq = rng.gen_range(0.02..0.06);
            let d_phase = rng.gen_range(0.0..2.0 * PI);
            let d_amp = rng.gen_range(10.0..30.0);
            let (ct, st) = (theta.cos(), theta.sin());
            let (dct, dst) = (d_theta.cos(), d_theta.sin());
            let mut data = vec![0.0; 3 * s * s];
            for y in 0..s {
                for x in 0..s {
                    let (xf, yf) = (x as f64 - s as f64 / 2.0, y as f64 - s as f64 / 2.0);
                    let wave = (2.0 * PI * freq * (xf * ct + yf * st) + phase).sin();
                    let clutter = d_amp * (2.0 * PI * d_freq * (xf * dct + yf * dst) + d_phase).sin();
                    for c in 0..3 {
                        let v = base[c] + grad[c][0] * xf + grad[c][1] * yf
                            + clutter
                            + amp * tint[c] * wave
                            + noise * rng.sample::<f64, _>(StandardNormal);
                        data[c * s * s + y * s + x] = v.round().clamp(0.0, 255.0);
                    }
                }
            }
            out.images.push(ImageRgb::from_planar(s, s, data)?);
            out.labels.push(label);
        }
        Ok(out)
    }
}
