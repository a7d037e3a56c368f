//! Dataset ingestion, deterministic splitting and the subset partition used by embedding and
//! verification.
//!
//! Every sample carries a stable integer id assigned at ingestion so that disjointness of
//! the splits can be checked by id.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

pub const CIFAR10_CLASSES: usize = 10;
pub const CIFAR10_SIDE: usize = 32;
pub const CIFAR10_RECORD: usize = 1 + 3 * CIFAR10_SIDE * CIFAR10_SIDE;

/// Fractions of the shuffled pool assigned to training and validation; the test split takes
/// the remainder, including any rounding slack.
pub const TRAIN_FRACTION: f64 = 0.75;
pub const VAL_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: u64,
    pub image: Image,
    pub label: usize,
}

/// Training (`D1`), validation (`D2`) and test (`E`) splits.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub class_count: usize,
}

impl DatasetBundle {
    /// Splits a pool 75/5/20 after a seeded shuffle. Fractional sizes round down and the
    /// remainder goes to the test split.
    pub fn split(mut pool: Vec<LabeledSample>, class_count: usize, seed: u64) -> Result<Self> {
        if let Some(s) = pool.iter().find(|s| s.label >= class_count) {
            return Err(Error::arg(format!("sample {} has label {} >= {class_count}", s.id, s.label)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pool.shuffle(&mut rng);
        let n = pool.len();
        let n_train = (n as f64 * TRAIN_FRACTION).floor() as usize;
        let n_val = (n as f64 * VAL_FRACTION).floor() as usize;
        let test = pool.split_off(n_train + n_val);
        let val = pool.split_off(n_train);
        let bundle = DatasetBundle { train: pool, val, test, class_count };
        bundle.check_disjoint()?;
        Ok(bundle)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(s.id) {
                return Err(Error::arg(format!("sample id {} appears in more than one split", s.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(height, width, channels)` of the samples, if any.
    pub fn image_dims(&self) -> Option<(usize, usize, usize)> {
        self.train.iter().chain(&self.val).chain(&self.test).next().map(|s| s.image.dims())
    }
}

/// Parses concatenated CIFAR-10 binary records (1 label byte, then 3072 planar RGB bytes).
///
/// `first_id` is the id given to the first record and `base_offset` the byte offset of
/// `bytes` within its file, used in error messages.
pub fn parse_cifar10_records(bytes: &[u8], first_id: u64, base_offset: u64) -> Result<Vec<LabeledSample>> {
    if bytes.len() % CIFAR10_RECORD != 0 {
        let complete = bytes.len() / CIFAR10_RECORD;
        return Err(Error::Ingest {
            offset: base_offset + (complete * CIFAR10_RECORD) as u64,
            message: format!(
                "truncated record: {} trailing bytes, records are {CIFAR10_RECORD} bytes",
                bytes.len() % CIFAR10_RECORD
            ),
        });
    }
    let mut out = Vec::with_capacity(bytes.len() / CIFAR10_RECORD);
    for (r, rec) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        let offset = base_offset + (r * CIFAR10_RECORD) as u64;
        let label = rec[0];
        if label as usize >= CIFAR10_CLASSES {
            return Err(Error::CorruptRecord { offset, label });
        }
        let pixels = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
        let image = Image::new(CIFAR10_SIDE, CIFAR10_SIDE, 3, pixels)?;
        out.push(LabeledSample { id: first_id + r as u64, image, label: label as usize });
    }
    Ok(out)
}

fn cifar_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(Error::Ingest { offset: 0, message: format!("{} does not exist", path.display()) });
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| (n.starts_with("data_batch_") || n == "test_batch.bin") && n.ends_with(".bin"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Ingest {
            offset: 0,
            message: format!("no CIFAR-10 batch files (data_batch_*.bin, test_batch.bin) in {}", path.display()),
        });
    }
    Ok(files)
}

/// Loads CIFAR-10 binary batches from a batch file or a directory of them and splits the
/// pooled records 75/5/20.
///
/// Files are read in name order (`data_batch_1.bin` … `data_batch_5.bin`,
/// `test_batch.bin`) and ids are assigned sequentially across them.
pub fn load_cifar10(path: impl AsRef<Path>, seed: u64) -> Result<DatasetBundle> {
    let mut pool = Vec::new();
    for file in cifar_files(path.as_ref())? {
        let bytes = fs::read(&file)?;
        pool.extend(parse_cifar10_records(&bytes, pool.len() as u64, 0).map_err(|e| match e {
            Error::Ingest { offset, message } => {
                Error::Ingest { offset, message: format!("{}: {message}", file.display()) }
            }
            other => other,
        })?);
    }
    DatasetBundle::split(pool, CIFAR10_CLASSES, seed)
}

/// Parameters of the synthetic texture dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub class_count: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl SyntheticConfig {
    /// 3 classes of 32×32 grayscale textures.
    pub fn toy(seed: u64) -> Self {
        SyntheticConfig { seed, class_count: 3, per_class: 400, height: 32, width: 32, channels: 1 }
    }
}

// Texture recipe: a near-DC background plus a class-specific ring of random-phase cosines.
// Class k owns the radial band centered on RING_START + k·ring_step; rings stop at a quarter
// of the side, so the band above them carries no class texture.
const BACKGROUND_RADIUS: f64 = 1.0;
const BACKGROUND_TERMS: usize = 4;
const BACKGROUND_AMPLITUDE: f64 = 0.05;
const TEXTURE_TERMS: usize = 12;
const TEXTURE_AMPLITUDE: f64 = 0.05;
const RING_START: f64 = 3.0;
const RING_TOP_FRACTION: f64 = 0.25;
const RING_HALF_WIDTH: f64 = 1.0;
const NOISE_STD: f64 = 0.003;

/// Centre radius of the frequency ring that carries class `k`'s texture.
pub fn class_ring_radius(k: usize, class_count: usize, height: usize, width: usize) -> f64 {
    let top = (height.min(width) as f64 * RING_TOP_FRACTION).max(RING_START + 1.0);
    if class_count <= 1 {
        return RING_START;
    }
    let step = (top - RING_START) / (class_count - 1) as f64;
    RING_START + k as f64 * step
}

fn ring_frequencies(radius: f64, half_width: f64, h: usize, w: usize) -> Vec<(isize, isize)> {
    let mut out = Vec::new();
    let (hh, hw) = ((h / 2) as isize, (w / 2) as isize);
    for fu in -hh..=hh {
        for fv in -hw..=hw {
            let r = ((fu * fu + fv * fv) as f64).sqrt();
            // One of each ± pair; a cosine already covers both.
            let canonical = fu > 0 || (fu == 0 && fv > 0);
            if canonical && (r - radius).abs() <= half_width {
                out.push((fu, fv));
            }
        }
    }
    out
}

/// Deterministic synthetic dataset of separable textures, split 75/5/20 with the same seed.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<DatasetBundle> {
    if cfg.class_count < 2 {
        return Err(Error::arg("synthetic data needs at least 2 classes"));
    }
    if cfg.per_class < 20 {
        return Err(Error::arg("synthetic data needs at least 20 samples per class"));
    }
    let (h, w, d) = (cfg.height, cfg.width, cfg.channels);
    if h < 4 || w < 4 {
        return Err(Error::arg("synthetic images must be at least 4x4"));
    }
    let background = ring_frequencies(BACKGROUND_RADIUS / 2.0 + 0.25, BACKGROUND_RADIUS / 2.0 + 0.25, h, w);
    let rings: Vec<Vec<(isize, isize)>> = (0..cfg.class_count)
        .map(|k| ring_frequencies(class_ring_radius(k, cfg.class_count, h, w), RING_HALF_WIDTH, h, w))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = rand_distr::Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut pool = Vec::with_capacity(cfg.class_count * cfg.per_class);
    for n in 0..cfg.per_class {
        for (k, ring) in rings.iter().enumerate() {
            let mut raw = vec![0.0; h * w * d];
            for c in 0..d {
                let plane = &mut raw[c * h * w..(c + 1) * h * w];
                let offset = rng.random_range(0.45..0.55);
                plane.iter_mut().for_each(|v| *v = offset);
                for _ in 0..BACKGROUND_TERMS {
                    let f = background[rng.random_range(0..background.len())];
                    add_cosine(plane, h, w, f, rng.random_range(0.0..BACKGROUND_AMPLITUDE), rng.random_range(0.0..std::f64::consts::TAU));
                }
                for _ in 0..TEXTURE_TERMS {
                    let f = ring[rng.random_range(0..ring.len())];
                    let amp = TEXTURE_AMPLITUDE * rng.random_range(0.6..1.0);
                    add_cosine(plane, h, w, f, amp, rng.random_range(0.0..std::f64::consts::TAU));
                }
                for v in plane.iter_mut() {
                    *v += rng.sample(normal);
                }
            }
            let image = Image::from_clipped(h, w, d, raw)?;
            pool.push(LabeledSample { id: (n * cfg.class_count + k) as u64, image, label: k });
        }
    }
    DatasetBundle::split(pool, cfg.class_count, cfg.seed)
}

fn add_cosine(plane: &mut [f64], h: usize, w: usize, f: (isize, isize), amp: f64, phase: f64) {
    let tau = std::f64::consts::TAU;
    for m in 0..h {
        for n in 0..w {
            let theta = tau * (f.0 as f64 * m as f64 / h as f64 + f.1 as f64 * n as f64 / w as f64) + phase;
            plane[m * w + n] += amp * theta.cos();
        }
    }
}

/// Index sets (into the bundle's splits) for trigger sources and held-out verification.
///
/// `a1 ⊂ D1` and `a2 ⊂ D2` seed the embedding trigger sets, `v ⊂ E` seeds the verification
/// triggers and `u = E \ v` measures clean accuracy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub a1: Vec<usize>,
    pub a2: Vec<usize>,
    pub u: Vec<usize>,
    pub v: Vec<usize>,
    pub q_t: usize,
    pub seed: u64,
}

pub fn make_partition(bundle: &DatasetBundle, q_t: usize, seed: u64) -> Result<PartitionPlan> {
    let limit = bundle.train.len().min(bundle.val.len()).min(bundle.test.len() / 2);
    if q_t > limit {
        return Err(Error::Size(format!(
            "q_t = {q_t} exceeds min(|D1|, |D2|, |E|/2) = {limit}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| {
        let mut idx = rand::seq::index::sample(&mut rng, n, q_t).into_vec();
        idx.sort_unstable();
        idx
    };
    let a1 = draw(bundle.train.len());
    let a2 = draw(bundle.val.len());
    let v = draw(bundle.test.len());
    let in_v: HashSet<usize> = v.iter().copied().collect();
    let u = (0..bundle.test.len()).filter(|i| !in_v.contains(i)).collect();
    Ok(PartitionPlan { a1, a2, u, v, q_t, seed })
}

impl PartitionPlan {
    pub fn select<'a>(split: &'a [LabeledSample], idx: &[usize]) -> Vec<&'a LabeledSample> {
        idx.iter().map(|&i| &split[i]).collect()
    }

    /// Checks the subset relations by sample id.
    pub fn check(&self, bundle: &DatasetBundle) -> Result<()> {
        let ids = |split: &[LabeledSample], idx: &[usize]| -> Result<HashSet<u64>> {
            idx.iter()
                .map(|&i| split.get(i).map(|s| s.id).ok_or_else(|| Error::arg(format!("index {i} out of range"))))
                .collect()
        };
        let u = ids(&bundle.test, &self.u)?;
        let v = ids(&bundle.test, &self.v)?;
        ids(&bundle.train, &self.a1)?;
        ids(&bundle.val, &self.a2)?;
        if !u.is_disjoint(&v) || u.len() + v.len() != bundle.test.len() {
            return Err(Error::arg("U and V must partition the test split"));
        }
        if self.a1.len() != self.q_t || self.a2.len() != self.q_t || self.v.len() != self.q_t {
            return Err(Error::arg("subset sizes must equal q_t"));
        }
        Ok(())
    }
}
