//! Keyed trigger generation, label assignment and baseline trigger generators.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::clustering::ClusteringMap;
use crate::error::{Error, Result};
use crate::heatmap::sibling;
use crate::image::Image;
use crate::spectral::{self, PerturbationEntry, Position};
use crate::tensor::Tensor;

/// Secret seed plus intensity range. Every λ is a keyed hash of (seed, position, channel),
/// so the key alone fixes the perturbation for any mask.
#[derive(Clone, PartialEq)]
pub struct PerturbationKey {
    pub seed: u64,
    pub lo: f64,
    pub hi: f64,
    /// Use one λ per position for all channels instead of one per channel.
    pub shared_channels: bool,
    /// Give (u, v) and its left-right mirror (u, −v) the same λ, so a horizontally flipped
    /// trigger equals the original up to a one-pixel shift wherever the mask is mirror-closed.
    pub mirrored: bool,
}

impl std::fmt::Debug for PerturbationKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PerturbationKey")
            .field("fingerprint", &self.fingerprint())
            .field("lo", &self.lo)
            .field("hi", &self.hi)
            .field("shared_channels", &self.shared_channels)
            .field("mirrored", &self.mirrored)
            .finish()
    }
}

impl PerturbationKey {
    pub fn new(seed: u64, lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::arg(format!("invalid intensity range [{lo}, {hi}]")));
        }
        Ok(PerturbationKey { seed, lo, hi, shared_channels: false, mirrored: true })
    }

    /// First 16 hex digits of a SHA-256 over the key material. Safe to publish.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"freqmark-key");
        h.update(self.seed.to_le_bytes());
        h.update(self.lo.to_le_bytes());
        h.update(self.hi.to_le_bytes());
        h.update([u8::from(self.shared_channels), u8::from(self.mirrored)]);
        hex::encode(&h.finalize()[..8])
    }

    fn unit(&self, i: usize, j: usize, channel: usize) -> f64 {
        let mut h = Sha256::new();
        h.update(b"freqmark-lambda");
        h.update(self.seed.to_le_bytes());
        for v in [i, j, channel] {
            h.update((v as u64).to_le_bytes());
        }
        let digest = h.finalize();
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        (u64::from_le_bytes(b) >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Plain-text form written only on explicit request.
    pub fn to_text(&self) -> String {
        format!(
            "seed={}\nlo={}\nhi={}\nshared_channels={}\nmirrored={}\n",
            self.seed, self.lo, self.hi, self.shared_channels, self.mirrored
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let get = |k: &str| {
            text.lines()
                .find_map(|l| l.trim().strip_prefix(k).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| Error::Format(format!("key file lacks {k}")))
        };
        let bad = |k: &str| Error::Format(format!("bad {k} in key file"));
        let mut key = PerturbationKey::new(
            get("seed")?.parse().map_err(|_| bad("seed"))?,
            get("lo")?.parse().map_err(|_| bad("lo"))?,
            get("hi")?.parse().map_err(|_| bad("hi"))?,
        )?;
        key.shared_channels = get("shared_channels").map(|v| v == "true").unwrap_or(false);
        key.mirrored = get("mirrored").map(|v| v == "true").unwrap_or(true);
        Ok(key)
    }
}

/// Centered index of the frequency (u, −v).
pub fn mirror(p: Position, w: usize) -> Position {
    let c = w / 2;
    (p.0, (2 * c + w - p.1) % w)
}

/// One entry per (canonical masked position, channel), λ uniform in `[lo, hi]`.
pub fn derive_lambdas(key: &PerturbationKey, mask: &ClusteringMap, channels: usize) -> Result<Vec<PerturbationEntry>> {
    let positions = mask.canonical_positions();
    if positions.is_empty() {
        return Err(Error::arg("empty mask: nothing to embed"));
    }
    let (h, w) = (mask.height, mask.width);
    let mut out = Vec::with_capacity(positions.len() * channels);
    for p in positions {
        let q = if key.mirrored { p.min(spectral::canonical(mirror(p, w), h, w)) } else { p };
        for channel in 0..channels {
            let u = key.unit(q.0, q.1, if key.shared_channels { 0 } else { channel });
            out.push(PerturbationEntry { position: p, channel, lambda: key.lo + (key.hi - key.lo) * u });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelStrategy {
    /// Every trigger gets the fresh class `c`.
    NewClass,
    /// One label from `0..c` shared by all triggers, avoiding the majority source class.
    RandomFixed { seed: u64 },
}

impl std::str::FromStr for LabelStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "new-class" | "newclass" | "nl" => Ok(LabelStrategy::NewClass),
            other => {
                let seed = other
                    .strip_prefix("random-fixed")
                    .map(|r| r.trim_start_matches([':', '=']))
                    .ok_or_else(|| Error::arg(format!("unknown label strategy {other:?}")))?;
                let seed = if seed.is_empty() { Ok(0) } else { seed.parse() };
                Ok(LabelStrategy::RandomFixed { seed: seed.map_err(|_| Error::arg(format!("bad seed in {other:?}")))? })
            }
        }
    }
}

impl LabelStrategy {
    /// Output classes a marked model needs for `c` original classes.
    pub fn class_count(&self, c: usize) -> usize {
        match self {
            LabelStrategy::NewClass => c + 1,
            LabelStrategy::RandomFixed { .. } => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSet {
    pub samples: Vec<Image>,
    pub source_ids: Vec<u64>,
    /// Shared label, set by [`assign_labels`].
    pub label: Option<usize>,
    pub mask_id: String,
    pub key_fingerprint: String,
    /// Generator name: `fourier`, `urs`, `lbt` or `nbt`.
    pub kind: String,
}

impl TriggerSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn label(&self) -> Result<usize> {
        self.label.ok_or_else(|| Error::arg("trigger set has no assigned label"))
    }

    /// Writes `<base>.tensor` (n×d×h×w) and the `<base>.manifest` text file.
    pub fn save(&self, base: impl AsRef<Path>) -> Result<()> {
        let base = base.as_ref();
        let (h, w, d) = self.samples.first().map(Image::dims).unwrap_or((0, 0, 0));
        let mut data = Vec::with_capacity(self.samples.len() * h * w * d);
        for s in &self.samples {
            data.extend_from_slice(s.pixels());
        }
        Tensor::from_f64(vec![self.samples.len(), d, h, w], &data)?.save(sibling(base, "tensor"))?;
        let mut m = String::new();
        let _ = writeln!(m, "kind={}", self.kind);
        let _ = writeln!(m, "count={}", self.samples.len());
        let _ = writeln!(m, "dims={h}x{w}x{d}");
        let _ = writeln!(m, "label={}", self.label.map(|l| l.to_string()).unwrap_or_else(|| "none".into()));
        let _ = writeln!(m, "mask_id={}", self.mask_id);
        let _ = writeln!(m, "key_fingerprint={}", self.key_fingerprint);
        let ids: Vec<String> = self.source_ids.iter().map(u64::to_string).collect();
        let _ = writeln!(m, "source_ids={}", ids.join(","));
        fs::write(sibling(base, "manifest"), m)?;
        Ok(())
    }

    pub fn load(base: impl AsRef<Path>) -> Result<Self> {
        let base = base.as_ref();
        let t = Tensor::load(sibling(base, "tensor"))?;
        let text = fs::read_to_string(sibling(base, "manifest"))?;
        let get = |k: &str| {
            text.lines()
                .find_map(|l| l.strip_prefix(k).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| Error::Format(format!("trigger manifest lacks {k}")))
        };
        if t.dims.len() != 4 {
            return Err(Error::Format(format!("trigger tensor has rank {}", t.dims.len())));
        }
        let (n, d, h, w) = (t.dims[0], t.dims[1], t.dims[2], t.dims[3]);
        let data = t.to_f64();
        let samples = (0..n)
            .map(|k| Image::from_clipped(h, w, d, data[k * d * h * w..(k + 1) * d * h * w].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let ids = get("source_ids")?;
        let source_ids = if ids.is_empty() {
            Vec::new()
        } else {
            ids.split(',').map(|v| v.parse().map_err(|_| Error::Format("bad source id".into()))).collect::<Result<_>>()?
        };
        let label = match get("label")? {
            "none" => None,
            v => Some(v.parse().map_err(|_| Error::Format("bad label".into()))?),
        };
        Ok(TriggerSet {
            samples,
            source_ids,
            label,
            mask_id: get("mask_id")?.to_string(),
            key_fingerprint: get("key_fingerprint")?.to_string(),
            kind: get("kind")?.to_string(),
        })
    }
}

/// Perturbs every source with the same keyed λ list over the masked frequencies.
pub fn gen_triggers(sources: &[(u64, &Image)], mask: &ClusteringMap, mask_id: &str, key: &PerturbationKey) -> Result<TriggerSet> {
    let Some(&(_, first)) = sources.first() else {
        return Err(Error::arg("trigger generation needs at least one source"));
    };
    let (h, w, d) = first.dims();
    if let Some((id, img)) = sources.iter().find(|(_, img)| (img.height(), img.width()) != (mask.height, mask.width) || img.channels() != d) {
        return Err(Error::arg(format!(
            "source {id} is {:?}, mask is {}x{} with {d} channels",
            img.dims(),
            mask.height,
            mask.width
        )));
    }
    debug_assert_eq!((h, w), (mask.height, mask.width));
    let entries = derive_lambdas(key, mask, d)?;
    let samples = crate::par::map(sources, |(_, img)| spectral::perturb(img, &entries)).into_iter().collect::<Result<Vec<_>>>()?;
    Ok(TriggerSet {
        samples,
        source_ids: sources.iter().map(|(id, _)| *id).collect(),
        label: None,
        mask_id: mask_id.to_string(),
        key_fingerprint: key.fingerprint(),
        kind: "fourier".into(),
    })
}

/// Most frequent label, ties toward the smaller label.
pub fn majority_label(labels: &[usize]) -> Option<usize> {
    let max = *labels.iter().max()?;
    let mut counts = vec![0usize; max + 1];
    labels.iter().for_each(|&l| counts[l] += 1);
    let best = counts.iter().copied().max()?;
    counts.iter().position(|&c| c == best)
}

/// Sets the shared trigger label. `source_labels` (possibly empty) feed the forbidden-label
/// rule of `RandomFixed`.
pub fn assign_labels(mut set: TriggerSet, strategy: LabelStrategy, c: usize, source_labels: &[usize]) -> Result<TriggerSet> {
    set.label = Some(match strategy {
        LabelStrategy::NewClass => c,
        LabelStrategy::RandomFixed { seed } => {
            if c < 2 {
                return Err(Error::arg(format!("random fixed label needs at least 2 classes, got {c}")));
            }
            let forbidden = majority_label(source_labels);
            let allowed: Vec<usize> = (0..c).filter(|&l| Some(l) != forbidden).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            allowed[rng.random_range(0..allowed.len())]
        }
    });
    Ok(set)
}

/// Baseline trigger generators used for comparison.
#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    /// Unrelated samples: the sources are an out-of-distribution pool, returned as is.
    Urs,
    /// Logo pasted with its top-left corner at `(row, col)`; `None` means bottom-right.
    Lbt { logo: Option<Image>, at: Option<(usize, usize)> },
    /// Additive Gaussian noise with the given variance.
    Nbt { variance: f64 },
}

pub const DEFAULT_LOGO_SIDE: usize = 8;

impl std::str::FromStr for Baseline {
    type Err = Error;

    /// `urs`, `lbt`, `nbt:variance=0.01`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, params) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "urs" => Ok(Baseline::Urs),
            "lbt" => Ok(Baseline::Lbt { logo: None, at: None }),
            "nbt" => {
                let v = params
                    .split(',')
                    .find_map(|kv| kv.strip_prefix("variance="))
                    .ok_or_else(|| Error::arg("nbt needs variance=<v>"))?;
                let variance: f64 = v.parse().map_err(|_| Error::arg(format!("bad variance {v:?}")))?;
                if !(variance >= 0.0) {
                    return Err(Error::arg(format!("variance {variance} must be >= 0")));
                }
                Ok(Baseline::Nbt { variance })
            }
            other => Err(Error::arg(format!("unknown baseline {other:?} (urs|lbt|nbt)"))),
        }
    }
}

fn paste(img: &Image, logo: &Image, (r0, c0): (usize, usize)) -> Result<Image> {
    let (h, w, d) = img.dims();
    let (lh, lw, ld) = logo.dims();
    if ld != d || r0 + lh > h || c0 + lw > w {
        return Err(Error::arg(format!("logo {lh}x{lw}x{ld} at ({r0}, {c0}) does not fit {h}x{w}x{d}")));
    }
    Image::from_fn(h, w, d, |k, i, j| {
        if (r0..r0 + lh).contains(&i) && (c0..c0 + lw).contains(&j) {
            logo.get(k, i - r0, j - c0)
        } else {
            img.get(k, i, j)
        }
    })
}

pub fn baseline_triggers(kind: &Baseline, sources: &[(u64, &Image)], seed: u64) -> Result<TriggerSet> {
    let Some(&(_, first)) = sources.first() else {
        return Err(Error::arg("baseline triggers need at least one source"));
    };
    let (h, w, d) = first.dims();
    let (samples, name) = match kind {
        Baseline::Urs => (sources.iter().map(|(_, img)| (*img).clone()).collect(), "urs"),
        Baseline::Lbt { logo, at } => {
            let logo = match logo {
                Some(l) => l.clone(),
                None => Image::filled(DEFAULT_LOGO_SIDE.min(h), DEFAULT_LOGO_SIDE.min(w), d, 1.0)?,
            };
            let at = at.unwrap_or((h - logo.height(), w - logo.width()));
            (sources.iter().map(|(_, img)| paste(img, &logo, at)).collect::<Result<Vec<_>>>()?, "lbt")
        }
        Baseline::Nbt { variance } => {
            let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::arg(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = Vec::with_capacity(sources.len());
            for (_, img) in sources {
                let noisy: Vec<f64> = img.pixels().iter().map(|&v| v + normal.sample(&mut rng)).collect();
                out.push(Image::from_clipped(h, w, d, noisy)?);
            }
            (out, "nbt")
        }
    };
    Ok(TriggerSet {
        samples,
        source_ids: sources.iter().map(|(id, _)| *id).collect(),
        label: None,
        mask_id: "none".into(),
        key_fingerprint: "none".into(),
        kind: name.into(),
    })
}
