//! Removal attacks on marked models and on trigger images.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, Classifier, Example, TrainConfig};
use crate::spectral::{self, dft2, idft2};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackDescriptor {
    Finetune { epochs: usize, fraction: f64, seed: u64 },
    Prune { rate: f64 },
    Jpeg { qf: u8 },
    Hflip,
    Lowpass { bandwidth: usize },
}

impl AttackDescriptor {
    /// True for attacks applied to inputs rather than to model parameters.
    pub fn is_image_attack(&self) -> bool {
        matches!(self, AttackDescriptor::Jpeg { .. } | AttackDescriptor::Hflip | AttackDescriptor::Lowpass { .. })
    }

    pub fn apply_image(&self, image: &Image) -> Result<Image> {
        match *self {
            AttackDescriptor::Jpeg { qf } => jpeg(image, qf),
            AttackDescriptor::Hflip => Ok(hflip(image)),
            AttackDescriptor::Lowpass { bandwidth } => lowpass(image, bandwidth),
            _ => Err(Error::arg(format!("{self} is a model attack"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AttackDescriptor::Finetune { fraction, .. } if !(fraction > 0.0 && fraction <= 1.0) => {
                Err(Error::arg(format!("fine-tune fraction {fraction} outside (0, 1]")))
            }
            AttackDescriptor::Prune { rate } if !(0.0..=1.0).contains(&rate) => {
                Err(Error::arg(format!("prune rate {rate} outside [0, 1]")))
            }
            AttackDescriptor::Jpeg { qf } if !(1..=100).contains(&qf) => Err(Error::arg(format!("jpeg quality {qf} outside [1, 100]"))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for AttackDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackDescriptor::Finetune { epochs, fraction, seed } => write!(f, "finetune:epochs={epochs},fraction={fraction},seed={seed}"),
            AttackDescriptor::Prune { rate } => write!(f, "prune:rate={rate}"),
            AttackDescriptor::Jpeg { qf } => write!(f, "jpeg:qf={qf}"),
            AttackDescriptor::Hflip => write!(f, "hflip"),
            AttackDescriptor::Lowpass { bandwidth } => write!(f, "lowpass:B={bandwidth}"),
        }
    }
}

impl FromStr for AttackDescriptor {
    type Err = Error;

    /// Parses `jpeg:qf=60`, `prune:rate=0.3`, `lowpass:B=12`, `hflip` or
    /// `finetune:epochs=10,fraction=0.5` (optional `seed=`).
    fn from_str(s: &str) -> Result<Self> {
        let (kind, params) = s.trim().split_once(':').unwrap_or((s.trim(), ""));
        let mut kv = Vec::new();
        for part in params.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| Error::arg(format!("attack parameter {part:?} is not key=value")))?;
            kv.push((k.trim(), v.trim()));
        }
        fn num<T: FromStr>(kv: &[(&str, &str)], key: &str, default: Option<T>) -> Result<T> {
            match kv.iter().find(|(k, _)| k.eq_ignore_ascii_case(key)) {
                Some((_, v)) => v.parse().map_err(|_| Error::arg(format!("bad value {v:?} for {key}"))),
                None => default.ok_or_else(|| Error::arg(format!("missing parameter {key}"))),
            }
        }
        let attack = match kind {
            "finetune" => AttackDescriptor::Finetune {
                epochs: num(&kv, "epochs", None)?,
                fraction: num(&kv, "fraction", Some(0.5))?,
                seed: num(&kv, "seed", Some(0))?,
            },
            "prune" => AttackDescriptor::Prune { rate: num(&kv, "rate", None)? },
            "jpeg" => AttackDescriptor::Jpeg { qf: num(&kv, "qf", None)? },
            "hflip" => AttackDescriptor::Hflip,
            "lowpass" => AttackDescriptor::Lowpass { bandwidth: num(&kv, "B", None)? },
            other => return Err(Error::arg(format!("unknown attack {other:?}"))),
        };
        attack.validate()?;
        Ok(attack)
    }
}

/// Continues training on a seeded random `fraction` of clean samples. Learning rate and
/// momentum come from `cfg`; `epochs` overrides `cfg.epochs`.
pub fn finetune(model: &Classifier, clean: &[Example], fraction: f64, epochs: usize, cfg: &TrainConfig) -> Result<Classifier> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::arg(format!("fine-tune fraction {fraction} outside (0, 1]")));
    }
    let take = (fraction * clean.len() as f64).round() as usize;
    if take == 0 {
        return Err(Error::arg("fine-tune selection is empty"));
    }
    let mut order: Vec<usize> = (0..clean.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    order.truncate(take);
    order.sort_unstable();
    let subset: Vec<Example> = order.iter().map(|&i| clean[i]).collect();
    let cfg = TrainConfig { epochs, ..cfg.clone() };
    Ok(nn::train(model, &subset, &[], &cfg)?.0)
}

/// Zeroes the `⌊rate·N⌋` smallest-magnitude weights across all weight tensors (biases
/// excluded). Equal magnitudes are pruned in tensor order, then index order.
pub fn prune_l1(model: &Classifier, rate: f64) -> Result<Classifier> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::arg(format!("prune rate {rate} outside [0, 1]")));
    }
    let mut params = model.params().to_vec();
    let mut slots: Vec<usize> = model.weight_ranges().into_iter().flat_map(|(off, len)| off..off + len).collect();
    let count = (rate * slots.len() as f64).floor() as usize;
    slots.sort_by(|&a, &b| params[a].abs().total_cmp(&params[b].abs()));
    for &s in &slots[..count] {
        params[s] = 0.0;
    }
    let mut out = model.clone();
    out.set_params(params)?;
    Ok(out)
}

pub const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

pub const CHROMA_TABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// IJG quality scaling: `s = 5000/qf` below 50, else `200 − 2·qf`;
/// entry `= ⌊(base·s + 50)/100⌋` clamped to `[1, 255]`.
pub fn quant_table(base: &[u16; 64], qf: u8) -> Result<[u16; 64]> {
    if !(1..=100).contains(&qf) {
        return Err(Error::arg(format!("jpeg quality {qf} outside [1, 100]")));
    }
    let qf = u32::from(qf);
    let s = if qf < 50 { 5000 / qf } else { 200 - 2 * qf };
    Ok(base.map(|b| ((u32::from(b) * s + 50) / 100).clamp(1, 255) as u16))
}

fn dct_matrix() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let c = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = c * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    m
}

// Quantizes one 8×8 block of level-shifted samples in place.
fn code_block(block: &mut [f64; 64], table: &[u16; 64], m: &[[f64; 8]; 8]) {
    let mut tmp = [0.0; 64];
    for u in 0..8 {
        for y in 0..8 {
            tmp[u * 8 + y] = (0..8).map(|x| m[u][x] * block[x * 8 + y]).sum();
        }
    }
    let mut coef = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            let c: f64 = (0..8).map(|y| tmp[u * 8 + y] * m[v][y]).sum();
            let q = f64::from(table[u * 8 + v]);
            coef[u * 8 + v] = (c / q).round() * q;
        }
    }
    for x in 0..8 {
        for v in 0..8 {
            tmp[x * 8 + v] = (0..8).map(|u| m[u][x] * coef[u * 8 + v]).sum();
        }
    }
    for x in 0..8 {
        for y in 0..8 {
            block[x * 8 + y] = (0..8).map(|v| tmp[x * 8 + v] * m[v][y]).sum();
        }
    }
}

// Runs one 0–255 plane through blockwise DCT quantization, padding by edge replication.
fn code_plane(plane: &[f64], h: usize, w: usize, table: &[u16; 64]) -> Vec<f64> {
    let m = dct_matrix();
    let mut out = vec![0.0; h * w];
    for bi in (0..h).step_by(8) {
        for bj in (0..w).step_by(8) {
            let mut block = [0.0; 64];
            for x in 0..8 {
                for y in 0..8 {
                    let (i, j) = ((bi + x).min(h - 1), (bj + y).min(w - 1));
                    block[x * 8 + y] = plane[i * w + j] - 128.0;
                }
            }
            code_block(&mut block, table, &m);
            for x in 0..8.min(h - bi) {
                for y in 0..8.min(w - bj) {
                    out[(bi + x) * w + bj + y] = block[x * 8 + y] + 128.0;
                }
            }
        }
    }
    out
}

fn to_byte(v: f64) -> f64 {
    v.round().clamp(0.0, 255.0)
}

/// JPEG-equivalent lossy round trip without entropy coding or chroma subsampling.
///
/// Pixels are quantized to 8 bits, converted to BT.601 YCbCr (color images only), coded in
/// 8×8 DCT blocks with the scaled Annex K tables, converted back and rounded to 8 bits.
pub fn jpeg(image: &Image, qf: u8) -> Result<Image> {
    let luma = quant_table(&LUMA_TABLE, qf)?;
    let chroma = quant_table(&CHROMA_TABLE, qf)?;
    let (h, w, d) = image.dims();
    let bytes: Vec<f64> = image.pixels().iter().map(|&v| to_byte(v * 255.0)).collect();
    let n = h * w;
    let out = match d {
        1 => code_plane(&bytes, h, w, &luma).into_iter().map(to_byte).collect::<Vec<_>>(),
        3 => {
            let (r, g, b) = (&bytes[..n], &bytes[n..2 * n], &bytes[2 * n..]);
            let mut y = vec![0.0; n];
            let mut cb = vec![0.0; n];
            let mut cr = vec![0.0; n];
            for k in 0..n {
                y[k] = 0.299 * r[k] + 0.587 * g[k] + 0.114 * b[k];
                cb[k] = -0.168_735_892 * r[k] - 0.331_264_108 * g[k] + 0.5 * b[k] + 128.0;
                cr[k] = 0.5 * r[k] - 0.418_687_589 * g[k] - 0.081_312_411 * b[k] + 128.0;
            }
            let (y, cb, cr) = (code_plane(&y, h, w, &luma), code_plane(&cb, h, w, &chroma), code_plane(&cr, h, w, &chroma));
            let mut out = vec![0.0; 3 * n];
            for k in 0..n {
                out[k] = to_byte(y[k] + 1.402 * (cr[k] - 128.0));
                out[n + k] = to_byte(y[k] - 0.344_136_286 * (cb[k] - 128.0) - 0.714_136_286 * (cr[k] - 128.0));
                out[2 * n + k] = to_byte(y[k] + 1.772 * (cb[k] - 128.0));
            }
            out
        }
        _ => return Err(Error::arg(format!("jpeg supports 1 or 3 channels, got {d}"))),
    };
    Image::from_clipped(h, w, d, out.into_iter().map(|v| v / 255.0).collect())
}

pub fn hflip(image: &Image) -> Image {
    let (h, w, d) = image.dims();
    Image::from_fn(h, w, d, |k, i, j| image.get(k, i, w - 1 - j)).expect("same dims")
}

/// Whether centered position `(i, j)` survives a low-pass of bandwidth `b`: it, or its
/// conjugate partner, lies in rows and columns `[c − ⌊b/2⌋, c + ⌈b/2⌉)` around the
/// center `c = n/2`. Including partners keeps the filter real and makes
/// `lowpass(b1) ∘ lowpass(b2) = lowpass(min(b1, b2))`.
pub fn lowpass_keeps(i: usize, j: usize, h: usize, w: usize, b: usize) -> bool {
    let inside = |i: usize, j: usize| {
        let band = |x: usize, n: usize| {
            let c = n / 2;
            x + b / 2 >= c && x < c + b.div_ceil(2)
        };
        band(i, h) && band(j, w)
    };
    let (si, sj) = spectral::sym_index(i, j, h, w);
    inside(i, j) || inside(si, sj)
}

/// Smallest bandwidth whose low-pass keeps every listed centered position, capped at
/// `min(h, w)`.
pub fn covering_bandwidth(positions: &[spectral::Position], h: usize, w: usize) -> usize {
    (1..h.min(w)).find(|&b| positions.iter().all(|&(i, j)| lowpass_keeps(i, j, h, w, b))).unwrap_or(h.min(w))
}

/// Low-pass of one planar channel; real part of the inverse, unclipped.
pub fn lowpass_plane(channel: &[f64], h: usize, w: usize, bandwidth: usize) -> Vec<f64> {
    let mut z = dft2(channel, h, w);
    for i in 0..h {
        for j in 0..w {
            if !lowpass_keeps(i, j, h, w, bandwidth) {
                *z.get_mut(i, j) = Default::default();
            }
        }
    }
    idft2(&z).0
}

/// Real part of the inverse transform after the low-pass, before clipping.
pub fn lowpass_raw(image: &Image, bandwidth: usize) -> Result<Vec<f64>> {
    let (h, w, d) = image.dims();
    if bandwidth > h.min(w) {
        return Err(Error::arg(format!("bandwidth {bandwidth} exceeds min({h}, {w})")));
    }
    Ok((0..d).flat_map(|k| lowpass_plane(image.channel(k), h, w, bandwidth)).collect())
}

pub fn lowpass(image: &Image, bandwidth: usize) -> Result<Image> {
    let (h, w, d) = image.dims();
    Image::from_clipped(h, w, d, lowpass_raw(image, bandwidth)?)
}

/// Training set plus an attacked copy of every sample, labels kept.
pub fn augment_uda(samples: &[Example], attack: &AttackDescriptor) -> Result<Vec<(Image, usize)>> {
    if !attack.is_image_attack() {
        return Err(Error::arg(format!("{attack} cannot be used for augmentation")));
    }
    let attacked = crate::par::map(samples, |(img, _)| attack.apply_image(img));
    let mut out: Vec<(Image, usize)> = samples.iter().map(|(img, l)| ((*img).clone(), *l)).collect();
    for (a, (_, l)) in attacked.into_iter().zip(samples) {
        out.push((a?, *l));
    }
    Ok(out)
}
