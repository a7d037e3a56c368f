//! Fourier heat maps: test error as a function of the perturbed frequency position.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Example, Predictor};
use crate::spectral::{self, PerturbationEntry, Position};
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLES_PER_FREQ: usize = 256;
pub const DEFAULT_RHO: f64 = 0.65;

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapConfig {
    pub samples_per_freq: usize,
    pub lambda_range: (f64, f64),
    pub seed: u64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        HeatmapConfig { samples_per_freq: DEFAULT_SAMPLES_PER_FREQ, lambda_range: (-1.0, 1.0), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapMeta {
    pub model_id: String,
    pub samples_per_freq: usize,
    pub eval_count: usize,
    pub lambda_range: (f64, f64),
    pub seed: u64,
}

/// Per-position test error, stored row-major over centered spectrum positions.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierHeatMap {
    pub height: usize,
    pub width: usize,
    pub t: Vec<f64>,
    pub meta: HeatmapMeta,
}

impl FourierHeatMap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.t[i * self.width + j]
    }

    /// Largest `|t(p) − t(sym(p))|`; zero by construction.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.height {
            for j in 0..self.width {
                let (si, sj) = spectral::sym_index(i, j, self.height, self.width);
                worst = worst.max((self.get(i, j) - self.get(si, sj)).abs());
            }
        }
        worst
    }
}

fn check_range(lo: f64, hi: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::arg(format!("invalid lambda range [{lo}, {hi}]")));
    }
    Ok(())
}

/// Indices into an `n`-element set for one position: whole copies of the set while
/// `count ≥ n`, then a without-replacement draw for the remainder.
fn draw_indices(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count / n {
        out.extend(0..n);
    }
    let rest = count % n;
    if rest > 0 {
        out.extend(index::sample(rng, n, rest).into_iter());
    }
    out
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Error rate at one canonical position. Randomness is keyed by `(seed, position)` only,
/// so the sweep is independent of evaluation order and thread count.
fn position_error<P: Predictor + ?Sized>(
    model: &P,
    eval_set: &[Example],
    cfg: &HeatmapConfig,
    p: Position,
    width: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream((p.0 * width + p.1) as u64);
    let picks = draw_indices(&mut rng, eval_set.len(), cfg.samples_per_freq);
    let (lo, hi) = cfg.lambda_range;
    let mut wrong = 0usize;
    for idx in picks {
        let (img, label) = eval_set[idx];
        let entries: Vec<PerturbationEntry> = (0..img.channels())
            .map(|channel| PerturbationEntry { position: p, channel, lambda: uniform(&mut rng, lo, hi) })
            .collect();
        let perturbed = spectral::perturb(img, &entries)?;
        if model.predict(&perturbed)? != label {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / cfg.samples_per_freq as f64)
}

/// Sweeps every canonical frequency position, perturbing sampled evaluation images with a
/// single Fourier basis at random intensity and recording the misclassification rate.
pub fn compute_heatmap<P: Predictor + ?Sized>(
    model: &P,
    model_id: &str,
    eval_set: &[Example],
    cfg: &HeatmapConfig,
) -> Result<FourierHeatMap> {
    let Some(&(first, _)) = eval_set.first() else {
        return Err(Error::arg("heat map needs a nonempty evaluation set"));
    };
    if cfg.samples_per_freq == 0 {
        return Err(Error::arg("samples_per_freq must be at least 1"));
    }
    check_range(cfg.lambda_range.0, cfg.lambda_range.1)?;
    let (h, w, _) = first.dims();
    if let Some((img, _)) = eval_set.iter().find(|(img, _)| img.dims() != first.dims()) {
        return Err(Error::arg(format!("mixed image dims {:?} and {:?}", first.dims(), img.dims())));
    }
    let positions = spectral::canonical_positions(h, w);
    let errors = crate::par::map(&positions, |&p| position_error(model, eval_set, cfg, p, w));
    let mut t = vec![0.0; h * w];
    for (&p, e) in positions.iter().zip(errors) {
        let e = e?;
        let (si, sj) = spectral::sym_index(p.0, p.1, h, w);
        t[p.0 * w + p.1] = e;
        t[si * w + sj] = e;
    }
    Ok(FourierHeatMap {
        height: h,
        width: w,
        t,
        meta: HeatmapMeta {
            model_id: model_id.to_string(),
            samples_per_freq: cfg.samples_per_freq,
            eval_count: eval_set.len(),
            lambda_range: cfg.lambda_range,
            seed: cfg.seed,
        },
    })
}

/// Binary map of sensitive positions, `s = 1 ⇔ t ≥ ρ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMap {
    pub height: usize,
    pub width: usize,
    pub s: Vec<u8>,
    pub rho: f64,
}

impl SensitivityMap {
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.s[i * self.width + j]
    }

    pub fn count(&self) -> usize {
        self.s.iter().filter(|&&v| v == 1).count()
    }
}

pub fn sensitivity_map(heatmap: &FourierHeatMap, rho: f64) -> Result<SensitivityMap> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::arg(format!("rho {rho} outside [0, 1]")));
    }
    Ok(SensitivityMap {
        height: heatmap.height,
        width: heatmap.width,
        s: heatmap.t.iter().map(|&t| u8::from(t >= rho)).collect(),
        rho,
    })
}

/// `base` with an extra extension appended (`heatmap` → `heatmap.pgm`).
pub fn sibling(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// 8-bit gray value of `v ∈ [0, 1]`, rounding halves up.
pub fn to_gray(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn pgm_bytes(height: usize, width: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_gray(v)));
    out
}

/// Packed PBM (P4). A `1` bit is black, per the format.
pub fn pbm_bytes(height: usize, width: usize, bits: &[u8]) -> Vec<u8> {
    let mut out = format!("P4\n{width} {height}\n").into_bytes();
    let row_bytes = width.div_ceil(8);
    for i in 0..height {
        let mut row = vec![0u8; row_bytes];
        for j in 0..width {
            if bits[i * width + j] != 0 {
                row[j / 8] |= 0x80 >> (j % 8);
            }
        }
        out.extend(row);
    }
    out
}

/// Writes `<base>.tensor`, `<base>.pgm` and the `<base>.meta` key=value sidecar.
pub fn export_heatmap(heatmap: &FourierHeatMap, base: impl AsRef<Path>) -> Result<()> {
    let base = base.as_ref();
    Tensor::from_f64(vec![heatmap.height, heatmap.width], &heatmap.t)?.save(sibling(base, "tensor"))?;
    fs::write(sibling(base, "pgm"), pgm_bytes(heatmap.height, heatmap.width, &heatmap.t))?;
    let m = &heatmap.meta;
    let mut meta = String::new();
    let _ = writeln!(meta, "model_id={}", m.model_id);
    let _ = writeln!(meta, "samples_per_freq={}", m.samples_per_freq);
    let _ = writeln!(meta, "eval_count={}", m.eval_count);
    let _ = writeln!(meta, "lambda_lo={}", m.lambda_range.0);
    let _ = writeln!(meta, "lambda_hi={}", m.lambda_range.1);
    let _ = writeln!(meta, "seed={}", m.seed);
    let _ = writeln!(meta, "lambda_policy=resampled per sample and channel");
    let _ = writeln!(meta, "sampling=whole-set copies plus a without-replacement remainder");
    fs::write(sibling(base, "meta"), meta)?;
    Ok(())
}

/// Reads a heat map written by [`export_heatmap`].
///
/// Every `t` is a multiple of `1/samples_per_freq`, so values are snapped back onto that
/// grid to undo the f32 storage rounding exactly.
pub fn load_heatmap(base: impl AsRef<Path>) -> Result<FourierHeatMap> {
    let base = base.as_ref();
    let tensor = Tensor::load(sibling(base, "tensor"))?;
    if tensor.dims.len() != 2 {
        return Err(Error::Format(format!("heat map tensor has rank {}", tensor.dims.len())));
    }
    let text = fs::read_to_string(sibling(base, "meta"))?;
    let get = |key: &str| -> Result<&str> {
        text.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| Error::Format(format!("heat map sidecar lacks {key}")))
    };
    let parse = |key: &str| -> Result<f64> { get(key)?.parse().map_err(|_| Error::Format(format!("bad {key}"))) };
    let meta = HeatmapMeta {
        model_id: get("model_id")?.to_string(),
        samples_per_freq: parse("samples_per_freq")? as usize,
        eval_count: parse("eval_count")? as usize,
        lambda_range: (parse("lambda_lo")?, parse("lambda_hi")?),
        seed: get("seed")?.parse().map_err(|_| Error::Format("bad seed".into()))?,
    };
    let n = meta.samples_per_freq.max(1) as f64;
    let t = tensor.to_f64().into_iter().map(|v| (v * n).round() / n).collect();
    Ok(FourierHeatMap { height: tensor.dims[0], width: tensor.dims[1], t, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;

    struct Constant(usize);

    impl Predictor for Constant {
        fn class_count(&self) -> usize {
            3
        }
        fn scores(&self, _: &Image) -> Result<Vec<f64>> {
            let mut s = vec![0.0; 3];
            s[self.0] = 1.0;
            Ok(s)
        }
    }

    /// Predicts 1 when the mean pixel exceeds 0.5.
    struct Bright;

    impl Predictor for Bright {
        fn class_count(&self) -> usize {
            2
        }
        fn scores(&self, img: &Image) -> Result<Vec<f64>> {
            let m = img.pixels().iter().sum::<f64>() / img.len() as f64;
            Ok(if m > 0.5 { vec![0.0, 1.0] } else { vec![1.0, 0.0] })
        }
    }

    /// Class from a single pixel value, so frequency perturbations matter.
    struct Corner;

    impl Predictor for Corner {
        fn class_count(&self) -> usize {
            2
        }
        fn scores(&self, img: &Image) -> Result<Vec<f64>> {
            Ok(if img.get(0, 1, 2) > 0.5 { vec![0.0, 1.0] } else { vec![1.0, 0.0] })
        }
    }

    fn labeled_set(n: usize, h: usize, w: usize, class0: usize) -> Vec<(Image, usize)> {
        (0..n)
            .map(|k| {
                let img = Image::from_fn(h, w, 1, |_, i, j| ((k * 7 + i * 3 + j * 5) % 11) as f64 / 11.0).unwrap();
                (img, if k < class0 { 0 } else { 1 + k % 2 })
            })
            .collect()
    }

    fn refs(set: &[(Image, usize)]) -> Vec<Example<'_>> {
        set.iter().map(|(i, l)| (i, *l)).collect()
    }

    #[test]
    fn constant_model_gives_constant_map() {
        let set = labeled_set(10, 6, 5, 3);
        let cfg = HeatmapConfig { samples_per_freq: 40, ..HeatmapConfig::default() };
        let hm = compute_heatmap(&Constant(0), "const", &refs(&set), &cfg).unwrap();
        assert!(hm.t.iter().all(|&t| (t - 0.7).abs() < 1e-15), "{:?}", hm.t);
    }

    #[test]
    fn zero_lambda_gives_clean_error() {
        let set = labeled_set(8, 4, 4, 4);
        let set: Vec<(Image, usize)> = set.into_iter().map(|(i, l)| (i, l.min(1))).collect();
        let clean_err = set.iter().filter(|(i, l)| Bright.predict(i).unwrap() != *l).count() as f64 / 8.0;
        let cfg = HeatmapConfig { samples_per_freq: 16, lambda_range: (0.0, 0.0), seed: 4 };
        let hm = compute_heatmap(&Bright, "b", &refs(&set), &cfg).unwrap();
        assert!(hm.t.iter().all(|&t| (t - clean_err).abs() < 1e-15));
    }

    #[test]
    fn one_pixel_images_match_direct_loop() {
        let set: Vec<(Image, usize)> = [0.2, 0.45, 0.55, 0.9]
            .iter()
            .enumerate()
            .map(|(k, &v)| (Image::filled(1, 1, 1, v).unwrap(), k % 2))
            .collect();
        let cfg = HeatmapConfig { samples_per_freq: 10, lambda_range: (-0.5, 0.5), seed: 17 };
        let hm = compute_heatmap(&Bright, "b", &refs(&set), &cfg).unwrap();
        // Direct loop with the same stream: whole set twice, then 2 drawn without
        // replacement; on a 1×1 grid the basis is the constant 1.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        rng.set_stream(0);
        let mut picks: Vec<usize> = (0..4).chain(0..4).collect();
        picks.extend(index::sample(&mut rng, 4, 2).into_iter());
        let mut wrong = 0;
        for k in picks {
            let lambda: f64 = rng.random_range(-0.5..=0.5);
            let v = (set[k].0.get(0, 0, 0) + lambda).clamp(0.0, 1.0);
            let pred = usize::from(v > 0.5);
            wrong += usize::from(pred != set[k].1);
        }
        assert_eq!(hm.t, vec![wrong as f64 / 10.0]);
    }

    #[test]
    fn symmetric_deterministic_and_thread_independent() {
        let set = labeled_set(12, 6, 7, 6);
        let set: Vec<(Image, usize)> = set.into_iter().map(|(i, l)| (i, l.min(1))).collect();
        let cfg = HeatmapConfig { samples_per_freq: 9, lambda_range: (-1.0, 1.0), seed: 3 };
        let a = compute_heatmap(&Corner, "c", &refs(&set), &cfg).unwrap();
        let b = crate::par::with_threads(1, || compute_heatmap(&Corner, "c", &refs(&set), &cfg).unwrap());
        let c = crate::par::with_threads(3, || compute_heatmap(&Corner, "c", &refs(&set), &cfg).unwrap());
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.symmetry_defect(), 0.0);
        assert!(a.t.iter().all(|t| (0.0..=1.0).contains(t)));
        assert!(a.t.iter().any(|&t| t != a.t[0]), "perturbations should matter somewhere");
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = HeatmapConfig::default();
        assert!(compute_heatmap(&Bright, "b", &[], &cfg).is_err());
        let set = labeled_set(2, 4, 4, 1);
        let bad = HeatmapConfig { lambda_range: (1.0, -1.0), ..cfg };
        assert!(compute_heatmap(&Bright, "b", &refs(&set), &bad).is_err());
    }

    fn map_with(t: Vec<f64>, h: usize, w: usize) -> FourierHeatMap {
        FourierHeatMap {
            height: h,
            width: w,
            t,
            meta: HeatmapMeta { model_id: "m".into(), samples_per_freq: 20, eval_count: 20, lambda_range: (-1.0, 1.0), seed: 0 },
        }
    }

    #[test]
    fn thresholding() {
        let hm = map_with(vec![0.7, 0.65, 0.6, 0.0], 2, 2);
        assert_eq!(sensitivity_map(&hm, 0.65).unwrap().s, vec![1, 1, 0, 0]);
        assert_eq!(sensitivity_map(&hm, 0.0).unwrap().s, vec![1, 1, 1, 1]);
        assert!(sensitivity_map(&hm, 1.0 + 1e-9).is_err());
        let lo = sensitivity_map(&hm, 0.3).unwrap();
        let hi = sensitivity_map(&hm, 0.68).unwrap();
        assert!(hi.s.iter().zip(&lo.s).all(|(h, l)| h <= l));
    }

    #[test]
    fn pgm_rendering() {
        assert!(pgm_bytes(2, 2, &[0.0; 4]).ends_with(&[0, 0, 0, 0]));
        assert!(pgm_bytes(2, 2, &[1.0; 4]).ends_with(&[255; 4]));
        assert_eq!(to_gray(0.5), 128);
        assert_eq!(pgm_bytes(1, 3, &[0.0, 0.5, 1.0]), b"P5\n3 1\n255\n\x00\x80\xff".to_vec());
    }

    #[test]
    fn pbm_packs_rows() {
        let bits = [1, 0, 0, 0, 0, 0, 0, 0, 1, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1];
        let out = pbm_bytes(2, 10, &bits);
        assert_eq!(out, b"P4\n10 2\n\x80\x80\x80\x40".to_vec());
    }

    #[test]
    fn export_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("hm");
        let t: Vec<f64> = (0..12).map(|k| (k % 7) as f64 / 20.0).collect();
        let hm = map_with(t, 3, 4);
        export_heatmap(&hm, &base).unwrap();
        assert!(sibling(&base, "pgm").exists());
        let back = load_heatmap(&base).unwrap();
        assert_eq!(back, hm);
        let meta = fs::read_to_string(sibling(&base, "meta")).unwrap();
        assert!(meta.contains("samples_per_freq=20"));
    }
}
