//! Image quality and classification metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::Image;

/// Peak value for images in `[0, 1]`.
pub const MAX_VALUE: f64 = 1.0;
pub const SSIM_WINDOW: usize = 8;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Indicator of equal class labels.
pub fn delta(x: usize, y: usize) -> u8 {
    u8::from(x == y)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::arg(format!("image dims differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let sum: f64 = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// PSNR in dB over all pixels and channels. Identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (MAX_VALUE * MAX_VALUE / m).log10())
}

/// Single-scale SSIM with an 8×8 uniform window at stride 1, averaged over windows and
/// channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::arg(format!("image dims differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let (h, w, d) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::arg(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let c1 = (K1 * MAX_VALUE).powi(2);
    let c2 = (K2 * MAX_VALUE).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..d {
        let (ca, cb) = (a.channel(k), b.channel(k));
        for i0 in 0..=h - SSIM_WINDOW {
            for j0 in 0..=w - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in i0..i0 + SSIM_WINDOW {
                    for j in j0..j0 + SSIM_WINDOW {
                        let x = ca[i * w + j];
                        let y = cb[i * w + j];
                        sa += x;
                        sb += y;
                        saa += x * x;
                        sbb += y * y;
                        sab += x * y;
                    }
                }
                let (mu_a, mu_b) = (sa / n, sb / n);
                let var_a = (saa / n - mu_a * mu_a).max(0.0);
                let var_b = (sbb / n - mu_b * mu_b).max(0.0);
                let cov = sab / n - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Per-pair PSNR/SSIM plus set means.
///
/// Infinite PSNR values (identical pairs) are excluded from the PSNR mean and counted in
/// `psnr_excluded`.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub pair_ids: Vec<u64>,
    pub psnr_db: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub psnr_excluded: usize,
}

impl QualityReport {
    pub fn compute(pairs: &[(u64, &Image, &Image)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::arg("quality report needs at least one pair"));
        }
        let rows = crate::par::map(pairs, |(id, a, b)| -> Result<(u64, f64, f64)> {
            Ok((*id, psnr(a, b)?, ssim(a, b)?))
        });
        let mut report = QualityReport {
            pair_ids: Vec::with_capacity(pairs.len()),
            psnr_db: Vec::with_capacity(pairs.len()),
            ssim: Vec::with_capacity(pairs.len()),
            mean_psnr_db: f64::INFINITY,
            mean_ssim: 0.0,
            psnr_excluded: 0,
        };
        for row in rows {
            let (id, p, s) = row?;
            report.pair_ids.push(id);
            report.psnr_db.push(p);
            report.ssim.push(s);
        }
        let finite: Vec<f64> = report.psnr_db.iter().copied().filter(|p| p.is_finite()).collect();
        report.psnr_excluded = report.psnr_db.len() - finite.len();
        if !finite.is_empty() {
            report.mean_psnr_db = finite.iter().sum::<f64>() / finite.len() as f64;
        }
        report.mean_ssim = report.ssim.iter().sum::<f64>() / report.ssim.len() as f64;
        Ok(report)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair_id,psnr_db,ssim\n");
        for ((id, p), s) in self.pair_ids.iter().zip(&self.psnr_db).zip(&self.ssim) {
            let p = if p.is_finite() { format!("{p:.6}") } else { "inf".to_string() };
            let _ = writeln!(out, "{id},{p},{s:.6}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(v: f64) -> Image {
        Image::filled(8, 8, 1, v).unwrap()
    }

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr(&img(0.3), &img(0.3)).unwrap(), f64::INFINITY);
        let p = psnr(&img(0.0), &img(0.5)).unwrap();
        assert!((p - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert!((p - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn psnr_rejects_dim_mismatch() {
        let a = Image::filled(8, 8, 1, 0.0).unwrap();
        let b = Image::filled(8, 8, 3, 0.0).unwrap();
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn halving_uniform_offset_gains_6db() {
        let base = img(0.4);
        let p1 = psnr(&base, &img(0.6)).unwrap();
        let p2 = psnr(&base, &img(0.5)).unwrap();
        assert!((p2 - p1 - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn ssim_examples() {
        let a = Image::from_fn(9, 10, 3, |k, i, j| ((k + i * 3 + j * 5) % 13) as f64 / 13.0).unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let c1 = 0.01f64.powi(2);
        let expected = (2.0 * 0.16 + c1) / (0.04 + 0.64 + c1);
        assert!((ssim(&img(0.2), &img(0.8)).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_needs_8x8() {
        let a = Image::filled(7, 8, 1, 0.1).unwrap();
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn delta_counts_matches() {
        assert_eq!(delta(3, 3), 1);
        assert_eq!(delta(3, 4), 0);
        let preds = [1, 2, 2, 0];
        let labels = [1, 2, 0, 0];
        let s: u32 = preds.iter().zip(&labels).map(|(&p, &l)| delta(p, l) as u32).sum();
        assert_eq!(s, 3);
    }

    #[test]
    fn report_excludes_infinite_psnr() {
        let (a, b) = (img(0.0), img(0.5));
        let r = QualityReport::compute(&[(0, &a, &a), (1, &a, &b)]).unwrap();
        assert_eq!(r.psnr_excluded, 1);
        assert!((r.mean_psnr_db - 6.0206).abs() < 1e-4);
        assert!(r.to_csv().contains("0,inf,1.000000"));
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Image::from_fn(10, 9, 1, |_, _, _| rng.random::<f64>()).unwrap();
            let b = Image::from_fn(10, 9, 1, |_, _, _| rng.random::<f64>()).unwrap();
            let (p1, p2) = (psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((p1 - p2).abs() < 1e-12);
            let (s1, s2) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            prop_assert!((s1 - s2).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&s1));
        }
    }
}
