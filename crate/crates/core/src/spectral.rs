//! 2D DFT in centered layout, Fourier basis matrices and Fourier-basis-noise perturbation.
//!
//! Conventions:
//!
//! * the forward transform is unnormalized (the DC coefficient is the pixel sum) and the
//!   inverse carries the `1/(h·w)` factor;
//! * spectra are stored *centered*: centered index `i` holds signed frequency
//!   `i − ⌊h/2⌋`, so the DC term sits at `(⌊h/2⌋, ⌊w/2⌋)`;
//! * a basis matrix places equal positive real coefficients at its position and at the
//!   point-symmetric partner, so its spatial form is a unit-norm cosine.

use std::cell::RefCell;
use std::collections::HashSet;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

/// A position in centered spectrum coordinates.
pub type Position = (usize, usize);

/// Complex spectrum of one channel, centered layout, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    height: usize,
    width: usize,
    coefs: Vec<Complex64>,
}

impl Spectrum {
    pub fn zeros(height: usize, width: usize) -> Self {
        Spectrum { height, width, coefs: vec![Complex64::new(0.0, 0.0); height * width] }
    }

    pub fn from_coefs(height: usize, width: usize, coefs: Vec<Complex64>) -> Result<Self> {
        if coefs.len() != height * width || height == 0 || width == 0 {
            return Err(Error::arg("spectrum buffer does not match dimensions"));
        }
        Ok(Spectrum { height, width, coefs })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.coefs[i * self.width + j]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut Complex64 {
        &mut self.coefs[i * self.width + j]
    }

    pub fn coefs(&self) -> &[Complex64] {
        &self.coefs
    }

    /// Largest `|coef(p) − conj(coef(sym(p)))|` over all positions; zero for spectra of
    /// real channels up to rounding.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.height {
            for j in 0..self.width {
                let (si, sj) = sym_index(i, j, self.height, self.width);
                let d = (self.get(i, j) - self.get(si, sj).conj()).norm();
                worst = worst.max(d);
            }
        }
        worst
    }

    /// Exports as an `h × w × 2` tensor of interleaved `re, im`.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.coefs.len() * 2);
        for c in &self.coefs {
            data.push(c.re as f32);
            data.push(c.im as f32);
        }
        Tensor { dims: vec![self.height, self.width, 2], data }
    }
}

/// Signed frequency represented by centered index `i` along an axis of length `n`.
pub fn signed_frequency(i: usize, n: usize) -> isize {
    i as isize - (n / 2) as isize
}

fn unshift(i: usize, n: usize) -> usize {
    (i + n - n / 2) % n
}

fn shift(u: usize, n: usize) -> usize {
    (u + n / 2) % n
}

/// The centered position whose frequency is the negation of `(i, j)`'s.
pub fn sym_index(i: usize, j: usize, h: usize, w: usize) -> Position {
    let u = unshift(i, h);
    let v = unshift(j, w);
    (shift((h - u) % h, h), shift((w - v) % w, w))
}

/// The representative of `{p, sym(p)}` used whenever a pair is processed once:
/// the lexicographically smaller position.
pub fn canonical(p: Position, h: usize, w: usize) -> Position {
    let s = sym_index(p.0, p.1, h, w);
    p.min(s)
}

pub fn is_canonical(p: Position, h: usize, w: usize) -> bool {
    canonical(p, h, w) == p
}

/// Every canonical position of an `h × w` grid in row-major order.
pub fn canonical_positions(h: usize, w: usize) -> Vec<Position> {
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if is_canonical((i, j), h, w) {
                out.push((i, j));
            }
        }
    }
    out
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plans(h: usize, w: usize, inverse: bool) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            (p.plan_fft_inverse(h), p.plan_fft_inverse(w))
        } else {
            (p.plan_fft_forward(h), p.plan_fft_forward(w))
        }
    })
}

// In-place 2D transform of an unshifted row-major buffer.
fn fft2_in_place(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let (col_fft, row_fft) = plans(h, w, inverse);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            column[i] = buf[i * w + j];
        }
        col_fft.process(&mut column);
        for i in 0..h {
            buf[i * w + j] = column[i];
        }
    }
}

/// Unnormalized forward 2D DFT of a row-major `h × w` channel, returned centered.
pub fn dft2(channel: &[f64], h: usize, w: usize) -> Spectrum {
    assert_eq!(channel.len(), h * w, "channel length must be h*w");
    let mut buf: Vec<Complex64> = channel.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_in_place(&mut buf, h, w, false);
    let mut coefs = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            coefs[shift(u, h) * w + shift(v, w)] = buf[u * w + v];
        }
    }
    Spectrum { height: h, width: w, coefs }
}

/// Inverse of [`dft2`], including the `1/(h·w)` factor.
///
/// Returns the real part together with the largest absolute imaginary residue, which is
/// below 1e-9 whenever the spectrum is conjugate point-symmetric.
pub fn idft2(spectrum: &Spectrum) -> (Vec<f64>, f64) {
    let (h, w) = (spectrum.height, spectrum.width);
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for i in 0..h {
        for j in 0..w {
            buf[unshift(i, h) * w + unshift(j, w)] = spectrum.coefs[i * w + j];
        }
    }
    fft2_in_place(&mut buf, h, w, true);
    let scale = 1.0 / (h * w) as f64;
    let mut residue = 0.0f64;
    let real = buf
        .iter()
        .map(|c| {
            residue = residue.max((c.im * scale).abs());
            c.re * scale
        })
        .collect();
    (real, residue)
}

/// A real, unit-norm spatial matrix whose spectrum is supported on `position` and its
/// point-symmetric partner.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierBasis {
    pub position: Position,
    pub height: usize,
    pub width: usize,
    pub spatial: Vec<f64>,
}

impl FourierBasis {
    pub fn is_self_symmetric(&self) -> bool {
        sym_index(self.position.0, self.position.1, self.height, self.width) == self.position
    }

    /// The real coefficient the basis carries at its position (and at the partner).
    pub fn coefficient(&self) -> f64 {
        basis_coefficient(self.position, self.height, self.width)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor { dims: vec![self.height, self.width], data: self.spatial.iter().map(|&v| v as f32).collect() }
    }
}

fn basis_coefficient(p: Position, h: usize, w: usize) -> f64 {
    let n = (h * w) as f64;
    if sym_index(p.0, p.1, h, w) == p {
        n.sqrt()
    } else {
        (n / 2.0).sqrt()
    }
}

pub fn fourier_basis(i: usize, j: usize, h: usize, w: usize) -> Result<FourierBasis> {
    if i >= h || j >= w {
        return Err(Error::arg(format!("position ({i},{j}) outside {h}x{w} spectrum")));
    }
    let fu = signed_frequency(i, h) as f64;
    let fv = signed_frequency(j, w) as f64;
    let mut spatial = Vec::with_capacity(h * w);
    for m in 0..h {
        for n in 0..w {
            let theta = 2.0 * std::f64::consts::PI * (fu * m as f64 / h as f64 + fv * n as f64 / w as f64);
            spatial.push(theta.cos());
        }
    }
    let norm = spatial.iter().map(|v| v * v).sum::<f64>().sqrt();
    spatial.iter_mut().for_each(|v| *v /= norm);
    Ok(FourierBasis { position: (i, j), height: h, width: w, spatial })
}

/// One Fourier-basis-noise term: add `lambda · F(e_position)` to channel `channel`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationEntry {
    pub position: Position,
    pub channel: usize,
    pub lambda: f64,
}

/// Applies the entries in the frequency domain and returns the real part *before*
/// clipping, planar like [`Image`], with the largest imaginary residue seen.
pub fn perturb_raw(image: &Image, entries: &[PerturbationEntry]) -> Result<(Vec<f64>, f64)> {
    let (h, w, d) = image.dims();
    let mut seen = HashSet::new();
    for e in entries {
        if e.position.0 >= h || e.position.1 >= w || e.channel >= d {
            return Err(Error::arg(format!(
                "perturbation entry {:?} channel {} outside {h}x{w}x{d}",
                e.position, e.channel
            )));
        }
        if !seen.insert((canonical(e.position, h, w), e.channel)) {
            return Err(Error::arg(format!(
                "duplicate perturbation entry for position {:?} channel {}",
                e.position, e.channel
            )));
        }
    }
    let mut out = image.pixels().to_vec();
    let mut residue = 0.0f64;
    for k in 0..d {
        let mine: Vec<&PerturbationEntry> = entries.iter().filter(|e| e.channel == k).collect();
        if mine.is_empty() {
            continue;
        }
        let mut z = dft2(image.channel(k), h, w);
        for e in mine {
            let (i, j) = e.position;
            let add = e.lambda * basis_coefficient(e.position, h, w);
            let s = sym_index(i, j, h, w);
            z.get_mut(i, j).re += add;
            if s != e.position {
                z.get_mut(s.0, s.1).re += add;
            }
        }
        let (real, r) = idft2(&z);
        residue = residue.max(r);
        out[k * h * w..(k + 1) * h * w].copy_from_slice(&real);
    }
    Ok((out, residue))
}

/// Fourier-basis-noise perturbation: per channel `c̃ = F⁻¹(F(c) + Σ λ·F(e))`, clipped to
/// `[0, 1]`.
pub fn perturb(image: &Image, entries: &[PerturbationEntry]) -> Result<Image> {
    let (raw, _) = perturb_raw(image, entries)?;
    let (h, w, d) = image.dims();
    Image::from_clipped(h, w, d, raw)
}
