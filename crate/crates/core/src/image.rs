//! Planar real-valued images with pixel values in `[0, 1]`.

use crate::error::{Error, Result};

/// An `h × w × d` image stored planar: channel-major, then row-major within a channel.
///
/// Pixel `(i, j)` of channel `k` lives at `k·h·w + i·w + j`. Every value is in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels)?;
        if pixels.len() != height * width * channels {
            return Err(Error::arg(format!(
                "pixel buffer has {} values, expected {}",
                pixels.len(),
                height * width * channels
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::arg(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Image { height, width, channels, pixels })
    }

    /// Builds an image from arbitrary real values, clamping each into `[0, 1]`.
    /// NaN maps to 0.
    pub fn from_clipped(height: usize, width: usize, channels: usize, raw: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels)?;
        if raw.len() != height * width * channels {
            return Err(Error::arg("raw buffer length does not match dimensions"));
        }
        let pixels = raw.into_iter().map(clip01).collect();
        Ok(Image { height, width, channels, pixels })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Image::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut raw = Vec::with_capacity(height * width * channels);
        for k in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    raw.push(f(k, i, j));
                }
            }
        }
        Image::new(height, width, channels, raw)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, channel: usize, i: usize, j: usize) -> f64 {
        self.pixels[(channel * self.height + i) * self.width + j]
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.pixels[k * n..(k + 1) * n]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    /// Applies `f` to every pixel and clamps the result back into `[0, 1]`.
    pub fn map_clipped(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels: self.pixels.iter().map(|&v| clip01(f(v))).collect(),
        }
    }
}

pub(crate) fn clip01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

fn check_dims(height: usize, width: usize, channels: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::arg(format!("image dimensions {height}x{width} must be positive")));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::arg(format!("images have 1 or 3 channels, got {channels}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::new(1, 2, 1, vec![0.5, 1.5]).is_err());
        assert!(Image::new(1, 2, 1, vec![0.5, -0.1]).is_err());
        assert!(Image::new(1, 2, 1, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn rejects_bad_channel_counts() {
        assert!(Image::filled(4, 4, 2, 0.0).is_err());
        assert!(Image::filled(4, 4, 3, 0.0).is_ok());
    }

    #[test]
    fn planar_indexing() {
        let img = Image::from_fn(2, 3, 3, |k, i, j| (k * 6 + i * 3 + j) as f64 / 17.0).unwrap();
        assert_eq!(img.get(2, 1, 2), 17.0 / 17.0);
        assert_eq!(img.channel(1)[0], 6.0 / 17.0);
    }

    #[test]
    fn clipping_handles_nan() {
        let img = Image::from_clipped(1, 3, 1, vec![f64::NAN, 2.0, -1.0]).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0, 0.0]);
    }
}
