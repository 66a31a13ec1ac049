//! Minimal in-memory raster types.

use alloc::vec::Vec;

use crate::tensor::{Shape, TensorF32};
use crate::{Error, Result};

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyImage);
        }
        if data.len() != width * height * 3 {
            return Err(Error::LengthMismatch {
                len: data.len(),
                volume: width * height * 3,
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Bilinear resize with half-pixel centers. Returns planar channels
    /// (C, H, W) in the original 0..=255 value range.
    pub fn resize_bilinear_planar(&self, out_w: usize, out_h: usize) -> Vec<f32> {
        let sx = self.width as f32 / out_w as f32;
        let sy = self.height as f32 / out_h as f32;
        let taps = |o: usize, scale: f32, len: usize| {
            let src = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f32);
            let i0 = src as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f32)
        };
        let xs: Vec<_> = (0..out_w).map(|x| taps(x, sx, self.width)).collect();
        let mut out = alloc::vec![0.0f32; 3 * out_h * out_w];
        for y in 0..out_h {
            let (y0, y1, ty) = taps(y, sy, self.height);
            for (x, &(x0, x1, tx)) in xs.iter().enumerate() {
                let p00 = self.pixel(x0, y0);
                let p01 = self.pixel(x1, y0);
                let p10 = self.pixel(x0, y1);
                let p11 = self.pixel(x1, y1);
                for c in 0..3 {
                    // a + (b - a) * t is exact when a == b
                    let top = p00[c] as f32 + (p01[c] as f32 - p00[c] as f32) * tx;
                    let bot = p10[c] as f32 + (p11[c] as f32 - p10[c] as f32) * tx;
                    out[(c * out_h + y) * out_w + x] = top + (bot - top) * ty;
                }
            }
        }
        out
    }

    /// Mean-of-channels luminance, row-major.
    pub fn gray(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| (p[0] as f32 + p[1] as f32 + p[2] as f32) / 3.0)
            .collect()
    }

    /// (1, 3, H, W) tensor scaled to [0, 1] without resizing.
    pub fn to_tensor_unit(&self) -> TensorF32 {
        let plane = self.width * self.height;
        let mut data = alloc::vec![0.0f32; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        TensorF32::from_raw(
            Shape::nchw(1, 3, self.height, self.width).expect("nonzero dims"),
            data,
        )
    }
}

/// Per-pixel binary map, row-major, values 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::LengthMismatch {
                len: data.len(),
                volume: width * height,
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidProbabilities(
                "mask values must be 0 or 1".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: alloc::vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty() {
        assert_eq!(RgbImage::new(0, 4, alloc::vec![]), Err(Error::EmptyImage));
    }

    #[test]
    fn constant_image_resizes_to_constant() {
        let img = RgbImage::filled(448, 300, [255, 255, 255]).unwrap();
        let out = img.resize_bilinear_planar(224, 224);
        assert_eq!(out.len(), 3 * 224 * 224);
        assert!(out.iter().all(|&v| v == 255.0));
    }

    #[test]
    fn downscale_by_two_averages_pairs() {
        // 4x1 ramp -> 2x1: half-pixel centers land between source pixels
        let img = RgbImage::new(
            4,
            1,
            alloc::vec![0, 0, 0, 100, 100, 100, 200, 200, 200, 250, 250, 250],
        )
        .unwrap();
        let out = img.resize_bilinear_planar(2, 1);
        assert_eq!(&out[..2], &[50.0, 225.0]);
    }
}
