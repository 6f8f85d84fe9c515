//! Planar-free f32 image buffer with the sampling and resampling primitives
//! the rest of the pipeline builds on.
//!
//! Pixels are stored interleaved row-major; pixel centers sit at integer
//! coordinates and sampling outside the image clamps to the edge.

use crate::error::{Error, Result};
use crate::geom::Vec2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        ImageBuf {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut img = ImageBuf::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.set(x, y, c, f(x, y, c));
                }
            }
        }
        img
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Manifest(format!(
                "buffer length {} does not match {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        Ok(ImageBuf {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, channels: usize, v: f32) -> Self {
        ImageBuf {
            width,
            height,
            channels,
            data: vec![v; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn diagonal(&self) -> f32 {
        ((self.width * self.width + self.height * self.height) as f32).sqrt()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Nearest pixel with edge clamping.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, c: usize) -> f32 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc, c)
    }

    /// Bilinear sample with edge clamping.
    pub fn sample_bilinear(&self, x: f32, y: f32, c: usize) -> f32 {
        let x = x.clamp(0.0, (self.width - 1) as f32);
        let y = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let v00 = self.get(x0, y0, c);
        let v10 = self.get(x1, y0, c);
        let v01 = self.get(x0, y1, c);
        let v11 = self.get(x1, y1, c);
        let top = v00 + (v10 - v00) * fx;
        let bot = v01 + (v11 - v01) * fx;
        top + (bot - top) * fy
    }

    /// Bilinear sample of a 2-channel field as a vector.
    pub fn sample_vec2(&self, x: f32, y: f32) -> Vec2 {
        debug_assert!(self.channels >= 2);
        Vec2::new(self.sample_bilinear(x, y, 0), self.sample_bilinear(x, y, 1))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32 + Sync) -> ImageBuf {
        ImageBuf {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.data.iter().map(|&v| v as f64).sum();
        (sum / self.data.len() as f64) as f32
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Rec. 709 luma of a linear RGB image (or a copy for single-channel input).
    pub fn to_gray(&self) -> ImageBuf {
        if self.channels == 1 {
            return self.clone();
        }
        assert!(self.channels >= 3);
        ImageBuf::from_fn(self.width, self.height, 1, |x, y, _| {
            0.2126 * self.get(x, y, 0) + 0.7152 * self.get(x, y, 1) + 0.0722 * self.get(x, y, 2)
        })
    }

    /// Box-filter downsample by an integer factor, padding by edge replication
    /// when the dimensions do not divide evenly. Preserves mean intensity on
    /// exact-multiple dimensions.
    pub fn downsample(&self, factor: usize) -> ImageBuf {
        assert!(factor >= 1);
        if factor == 1 {
            return self.clone();
        }
        let ow = self.width.div_ceil(factor);
        let oh = self.height.div_ceil(factor);
        let inv = 1.0 / (factor * factor) as f64;
        let mut out = ImageBuf::new(ow, oh, self.channels);
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..self.channels {
                    let mut acc = 0.0f64;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            let sx = (ox * factor + dx).min(self.width - 1);
                            let sy = (oy * factor + dy).min(self.height - 1);
                            acc += self.get(sx, sy, c) as f64;
                        }
                    }
                    out.set(ox, oy, c, (acc * inv) as f32);
                }
            }
        }
        out
    }

    /// Bilinear upsample to the given dimensions.
    pub fn upsample_bilinear(&self, new_w: usize, new_h: usize) -> ImageBuf {
        let sx = if new_w > 1 {
            (self.width - 1) as f32 / (new_w - 1) as f32
        } else {
            0.0
        };
        let sy = if new_h > 1 {
            (self.height - 1) as f32 / (new_h - 1) as f32
        } else {
            0.0
        };
        ImageBuf::from_fn(new_w, new_h, self.channels, |x, y, c| {
            self.sample_bilinear(x as f32 * sx, y as f32 * sy, c)
        })
    }

    /// Backward warp: `out(p) = self(p + field(p))` where `field` is a
    /// 2-channel displacement image at the same resolution.
    pub fn warp_by_field(&self, field: &ImageBuf) -> ImageBuf {
        assert_eq!(field.channels(), 2);
        assert_eq!(field.width(), self.width);
        assert_eq!(field.height(), self.height);
        ImageBuf::from_fn(self.width, self.height, self.channels, |x, y, c| {
            let dx = field.get(x, y, 0);
            let dy = field.get(x, y, 1);
            self.sample_bilinear(x as f32 + dx, y as f32 + dy, c)
        })
    }

    pub fn dims_match(&self, other: &ImageBuf) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn expect_dims(&self, w: usize, h: usize) -> Result<()> {
        if self.width != w || self.height != h {
            return Err(Error::DimensionMismatch {
                expected_w: w,
                expected_h: h,
                got_w: self.width,
                got_h: self.height,
            });
        }
        Ok(())
    }
}

/// sRGB EOTF: display-encoded value in [0,1] to linear light.
pub fn srgb_to_linear(v: f32) -> f32 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Inverse of [`srgb_to_linear`].
pub fn linear_to_srgb(v: f32) -> f32 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Invertible "soft gamma" brightness curve on [0,1].
///
/// `soft_gamma(v, k)` bends brightness opposite to a linear-to-sRGB transform
/// for k > 1; applying it again with `1/k` recovers the input exactly.
pub fn soft_gamma64(v: f64, k: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    v / (v + (1.0 - v) * k)
}

/// f32 wrapper over [`soft_gamma64`] for image buffers.
pub fn soft_gamma(v: f32, k: f32) -> f32 {
    soft_gamma64(v as f64, k as f64) as f32
}

/// Parameters of the soft-gamma rendering colorspace.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ColorParams {
    pub soft_gamma_k: f32,
}

impl Default for ColorParams {
    fn default() -> Self {
        ColorParams { soft_gamma_k: 3.0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn downsample_constant_preserved() {
        let img = ImageBuf::constant(8, 8, 1, 0.3);
        let out = img.downsample(8);
        assert_eq!(out.width(), 1);
        assert_eq!(out.height(), 1);
        assert!((out.get(0, 0, 0) - 0.3).abs() < 1e-7);
    }

    #[test]
    fn downsample_two_by_two_average() {
        let img = ImageBuf::from_vec(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = img.downsample(2);
        assert!((out.get(0, 0, 0) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn downsample_full_res_to_low_matches_expected_dims() {
        // 4032x3008 full resolution divided by 8.
        let img = ImageBuf::new(4032, 3008, 1);
        let out = img.downsample(8);
        assert_eq!((out.width(), out.height()), (504, 376));
    }

    #[test]
    fn downsample_preserves_mean_on_divisible_dims() {
        let img = ImageBuf::from_fn(16, 8, 1, |x, y, _| ((x * 31 + y * 17) % 97) as f32 / 97.0);
        let out = img.downsample(2);
        assert!((out.mean() - img.mean()).abs() < 1e-6);
    }

    #[test]
    fn srgb_known_value() {
        // 8-bit sRGB 188 decodes to roughly mid linear intensity.
        let lin = srgb_to_linear(188.0 / 255.0);
        assert!((lin - 0.502886).abs() < 1e-4, "got {lin}");
    }

    #[test]
    fn soft_gamma_fixed_points_and_midpoint() {
        assert_eq!(soft_gamma(0.0, 3.0), 0.0);
        assert_eq!(soft_gamma(1.0, 3.0), 1.0);
        assert!((soft_gamma(0.5, 3.0) - 0.25).abs() < 1e-7);
    }

    #[test]
    fn soft_gamma_inverse_property() {
        let v = 0.7;
        let round = soft_gamma64(soft_gamma64(v, 3.0), 1.0 / 3.0);
        assert!((round - v).abs() < 1e-9);
    }

    #[test]
    fn bilinear_sample_interpolates() {
        let img = ImageBuf::from_vec(2, 1, 1, vec![0.0, 1.0]).unwrap();
        assert!((img.sample_bilinear(0.25, 0.0, 0) - 0.25).abs() < 1e-6);
    }

    #[test]
    fn warp_by_constant_field_translates() {
        let img = ImageBuf::from_fn(8, 8, 1, |x, _, _| x as f32);
        let field = ImageBuf::from_fn(8, 8, 2, |_, _, c| if c == 0 { 2.0 } else { 0.0 });
        let out = img.warp_by_field(&field);
        assert!((out.get(1, 3, 0) - 3.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn srgb_round_trip_within_quantization(v in 0u32..=255u32) {
            let enc = v as f32 / 255.0;
            let back = linear_to_srgb(srgb_to_linear(enc));
            prop_assert!((back - enc).abs() < 1.0 / 255.0);
        }

        #[test]
        fn soft_gamma_monotone_and_invertible(a in 0.0f32..1.0, b in 0.0f32..1.0, k in 0.05f32..20.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(soft_gamma(lo, k) <= soft_gamma(hi, k));
            let round = soft_gamma(soft_gamma(a, k), 1.0 / k);
            prop_assert!((round - a).abs() < 1e-5);
        }

        #[test]
        fn downsample_mean_preserved(w in 1usize..6, h in 1usize..6, f in 1usize..4) {
            let img = ImageBuf::from_fn(w * f, h * f, 1, |x, y, _| ((x * 7 + y * 13) % 11) as f32 / 11.0);
            let out = img.downsample(f);
            prop_assert!((out.mean() - img.mean()).abs() < 1e-6);
        }
    }
}
