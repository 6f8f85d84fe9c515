//! Burst ingestion: manifest parsing, PNG decode to linear RGB, the
//! two-resolution pyramid (full / half / low) and output encoding.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_buf::{linear_to_srgb, srgb_to_linear, ImageBuf};

/// Low resolution is the full image downsampled by this factor.
pub const LOW_FACTOR: usize = 8;
/// Half resolution is the full image downsampled by this factor.
pub const HALF_FACTOR: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlurMode {
    /// Moving foreground streaks over a stabilized sharp background.
    ForegroundBlur,
    /// Panning style: sharp tracked subject over a streaked background.
    BackgroundBlur,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputColorspace {
    /// 8-bit inputs are sRGB encoded; decode through the EOTF.
    Srgb,
    /// Inputs are already linear (typical for 16-bit dumps).
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PyramidLevel {
    Full,
    Half,
    Low,
}

/// A face region supplied through the manifest, in full-resolution pixels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaceRegionSpec {
    pub center_x: f32,
    pub center_y: f32,
    pub inner_radius: f32,
    pub outer_radius: f32,
}

/// Burst description: ordered frame paths plus capture metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BurstManifest {
    pub frame_paths: Vec<PathBuf>,
    /// Reference frame; all alignment targets its coordinate system.
    /// Defaults per mode: first frame for foreground blur, last for
    /// background blur (the most recent capture is the base).
    pub base_index: Option<usize>,
    #[serde(default = "default_frame_rate")]
    pub frame_rate_hz: f32,
    pub mode: BlurMode,
    #[serde(default = "default_colorspace")]
    pub input_colorspace: InputColorspace,
    /// Optional low-resolution grayscale saliency map path.
    #[serde(default)]
    pub saliency_path: Option<PathBuf>,
    /// Optional low-resolution grayscale face-signal map, combined with any
    /// manifest face regions by max.
    #[serde(default)]
    pub face_map_path: Option<PathBuf>,
    /// Optional low-resolution grayscale whole-subject segmentation mask.
    #[serde(default)]
    pub segmentation_path: Option<PathBuf>,
    #[serde(default)]
    pub faces: Vec<FaceRegionSpec>,
}

fn default_frame_rate() -> f32 {
    30.0
}

fn default_colorspace() -> InputColorspace {
    InputColorspace::Srgb
}

impl BurstManifest {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let m: BurstManifest =
            toml::from_str(s).map_err(|e| Error::Manifest(format!("parse error: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::from_toml_str(&text)?;
        // Frame paths are relative to the manifest location.
        if let Some(dir) = path.parent() {
            for p in &mut m.frame_paths {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
            for p in [
                &mut m.saliency_path,
                &mut m.face_map_path,
                &mut m.segmentation_path,
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(m)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_paths.len() < 2 {
            return Err(Error::Manifest(format!(
                "need at least 2 frames, got {}",
                self.frame_paths.len()
            )));
        }
        if let Some(base) = self.base_index {
            if base >= self.frame_paths.len() {
                return Err(Error::Manifest(format!(
                    "base_index {} out of range for {} frames",
                    base,
                    self.frame_paths.len()
                )));
            }
        }
        if self.frame_rate_hz <= 0.0 || self.frame_rate_hz.is_nan() {
            return Err(Error::Manifest(format!(
                "frame_rate_hz must be positive, got {}",
                self.frame_rate_hz
            )));
        }
        for f in &self.faces {
            if !(f.inner_radius > 0.0 && f.inner_radius < f.outer_radius) {
                return Err(Error::Manifest(
                    "face region requires 0 < inner_radius < outer_radius".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn resolved_base_index(&self) -> usize {
        match self.base_index {
            Some(i) => i,
            None => match self.mode {
                BlurMode::ForegroundBlur => 0,
                BlurMode::BackgroundBlur => self.frame_paths.len() - 1,
            },
        }
    }
}

/// One burst image in linear RGB at a given pyramid level.
#[derive(Debug, Clone)]
pub struct Frame {
    pub image: ImageBuf,
    pub level: PyramidLevel,
    pub index: usize,
    pub timestamp_s: f32,
}

impl Frame {
    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }
}

/// Decode a PNG into linear RGB f32. 8-bit inputs go through the sRGB EOTF
/// when `colorspace` is sRGB; 16-bit inputs honor the flag as well.
pub fn load_png_linear(path: &Path, colorspace: InputColorspace) -> Result<ImageBuf> {
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let decode = |v: f32| match colorspace {
        InputColorspace::Srgb => srgb_to_linear(v),
        InputColorspace::Linear => v,
    };
    let buf = match dynimg {
        image::DynamicImage::ImageRgb16(img) => {
            let data = img
                .into_raw()
                .iter()
                .map(|&v| decode(v as f32 / 65535.0))
                .collect();
            ImageBuf::from_vec(w, h, 3, data)?
        }
        image::DynamicImage::ImageLuma16(img) => {
            let mut out = ImageBuf::new(w, h, 3);
            for (i, &v) in img.into_raw().iter().enumerate() {
                let lin = decode(v as f32 / 65535.0);
                for c in 0..3 {
                    out.data_mut()[i * 3 + c] = lin;
                }
            }
            out
        }
        other => {
            let rgb = other.into_rgb8();
            let data = rgb
                .into_raw()
                .iter()
                .map(|&v| decode(v as f32 / 255.0))
                .collect();
            ImageBuf::from_vec(w, h, 3, data)?
        }
    };
    Ok(buf)
}

/// Decode a grayscale PNG into a single-channel map in [0,1] (no EOTF; maps
/// are data, not light).
pub fn load_png_gray_raw(path: &Path) -> Result<ImageBuf> {
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let gray = dynimg.into_luma16();
    let data = gray.into_raw().iter().map(|&v| v as f32 / 65535.0).collect();
    ImageBuf::from_vec(w, h, 1, data)
}

/// Encode linear RGB (or single channel) to an 8-bit sRGB PNG.
pub fn save_png_srgb(path: &Path, img: &ImageBuf) -> Result<()> {
    let (w, h) = (img.width(), img.height());
    let mut bytes = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let ch = c.min(img.channels() - 1);
                let v = linear_to_srgb(img.get(x, y, ch));
                bytes.push((v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
    }
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ColorType::Rgb8).map_err(|e| {
        Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    })
}

/// Encode a [0,1] map as an 8-bit grayscale PNG (no transfer curve).
pub fn save_png_gray(path: &Path, img: &ImageBuf) -> Result<()> {
    let (w, h) = (img.width(), img.height());
    let mut bytes = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let v = img.get(x, y, 0);
            bytes.push((v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8);
        }
    }
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ColorType::L8).map_err(|e| {
        Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    })
}

/// Load all burst frames at full resolution in manifest order.
pub fn load_burst(manifest: &BurstManifest) -> Result<Vec<Frame>> {
    manifest.validate()?;
    let mut frames = Vec::with_capacity(manifest.frame_paths.len());
    let mut dims: Option<(usize, usize)> = None;
    for (index, path) in manifest.frame_paths.iter().enumerate() {
        let image = load_png_linear(path, manifest.input_colorspace)?;
        match dims {
            None => dims = Some((image.width(), image.height())),
            Some((w, h)) => image.expect_dims(w, h)?,
        }
        frames.push(Frame {
            image,
            level: PyramidLevel::Full,
            index,
            timestamp_s: index as f32 / manifest.frame_rate_hz,
        });
    }
    Ok(frames)
}

/// Downsample a frame to another pyramid level.
pub fn downsample_frame(frame: &Frame, level: PyramidLevel) -> Frame {
    assert_eq!(frame.level, PyramidLevel::Full, "downsample from full res");
    let factor = match level {
        PyramidLevel::Full => 1,
        PyramidLevel::Half => HALF_FACTOR,
        PyramidLevel::Low => LOW_FACTOR,
    };
    Frame {
        image: frame.image.downsample(factor),
        level,
        index: frame.index,
        timestamp_s: frame.timestamp_s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn write_solid_png(dir: &Path, name: &str, w: u32, h: u32, rgb: [u8; 3]) -> PathBuf {
        let path = dir.join(name);
        let mut bytes = Vec::new();
        for _ in 0..(w * h) {
            bytes.extend_from_slice(&rgb);
        }
        image::save_buffer(&path, &bytes, w, h, image::ColorType::Rgb8).unwrap();
        path
    }

    fn manifest_for(paths: Vec<PathBuf>, mode: BlurMode) -> BurstManifest {
        BurstManifest {
            frame_paths: paths,
            base_index: Some(0),
            frame_rate_hz: 30.0,
            mode,
            input_colorspace: InputColorspace::Srgb,
            saliency_path: None,
            face_map_path: None,
            segmentation_path: None,
            faces: Vec::new(),
        }
    }

    #[test]
    fn load_burst_white_frames_decode_to_one() {
        let dir = TempDir::new().unwrap();
        let p1 = write_solid_png(dir.path(), "f0.png", 64, 64, [255, 255, 255]);
        let p2 = write_solid_png(dir.path(), "f1.png", 64, 64, [255, 255, 255]);
        let frames = load_burst(&manifest_for(vec![p1, p2], BlurMode::ForegroundBlur)).unwrap();
        assert_eq!(frames.len(), 2);
        for f in &frames {
            assert!(f.image.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        }
        assert!((frames[1].timestamp_s - 1.0 / 30.0).abs() < 1e-6);
    }

    #[test]
    fn load_burst_decodes_srgb_188() {
        let dir = TempDir::new().unwrap();
        let p1 = write_solid_png(dir.path(), "f0.png", 4, 4, [188, 188, 188]);
        let p2 = write_solid_png(dir.path(), "f1.png", 4, 4, [188, 188, 188]);
        let frames = load_burst(&manifest_for(vec![p1, p2], BlurMode::ForegroundBlur)).unwrap();
        assert!((frames[0].image.get(0, 0, 0) - 0.502886).abs() < 1e-4);
    }

    #[test]
    fn base_index_out_of_range_rejected() {
        let dir = TempDir::new().unwrap();
        let p1 = write_solid_png(dir.path(), "f0.png", 4, 4, [10, 10, 10]);
        let p2 = write_solid_png(dir.path(), "f1.png", 4, 4, [10, 10, 10]);
        let mut m = manifest_for(vec![p1, p2], BlurMode::ForegroundBlur);
        m.base_index = Some(2);
        assert!(matches!(load_burst(&m), Err(Error::Manifest(_))));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let dir = TempDir::new().unwrap();
        let p1 = write_solid_png(dir.path(), "f0.png", 4, 4, [10, 10, 10]);
        let p2 = write_solid_png(dir.path(), "f1.png", 8, 4, [10, 10, 10]);
        let m = manifest_for(vec![p1, p2], BlurMode::ForegroundBlur);
        assert!(matches!(
            load_burst(&m),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn missing_file_rejected() {
        let dir = TempDir::new().unwrap();
        let p1 = write_solid_png(dir.path(), "f0.png", 4, 4, [10, 10, 10]);
        let m = manifest_for(vec![p1, dir.path().join("nope.png")], BlurMode::ForegroundBlur);
        assert!(load_burst(&m).is_err());
    }

    #[test]
    fn default_base_is_last_for_background_mode() {
        let dir = TempDir::new().unwrap();
        let p1 = write_solid_png(dir.path(), "f0.png", 4, 4, [0, 0, 0]);
        let p2 = write_solid_png(dir.path(), "f1.png", 4, 4, [0, 0, 0]);
        let mut m = manifest_for(vec![p1, p2], BlurMode::BackgroundBlur);
        m.base_index = None;
        assert_eq!(m.resolved_base_index(), 1);
        m.mode = BlurMode::ForegroundBlur;
        assert_eq!(m.resolved_base_index(), 0);
    }

    #[test]
    fn manifest_toml_round_trip() {
        let m = manifest_for(
            vec![PathBuf::from("a.png"), PathBuf::from("b.png")],
            BlurMode::BackgroundBlur,
        );
        let s = m.to_toml_string();
        let back = BurstManifest::from_toml_str(&s).unwrap();
        assert_eq!(back.frame_paths, m.frame_paths);
        assert_eq!(back.mode, m.mode);
    }

    #[test]
    fn png_round_trip_within_one_step() {
        let dir = TempDir::new().unwrap();
        let img = ImageBuf::from_fn(16, 16, 3, |x, y, c| {
            srgb_to_linear(((x * 16 + y + c * 37) % 256) as f32 / 255.0)
        });
        let path = dir.path().join("rt.png");
        save_png_srgb(&path, &img).unwrap();
        let back = load_png_linear(&path, InputColorspace::Srgb).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!(
                (linear_to_srgb(*a) - linear_to_srgb(*b)).abs() < 1.0 / 255.0,
                "{a} vs {b}"
            );
        }
    }
}
