//! Deterministic synthetic burst generator with known ground-truth motion.
//!
//! Scenes are built from smoothly interpolated value noise so that feature
//! tracking and dense flow have real texture to lock onto. Content motion is
//! specified per frame: a camera path moving the whole scene, optional
//! parallax planes with their own motion, and textured moving objects.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::burst_io::{save_png_srgb, BlurMode, BurstManifest, FaceRegionSpec, InputColorspace};
use crate::error::Result;
use crate::geom::Vec2;
use crate::image_buf::ImageBuf;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn lattice(ix: i64, iy: i64, seed: u64) -> f32 {
    let h = splitmix64(
        seed ^ (ix as u64).wrapping_mul(0x517CC1B727220A95)
            ^ (iy as u64).wrapping_mul(0x2545F4914F6CDD1D),
    );
    (h >> 40) as f32 / (1u64 << 24) as f32
}

fn smooth01(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated value noise in [0,1] at one spatial scale.
fn value_noise(x: f32, y: f32, scale: f32, seed: u64) -> f32 {
    let gx = x / scale;
    let gy = y / scale;
    let ix = gx.floor() as i64;
    let iy = gy.floor() as i64;
    let fx = smooth01(gx - ix as f32);
    let fy = smooth01(gy - iy as f32);
    let v00 = lattice(ix, iy, seed);
    let v10 = lattice(ix + 1, iy, seed);
    let v01 = lattice(ix, iy + 1, seed);
    let v11 = lattice(ix + 1, iy + 1, seed);
    let top = v00 + (v10 - v00) * fx;
    let bot = v01 + (v11 - v01) * fx;
    top + (bot - top) * fy
}

/// Three-octave textured field, mid-gray biased so objects can stand out.
fn texture(x: f32, y: f32, base_scale: f32, seed: u64) -> f32 {
    let n = 0.55 * value_noise(x, y, base_scale, seed)
        + 0.30 * value_noise(x, y, base_scale * 0.41, seed ^ 0xA5A5)
        + 0.15 * value_noise(x, y, base_scale * 0.17, seed ^ 0x3C3C);
    0.15 + 0.7 * n
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ObjectPath {
    Linear { start: Vec2, velocity: Vec2 },
    Arc {
        center: Vec2,
        radius: f32,
        start_angle: f32,
        angular_velocity: f32,
    },
}

impl ObjectPath {
    pub fn position(&self, frame: f32) -> Vec2 {
        match self {
            ObjectPath::Linear { start, velocity } => *start + *velocity * frame,
            ObjectPath::Arc {
                center,
                radius,
                start_angle,
                angular_velocity,
            } => {
                let a = start_angle + angular_velocity * frame;
                *center + Vec2::new(a.cos(), a.sin()) * *radius
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MovingObject {
    pub path: ObjectPath,
    pub radius: f32,
    /// Brightness lift over the background texture.
    pub brightness: f32,
    /// Strength of the object's own texture; 0 gives a flat (untrackable)
    /// surface like water or light sources.
    #[serde(default = "default_texture_amplitude")]
    pub texture_amplitude: f32,
    pub seed: u64,
}

fn default_texture_amplitude() -> f32 {
    0.5
}

/// A screen-space band showing a separately translating texture (a second
/// depth plane under camera translation).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParallaxPlane {
    /// Pixels with y >= y_min and y < y_max belong to this plane.
    pub y_min: f32,
    pub y_max: f32,
    pub shift_per_frame: Vec2,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthScene {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub seed: u64,
    /// Texture feature size in pixels at the generated resolution.
    pub texture_scale: f32,
    /// Content displacement of the static scene per frame (camera motion in
    /// the opposite direction); index k applies to frame k.
    pub camera_shifts: Vec<Vec2>,
    pub planes: Vec<ParallaxPlane>,
    pub objects: Vec<MovingObject>,
}

impl SynthScene {
    pub fn new(width: usize, height: usize, frames: usize, seed: u64) -> Self {
        SynthScene {
            width,
            height,
            frames,
            seed,
            texture_scale: (width.min(height) as f32 / 10.0).max(3.0),
            camera_shifts: vec![Vec2::ZERO; frames],
            planes: Vec::new(),
            objects: Vec::new(),
        }
    }

    pub fn with_camera_velocity(mut self, velocity: Vec2) -> Self {
        self.camera_shifts = (0..self.frames)
            .map(|k| velocity * k as f32)
            .collect();
        self
    }

    /// Deterministic hand-shake jitter of the given amplitude, added on top
    /// of existing camera shifts.
    pub fn with_camera_jitter(mut self, amplitude: f32, seed: u64) -> Self {
        for (k, shift) in self.camera_shifts.iter_mut().enumerate() {
            if k == 0 {
                continue;
            }
            let jx = lattice(k as i64, 1, seed) * 2.0 - 1.0;
            let jy = lattice(k as i64, 2, seed) * 2.0 - 1.0;
            *shift += Vec2::new(jx, jy) * amplitude;
        }
        self
    }

    pub fn with_object(mut self, object: MovingObject) -> Self {
        self.objects.push(object);
        self
    }

    pub fn with_plane(mut self, plane: ParallaxPlane) -> Self {
        self.planes.push(plane);
        self
    }

    /// Render one frame as linear RGB in [0,1].
    pub fn render_frame(&self, frame: usize) -> ImageBuf {
        let k = frame as f32;
        let cam = self
            .camera_shifts
            .get(frame)
            .copied()
            .unwrap_or(Vec2::ZERO);
        let mut img = ImageBuf::new(self.width, self.height, 3);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = Vec2::new(x as f32, y as f32);
                // Static world content appears displaced by the camera shift.
                let bg = p - cam;
                let mut value = [0.0f32; 3];
                for (c, v) in value.iter_mut().enumerate() {
                    *v = texture(bg.x, bg.y, self.texture_scale, self.seed ^ (c as u64 * 7919));
                }
                for plane in &self.planes {
                    if p.y >= plane.y_min && p.y < plane.y_max {
                        let q = p - cam - plane.shift_per_frame * k;
                        for (c, v) in value.iter_mut().enumerate() {
                            *v = texture(
                                q.x,
                                q.y,
                                self.texture_scale,
                                plane.seed ^ (c as u64 * 7919),
                            );
                        }
                    }
                }
                for obj in &self.objects {
                    let pos = obj.path.position(k) + cam;
                    let d = (p - pos).norm();
                    if d < obj.radius + 1.0 {
                        // 1px antialiasing band at the rim.
                        let alpha = (obj.radius + 1.0 - d).clamp(0.0, 1.0);
                        let local = p - pos;
                        for (c, v) in value.iter_mut().enumerate() {
                            let tex = texture(
                                local.x,
                                local.y,
                                (obj.radius / 2.5).max(2.0),
                                obj.seed ^ (c as u64 * 104729),
                            );
                            let ov = (tex * obj.texture_amplitude + obj.brightness)
                                .clamp(0.0, 1.0);
                            *v = *v * (1.0 - alpha) + ov * alpha;
                        }
                    }
                }
                for (c, v) in value.iter().enumerate() {
                    img.set(x, y, c, v.clamp(0.0, 1.0));
                }
            }
        }
        img
    }

    pub fn render_burst(&self) -> Vec<ImageBuf> {
        (0..self.frames).map(|k| self.render_frame(k)).collect()
    }

    /// Write the burst as numbered PNGs plus a manifest, returning the
    /// manifest path.
    pub fn write_burst(
        &self,
        dir: &Path,
        mode: BlurMode,
        faces: Vec<FaceRegionSpec>,
    ) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
        let mut paths = Vec::new();
        for (k, img) in self.render_burst().iter().enumerate() {
            let name = format!("frame_{k:04}.png");
            save_png_srgb(&dir.join(&name), img)?;
            paths.push(PathBuf::from(name));
        }
        let manifest = BurstManifest {
            frame_paths: paths,
            base_index: None,
            frame_rate_hz: 30.0,
            mode,
            input_colorspace: InputColorspace::Srgb,
            saliency_path: None,
            face_map_path: None,
            segmentation_path: None,
            faces,
        };
        let manifest_path = dir.join("burst.toml");
        std::fs::write(&manifest_path, manifest.to_toml_string())
            .map_err(|e| crate::error::Error::io(&manifest_path, e))?;
        Ok(manifest_path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let scene = SynthScene::new(32, 24, 3, 7).with_camera_velocity(Vec2::new(1.5, 0.0));
        let a = scene.render_frame(2);
        let b = scene.render_frame(2);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn camera_shift_translates_content() {
        let scene = SynthScene::new(64, 48, 2, 3).with_camera_velocity(Vec2::new(3.0, 0.0));
        let f0 = scene.render_frame(0);
        let f1 = scene.render_frame(1);
        // Interior pixels of frame 1 equal frame 0 shifted by 3px.
        let mut max_err = 0.0f32;
        for y in 8..40 {
            for x in 8..56 {
                let err = (f1.get(x, y, 0) - f0.get(x - 3, y, 0)).abs();
                max_err = max_err.max(err);
            }
        }
        assert!(max_err < 1e-6, "max_err {max_err}");
    }

    #[test]
    fn object_moves_along_path() {
        let obj = MovingObject {
            path: ObjectPath::Linear {
                start: Vec2::new(10.0, 12.0),
                velocity: Vec2::new(4.0, 0.0),
            },
            radius: 5.0,
            brightness: 0.9,
            texture_amplitude: 0.5,
            seed: 11,
        };
        let scene = SynthScene::new(64, 24, 2, 3).with_object(obj);
        let f0 = scene.render_frame(0);
        let f1 = scene.render_frame(1);
        // Object center is bright in both frames at shifted positions.
        assert!(f0.get(10, 12, 0) > 0.8);
        assert!(f1.get(14, 12, 0) > 0.8);
        // Where the object was is background again in frame 1.
        assert!(f1.get(6, 12, 0) < 0.9);
    }

    #[test]
    fn texture_has_variation() {
        let img = SynthScene::new(32, 32, 1, 5).render_frame(0);
        let mean = img.mean();
        let var: f32 = img
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f32>()
            / img.data().len() as f32;
        assert!(var > 1e-3, "texture variance too low: {var}");
    }
}
