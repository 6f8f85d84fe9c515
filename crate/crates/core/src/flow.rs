//! Dense optical flow between aligned low-resolution frames, plus the raw
//! float flow file format used to inject or dump fields.
//!
//! The estimator is classical: a coarse-to-fine pyramid, a global integer
//! shift search at the top, iterative windowed Lucas-Kanade refinement with a
//! median filter per level. It only has to be good enough to feed the
//! line-kernel renderer; any estimator meeting the synthetic-shift tolerance
//! qualifies.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_buf::ImageBuf;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DenseFlowParams {
    pub max_levels: usize,
    pub window_radius: usize,
    pub iterations_per_level: usize,
    /// Integer search radius for the global shift at the coarsest level.
    pub top_search_radius: isize,
    /// Per-iteration update clamp in pixels.
    pub step_clamp: f32,
}

impl Default for DenseFlowParams {
    fn default() -> Self {
        DenseFlowParams {
            max_levels: 4,
            window_radius: 3,
            iterations_per_level: 3,
            top_search_radius: 6,
            step_clamp: 1.5,
        }
    }
}

fn build_pyramid(img: &ImageBuf, max_levels: usize) -> Vec<ImageBuf> {
    let mut pyr = vec![img.clone()];
    while pyr.len() < max_levels {
        let last = pyr.last().unwrap();
        if last.width() < 24 || last.height() < 24 {
            break;
        }
        pyr.push(last.downsample(2));
    }
    pyr
}

/// Best integer translation of `b` onto `a` by exhaustive SSD.
fn global_shift(a: &ImageBuf, b: &ImageBuf, radius: isize) -> (f32, f32) {
    let (w, h) = (a.width() as isize, a.height() as isize);
    let mut best = (0isize, 0isize);
    let mut best_cost = f64::INFINITY;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let mut cost = 0.0f64;
            let mut count = 0u32;
            let mut y = radius;
            while y < h - radius {
                let mut x = radius;
                while x < w - radius {
                    let va = a.get(x as usize, y as usize, 0);
                    let vb = b.get_clamped(x + dx, y + dy, 0);
                    cost += ((va - vb) * (va - vb)) as f64;
                    count += 1;
                    x += 2;
                }
                y += 2;
            }
            if count > 0 {
                cost /= count as f64;
                if cost < best_cost {
                    best_cost = cost;
                    best = (dx, dy);
                }
            }
        }
    }
    (best.0 as f32, best.1 as f32)
}

fn median3x3(field: &ImageBuf) -> ImageBuf {
    let (w, h) = (field.width(), field.height());
    ImageBuf::from_fn(w, h, field.channels(), |x, y, c| {
        let mut vals = [0.0f32; 9];
        let mut i = 0;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                vals[i] = field.get_clamped(x as isize + dx, y as isize + dy, c);
                i += 1;
            }
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals[4]
    })
}

/// Dense flow from `a` to `b`: `b(p + flow(p)) ~ a(p)`, i.e. where the
/// content at `p` in `a` is found in `b`.
pub fn estimate_flow(a: &ImageBuf, b: &ImageBuf, params: &DenseFlowParams) -> ImageBuf {
    assert_eq!(a.channels(), 1, "flow runs on grayscale");
    assert!(a.dims_match(b));
    let pyr_a = build_pyramid(a, params.max_levels);
    let pyr_b = build_pyramid(b, params.max_levels);
    let levels = pyr_a.len().min(pyr_b.len());

    let top = levels - 1;
    let (gx, gy) = global_shift(&pyr_a[top], &pyr_b[top], params.top_search_radius);
    let mut flow = ImageBuf::from_fn(pyr_a[top].width(), pyr_a[top].height(), 2, |_, _, c| {
        if c == 0 {
            gx
        } else {
            gy
        }
    });

    for level in (0..levels).rev() {
        let la = &pyr_a[level];
        let lb = &pyr_b[level];
        if flow.width() != la.width() || flow.height() != la.height() {
            flow = flow.upsample_bilinear(la.width(), la.height()).map(|v| v * 2.0);
        }
        for _ in 0..params.iterations_per_level {
            flow = lk_iteration(la, lb, &flow, params);
            flow = median3x3(&flow);
        }
    }
    flow
}

fn lk_iteration(a: &ImageBuf, b: &ImageBuf, flow: &ImageBuf, params: &DenseFlowParams) -> ImageBuf {
    let (w, h) = (a.width(), a.height());
    let r = params.window_radius as isize;
    let mut out = ImageBuf::new(w, h, 2);
    let rows: Vec<Vec<(f32, f32)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w);
            for x in 0..w {
                let u = flow.get(x, y, 0);
                let v = flow.get(x, y, 1);
                let mut gxx = 0.0f32;
                let mut gyy = 0.0f32;
                let mut gxy = 0.0f32;
                let mut bx = 0.0f32;
                let mut by = 0.0f32;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let px = x as isize + dx;
                        let py = y as isize + dy;
                        let gx = (a.get_clamped(px + 1, py, 0) - a.get_clamped(px - 1, py, 0)) * 0.5;
                        let gy = (a.get_clamped(px, py + 1, 0) - a.get_clamped(px, py - 1, 0)) * 0.5;
                        let av = a.get_clamped(px, py, 0);
                        let bv = b.sample_bilinear(px as f32 + u, py as f32 + v, 0);
                        let e = bv - av;
                        gxx += gx * gx;
                        gyy += gy * gy;
                        gxy += gx * gy;
                        bx += e * gx;
                        by += e * gy;
                    }
                }
                let det = gxx * gyy - gxy * gxy;
                let trace = gxx + gyy;
                if det > 1e-10 && trace > 1e-6 {
                    let mut sx = -(gyy * bx - gxy * by) / det;
                    let mut sy = -(gxx * by - gxy * bx) / det;
                    sx = sx.clamp(-params.step_clamp, params.step_clamp);
                    sy = sy.clamp(-params.step_clamp, params.step_clamp);
                    row.push((u + sx, v + sy));
                } else {
                    row.push((u, v));
                }
            }
            row
        })
        .collect();
    for (y, row) in rows.iter().enumerate() {
        for (x, &(u, v)) in row.iter().enumerate() {
            out.set(x, y, 0, u);
            out.set(x, y, 1, v);
        }
    }
    out
}

const FLOW_MAGIC: &str = "longexp-flow";

/// Write a float image as a raw little-endian planar file with a one-line
/// text header: `longexp-flow <width> <height> <channels>`.
pub fn write_flow_file(path: &Path, field: &ImageBuf) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header = format!(
        "{FLOW_MAGIC} {} {} {}\n",
        field.width(),
        field.height(),
        field.channels()
    );
    file.write_all(header.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    let (w, h, c) = (field.width(), field.height(), field.channels());
    let mut bytes = Vec::with_capacity(w * h * c * 4);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                bytes.extend_from_slice(&field.get(x, y, ch).to_le_bytes());
            }
        }
    }
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_flow_file(path: &Path) -> Result<ImageBuf> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    file.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;
    let header_end = data
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::BadArtifact {
            path: path.to_path_buf(),
            reason: "missing header line".into(),
        })?;
    let header = std::str::from_utf8(&data[..header_end]).map_err(|_| Error::BadArtifact {
        path: path.to_path_buf(),
        reason: "header is not utf-8".into(),
    })?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != FLOW_MAGIC {
        return Err(Error::BadArtifact {
            path: path.to_path_buf(),
            reason: format!("bad header: {header}"),
        });
    }
    let parse = |s: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::BadArtifact {
            path: path.to_path_buf(),
            reason: format!("bad dimension: {s}"),
        })
    };
    let (w, h, c) = (parse(parts[1])?, parse(parts[2])?, parse(parts[3])?);
    let payload = &data[header_end + 1..];
    if payload.len() != w * h * c * 4 {
        return Err(Error::BadArtifact {
            path: path.to_path_buf(),
            reason: format!("payload {} bytes, expected {}", payload.len(), w * h * c * 4),
        });
    }
    let mut out = ImageBuf::new(w, h, c);
    let mut i = 0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = f32::from_le_bytes(payload[i..i + 4].try_into().unwrap());
                out.set(x, y, ch, v);
                i += 4;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthScene;
    use tempfile::TempDir;

    #[test]
    fn flow_zero_for_identical_frames() {
        let img = SynthScene::new(64, 48, 1, 5).render_frame(0).to_gray();
        let flow = estimate_flow(&img, &img, &DenseFlowParams::default());
        for y in 4..44 {
            for x in 4..60 {
                assert!(flow.get(x, y, 0).abs() < 0.05);
                assert!(flow.get(x, y, 1).abs() < 0.05);
            }
        }
    }

    #[test]
    fn flow_recovers_global_shift() {
        let scene = SynthScene::new(96, 72, 2, 8).with_camera_velocity(crate::geom::Vec2::new(10.0, 0.0));
        let a = scene.render_frame(0).to_gray();
        let b = scene.render_frame(1).to_gray();
        // Content at p in frame 0 appears at p + 10 in frame 1.
        let flow = estimate_flow(&a, &b, &DenseFlowParams::default());
        let mut max_err = 0.0f32;
        for y in 12..60 {
            for x in 12..72 {
                let err = ((flow.get(x, y, 0) - 10.0).powi(2) + flow.get(x, y, 1).powi(2)).sqrt();
                max_err = max_err.max(err);
            }
        }
        assert!(max_err < 0.5, "interior max error {max_err}");
    }

    #[test]
    fn flow_file_round_trip_is_exact() {
        let dir = TempDir::new().unwrap();
        let field = ImageBuf::from_fn(9, 7, 2, |x, y, c| {
            (x as f32 * 0.37 - y as f32 * 1.21) * (c as f32 + 0.5)
        });
        let path = dir.path().join("field.flo");
        write_flow_file(&path, &field).unwrap();
        let back = read_flow_file(&path).unwrap();
        assert_eq!(field.data(), back.data());
        assert_eq!(field.width(), back.width());
        assert_eq!(field.channels(), back.channels());
    }

    #[test]
    fn flow_file_rejects_bad_header() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.flo");
        std::fs::write(&path, b"not-a-flow 1 1 1\n\0\0\0\0").unwrap();
        assert!(read_flow_file(&path).is_err());
    }
}
