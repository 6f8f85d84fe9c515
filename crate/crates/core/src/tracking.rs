//! Feature tracking over the low-resolution stream.
//!
//! Spawning uses rejection sampling over a coarse grid so that track density
//! is proportional to the subject weight map. Tracks are followed
//! frame-to-frame with a pyramidal gradient-descent matcher and terminated on
//! out-of-bounds, convergence failure or forward-backward disagreement.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geom::{Similarity2D, Vec2};
use crate::image_buf::ImageBuf;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrackingParams {
    /// Rejection-sampling grid cell size in pixels.
    pub grid_cell_px: usize,
    pub harris_k: f32,
    /// Corner acceptance threshold relative to the global max response.
    pub harris_rel_threshold: f32,
    /// Matcher tolerance: a track is lost if the final update step exceeds
    /// this many pixels.
    pub match_tol_px: f32,
    /// Forward-backward disagreement tolerance in pixels.
    pub fb_tol_px: f32,
    pub pyramid_levels: usize,
    /// Matching window radius (11x11 window for radius 5).
    pub window_radius: usize,
    pub max_iterations: usize,
}

impl Default for TrackingParams {
    fn default() -> Self {
        TrackingParams {
            grid_cell_px: 5,
            harris_k: 0.04,
            harris_rel_threshold: 1e-4,
            match_tol_px: 1.0,
            fb_tol_px: 1.0,
            pyramid_levels: 3,
            window_radius: 5,
            max_iterations: 30,
        }
    }
}

/// One feature trajectory. `points[i]` is the position at processed-frame
/// index `i`; the valid span is contiguous.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Track {
    pub points: Vec<Option<Vec2>>,
    /// Subject weight sampled at the spawn location.
    pub weight: f32,
    pub spawn_frame: usize,
}

impl Track {
    pub fn position(&self, frame: usize) -> Option<Vec2> {
        self.points.get(frame).copied().flatten()
    }

    pub fn is_live_at(&self, frame: usize) -> bool {
        self.position(frame).is_some()
    }

    pub fn valid_len(&self) -> usize {
        self.points.iter().filter(|p| p.is_some()).count()
    }

    /// Mean per-frame velocity over the valid span.
    pub fn mean_velocity(&self) -> Vec2 {
        let valid: Vec<Vec2> = self.points.iter().flatten().copied().collect();
        if valid.len() < 2 {
            return Vec2::ZERO;
        }
        (*valid.last().unwrap() - valid[0]) / (valid.len() - 1) as f32
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrackSet {
    pub tracks: Vec<Track>,
    pub grid_cell_px: usize,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
}

impl TrackSet {
    pub fn diagonal(&self) -> f32 {
        ((self.width * self.width + self.height * self.height) as f32).sqrt()
    }

    /// Tracks with positive subject weight.
    pub fn subject_tracks(&self) -> Vec<usize> {
        self.tracks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.weight > 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Harris corner response of a single-channel image.
pub fn harris_response(gray: &ImageBuf, k: f32) -> ImageBuf {
    let (w, h) = (gray.width(), gray.height());
    let mut ix = ImageBuf::new(w, h, 1);
    let mut iy = ImageBuf::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let gx = (gray.get_clamped(x as isize + 1, y as isize, 0)
                - gray.get_clamped(x as isize - 1, y as isize, 0))
                * 0.5;
            let gy = (gray.get_clamped(x as isize, y as isize + 1, 0)
                - gray.get_clamped(x as isize, y as isize - 1, 0))
                * 0.5;
            ix.set(x, y, 0, gx);
            iy.set(x, y, 0, gy);
        }
    }
    // 5x5 box-summed structure tensor.
    let r = 2isize;
    ImageBuf::from_fn(w, h, 1, |x, y, _| {
        let mut sxx = 0.0;
        let mut syy = 0.0;
        let mut sxy = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let gx = ix.get_clamped(x as isize + dx, y as isize + dy, 0);
                let gy = iy.get_clamped(x as isize + dx, y as isize + dy, 0);
                sxx += gx * gx;
                syy += gy * gy;
                sxy += gx * gy;
            }
        }
        let det = sxx * syy - sxy * sxy;
        let trace = sxx + syy;
        det - k * trace * trace
    })
}

/// Rejection-sampled corner detection over the grid: each cell draws a
/// uniform v in [0,1] and attempts a corner only when v is below the cell's
/// mean subject weight. `occupied` marks cells that already hold a live
/// track.
pub fn detect_features(
    gray: &ImageBuf,
    weight_map: &ImageBuf,
    params: &TrackingParams,
    rng: &mut ChaCha8Rng,
    occupied: Option<&[bool]>,
) -> Vec<Vec2> {
    let (w, h) = (gray.width(), gray.height());
    let cell = params.grid_cell_px;
    let cols = w.div_ceil(cell);
    let rows = h.div_ceil(cell);
    let response = harris_response(gray, params.harris_k);
    let max_resp = response.max_value();
    let threshold = max_resp * params.harris_rel_threshold;
    let margin = (params.window_radius + 2) as f32;

    let mut corners = Vec::new();
    for cy in 0..rows {
        for cx in 0..cols {
            // Draw for every cell so the stream is independent of occupancy.
            let v: f32 = rng.gen();
            if let Some(occ) = occupied {
                if occ[cy * cols + cx] {
                    continue;
                }
            }
            let x0 = cx * cell;
            let y0 = cy * cell;
            let x1 = (x0 + cell).min(w);
            let y1 = (y0 + cell).min(h);
            let mut wsum = 0.0;
            let mut count = 0;
            for y in y0..y1 {
                for x in x0..x1 {
                    wsum += weight_map.get(x, y, 0);
                    count += 1;
                }
            }
            let mean_w = wsum / count.max(1) as f32;
            if v >= mean_w {
                continue;
            }
            let mut best = f32::NEG_INFINITY;
            let mut best_pos = None;
            for y in y0..y1 {
                for x in x0..x1 {
                    let xf = x as f32;
                    let yf = y as f32;
                    if xf < margin
                        || yf < margin
                        || xf > w as f32 - 1.0 - margin
                        || yf > h as f32 - 1.0 - margin
                    {
                        continue;
                    }
                    let r = response.get(x, y, 0);
                    if r > best {
                        best = r;
                        best_pos = Some(Vec2::new(xf, yf));
                    }
                }
            }
            if best >= threshold && max_resp > 0.0 {
                if let Some(p) = best_pos {
                    corners.push(p);
                }
            }
        }
    }
    corners
}

fn build_pyramid(gray: &ImageBuf, levels: usize) -> Vec<ImageBuf> {
    let mut pyr = vec![gray.clone()];
    for _ in 1..levels {
        let last = pyr.last().unwrap();
        if last.width() < 8 || last.height() < 8 {
            break;
        }
        pyr.push(last.downsample(2));
    }
    pyr
}

/// Single-level Lucas-Kanade refinement. Returns the refined position in the
/// target image or None when the system is degenerate.
fn lk_refine(
    src: &ImageBuf,
    dst: &ImageBuf,
    p_src: Vec2,
    mut p_dst: Vec2,
    params: &TrackingParams,
) -> Option<(Vec2, f32)> {
    let r = params.window_radius as isize;
    // Template gradients and the 2x2 normal matrix from the source window.
    let mut gxx = 0.0f32;
    let mut gyy = 0.0f32;
    let mut gxy = 0.0f32;
    let n = (2 * r + 1) * (2 * r + 1);
    let mut tpl = Vec::with_capacity(n as usize);
    for dy in -r..=r {
        for dx in -r..=r {
            let x = p_src.x + dx as f32;
            let y = p_src.y + dy as f32;
            let v = src.sample_bilinear(x, y, 0);
            let gx = (src.sample_bilinear(x + 1.0, y, 0) - src.sample_bilinear(x - 1.0, y, 0)) * 0.5;
            let gy = (src.sample_bilinear(x, y + 1.0, 0) - src.sample_bilinear(x, y - 1.0, 0)) * 0.5;
            tpl.push((v, gx, gy));
            gxx += gx * gx;
            gyy += gy * gy;
            gxy += gx * gy;
        }
    }
    let det = gxx * gyy - gxy * gxy;
    if det.abs() < 1e-12 {
        return None;
    }
    let inv00 = gyy / det;
    let inv01 = -gxy / det;
    let inv11 = gxx / det;

    let mut last_step = f32::INFINITY;
    for _ in 0..params.max_iterations {
        let mut bx = 0.0f32;
        let mut by = 0.0f32;
        let mut idx = 0;
        for dy in -r..=r {
            for dx in -r..=r {
                let (tv, gx, gy) = tpl[idx];
                idx += 1;
                let dv = dst.sample_bilinear(p_dst.x + dx as f32, p_dst.y + dy as f32, 0) - tv;
                bx += dv * gx;
                by += dv * gy;
            }
        }
        let step = Vec2::new(-(inv00 * bx + inv01 * by), -(inv01 * bx + inv11 * by));
        p_dst += step;
        last_step = step.norm();
        if last_step < 0.01 {
            break;
        }
    }
    Some((p_dst, last_step))
}

/// Pyramidal track of one point from `src` to `dst`. Returns None when lost.
pub fn track_point(
    src_pyr: &[ImageBuf],
    dst_pyr: &[ImageBuf],
    p: Vec2,
    params: &TrackingParams,
) -> Option<Vec2> {
    let levels = src_pyr.len().min(dst_pyr.len());
    let top_scale = (1 << (levels - 1)) as f32;
    let mut guess = p / top_scale;
    for level in (0..levels).rev() {
        let scale = (1 << level) as f32;
        let p_level = p / scale;
        let (refined, step) = lk_refine(&src_pyr[level], &dst_pyr[level], p_level, guess, params)?;
        if level == 0 && step > params.match_tol_px {
            return None;
        }
        guess = if level > 0 { refined * 2.0 } else { refined };
    }
    let dst = &dst_pyr[0];
    let margin = 2.0;
    if guess.x < margin
        || guess.y < margin
        || guess.x > dst.width() as f32 - 1.0 - margin
        || guess.y > dst.height() as f32 - 1.0 - margin
    {
        return None;
    }
    Some(guess)
}

/// Incremental tracker over a sequence of low-resolution grayscale frames.
pub struct Tracker {
    params: TrackingParams,
    weight_map: ImageBuf,
    rng: ChaCha8Rng,
    pyramids: Vec<Vec<ImageBuf>>,
    pub set: TrackSet,
}

impl Tracker {
    pub fn new(weight_map: ImageBuf, params: TrackingParams, seed: u64) -> Self {
        let set = TrackSet {
            tracks: Vec::new(),
            grid_cell_px: params.grid_cell_px,
            n_frames: 0,
            width: weight_map.width(),
            height: weight_map.height(),
        };
        Tracker {
            params,
            weight_map,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pyramids: Vec::new(),
            set,
        }
    }

    fn occupancy(&self, frame: usize) -> Vec<bool> {
        let cell = self.params.grid_cell_px;
        let cols = self.set.width.div_ceil(cell);
        let rows = self.set.height.div_ceil(cell);
        let mut occ = vec![false; cols * rows];
        for t in &self.set.tracks {
            if let Some(p) = t.position(frame) {
                let cx = (p.x as usize / cell).min(cols - 1);
                let cy = (p.y as usize / cell).min(rows - 1);
                occ[cy * cols + cx] = true;
            }
        }
        occ
    }

    /// Feed the next frame (processing order). The first call spawns the
    /// initial features; later calls track live features forward, apply the
    /// forward-backward check and respawn in empty cells.
    pub fn process_frame(&mut self, gray: &ImageBuf) {
        assert_eq!(gray.channels(), 1);
        let pyr = build_pyramid(gray, self.params.pyramid_levels);
        let frame = self.set.n_frames;
        if frame > 0 {
            let prev_pyr = &self.pyramids[frame - 1];
            let params = &self.params;
            let results: Vec<Option<Vec2>> = self
                .set
                .tracks
                .par_iter()
                .map(|t| {
                    let p = t.position(frame - 1)?;
                    let q = track_point(prev_pyr, &pyr, p, params)?;
                    let back = track_point(&pyr, prev_pyr, q, params)?;
                    if (back - p).norm() > params.fb_tol_px {
                        return None;
                    }
                    Some(q)
                })
                .collect();
            for (t, q) in self.set.tracks.iter_mut().zip(results) {
                t.points.push(q);
            }
        }
        // Respawn in cells with no live track.
        let occ_now = if frame == 0 {
            None
        } else {
            Some(self.occupancy(frame))
        };
        let corners = detect_features(
            gray,
            &self.weight_map,
            &self.params,
            &mut self.rng,
            occ_now.as_deref(),
        );
        for c in corners {
            let weight = self
                .weight_map
                .sample_bilinear(c.x, c.y, 0)
                .clamp(0.0, 1.0);
            let mut points = vec![None; frame];
            points.push(Some(c));
            self.set.tracks.push(Track {
                points,
                weight,
                spawn_frame: frame,
            });
        }
        self.pyramids.push(pyr);
        self.set.n_frames += 1;
        // Keep ragged tails aligned.
        for t in &mut self.set.tracks {
            while t.points.len() < self.set.n_frames {
                t.points.push(None);
            }
        }
    }
}

/// Track a whole burst of low-resolution grayscale frames in order.
pub fn track_burst(
    grays: &[ImageBuf],
    weight_map: &ImageBuf,
    params: &TrackingParams,
    seed: u64,
) -> TrackSet {
    assert!(grays.len() >= 2, "need at least 2 frames");
    let mut tracker = Tracker::new(weight_map.clone(), *params, seed);
    for g in grays {
        tracker.process_frame(g);
    }
    tracker.set
}

/// Length of the aligned track polyline as a percentage of the image
/// diagonal. `transforms[i]` maps processed-frame i into base-frame space.
pub fn track_length_diag_pct(track: &Track, transforms: &[Similarity2D], diagonal: f32) -> f32 {
    let mut len = 0.0f32;
    let mut prev: Option<Vec2> = None;
    for (i, point) in track.points.iter().enumerate() {
        let aligned = match (point, transforms.get(i)) {
            (Some(p), Some(t)) => Some(t.apply(*p)),
            _ => None,
        };
        if let (Some(a), Some(b)) = (prev, aligned) {
            len += (b - a).norm();
        }
        prev = aligned;
    }
    100.0 * len / diagonal
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthScene;

    fn gray_burst(scene: &SynthScene) -> Vec<ImageBuf> {
        scene.render_burst().iter().map(|f| f.to_gray()).collect()
    }

    #[test]
    fn detect_spawns_everywhere_with_weight_one() {
        let scene = SynthScene::new(64, 48, 1, 42);
        let gray = scene.render_frame(0).to_gray();
        let weight = ImageBuf::constant(64, 48, 1, 1.0);
        let params = TrackingParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let corners = detect_features(&gray, &weight, &params, &mut rng, None);
        // 13x10 grid of 5px cells, minus the border margin band.
        assert!(corners.len() > 30, "got {}", corners.len());
    }

    #[test]
    fn detect_spawns_nothing_with_weight_zero() {
        let scene = SynthScene::new(64, 48, 1, 42);
        let gray = scene.render_frame(0).to_gray();
        let weight = ImageBuf::constant(64, 48, 1, 0.0);
        let params = TrackingParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let corners = detect_features(&gray, &weight, &params, &mut rng, None);
        assert!(corners.is_empty());
    }

    #[test]
    fn detect_rate_matches_weight_binomially() {
        let scene = SynthScene::new(100, 100, 1, 9);
        let gray = scene.render_frame(0).to_gray();
        let weight = ImageBuf::constant(100, 100, 1, 0.5);
        let params = TrackingParams::default();
        // Count spawn attempts over the interior cells across several seeds.
        let mut total = 0usize;
        let mut cells = 0usize;
        for seed in 0..8 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let corners = detect_features(&gray, &weight, &params, &mut rng, None);
            total += corners.len();
            // The 7px detection margin fully excludes one 5px cell ring of
            // the 20x20 grid, leaving 18x18 eligible cells.
            cells += 18 * 18;
        }
        let p = 0.5;
        let mean = cells as f32 * p;
        let sigma = (cells as f32 * p * (1.0 - p)).sqrt();
        assert!(
            (total as f32 - mean).abs() < 3.0 * sigma,
            "spawned {total}, expected {mean} +- {}",
            3.0 * sigma
        );
    }

    #[test]
    fn static_scene_tracks_span_burst_with_zero_motion() {
        let scene = SynthScene::new(80, 60, 4, 3);
        let grays = gray_burst(&scene);
        let weight = ImageBuf::constant(80, 60, 1, 1.0);
        let set = track_burst(&grays, &weight, &TrackingParams::default(), 7);
        let full: Vec<&Track> = set
            .tracks
            .iter()
            .filter(|t| t.spawn_frame == 0 && t.valid_len() == 4)
            .collect();
        assert!(full.len() > 20, "only {} full tracks", full.len());
        for t in &full {
            let start = t.position(0).unwrap();
            let end = t.position(3).unwrap();
            assert!((end - start).norm() < 0.5, "drift {}", (end - start).norm());
        }
    }

    #[test]
    fn translating_scene_steps_match_velocity() {
        let scene = SynthScene::new(80, 60, 3, 5).with_camera_velocity(Vec2::new(3.0, 0.0));
        let grays = gray_burst(&scene);
        let weight = ImageBuf::constant(80, 60, 1, 1.0);
        let set = track_burst(&grays, &weight, &TrackingParams::default(), 7);
        let mut checked = 0;
        for t in &set.tracks {
            let (Some(a), Some(b)) = (t.position(0), t.position(1)) else {
                continue;
            };
            let step = b - a;
            assert!(
                (step - Vec2::new(3.0, 0.0)).norm() < 0.5,
                "step {:?}",
                step
            );
            checked += 1;
        }
        assert!(checked > 10, "only {checked} tracks survived");
    }

    #[test]
    fn track_exiting_frame_ends_at_exit() {
        // Strong rightward motion pushes right-edge features out of frame.
        let scene = SynthScene::new(60, 40, 6, 5).with_camera_velocity(Vec2::new(8.0, 0.0));
        let grays = gray_burst(&scene);
        let weight = ImageBuf::constant(60, 40, 1, 1.0);
        let set = track_burst(&grays, &weight, &TrackingParams::default(), 7);
        let died: usize = set
            .tracks
            .iter()
            .filter(|t| t.spawn_frame == 0 && t.valid_len() < 6)
            .count();
        assert!(died > 0, "expected some tracks to exit the frame");
        // Valid spans stay contiguous.
        for t in &set.tracks {
            let mut seen_none_after_some = false;
            for p in &t.points[t.spawn_frame..] {
                match (p.is_some(), seen_none_after_some) {
                    (true, true) => panic!("track resurrected"),
                    (false, _) => seen_none_after_some = true,
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn forward_backward_recovers_start_points() {
        let scene = SynthScene::new(80, 60, 3, 11).with_camera_velocity(Vec2::new(2.0, 1.0));
        let grays = gray_burst(&scene);
        let params = TrackingParams::default();
        let fwd_pyr: Vec<Vec<ImageBuf>> =
            grays.iter().map(|g| build_pyramid(g, params.pyramid_levels)).collect();
        let weight = ImageBuf::constant(80, 60, 1, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let corners = detect_features(&grays[0], &weight, &params, &mut rng, None);
        let mut checked = 0;
        for p in corners {
            let Some(q) = track_point(&fwd_pyr[0], &fwd_pyr[1], p, &params) else {
                continue;
            };
            let Some(back) = track_point(&fwd_pyr[1], &fwd_pyr[0], q, &params) else {
                continue;
            };
            assert!((back - p).norm() < 1.0, "fb error {}", (back - p).norm());
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn aligned_length_examples() {
        let diag = 100.0;
        // Zero motion.
        let t = Track {
            points: vec![Some(Vec2::new(10.0, 10.0)); 4],
            weight: 1.0,
            spawn_frame: 0,
        };
        let ident = vec![Similarity2D::identity(); 4];
        assert_eq!(track_length_diag_pct(&t, &ident, diag), 0.0);

        // Straight track spanning 30 px of a 100 px diagonal.
        let t = Track {
            points: (0..4)
                .map(|i| Some(Vec2::new(10.0 * i as f32, 0.0)))
                .collect(),
            weight: 1.0,
            spawn_frame: 0,
        };
        assert!((track_length_diag_pct(&t, &ident, diag) - 30.0).abs() < 1e-4);

        // Motion canceled exactly by the alignment transforms.
        let transforms: Vec<Similarity2D> = (0..4)
            .map(|i| Similarity2D::new(1.0, 0.0, Vec2::new(-10.0 * i as f32, 0.0)))
            .collect();
        assert!(track_length_diag_pct(&t, &transforms, diag) < 1e-4);
    }
}
