//! End-to-end orchestration: subject detection, tracking, alignment, frame
//! selection, blur synthesis and compositing, with per-stage entry points so
//! the CLI can run and resume individual stages from dumped artifacts.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::alignment::{
    align_background, align_foreground, AlignmentSolution, ClusterParams, MeshParams,
    SolverParams,
};
use crate::burst_io::{
    downsample_frame, load_burst, load_png_gray_raw, BlurMode, BurstManifest, Frame,
    PyramidLevel, HALF_FACTOR, LOW_FACTOR,
};
use crate::compositing::{
    combine_masks, composite_final, compute_flow_mask, face_protection_mask, fill_face_motion,
    refine_mask_edge_aware, CompositeParams,
};
use crate::error::{Error, Result};
use crate::flow::DenseFlowParams;
use crate::geom::Vec2;
use crate::image_buf::{soft_gamma, ColorParams, ImageBuf};
use crate::motionblur::{
    accumulate_burst, predict_kernels, predict_kernels_from_flow, AccumulateOpts,
    InterpolationMode, KernelPair, KernelParams,
};
use crate::selection::{
    estimate_scene_velocity, plan_capture, select_frame_count, CapturePlan, SelectionPolicy,
};
use crate::subject::{build_subject_map, FaceRegion, SubjectParams, SubjectWeightMap};
use crate::tracking::{track_burst, TrackSet, TrackingParams};

/// Coordinate scale between the low-res analysis stream and the half-res
/// rendering stream.
pub const LOW_TO_HALF: f32 = (LOW_FACTOR / HALF_FACTOR) as f32;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderParams {
    pub samples_per_px: f32,
    pub max_samples: usize,
    pub interpolation: InterpolationMode,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            samples_per_px: 2.0,
            max_samples: 256,
            interpolation: InterpolationMode::Spline,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker pool size; 0 uses the default.
    pub threads: usize,
    pub tracking: TrackingParams,
    pub subject: SubjectParams,
    pub solver: SolverParams,
    pub mesh: MeshParams,
    pub cluster: ClusterParams,
    pub flow: DenseFlowParams,
    pub kernel: KernelParams,
    pub composite: CompositeParams,
    pub color: ColorParams,
    pub render: RenderParams,
    /// Override of the mode-derived selection policy.
    pub selection: Option<SelectionPolicy>,
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Manifest(format!("config parse error: {e}")))
    }

    pub fn policy(&self, mode: BlurMode) -> SelectionPolicy {
        self.selection.unwrap_or(match mode {
            BlurMode::ForegroundBlur => SelectionPolicy::foreground(),
            BlurMode::BackgroundBlur => SelectionPolicy::background(),
        })
    }
}

/// The burst at all pyramid levels in processing order (index 0 = base
/// frame; background blur walks into the past).
pub struct LoadedBurst {
    pub manifest: BurstManifest,
    pub mode: BlurMode,
    pub base_manifest_index: usize,
    /// Manifest index per processing index.
    pub processing: Vec<usize>,
    pub full: Vec<ImageBuf>,
    pub half: Vec<ImageBuf>,
    pub low: Vec<ImageBuf>,
    pub low_gray: Vec<ImageBuf>,
    pub velocity_estimate_pct: Option<f32>,
    pub plan: Option<CapturePlan>,
}

impl LoadedBurst {
    pub fn low_dims(&self) -> (usize, usize) {
        (self.low[0].width(), self.low[0].height())
    }

    /// Face regions scaled from full-resolution manifest coordinates.
    pub fn face_regions(&self, factor: f32) -> Vec<FaceRegion> {
        self.manifest
            .faces
            .iter()
            .map(|f| {
                FaceRegion::new(
                    Vec2::new(f.center_x * factor, f.center_y * factor),
                    f.inner_radius * factor,
                    f.outer_radius * factor,
                )
            })
            .collect()
    }
}

/// Load the burst, build pyramids, estimate pre-capture motion (foreground
/// blur) and fix the processing order.
pub fn load_and_plan(manifest: &BurstManifest, config: &PipelineConfig) -> Result<LoadedBurst> {
    let frames = load_burst(manifest)?;
    let base = manifest.resolved_base_index();
    let mode = manifest.mode;

    let to_levels = |f: &Frame| {
        let half = downsample_frame(f, PyramidLevel::Half);
        let low = downsample_frame(f, PyramidLevel::Low);
        (half.image, low.image)
    };

    // Candidate manifest indices in processing order.
    let candidates: Vec<usize> = match mode {
        BlurMode::ForegroundBlur => (base..frames.len()).collect(),
        BlurMode::BackgroundBlur => (0..=base).rev().collect(),
    };
    if candidates.len() < 2 {
        return Err(Error::Manifest(format!(
            "need at least 2 frames from the base frame onward, got {}",
            candidates.len()
        )));
    }

    let policy = config.policy(mode);
    let mut velocity = None;
    let mut plan = None;
    let mut selected: Vec<usize> = candidates.clone();
    if mode == BlurMode::ForegroundBlur && candidates.len() >= 5 {
        // Viewfinder proxy: the first five frames of the capture window.
        let grays: Vec<ImageBuf> = candidates[..5]
            .iter()
            .map(|&i| {
                let (_, low) = to_levels(&frames[i]);
                low.to_gray()
            })
            .collect();
        let v = estimate_scene_velocity(&grays, &policy, &config.tracking, config.seed)?;
        let p = plan_capture(v, &policy, manifest.frame_rate_hz);
        selected = p
            .selected_indices
            .iter()
            .filter_map(|&rel| candidates.get(rel).copied())
            .collect();
        if selected.len() < 2 {
            selected = candidates.clone();
        }
        velocity = Some(v);
        plan = Some(p);
    }
    selected.truncate(policy.max_frames);

    let mut full = Vec::new();
    let mut half = Vec::new();
    let mut low = Vec::new();
    let mut low_gray = Vec::new();
    for &i in &selected {
        let (h, l) = to_levels(&frames[i]);
        full.push(frames[i].image.clone());
        low_gray.push(l.to_gray());
        half.push(h);
        low.push(l);
    }

    Ok(LoadedBurst {
        manifest: manifest.clone(),
        mode,
        base_manifest_index: base,
        processing: selected,
        full,
        half,
        low,
        low_gray,
        velocity_estimate_pct: velocity,
        plan,
    })
}

/// Subject weight map for the base frame plus the track set over the burst.
pub fn stage_track(
    burst: &LoadedBurst,
    config: &PipelineConfig,
) -> Result<(SubjectWeightMap, TrackSet)> {
    let (w, h) = burst.low_dims();
    let external = match &burst.manifest.saliency_path {
        Some(p) => Some(load_png_gray_raw(p)?),
        None => None,
    };
    let face_map = match &burst.manifest.face_map_path {
        Some(p) => Some(load_png_gray_raw(p)?),
        None => None,
    };
    let segmentation = match &burst.manifest.segmentation_path {
        Some(p) => Some(load_png_gray_raw(p)?),
        None => None,
    };
    let low_scale = 1.0 / LOW_FACTOR as f32;
    let regions = burst.face_regions(low_scale);
    let subject = build_subject_map(
        w,
        h,
        external.as_ref(),
        &regions,
        face_map.as_ref(),
        segmentation.as_ref(),
        &config.subject,
    )?;

    // Background blur spawns tracks proportionally to the subject weights;
    // foreground blur tracks the whole field uniformly.
    let spawn_map = match burst.mode {
        BlurMode::BackgroundBlur => subject.weight.clone(),
        BlurMode::ForegroundBlur => ImageBuf::constant(w, h, 1, 1.0),
    };
    let mut set = track_burst(&burst.low_gray, &spawn_map, &config.tracking, config.seed);
    if burst.mode == BlurMode::ForegroundBlur {
        // Track weights carry the subject map for compositing statistics.
        for t in &mut set.tracks {
            if let Some(p) = t.points.iter().flatten().next() {
                t.weight = subject.weight.sample_bilinear(p.x, p.y, 0);
            }
        }
    }
    Ok((subject, set))
}

pub fn stage_align(
    burst: &LoadedBurst,
    set: &TrackSet,
    config: &PipelineConfig,
) -> Result<AlignmentSolution> {
    match burst.mode {
        BlurMode::ForegroundBlur => align_foreground(set, &config.mesh),
        BlurMode::BackgroundBlur => {
            align_background(set, &config.solver, &config.cluster, config.seed)
        }
    }
}

pub fn stage_select(
    burst: &LoadedBurst,
    set: &TrackSet,
    solution: &AlignmentSolution,
    config: &PipelineConfig,
) -> (usize, f32) {
    let policy = config.policy(burst.mode);
    let (n, estimate) = select_frame_count(set, &solution.transforms, &policy);
    (n.min(policy.max_frames).max(2), estimate)
}

/// Blur synthesis products: kernel maps per selected pair and the blurred
/// half-resolution image (linear light).
pub struct RenderProducts {
    pub pairs: Vec<KernelPair>,
    pub blurred_half: ImageBuf,
    pub max_clamped_fraction: f32,
}

/// Render the blur for the selected prefix. `injected_flow` bypasses the
/// dense flow estimator with precomputed per-pair (forward, backward) fields.
pub fn stage_render(
    burst: &LoadedBurst,
    solution: &AlignmentSolution,
    n_selected: usize,
    config: &PipelineConfig,
    injected_flow: Option<&[(ImageBuf, ImageBuf)]>,
) -> Result<RenderProducts> {
    let n = n_selected.min(burst.low.len());
    let (low_w, low_h) = burst.low_dims();

    // Low-res frames warped into base space feed the flow estimator.
    let aligned_low: Vec<ImageBuf> = (0..n)
        .map(|i| {
            let field = solution.displacement_field(i, low_w, low_h, 1.0);
            burst.low_gray[i].warp_by_field(&field)
        })
        .collect();

    let mut pairs = Vec::with_capacity(n - 1);
    let mut max_clamped = 0.0f32;
    for i in 0..n - 1 {
        let pair = match injected_flow {
            Some(fields) => {
                let (fwd, bwd) = &fields[i];
                predict_kernels_from_flow(fwd, bwd, &config.kernel)?
            }
            None => predict_kernels(
                &aligned_low[i],
                &aligned_low[i + 1],
                &config.flow,
                &config.kernel,
            )?,
        };
        max_clamped = max_clamped.max(pair.clamped_fraction);
        pairs.push(pair);
    }

    // Half-res frames warped into base space, encoded in the soft-gamma
    // rendering colorspace on creation.
    let k = config.color.soft_gamma_k;
    let (half_w, half_h) = (burst.half[0].width(), burst.half[0].height());
    let warped_half: Vec<ImageBuf> = (0..n)
        .map(|i| {
            let field = solution.displacement_field(i, half_w, half_h, LOW_TO_HALF);
            burst.half[i].warp_by_field(&field).map(|v| soft_gamma(v, k))
        })
        .collect();

    let opts = AccumulateOpts {
        samples_per_px: config.render.samples_per_px,
        max_samples: config.render.max_samples,
        map_scale: LOW_TO_HALF,
        interpolation: config.render.interpolation,
        soft_gamma_k: Some(k),
        speed_epsilon: 1e-3,
    };
    let blurred_half = accumulate_burst(&warped_half, &pairs, &opts);
    Ok(RenderProducts {
        pairs,
        blurred_half,
        max_clamped_fraction: max_clamped,
    })
}

/// The final image plus the masks that shaped it (dumpable for debugging).
pub struct CompositeProducts {
    pub image: ImageBuf,
    pub flow_mask: ImageBuf,
    pub face_mask: ImageBuf,
    pub mask: ImageBuf,
}

pub fn stage_composite(
    burst: &LoadedBurst,
    set: &TrackSet,
    solution: &AlignmentSolution,
    n_selected: usize,
    products: &RenderProducts,
    config: &PipelineConfig,
) -> CompositeProducts {
    let (half_w, half_h) = (burst.half[0].width(), burst.half[0].height());

    let flow_fields: Vec<&ImageBuf> = products.pairs.iter().map(|p| &p.a.delta).collect();
    let flow_mask_low = compute_flow_mask(&flow_fields, &config.composite);
    let flow_mask_half = flow_mask_low.upsample_bilinear(half_w, half_h);
    let guide = &burst.half[0];
    let refined = refine_mask_edge_aware(&flow_mask_half, guide, &config.composite);

    let half_scale = 1.0 / HALF_FACTOR as f32;
    let mut regions = burst.face_regions(half_scale);
    fill_face_motion(
        &mut regions,
        set,
        &solution.transforms[..n_selected.min(solution.transforms.len())],
        LOW_TO_HALF,
    );
    let faces = face_protection_mask(&regions, half_w, half_h, n_selected, &config.composite);
    let mask = combine_masks(&refined, &faces);
    let image = composite_final(&burst.full[0], &products.blurred_half, &mask);
    CompositeProducts {
        image,
        flow_mask: refined,
        face_mask: faces,
        mask,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub mode: BlurMode,
    pub base_manifest_index: usize,
    pub processing_manifest_indices: Vec<usize>,
    pub velocity_estimate_pct: Option<f32>,
    pub plan_duration_s: Option<f32>,
    pub plan_stride: Option<usize>,
    pub selected_count: usize,
    pub trail_estimate_pct: f32,
    pub transforms: Vec<(f32, f32, f32, f32)>,
    pub max_clamped_fraction: f32,
    pub fallback: Option<String>,
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mode = match self.mode {
            BlurMode::ForegroundBlur => "foreground_blur",
            BlurMode::BackgroundBlur => "background_blur",
        };
        let _ = writeln!(s, "mode: {mode}");
        let _ = writeln!(s, "base_frame: {}", self.base_manifest_index);
        let _ = writeln!(
            s,
            "processing_frames: {}",
            self.processing_manifest_indices
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(",")
        );
        if let Some(v) = self.velocity_estimate_pct {
            let _ = writeln!(s, "velocity_estimate_pct_per_frame: {v:.4}");
        }
        if let (Some(d), Some(st)) = (self.plan_duration_s, self.plan_stride) {
            let _ = writeln!(s, "capture_plan_duration_s: {d:.4}");
            let _ = writeln!(s, "capture_plan_stride: {st}");
        }
        let _ = writeln!(s, "selected_frames: {}", self.selected_count);
        let _ = writeln!(s, "trail_estimate_pct_diag: {:.4}", self.trail_estimate_pct);
        let _ = writeln!(
            s,
            "max_kernel_clamped_fraction: {:.6}",
            self.max_clamped_fraction
        );
        for (i, (scale, theta, tx, ty)) in self.transforms.iter().enumerate() {
            let _ = writeln!(
                s,
                "transform {i}: scale={scale:.6} theta={theta:.6} tx={tx:.4} ty={ty:.4}"
            );
        }
        match &self.fallback {
            Some(reason) => {
                let _ = writeln!(s, "fallback: {reason}");
            }
            None => {
                let _ = writeln!(s, "fallback: none");
            }
        }
        s
    }
}

pub struct RunOutput {
    /// The sharp base frame at full resolution.
    pub conventional: ImageBuf,
    /// The long exposure; absent when the run fell back to sharp only.
    pub long_exposure: Option<ImageBuf>,
    pub report: Report,
}

/// Execute the full pipeline. Fallback-class failures (motion overflow,
/// solver divergence, missing subject) still return the conventional output
/// with the reason recorded in the report.
pub fn run(manifest: &BurstManifest, config: &PipelineConfig) -> Result<RunOutput> {
    if config.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::Manifest(format!("thread pool: {e}")))?;
        pool.install(|| run_inner(manifest, config))
    } else {
        run_inner(manifest, config)
    }
}

fn run_inner(manifest: &BurstManifest, config: &PipelineConfig) -> Result<RunOutput> {
    let burst = load_and_plan(manifest, config)?;
    let mut report = Report {
        mode: burst.mode,
        base_manifest_index: burst.base_manifest_index,
        processing_manifest_indices: burst.processing.clone(),
        velocity_estimate_pct: burst.velocity_estimate_pct,
        plan_duration_s: burst.plan.as_ref().map(|p| p.duration_s),
        plan_stride: burst.plan.as_ref().map(|p| p.stride),
        selected_count: 0,
        trail_estimate_pct: 0.0,
        transforms: Vec::new(),
        max_clamped_fraction: 0.0,
        fallback: None,
    };
    let conventional = burst.full[0].clone();

    struct Finished {
        image: ImageBuf,
        n_selected: usize,
        estimate: f32,
        transforms: Vec<(f32, f32, f32, f32)>,
        clamped: f32,
    }
    let result = (|| -> Result<Finished> {
        let (_subject, set) = stage_track(&burst, config)?;
        let solution = stage_align(&burst, &set, config)?;
        let (n_selected, estimate) = stage_select(&burst, &set, &solution, config);
        let products = stage_render(&burst, &solution, n_selected, config, None)?;
        let composite = stage_composite(&burst, &set, &solution, n_selected, &products, config);
        let final_image = composite.image;
        let transforms = solution.transforms[..n_selected]
            .iter()
            .map(|t| (t.scale, t.theta, t.t.x, t.t.y))
            .collect();
        Ok(Finished {
            image: final_image,
            n_selected,
            estimate,
            transforms,
            clamped: products.max_clamped_fraction,
        })
    })();

    match result {
        Ok(done) => {
            report.selected_count = done.n_selected;
            report.trail_estimate_pct = done.estimate;
            report.transforms = done.transforms;
            report.max_clamped_fraction = done.clamped;
            Ok(RunOutput {
                conventional,
                long_exposure: Some(done.image),
                report,
            })
        }
        Err(e) if e.is_sharp_fallback() => {
            report.fallback = Some(e.to_string());
            Ok(RunOutput {
                conventional,
                long_exposure: None,
                report,
            })
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_round_trip_toml() {
        let config = PipelineConfig::default();
        let text = toml::to_string_pretty(&config).unwrap();
        let back = PipelineConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.solver.lambda_b, config.solver.lambda_b);
        assert_eq!(back.tracking.grid_cell_px, config.tracking.grid_cell_px);
        assert_eq!(back.composite.alpha, config.composite.alpha);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let config = PipelineConfig::from_toml_str("seed = 7\n").unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.kernel.max_delta_px, 64.0);
    }
}
