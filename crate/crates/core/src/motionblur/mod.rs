//! Motion prediction and blur synthesis.
//!
//! Per frame pair the pipeline predicts a pair of kernel maps (line segments
//! plus a scalar weight per input frame) from dense flow, then renders blur
//! either with the single-pair line-kernel integral or with the multi-pair
//! spline accumulation that spans the whole burst.

mod render;
mod spline;

pub use render::{
    kernel_pair_from_flows,
    accumulate_burst, render_pair_linear, AccumulateOpts, InterpolationMode, RenderOpts,
    WeightMode,
};
pub use spline::{extrapolate_flow_endpoint, instantaneous_flow, HermitePath};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{estimate_flow, DenseFlowParams};
use crate::image_buf::ImageBuf;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KernelParams {
    /// Line segments are clamped to this magnitude (low-res px), matching the
    /// motion disparity the predictor can represent.
    pub max_delta_px: f32,
    /// Clamping more than this fraction of pixels aborts to the sharp output.
    pub max_clamp_fraction: f32,
    /// Forward-backward consistency error (px) at which a side's weight has
    /// dropped to half; weights shift toward the consistent side.
    pub consistency_midpoint_px: f32,
    pub consistency_slope_px: f32,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            max_delta_px: 64.0,
            max_clamp_fraction: 0.10,
            consistency_midpoint_px: 2.0,
            consistency_slope_px: 0.5,
        }
    }
}

/// Per-pixel line segments and scalar weight for one input frame of a pair.
/// `delta` holds the frame's motion within the pair: the forward flow for the
/// earlier frame, the backward flow for the later one. Weights of the two
/// maps of a pair sum to one per pixel.
#[derive(Debug, Clone)]
pub struct KernelMap {
    pub delta: ImageBuf,
    pub weight: ImageBuf,
}

/// Kernel maps for both frames of a pair plus clamp diagnostics.
#[derive(Debug, Clone)]
pub struct KernelPair {
    pub a: KernelMap,
    pub b: KernelMap,
    pub clamped_fraction: f32,
}

fn logistic(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Build kernel maps from precomputed dense flow fields (`flow_ab` maps
/// frame a content into b, `flow_ba` the reverse). Weights come from
/// forward-backward consistency; segments are clamped to the disparity cap
/// and the run aborts to sharp output when too much of the image clamps.
pub fn predict_kernels_from_flow(
    flow_ab: &ImageBuf,
    flow_ba: &ImageBuf,
    params: &KernelParams,
) -> Result<KernelPair> {
    assert!(flow_ab.dims_match(flow_ba));
    assert_eq!(flow_ab.channels(), 2);
    let (w, h) = (flow_ab.width(), flow_ab.height());

    let mut delta_a = ImageBuf::new(w, h, 2);
    let mut delta_b = ImageBuf::new(w, h, 2);
    let mut weight_a = ImageBuf::new(w, h, 1);
    let mut weight_b = ImageBuf::new(w, h, 1);
    let mut clamped = 0usize;

    for y in 0..h {
        for x in 0..w {
            let fwd = flow_ab.sample_vec2(x as f32, y as f32);
            let bwd = flow_ba.sample_vec2(x as f32, y as f32);

            // Round-trip error of each side.
            let fwd_end = Vec2::new(x as f32 + fwd.x, y as f32 + fwd.y);
            let e_a = (fwd + flow_ba.sample_vec2(fwd_end.x, fwd_end.y)).norm();
            let bwd_end = Vec2::new(x as f32 + bwd.x, y as f32 + bwd.y);
            let e_b = (bwd + flow_ab.sample_vec2(bwd_end.x, bwd_end.y)).norm();

            let conf_a = logistic(
                (params.consistency_midpoint_px - e_a) / params.consistency_slope_px,
            );
            let conf_b = logistic(
                (params.consistency_midpoint_px - e_b) / params.consistency_slope_px,
            );
            let sum = (conf_a + conf_b).max(1e-9);
            weight_a.set(x, y, 0, conf_a / sum);
            weight_b.set(x, y, 0, conf_b / sum);

            let mut da = fwd;
            if da.norm() > params.max_delta_px {
                da = da.clamp_norm(params.max_delta_px);
                clamped += 1;
            }
            let mut db = bwd;
            if db.norm() > params.max_delta_px {
                db = db.clamp_norm(params.max_delta_px);
                clamped += 1;
            }
            delta_a.set(x, y, 0, da.x);
            delta_a.set(x, y, 1, da.y);
            delta_b.set(x, y, 0, db.x);
            delta_b.set(x, y, 1, db.y);
        }
    }

    let clamped_fraction = clamped as f32 / (2 * w * h) as f32;
    if clamped_fraction > params.max_clamp_fraction {
        return Err(Error::MotionOverflow {
            clamped_fraction: clamped_fraction * 100.0,
        });
    }
    Ok(KernelPair {
        a: KernelMap {
            delta: delta_a,
            weight: weight_a,
        },
        b: KernelMap {
            delta: delta_b,
            weight: weight_b,
        },
        clamped_fraction,
    })
}

/// Estimate flow both ways between two aligned grayscale frames and build the
/// kernel maps.
pub fn predict_kernels(
    gray_a: &ImageBuf,
    gray_b: &ImageBuf,
    flow_params: &DenseFlowParams,
    kernel_params: &KernelParams,
) -> Result<KernelPair> {
    let fwd = estimate_flow(gray_a, gray_b, flow_params);
    let bwd = estimate_flow(gray_b, gray_a, flow_params);
    predict_kernels_from_flow(&fwd, &bwd, kernel_params)
}

use crate::geom::Vec2;
