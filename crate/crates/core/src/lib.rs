//! Computational long exposure photography from image bursts.
//!
//! Given a burst of frames this library detects and tracks a subject (or the
//! background), aligns the frames, synthesizes smooth motion-blur trails that
//! span the burst, and composites the result with the sharp base frame so that
//! stationary regions and low-motion faces stay crisp.
//!
//! The pipeline runs at three resolutions: a low-resolution stream (8x
//! downsampled) drives subject detection, tracking, alignment and motion
//! prediction; blur is rendered at half resolution; compositing brings the
//! result back to full resolution.

pub mod alignment;
pub mod burst_io;
pub mod compositing;
pub mod dump;
pub mod error;
pub mod flow;
pub mod geom;
pub mod image_buf;
pub mod motionblur;
pub mod pipeline;
pub mod selection;
pub mod subject;
pub mod synth;
pub mod tracking;

pub use error::{Error, Result};
pub use image_buf::ImageBuf;
