//! Tiny radiance field, volume renderer with analytic backprop, and
//! score-distillation optimization against the multi-view denoiser.

mod field;
mod render;
mod sds;

pub use field::{FieldConfig, PointEval, RadianceField};
pub use render::{camera_ray, composite, render, render_vjp, Composite, Ray, RaySamples, Rendering, SAMPLES_PER_RAY, SCENE_HALF_DEPTH};
pub use sds::{
    optimize_nerf, render_rig_latent, sds_gradient, sds_gradient_at, IterationLog, Optimization, SdsConfig, SdsGuide, SdsStep, TargetPull,
    Weighting,
};
