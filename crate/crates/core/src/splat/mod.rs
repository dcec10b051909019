//! Gaussian scene representation and the differentiable CPU renderer.

mod gaussian;
mod image;
mod project;
mod raster;

pub use gaussian::{
    covariance, eval_gaussian, logit, quat_matrix_vjp, quat_to_matrix, sigmoid, Gaussian, GaussianSet,
    DEFAULT_EMBED_DIM,
};
pub use image::{load_mask, load_png, save_png, to_rgb8, Image};
pub use project::{
    project_backward, project_gaussians, project_gaussians_with, Camera, ProjectGrads, ProjectOptions, Splat2D,
    SplatGrad, COV_FLOOR, MIP_FILTER_SIGMA, NEAR_PLANE,
};
pub use raster::{
    render, render_backward, RenderAdjoint, RenderOptions, RenderOutput, RenderStats, ALPHA_CLAMP, MIN_ALPHA,
    TRANSMITTANCE_CUTOFF,
};
