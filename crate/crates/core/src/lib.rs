//! Differentiable splatting of variational 3D Gaussians.
//!
//! A scene is a set of Gaussians whose view-dependent feature coefficients
//! are normal distributions. Concrete instances are drawn with the
//! reparameterization `h = mu + eps * sigma`, rendered by a tiled CPU
//! splatting rasterizer together with their RGB colors, and differentiated
//! by a hand-written backward pass. Around that core sit an epipolar and
//! depth-bin toolkit, losses and metrics, an Adam optimizer with a
//! scene-fitting loop, and binary/text persistence formats.

pub mod error;
pub mod geometry;
pub mod grad;
pub mod io;
pub mod model;
pub mod optim;
pub mod raster;
pub mod sh;
pub mod synthetic;
pub mod variational;

pub use error::{Error, Result};
pub use model::{
    activate_params, build_cov3d, validate_scene, Camera, GaussianParamsRaw, Image, LossWeights,
    ScaleRange, SemanticGaussians, ShLayout, SplatAttributes, VariationalGaussians,
};
pub use raster::{rasterize, rasterize_reference, RenderOptions, RenderOutput};
