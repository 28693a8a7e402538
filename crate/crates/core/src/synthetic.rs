//! Known scenes and camera rigs for regression tests and demos.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::optim::{FitConfig, View};
use crate::raster::{rasterize, RenderOptions};
use crate::variational::{sample_semantic, Noise};
use crate::model::{activate_params, logit, Camera, GaussianParamsRaw, ScaleRange, ShLayout};
use crate::sh::SH_C0;

/// `count` cameras on a ring of radius `radius` around the origin, at
/// alternating heights, all looking at the origin. `phase` rotates the ring.
pub fn orbit_cameras(count: usize, radius: f64, size: u32, phase: f64) -> Result<Vec<Camera>> {
    (0..count)
        .map(|i| {
            let a = phase + std::f64::consts::TAU * i as f64 / count as f64;
            let h = if i % 2 == 0 { 0.35 } else { -0.25 } * radius;
            let eye = Vector3::new(radius * a.cos(), h, radius * a.sin());
            Camera::look_at(eye, Vector3::zeros(), Vector3::y(), size, size, size as f64 * 1.1, 0.1, 4.0 * radius)
        })
        .collect()
}

/// Scale range used by [`blob_scene`].
pub fn blob_scale_range() -> ScaleRange {
    ScaleRange::new(0.005, 1.0).expect("valid range")
}

/// `n` fairly opaque, mildly view-dependent Gaussians inside the unit ball.
/// Colors stay inside the clamp, so the first three feature channels render
/// the same image as RGB when sampled at their means.
pub fn blob_scene(n: usize, seed: u64) -> GaussianParamsRaw {
    let layout = ShLayout::default();
    let sr = blob_scale_range();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = GaussianParamsRaw::zeros(n, layout);
    let (rl, fl, kr, kf) = (layout.rgb_len(), layout.feat_len(), layout.k_rgb(), layout.k_feat());
    for i in 0..n {
        let p = loop {
            let p = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if p.norm() <= 1.0 {
                break p * 0.8;
            }
        };
        raw.position[3 * i..3 * i + 3].copy_from_slice(p.as_slice());
        let base = rng.gen_range(0.08..0.2);
        for a in 0..3 {
            raw.scale_raw[3 * i + a] = sr.inverse(base * rng.gen_range(0.6..1.4));
        }
        for k in 0..4 {
            raw.rotation_raw[4 * i + k] = rng.gen_range(-1.0..1.0);
        }
        raw.rotation_raw[4 * i] += 0.5;
        raw.opacity_raw[i] = logit(rng.gen_range(0.6..0.95));
        for ch in 0..3 {
            raw.sh_rgb[i * rl + ch * kr] = rng.gen_range(-1.2..1.2);
            for k in 1..4 {
                raw.sh_rgb[i * rl + ch * kr + k] = rng.gen_range(-0.1..0.1);
            }
        }
        // decoded feature channels reproduce the color: same bands, with the
        // color offset folded into the constant band
        for ch in 0..3 {
            for k in 0..4 {
                raw.feat_mu[i * fl + ch * kf + k] = raw.sh_rgb[i * rl + ch * kr + k];
            }
            raw.feat_mu[i * fl + ch * kf] += 0.5 / SH_C0;
        }
        for v in &mut raw.feat_log_sigma[i * fl..(i + 1) * fl] {
            *v = (0.05f64).ln();
        }
    }
    raw
}

/// RGB renderings of a scene at its feature means.
pub fn render_views(raw: &GaussianParamsRaw, scale_range: ScaleRange, cameras: &[Camera]) -> Result<Vec<View>> {
    let sg = sample_semantic(&activate_params(raw, scale_range)?, Noise::Zero);
    cameras
        .iter()
        .map(|camera| {
            let image = rasterize(&sg, camera, RenderOptions::default())?.rgb;
            Ok(View {
                camera: camera.clone(),
                image,
            })
        })
        .collect()
}

/// The fitting regression: a 100-Gaussian [`blob_scene`] seen by nine orbit
/// cameras at 64x64. Returns the eight training views and the held-out one.
pub fn regression_views(scene_seed: u64) -> Result<(Vec<View>, View)> {
    let cams = orbit_cameras(9, 4.0, 64, 0.0)?;
    let mut views = render_views(&blob_scene(100, scene_seed), blob_scale_range(), &cams)?;
    let hold = views.pop().expect("nine views");
    Ok((views, hold))
}

/// Fit settings for [`regression_views`]: constant-band color only and two
/// views per iteration.
pub fn regression_config(seed: u64) -> FitConfig {
    FitConfig {
        iterations: 2000,
        seed,
        max_sh_degree: 0,
        views_per_iteration: 2,
        eval_every: 0,
        ..FitConfig::default()
    }
}
