//! Analytic backward pass through compositing, projection, covariance
//! construction, spherical harmonics, activations and sampling, plus a
//! central-difference checker for it.
//!
//! The backward pass re-runs each pixel's compositing from the saved sort
//! order and walks the contributing splats back to front, so nothing
//! per-pixel is stored by the forward pass. Tiles accumulate into private
//! buffers that are reduced in tile order, which keeps results bit-identical
//! between serial and parallel execution.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    activate_params, quat_to_matrix, Camera, GaussianParamsRaw, Image, ScaleRange, SemanticGaussians,
    ShLayout,
};
use crate::raster::{self, ForwardState, RenderOptions, RenderOutput, ALPHA_MAX, TILE_SIZE};
use crate::sh;
use crate::variational::{sample_semantic, Noise};

/// dL/d(rendered image) for each differentiable output.
#[derive(Clone, Debug, PartialEq)]
pub struct Upstream {
    pub rgb: Image,
    pub features: Image,
    pub alpha: Image,
}

impl Upstream {
    pub fn filled(width: usize, height: usize, feat_dim: usize, value: f64) -> Self {
        Upstream {
            rgb: Image::filled(width, height, 3, value),
            features: Image::filled(width, height, feat_dim, value),
            alpha: Image::filled(width, height, 1, value),
        }
    }

    pub fn zeros(width: usize, height: usize, feat_dim: usize) -> Self {
        Self::filled(width, height, feat_dim, 0.0)
    }

    /// Gradient of `sum(rgb) + sum(features) + sum(alpha)`.
    pub fn ones(width: usize, height: usize, feat_dim: usize) -> Self {
        Self::filled(width, height, feat_dim, 1.0)
    }

    /// `a * self + b * other`
    pub fn combine(&self, a: f64, other: &Upstream, b: f64) -> Upstream {
        let mix = |x: &Image, y: &Image| Image {
            data: x.data.iter().zip(&y.data).map(|(p, q)| a * p + b * q).collect(),
            ..x.clone()
        };
        Upstream {
            rgb: mix(&self.rgb, &other.rgb),
            features: mix(&self.features, &other.features),
            alpha: mix(&self.alpha, &other.alpha),
        }
    }
}

/// Gradients with respect to the activated (constrained) Gaussian attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGrad {
    pub positions: Vec<Vector3<f64>>,
    pub scales: Vec<Vector3<f64>>,
    /// With respect to the four components of the unit quaternion.
    pub rotations: Vec<[f64; 4]>,
    pub opacities: Vec<f64>,
    pub sh_rgb: Vec<f64>,
    /// With respect to the sampled feature coefficients `h`.
    pub features: Vec<f64>,
}

impl SplatGrad {
    pub fn zeros(n: usize, layout: ShLayout) -> Self {
        SplatGrad {
            positions: vec![Vector3::zeros(); n],
            scales: vec![Vector3::zeros(); n],
            rotations: vec![[0.0; 4]; n],
            opacities: vec![0.0; n],
            sh_rgb: vec![0.0; n * layout.rgb_len()],
            features: vec![0.0; n * layout.feat_len()],
        }
    }
}

/// Gradients with respect to the raw parameters, plus the sampled
/// coefficients and the activated sigma.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub position: Vec<f64>,
    pub scale_raw: Vec<f64>,
    pub rotation_raw: Vec<f64>,
    pub opacity_raw: Vec<f64>,
    pub sh_rgb: Vec<f64>,
    pub feat_mu: Vec<f64>,
    pub feat_log_sigma: Vec<f64>,
    /// dL/dh
    pub h: Vec<f64>,
    /// dL/dh_sigma = dL/dh * eps
    pub h_sigma: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_like(raw: &GaussianParamsRaw) -> Self {
        GradientSet {
            position: vec![0.0; raw.position.len()],
            scale_raw: vec![0.0; raw.scale_raw.len()],
            rotation_raw: vec![0.0; raw.rotation_raw.len()],
            opacity_raw: vec![0.0; raw.opacity_raw.len()],
            sh_rgb: vec![0.0; raw.sh_rgb.len()],
            feat_mu: vec![0.0; raw.feat_mu.len()],
            feat_log_sigma: vec![0.0; raw.feat_log_sigma.len()],
            h: vec![0.0; raw.feat_mu.len()],
            h_sigma: vec![0.0; raw.feat_mu.len()],
        }
    }

    /// Raw-parameter groups, in the order of [`GaussianParamsRaw::groups`].
    pub fn groups(&self) -> [(&'static str, &[f64]); 7] {
        [
            ("position", &self.position),
            ("scale", &self.scale_raw),
            ("rotation", &self.rotation_raw),
            ("opacity", &self.opacity_raw),
            ("sh_rgb", &self.sh_rgb),
            ("feat_mu", &self.feat_mu),
            ("feat_log_sigma", &self.feat_log_sigma),
        ]
    }

    fn all_mut(&mut self) -> [&mut Vec<f64>; 9] {
        [
            &mut self.position,
            &mut self.scale_raw,
            &mut self.rotation_raw,
            &mut self.opacity_raw,
            &mut self.sh_rgb,
            &mut self.feat_mu,
            &mut self.feat_log_sigma,
            &mut self.h,
            &mut self.h_sigma,
        ]
    }

    /// `self += other`
    pub fn accumulate(&mut self, other: &GradientSet) {
        let mut other = other.clone();
        for (a, b) in self.all_mut().into_iter().zip(other.all_mut()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.all_mut() {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.groups().iter().all(|(_, g)| g.iter().all(|v| *v == 0.0))
            && self.h.iter().chain(&self.h_sigma).all(|v| *v == 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackwardOptions {
    pub parallel: bool,
    /// Multiplies dalpha/dopacity. Anything other than 1 corrupts the
    /// gradient; it exists so the checker can be shown to catch errors.
    pub opacity_grad_scale: f64,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        BackwardOptions {
            parallel: true,
            opacity_grad_scale: 1.0,
        }
    }
}

/// Screen-space gradients for one prepared splat.
#[derive(Clone, Debug)]
struct ScreenGrad {
    payload: Vec<f64>,
    mean2d: Vector2<f64>,
    /// dL/d(a, b, c) of the conic `[[a, b], [b, c]]`.
    conic: [f64; 3],
    opacity: f64,
}

impl ScreenGrad {
    fn zeros(channels: usize) -> Self {
        ScreenGrad {
            payload: vec![0.0; channels],
            mean2d: Vector2::zeros(),
            conic: [0.0; 3],
            opacity: 0.0,
        }
    }

    fn add(&mut self, o: &ScreenGrad) {
        for (a, b) in self.payload.iter_mut().zip(&o.payload) {
            *a += b;
        }
        self.mean2d += o.mean2d;
        for k in 0..3 {
            self.conic[k] += o.conic[k];
        }
        self.opacity += o.opacity;
    }
}

struct Contribution {
    pos: usize,
    alpha: f64,
    g: f64,
    transmittance: f64,
    clamped: bool,
}

/// Gradients of compositing with respect to per-splat payloads, means,
/// conics and opacities. `pixel_grad(x, y, out)` writes `channels + 1`
/// upstream values (payload channels, then alpha).
fn composite_backward<F>(
    state: &ForwardState,
    width: usize,
    height: usize,
    pixel_grad: F,
    opts: BackwardOptions,
) -> Vec<ScreenGrad>
where
    F: Fn(usize, usize, &mut [f64]) + Sync,
{
    let c = state.channels;
    let tile_pass = |tile: usize| -> Vec<ScreenGrad> {
        let list = &state.tiles[tile];
        let mut local = vec![ScreenGrad::zeros(c); list.len()];
        let tx = tile % state.tiles_x;
        let ty = tile / state.tiles_x;
        let (x0, y0) = (tx * TILE_SIZE, ty * TILE_SIZE);
        let (x1, y1) = ((x0 + TILE_SIZE).min(width), (y0 + TILE_SIZE).min(height));
        let mut up = vec![0.0; c + 1];
        let mut contribs: Vec<Contribution> = Vec::with_capacity(list.len());
        let mut accum = vec![0.0; c];
        for y in y0..y1 {
            for x in x0..x1 {
                pixel_grad(x, y, &mut up);
                if up.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                contribs.clear();
                let mut t = 1.0;
                for (pos, &k) in list.iter().enumerate() {
                    let s = &state.splats[k];
                    let Some((alpha, g)) = raster::splat_alpha(s, px, py) else {
                        continue;
                    };
                    contribs.push(Contribution {
                        pos,
                        alpha,
                        g,
                        transmittance: t,
                        clamped: s.opacity * g > ALPHA_MAX,
                    });
                    t *= 1.0 - alpha;
                    if t < raster::TRANSMITTANCE_MIN {
                        break;
                    }
                }
                accum.fill(0.0);
                let mut accum_alpha = 0.0;
                for e in contribs.iter().rev() {
                    let k = list[e.pos];
                    let s = &state.splats[k];
                    let v = &state.payload[k * c..(k + 1) * c];
                    let gr = &mut local[e.pos];
                    let w = e.transmittance * e.alpha;
                    let mut d_alpha = 0.0;
                    for ch in 0..c {
                        gr.payload[ch] += w * up[ch];
                        d_alpha += (v[ch] - accum[ch]) * up[ch];
                        accum[ch] = e.alpha * v[ch] + (1.0 - e.alpha) * accum[ch];
                    }
                    d_alpha += (1.0 - accum_alpha) * up[c];
                    d_alpha *= e.transmittance;
                    accum_alpha = e.alpha + (1.0 - e.alpha) * accum_alpha;
                    if e.clamped {
                        continue;
                    }
                    gr.opacity += d_alpha * e.g * opts.opacity_grad_scale;
                    let d_power = d_alpha * s.opacity * e.g;
                    let dx = px - s.mean2d.x;
                    let dy = py - s.mean2d.y;
                    let [a, b, cc] = s.conic;
                    gr.mean2d += d_power * Vector2::new(a * dx + b * dy, b * dx + cc * dy);
                    gr.conic[0] += -0.5 * dx * dx * d_power;
                    gr.conic[1] += -dx * dy * d_power;
                    gr.conic[2] += -0.5 * dy * dy * d_power;
                }
            }
        }
        local
    };
    let n_tiles = state.tiles.len();
    let per_tile: Vec<Vec<ScreenGrad>> = if opts.parallel {
        (0..n_tiles).into_par_iter().map(tile_pass).collect()
    } else {
        (0..n_tiles).map(tile_pass).collect()
    };
    let mut total = vec![ScreenGrad::zeros(c); state.splats.len()];
    for (tile, grads) in per_tile.iter().enumerate() {
        for (pos, g) in grads.iter().enumerate() {
            total[state.tiles[tile][pos]].add(g);
        }
    }
    total
}

/// Gradient of the rotation matrix entries pulled back to the quaternion components.
fn rotation_matrix_backward(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let m = |r: usize, c: usize| g[(r, c)];
    [
        2.0 * (-z * m(0, 1) + y * m(0, 2) + z * m(1, 0) - x * m(1, 2) - y * m(2, 0) + x * m(2, 1)),
        2.0 * (y * m(0, 1) + z * m(0, 2) + y * m(1, 0) - 2.0 * x * m(1, 1) - w * m(1, 2) + z * m(2, 0)
            + w * m(2, 1)
            - 2.0 * x * m(2, 2)),
        2.0 * (-2.0 * y * m(0, 0) + x * m(0, 1) + w * m(0, 2) + x * m(1, 0) + z * m(1, 2) - w * m(2, 0)
            + z * m(2, 1)
            - 2.0 * y * m(2, 2)),
        2.0 * (-2.0 * z * m(0, 0) - w * m(0, 1) + x * m(0, 2) + w * m(1, 0) - 2.0 * z * m(1, 1)
            + y * m(1, 2)
            + x * m(2, 0)
            + y * m(2, 1)),
    ]
}

/// Geometry part of the chain: screen-space mean and conic gradients back to
/// world position, scale and rotation.
fn projection_backward(
    s: &raster::PreparedSplat,
    cam: &Camera,
    scale: &Vector3<f64>,
    rot: &[f64; 4],
    d_mean2d: &Vector2<f64>,
    d_conic: &[f64; 3],
) -> (Vector3<f64>, Vector3<f64>, [f64; 4]) {
    let [a, b, c] = s.conic;
    let q = Matrix2::new(a, b, b, c);
    let g_q = Matrix2::new(d_conic[0], 0.5 * d_conic[1], 0.5 * d_conic[1], d_conic[2]);
    let g_cov2d = -(q * g_q * q);

    let t = s.cam_point;
    let w = cam.rotation_matrix();
    let j = raster::projection_jacobian(cam, &t);
    let m = j * w;
    let r = quat_to_matrix(rot);
    let s2 = Matrix3::from_diagonal(&scale.component_mul(scale));
    let cov3d = r * s2 * r.transpose();

    let g_cov3d = m.transpose() * g_cov2d * m;
    let g_m = 2.0 * g_cov2d * m * cov3d;
    let g_j = g_m * w.transpose();

    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut d_t = Vector3::new(
        g_j[(0, 2)] * (-fx * iz2),
        g_j[(1, 2)] * (-fy * iz2),
        g_j[(0, 0)] * (-fx * iz2)
            + g_j[(0, 2)] * (2.0 * fx * t.x * iz3)
            + g_j[(1, 1)] * (-fy * iz2)
            + g_j[(1, 2)] * (2.0 * fy * t.y * iz3),
    );
    d_t.x += d_mean2d.x * fx * iz;
    d_t.y += d_mean2d.y * fy * iz;
    d_t.z += -d_mean2d.x * fx * t.x * iz2 - d_mean2d.y * fy * t.y * iz2;

    let d_position = w.transpose() * d_t;

    let rt_g_r = r.transpose() * g_cov3d * r;
    let d_scale = Vector3::new(
        2.0 * scale.x * rt_g_r[(0, 0)],
        2.0 * scale.y * rt_g_r[(1, 1)],
        2.0 * scale.z * rt_g_r[(2, 2)],
    );
    let g_r = 2.0 * g_cov3d * r * s2;
    (d_position, d_scale, rotation_matrix_backward(rot, &g_r))
}

fn check_upstream(up: &Upstream, cam: &Camera, d: usize) -> Result<()> {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let ok = |img: &Image, ch: usize| img.width == w && img.height == h && img.channels == ch;
    if !ok(&up.rgb, 3) || !ok(&up.features, d) || !ok(&up.alpha, 1) {
        return Err(Error::ShapeMismatch("upstream gradient images do not match the render".into()));
    }
    Ok(())
}

/// Backward pass of [`raster::rasterize`] with respect to the activated
/// attributes and sampled feature coefficients.
pub fn rasterize_backward_splats(
    sg: &SemanticGaussians,
    cam: &Camera,
    output: &RenderOutput,
    upstream: &Upstream,
    opts: BackwardOptions,
) -> Result<SplatGrad> {
    let state = output.saved.as_ref().ok_or(Error::MissingSavedState)?;
    let layout = sg.layout();
    let d = layout.feat_dim;
    check_upstream(upstream, cam, d)?;
    if state.channels != 3 + d || state.contributions.len() != sg.len() {
        return Err(Error::ShapeMismatch("saved state belongs to a different scene".into()));
    }
    let (w, h) = (cam.width as usize, cam.height as usize);
    let screen = composite_backward(
        state,
        w,
        h,
        |x, y, out| {
            out[..3].copy_from_slice(upstream.rgb.pixel(x, y));
            out[3..3 + d].copy_from_slice(upstream.features.pixel(x, y));
            out[3 + d] = upstream.alpha.get(x, y, 0);
        },
        opts,
    );

    let (k_rgb, k_feat) = (layout.k_rgb(), layout.k_feat());
    let per_splat = |k: usize| {
        let s = &state.splats[k];
        let i = s.index;
        let gs = &screen[k];
        let dir = state.view_dirs[k];

        let mut d_sh_rgb = vec![0.0; 3 * k_rgb];
        let mut d_feat = vec![0.0; d * k_feat];
        let mut d_dir = Vector3::zeros();
        let basis = sh::basis_with_gradient(&dir, layout.lmax_rgb);
        let coeffs = sg.attrs.sh_rgb_of(i);
        for ch in 0..3 {
            let cs = &coeffs[ch * k_rgb..(ch + 1) * k_rgb];
            let dot: f64 = cs.iter().zip(&basis).map(|(c, b)| c * b.v).sum();
            if dot + 0.5 <= 0.0 {
                continue;
            }
            let g = gs.payload[ch];
            for (kk, b) in basis.iter().enumerate() {
                d_sh_rgb[ch * k_rgb + kk] = g * b.v;
                d_dir += g * cs[kk] * Vector3::from(b.d);
            }
        }
        let basis = sh::basis_with_gradient(&dir, layout.lmax_feat);
        let hs = sg.features_of(i);
        for ch in 0..d {
            let g = gs.payload[3 + ch];
            let cs = &hs[ch * k_feat..(ch + 1) * k_feat];
            for (kk, b) in basis.iter().enumerate() {
                d_feat[ch * k_feat + kk] = g * b.v;
                d_dir += g * cs[kk] * Vector3::from(b.d);
            }
        }
        // direction = offset / |offset|
        let d_offset = (d_dir - dir * dir.dot(&d_dir)) / state.view_dist[k];

        let (d_pos, d_scale, d_rot) = projection_backward(
            s,
            cam,
            &sg.attrs.scales[i],
            &sg.attrs.rotations[i],
            &gs.mean2d,
            &gs.conic,
        );
        (i, d_pos + d_offset, d_scale, d_rot, gs.opacity, d_sh_rgb, d_feat)
    };
    let rows: Vec<_> = if opts.parallel {
        (0..state.splats.len()).into_par_iter().map(per_splat).collect()
    } else {
        (0..state.splats.len()).map(per_splat).collect()
    };

    let mut grad = SplatGrad::zeros(sg.len(), layout);
    let (rl, fl) = (layout.rgb_len(), layout.feat_len());
    for (i, dp, ds, dr, dop, dsh, dfe) in rows {
        grad.positions[i] = dp;
        grad.scales[i] = ds;
        grad.rotations[i] = dr;
        grad.opacities[i] = dop;
        grad.sh_rgb[i * rl..(i + 1) * rl].copy_from_slice(&dsh);
        grad.features[i * fl..(i + 1) * fl].copy_from_slice(&dfe);
    }
    Ok(grad)
}

/// Pulls activated-space gradients back through the activations and the
/// reparameterization `h = mu + eps * exp(log_sigma)`.
pub fn activation_backward(
    raw: &GaussianParamsRaw,
    scale_range: ScaleRange,
    epsilon: &[f64],
    g: &SplatGrad,
) -> Result<GradientSet> {
    let n = raw.len();
    if g.opacities.len() != n || epsilon.len() != raw.feat_mu.len() {
        return Err(Error::ShapeMismatch("gradient does not match parameters".into()));
    }
    let mut out = GradientSet::zeros_like(raw);
    for i in 0..n {
        for a in 0..3 {
            out.position[3 * i + a] = g.positions[i][a];
            out.scale_raw[3 * i + a] = g.scales[i][a] * scale_range.derivative(raw.scale_raw[3 * i + a]);
        }
        let r = &raw.rotation_raw[4 * i..4 * i + 4];
        let norm = (r.iter().map(|v| v * v).sum::<f64>()).sqrt();
        if !(norm > 0.0) {
            return Err(Error::DegenerateQuaternion);
        }
        let qh: Vec<f64> = r.iter().map(|v| v / norm).collect();
        let dq = &g.rotations[i];
        let proj: f64 = qh.iter().zip(dq).map(|(a, b)| a * b).sum();
        for k in 0..4 {
            out.rotation_raw[4 * i + k] = (dq[k] - qh[k] * proj) / norm;
        }
        let o = crate::model::sigmoid(raw.opacity_raw[i]);
        out.opacity_raw[i] = g.opacities[i] * o * (1.0 - o);
    }
    out.sh_rgb.copy_from_slice(&g.sh_rgb);
    out.h.copy_from_slice(&g.features);
    out.feat_mu.copy_from_slice(&g.features);
    for (k, (dh, e)) in g.features.iter().zip(epsilon).enumerate() {
        out.h_sigma[k] = dh * e;
        out.feat_log_sigma[k] = dh * e * raw.feat_log_sigma[k].exp();
    }
    Ok(out)
}

/// Full backward pass to raw parameters.
pub fn rasterize_backward(
    raw: &GaussianParamsRaw,
    scale_range: ScaleRange,
    sg: &SemanticGaussians,
    cam: &Camera,
    output: &RenderOutput,
    upstream: &Upstream,
    opts: BackwardOptions,
) -> Result<GradientSet> {
    let g = rasterize_backward_splats(sg, cam, output, upstream, opts)?;
    activation_backward(raw, scale_range, &sg.epsilon, &g)
}

/// Sum of every rgb, feature and alpha sample.
pub fn output_sum(out: &RenderOutput) -> f64 {
    out.rgb.data.iter().sum::<f64>() + out.features.data.iter().sum::<f64>() + out.alpha.data.iter().sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    /// Central-difference step on raw parameters.
    pub step: f64,
    pub rel_tol: f64,
    pub max_rel: f64,
    /// Fraction of checked coordinates that must be within `rel_tol`.
    pub pass_fraction: f64,
    pub opacity_grad_scale: f64,
    pub parallel: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-3,
            rel_tol: 1e-3,
            max_rel: 1e-2,
            pass_fraction: 0.99,
            opacity_grad_scale: 1.0,
            parallel: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateStatus {
    Checked,
    NoSignal,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoordinateCheck {
    pub group: &'static str,
    pub gaussian: usize,
    pub component: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub status: CoordinateStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub no_signal: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub fraction_within_tol: f64,
    pub passed: bool,
    /// Checked coordinates whose relative error reached `rel_tol`.
    pub offending: Vec<CoordinateCheck>,
    /// Gaussians excluded because they contribute to no pixel.
    pub no_signal_gaussians: Vec<usize>,
}

fn scene_loss(raw: &GaussianParamsRaw, scale_range: ScaleRange, cam: &Camera, noise: Noise) -> Result<f64> {
    let g = activate_params(raw, scale_range)?;
    let sg = sample_semantic(&g, noise);
    let out = raster::rasterize(&sg, cam, RenderOptions::serial())?;
    Ok(output_sum(&out))
}

/// Compares the analytic gradient of `sum(rgb) + sum(features) + sum(alpha)`
/// with central differences for every raw coordinate.
pub fn gradcheck(
    raw: &GaussianParamsRaw,
    scale_range: ScaleRange,
    cam: &Camera,
    seed: u64,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let noise = Noise::Seeded(seed);
    let g = activate_params(raw, scale_range)?;
    let sg = sample_semantic(&g, noise);
    let out = raster::rasterize(&sg, cam, RenderOptions::serial().with_state())?;
    let up = Upstream::ones(cam.width as usize, cam.height as usize, raw.layout.feat_dim);
    let bopts = BackwardOptions {
        parallel: cfg.parallel,
        opacity_grad_scale: cfg.opacity_grad_scale,
    };
    let analytic = rasterize_backward(raw, scale_range, &sg, cam, &out, &up, bopts)?;
    let contributions = &out.saved.as_ref().expect("state saved").contributions;
    let no_signal_gaussians: Vec<usize> = (0..raw.len()).filter(|&i| contributions[i] == 0).collect();

    let n = raw.len().max(1);
    let mut coords = Vec::new();
    for (gi, (name, values)) in raw.groups().iter().enumerate() {
        let per = values.len() / n;
        for idx in 0..values.len() {
            coords.push((gi, *name, idx, idx / per.max(1), idx % per.max(1)));
        }
    }
    let check = |&(gi, name, idx, gaussian, component): &(usize, &'static str, usize, usize, usize)| -> Result<CoordinateCheck> {
        let a = analytic.groups()[gi].1[idx];
        if contributions[gaussian] == 0 {
            return Ok(CoordinateCheck {
                group: name,
                gaussian,
                component,
                analytic: a,
                numeric: 0.0,
                rel_error: 0.0,
                status: CoordinateStatus::NoSignal,
            });
        }
        let mut p = raw.clone();
        p.groups_mut()[gi].1[idx] += cfg.step;
        let fp = scene_loss(&p, scale_range, cam, noise)?;
        p.groups_mut()[gi].1[idx] -= 2.0 * cfg.step;
        let fm = scene_loss(&p, scale_range, cam, noise)?;
        let fd = (fp - fm) / (2.0 * cfg.step);
        let denom = a.abs().max(fd.abs()).max(1e-6);
        Ok(CoordinateCheck {
            group: name,
            gaussian,
            component,
            analytic: a,
            numeric: fd,
            rel_error: (a - fd).abs() / denom,
            status: CoordinateStatus::Checked,
        })
    };
    let results: Vec<CoordinateCheck> = if cfg.parallel {
        coords.par_iter().map(check).collect::<Result<_>>()?
    } else {
        coords.iter().map(check).collect::<Result<_>>()?
    };

    let checked: Vec<&CoordinateCheck> = results.iter().filter(|c| c.status == CoordinateStatus::Checked).collect();
    let n_checked = checked.len();
    let max_rel_error = checked.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let mean_rel_error = if n_checked > 0 {
        checked.iter().map(|c| c.rel_error).sum::<f64>() / n_checked as f64
    } else {
        0.0
    };
    let within = checked.iter().filter(|c| c.rel_error < cfg.rel_tol).count();
    let fraction_within_tol = if n_checked > 0 { within as f64 / n_checked as f64 } else { 1.0 };
    let offending: Vec<CoordinateCheck> =
        checked.iter().filter(|c| c.rel_error >= cfg.rel_tol).map(|c| (*c).clone()).collect();
    Ok(GradcheckReport {
        checked: n_checked,
        no_signal: results.len() - n_checked,
        max_rel_error,
        mean_rel_error,
        fraction_within_tol,
        passed: fraction_within_tol >= cfg.pass_fraction && max_rel_error <= cfg.max_rel,
        offending,
        no_signal_gaussians,
    })
}

/// A camera and raw scene shaped for finite differencing: every splat covers
/// the whole image above the alpha skip threshold, opacities stay well below
/// the alpha ceiling, colors stay above the clamp, and the stack is thin
/// enough that transmittance never reaches the stop threshold. The renderer
/// is smooth in every parameter on such scenes.
pub fn gradcheck_scene(seed: u64, n: usize, size: u32) -> Result<(GaussianParamsRaw, ScaleRange, Camera)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let eye = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), -4.0);
    let focal = size as f64 * 1.2;
    let cam = Camera::look_at(eye, Vector3::zeros(), Vector3::y(), size, size, focal, 0.5, 20.0)?;
    let dist = eye.norm();
    let layout = ShLayout::default();
    let scale_range = ScaleRange::new(0.05, 20.0)?;
    let mut raw = GaussianParamsRaw::zeros(n, layout);
    // view depths on a shuffled lattice so no two splats swap order under a finite-difference step
    let forward = -eye / dist;
    let mut slots: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        slots.swap(i, rng.gen_range(0..=i));
    }
    // world sigma giving `px` pixels at the scene center
    let px_to_world = |px: f64| px * dist / focal;
    for i in 0..n {
        for a in 0..3 {
            raw.position[3 * i + a] = rng.gen_range(-0.1..0.1) * dist * size as f64 / focal;
            let sigma = px_to_world(rng.gen_range(0.45..0.9) * size as f64);
            raw.scale_raw[3 * i + a] = scale_range.inverse(sigma);
        }
        let p = Vector3::from_column_slice(&raw.position[3 * i..3 * i + 3]);
        let along = (slots[i] as f64 - (n as f64 - 1.0) / 2.0) * 0.05 + rng.gen_range(-0.01..0.01);
        let p = p - forward * p.dot(&forward) + forward * along;
        raw.position[3 * i..3 * i + 3].copy_from_slice(p.as_slice());
        for k in 0..4 {
            raw.rotation_raw[4 * i + k] = rng.gen_range(-1.0..1.0);
        }
        raw.rotation_raw[4 * i] += 1.5;
        raw.opacity_raw[i] = crate::model::logit(rng.gen_range(0.05..0.35) * (3.0 / n.max(3) as f64).sqrt().min(1.0).max(0.5));
        let rl = layout.rgb_len();
        for k in 0..rl {
            let dc = k % layout.k_rgb() == 0;
            raw.sh_rgb[i * rl + k] = if dc { rng.gen_range(-0.5..0.5) } else { rng.gen_range(-0.02..0.02) };
        }
        let fl = layout.feat_len();
        for k in 0..fl {
            raw.feat_mu[i * fl + k] = rng.gen_range(-0.5..0.5);
            raw.feat_log_sigma[i * fl + k] = rng.gen_range(-2.0..0.0);
        }
    }
    Ok((raw, scale_range, cam))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(seed: u64, n: usize, size: u32) -> (GaussianParamsRaw, ScaleRange, Camera, SemanticGaussians, RenderOutput) {
        let (raw, sr, cam) = gradcheck_scene(seed, n, size).unwrap();
        let g = activate_params(&raw, sr).unwrap();
        let sg = sample_semantic(&g, Noise::Seeded(seed));
        let out = raster::rasterize(&sg, &cam, RenderOptions::serial().with_state()).unwrap();
        (raw, sr, cam, sg, out)
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let (raw, sr, cam, sg, out) = setup(1, 4, 24);
        let up = Upstream::zeros(24, 24, 4);
        let g = rasterize_backward(&raw, sr, &sg, &cam, &out, &up, BackwardOptions::default()).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn missing_state_is_an_error() {
        let (raw, sr, cam, sg, _) = setup(1, 2, 16);
        let out = raster::rasterize(&sg, &cam, RenderOptions::serial()).unwrap();
        let up = Upstream::ones(16, 16, 4);
        assert!(matches!(
            rasterize_backward(&raw, sr, &sg, &cam, &out, &up, BackwardOptions::default()),
            Err(Error::MissingSavedState)
        ));
    }

    #[test]
    fn opacity_gradient_matches_central_difference() {
        let (mut raw, sr, cam, sg, out) = setup(2, 1, 32);
        let up = Upstream::filled(32, 32, 4, 0.0).combine(0.0, &Upstream::zeros(32, 32, 4), 0.0);
        let mut up = up;
        up.rgb.data.fill(1.0);
        let g = rasterize_backward(&raw, sr, &sg, &cam, &out, &up, BackwardOptions::default()).unwrap();
        let rgb_sum = |raw: &GaussianParamsRaw| {
            let v = activate_params(raw, sr).unwrap();
            let s = sample_semantic(&v, Noise::Seeded(2));
            raster::rasterize(&s, &cam, RenderOptions::serial()).unwrap().rgb.data.iter().sum::<f64>()
        };
        let h = 1e-3;
        raw.opacity_raw[0] += h;
        let fp = rgb_sum(&raw);
        raw.opacity_raw[0] -= 2.0 * h;
        let fm = rgb_sum(&raw);
        let fd = (fp - fm) / (2.0 * h);
        let a = g.opacity_raw[0];
        assert!((a - fd).abs() / a.abs().max(fd.abs()) < 1e-3, "{a} vs {fd}");
    }

    #[test]
    fn forced_zero_noise_zeroes_sigma_gradient() {
        let (raw, sr, cam) = gradcheck_scene(3, 3, 16).unwrap();
        let g = activate_params(&raw, sr).unwrap();
        let sg = sample_semantic(&g, Noise::Zero);
        let out = raster::rasterize(&sg, &cam, RenderOptions::serial().with_state()).unwrap();
        let up = Upstream::ones(16, 16, 4);
        let grad = rasterize_backward(&raw, sr, &sg, &cam, &out, &up, BackwardOptions::default()).unwrap();
        assert!(grad.h_sigma.iter().all(|v| *v == 0.0));
        assert!(grad.feat_log_sigma.iter().all(|v| *v == 0.0));
        assert!(grad.feat_mu.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn vanishing_sigma_matches_mean_path() {
        let (mut raw, sr, cam) = gradcheck_scene(8, 4, 24).unwrap();
        raw.feat_log_sigma.fill(-40.0);
        let g = activate_params(&raw, sr).unwrap();
        let up = Upstream::ones(24, 24, 4);
        let grad_of = |noise| {
            let sg = sample_semantic(&g, noise);
            let out = raster::rasterize(&sg, &cam, RenderOptions::serial().with_state()).unwrap();
            rasterize_backward(&raw, sr, &sg, &cam, &out, &up, BackwardOptions::default()).unwrap()
        };
        let sampled = grad_of(Noise::Seeded(8));
        let direct = grad_of(Noise::Zero);
        for (a, b) in sampled.feat_mu.iter().zip(&direct.h) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn gradient_is_linear_in_upstream() {
        let (raw, sr, cam, sg, out) = setup(4, 5, 24);
        let mut u1 = Upstream::zeros(24, 24, 4);
        let mut u2 = Upstream::zeros(24, 24, 4);
        for (k, v) in u1.rgb.data.iter_mut().enumerate() {
            *v = (k as f64 * 0.37).sin();
        }
        for (k, v) in u1.alpha.data.iter_mut().enumerate() {
            *v = (k as f64 * 0.11).cos();
        }
        for (k, v) in u2.features.data.iter_mut().enumerate() {
            *v = (k as f64 * 0.05).cos();
        }
        for (k, v) in u2.rgb.data.iter_mut().enumerate() {
            *v = ((k % 17) as f64) * 0.1;
        }
        let (a, b) = (0.7, -1.3);
        let bo = BackwardOptions::default();
        let g1 = rasterize_backward(&raw, sr, &sg, &cam, &out, &u1, bo).unwrap();
        let g2 = rasterize_backward(&raw, sr, &sg, &cam, &out, &u2, bo).unwrap();
        let g12 = rasterize_backward(&raw, sr, &sg, &cam, &out, &u1.combine(a, &u2, b), bo).unwrap();
        for gi in 0..7 {
            let (name, x) = g12.groups()[gi];
            for k in 0..x.len() {
                let e = a * g1.groups()[gi].1[k] + b * g2.groups()[gi].1[k];
                assert!((x[k] - e).abs() <= 1e-9 * (1.0 + e.abs()), "{name}[{k}]");
            }
        }
    }

    #[test]
    fn parallel_backward_matches_serial_bitwise() {
        let (raw, sr, cam, sg, out) = setup(5, 8, 40);
        let up = Upstream::ones(40, 40, 4);
        let a = rasterize_backward(&raw, sr, &sg, &cam, &out, &up, BackwardOptions { parallel: false, ..Default::default() }).unwrap();
        let b = rasterize_backward(&raw, sr, &sg, &cam, &out, &up, BackwardOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn culled_gaussians_have_no_gradient_or_signal() {
        let (mut raw, sr, cam) = gradcheck_scene(6, 3, 16).unwrap();
        // move Gaussian 1 behind the camera
        let c = cam.center();
        let behind = c + (c - Vector3::zeros());
        raw.position[3..6].copy_from_slice(behind.as_slice());
        let report = gradcheck(&raw, sr, &cam, 6, &GradcheckConfig::default()).unwrap();
        assert_eq!(report.no_signal_gaussians, vec![1]);
        assert!(report.no_signal > 0);
        assert!(report.passed, "{report:?}");

        let g = activate_params(&raw, sr).unwrap();
        let sg = sample_semantic(&g, Noise::Seeded(6));
        let out = raster::rasterize(&sg, &cam, RenderOptions::serial().with_state()).unwrap();
        let grad = rasterize_backward(&raw, sr, &sg, &cam, &out, &Upstream::ones(16, 16, 4), BackwardOptions::default()).unwrap();
        assert!(grad.position[3..6].iter().all(|v| *v == 0.0));
        assert!(grad.opacity_raw[1] == 0.0);
    }

    #[test]
    fn five_gaussian_scene_passes() {
        let (raw, sr, cam) = gradcheck_scene(7, 5, 32).unwrap();
        let report = gradcheck(&raw, sr, &cam, 7, &GradcheckConfig::default()).unwrap();
        assert!(report.passed, "{:#?}", &report.offending[..report.offending.len().min(10)]);
        assert_eq!(report.no_signal, 0);
    }

    #[test]
    fn corrupted_opacity_gradient_fails() {
        let (raw, sr, cam) = gradcheck_scene(7, 5, 32).unwrap();
        let cfg = GradcheckConfig {
            opacity_grad_scale: 1.5,
            ..Default::default()
        };
        let report = gradcheck(&raw, sr, &cam, 7, &cfg).unwrap();
        assert!(!report.passed);
        assert!(!report.offending.is_empty());
        assert!(report.offending.iter().all(|c| c.group == "opacity"));
        assert_eq!(report.offending.len(), 5);
    }
}
