//! Forward splatting: projection of 3D Gaussians to screen space and tiled
//! front-to-back alpha compositing of color, feature and opacity channels.
//!
//! Conventions shared by the tiled renderer and the exhaustive reference:
//! pixel centers sit at half-integer coordinates, Gaussians are sorted once
//! per frame by `(depth, index)`, `alpha = min(0.999, o * G)`, contributions
//! below `1/255` are skipped, and a pixel stops compositing after the
//! transmittance drops below `1e-4`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{cov3d_unchecked, Camera, Image, SemanticGaussians};
use crate::sh;

pub const TILE_SIZE: usize = 16;
pub const ALPHA_MAX: f64 = 0.999;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
pub const DILATION: f64 = 0.3;
pub const FRUSTUM_SLACK: f64 = 1.15;
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    /// Render tiles on the rayon pool. Results are identical to serial mode.
    pub parallel: bool,
    /// Keep the projection and sort state needed by the backward pass.
    pub save_state: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            parallel: true,
            save_state: false,
        }
    }
}

impl RenderOptions {
    pub fn serial() -> Self {
        RenderOptions {
            parallel: false,
            save_state: false,
        }
    }

    pub fn with_state(mut self) -> Self {
        self.save_state = true;
        self
    }
}

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    /// Projected covariance including the dilation term, in pixels squared.
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub index: usize,
}

/// Jacobian of the pinhole projection at a camera-space point.
pub(crate) fn projection_jacobian(cam: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz * iz,
    )
}

pub(crate) fn is_culled(cam: &Camera, t: &Vector3<f64>) -> bool {
    if !(t.z > cam.near) || t.z > cam.far {
        return true;
    }
    let xn = t.x / t.z;
    let yn = t.y / t.z;
    let w = cam.width as f64;
    let h = cam.height as f64;
    xn < -FRUSTUM_SLACK * cam.cx / cam.fx
        || xn > FRUSTUM_SLACK * (w - cam.cx) / cam.fx
        || yn < -FRUSTUM_SLACK * cam.cy / cam.fy
        || yn > FRUSTUM_SLACK * (h - cam.cy) / cam.fy
}

/// Projects a Gaussian into `cam`. `None` means culled.
pub fn project_gaussian(
    x: &Vector3<f64>,
    cov3d: &Matrix3<f64>,
    cam: &Camera,
    index: usize,
) -> Option<Splat2D> {
    let t = cam.world_to_camera(x);
    if is_culled(cam, &t) {
        return None;
    }
    let w = cam.rotation_matrix();
    let j = projection_jacobian(cam, &t);
    let m = j * w;
    let cov2d = m * cov3d * m.transpose() + Matrix2::identity() * DILATION;
    let [u, v] = cam.project_camera_point(&t);
    Some(Splat2D {
        mean2d: Vector2::new(u, v),
        cov2d,
        depth: t.z,
        index,
    })
}

/// Everything the compositor and the backward pass need about one visible splat.
#[derive(Clone, Debug)]
pub(crate) struct PreparedSplat {
    pub index: usize,
    pub mean2d: Vector2<f64>,
    /// Inverse of the screen covariance as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub cam_point: Vector3<f64>,
    pub depth: f64,
    pub opacity: f64,
    /// Pixel radius outside of which `alpha < ALPHA_MIN`.
    pub radius: f64,
}

/// Projection, per-Gaussian payload and depth order for one frame.
#[derive(Clone, Debug)]
pub struct ForwardState {
    pub(crate) splats: Vec<PreparedSplat>,
    /// `splats.len() * channels` payload values.
    pub(crate) payload: Vec<f64>,
    pub(crate) channels: usize,
    /// Unit view directions, one per prepared splat.
    pub(crate) view_dirs: Vec<Vector3<f64>>,
    /// Distance from the camera center to the mean, one per prepared splat.
    pub(crate) view_dist: Vec<f64>,
    /// Indices into `splats` in compositing order.
    pub(crate) order: Vec<usize>,
    /// Per tile, indices into `splats` in compositing order.
    pub(crate) tiles: Vec<Vec<usize>>,
    pub(crate) tiles_x: usize,
    /// Pixels each Gaussian (by scene index) contributed to.
    pub contributions: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub culled: usize,
    pub skipped_singular: usize,
    pub visible: usize,
}

/// Rendered frame. `features` is the rendered feature image and `alpha` the
/// accumulated opacity.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub rgb: Image,
    pub features: Image,
    pub alpha: Image,
    /// Alpha-weighted expected depth, normalized by accumulated alpha; zero where alpha is zero.
    pub depth: Image,
    pub stats: RenderStats,
    pub saved: Option<ForwardState>,
}

fn conic_of(cov: &Matrix2<f64>) -> Option<[f64; 3]> {
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if !(det > 0.0) {
        return None;
    }
    let tr = cov[(0, 0)] + cov[(1, 1)];
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    let l_max = 0.5 * tr + disc;
    let l_min = det / l_max;
    if !(l_min > 0.0) || l_max / l_min > MAX_CONDITION {
        return None;
    }
    Some([cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det])
}

fn lambda_max(cov: &Matrix2<f64>) -> f64 {
    let tr = cov[(0, 0)] + cov[(1, 1)];
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    0.5 * tr + (0.25 * tr * tr - det).max(0.0).sqrt()
}

/// Radius beyond which `o * G < ALPHA_MIN`, since `d^T Q d >= |d|^2 / lambda_max`.
fn cutoff_radius(opacity: f64, cov: &Matrix2<f64>) -> Option<f64> {
    let level = (opacity / ALPHA_MIN).ln();
    if !(level >= 0.0) {
        return None;
    }
    let r = (2.0 * lambda_max(cov) * level).sqrt();
    Some(r * (1.0 + 1e-9) + 1e-9)
}

/// Projects, culls and orders the splats and evaluates per-Gaussian payloads.
///
/// `payload_of(i, dir, out)` fills `channels` values for Gaussian `i` seen
/// along unit direction `dir`.
pub(crate) fn prepare<F>(
    attrs: &crate::model::SplatAttributes,
    cam: &Camera,
    channels: usize,
    payload_of: F,
    stats: &mut RenderStats,
) -> ForwardState
where
    F: Fn(usize, &Vector3<f64>, &mut [f64]),
{
    let n = attrs.len();
    let center = cam.center();
    let mut splats = Vec::new();
    let mut view_dirs = Vec::new();
    let mut view_dist = Vec::new();
    for i in 0..n {
        let cov3d = cov3d_unchecked(&attrs.scales[i], &attrs.rotations[i]);
        let Some(s) = project_gaussian(&attrs.positions[i], &cov3d, cam, i) else {
            stats.culled += 1;
            continue;
        };
        let Some(conic) = conic_of(&s.cov2d) else {
            stats.skipped_singular += 1;
            continue;
        };
        let opacity = attrs.opacities[i];
        let Some(radius) = cutoff_radius(opacity, &s.cov2d) else {
            // can never reach ALPHA_MIN
            continue;
        };
        let offset = attrs.positions[i] - center;
        let dist = offset.norm();
        splats.push(PreparedSplat {
            index: i,
            mean2d: s.mean2d,
            conic,
            cam_point: cam.world_to_camera(&attrs.positions[i]),
            depth: s.depth,
            opacity,
            radius,
        });
        view_dirs.push(offset / dist);
        view_dist.push(dist);
    }
    if stats.skipped_singular > 0 {
        log::warn!("{} splats skipped with ill-conditioned covariance", stats.skipped_singular);
    }
    stats.visible = splats.len();

    let mut payload = vec![0.0; splats.len() * channels];
    for (k, s) in splats.iter().enumerate() {
        payload_of(s.index, &view_dirs[k], &mut payload[k * channels..(k + 1) * channels]);
    }

    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        splats[a]
            .depth
            .total_cmp(&splats[b].depth)
            .then(splats[a].index.cmp(&splats[b].index))
    });

    let width = cam.width as usize;
    let height = cam.height as usize;
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for &k in &order {
        let s = &splats[k];
        // pixel i is touched when |i + 0.5 - mean| <= radius
        let x0 = (s.mean2d.x - s.radius - 0.5).ceil().max(0.0);
        let x1 = (s.mean2d.x + s.radius - 0.5).floor().min(width as f64 - 1.0);
        let y0 = (s.mean2d.y - s.radius - 0.5).ceil().max(0.0);
        let y1 = (s.mean2d.y + s.radius - 0.5).floor().min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let (tx0, tx1) = (x0 as usize / TILE_SIZE, x1 as usize / TILE_SIZE);
        let (ty0, ty1) = (y0 as usize / TILE_SIZE, y1 as usize / TILE_SIZE);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(k);
            }
        }
    }

    ForwardState {
        splats,
        payload,
        channels,
        view_dirs,
        view_dist,
        order,
        tiles,
        tiles_x,
        contributions: vec![0; n],
    }
}

/// Alpha of a splat at a pixel center, or `None` if below the skip threshold.
#[inline]
pub(crate) fn splat_alpha(s: &PreparedSplat, px: f64, py: f64) -> Option<(f64, f64)> {
    let dx = px - s.mean2d.x;
    let dy = py - s.mean2d.y;
    let [a, b, c] = s.conic;
    let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
    let g = power.exp();
    let alpha = (s.opacity * g).min(ALPHA_MAX);
    if alpha < ALPHA_MIN {
        None
    } else {
        Some((alpha, g))
    }
}

/// Composites `list` (indices into `state.splats`, front to back) at one pixel.
/// `out` receives `channels` accumulated values, then alpha, then the
/// alpha-weighted depth sum. `on_contrib` gets the list position of every
/// splat that contributed.
#[inline]
fn composite_pixel(
    state: &ForwardState,
    list: &[usize],
    px: f64,
    py: f64,
    out: &mut [f64],
    mut on_contrib: impl FnMut(usize),
) {
    let c = state.channels;
    out.fill(0.0);
    let mut t = 1.0;
    for (pos, &k) in list.iter().enumerate() {
        let s = &state.splats[k];
        let Some((alpha, _)) = splat_alpha(s, px, py) else {
            continue;
        };
        let w = alpha * t;
        let p = &state.payload[k * c..(k + 1) * c];
        for (o, v) in out[..c].iter_mut().zip(p) {
            *o += w * v;
        }
        out[c] += w;
        out[c + 1] += w * s.depth;
        on_contrib(pos);
        t *= 1.0 - alpha;
        if t < TRANSMITTANCE_MIN {
            break;
        }
    }
}

/// Per-pixel accumulated channels, alpha and depth-sum, row major.
pub(crate) struct Accumulated {
    pub data: Vec<f64>,
    pub stride: usize,
}

fn tile_bounds(tile: usize, tiles_x: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let tx = tile % tiles_x;
    let ty = tile / tiles_x;
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    (x0, (x0 + TILE_SIZE).min(width), y0, (y0 + TILE_SIZE).min(height))
}

pub(crate) fn composite_tiled(
    state: &mut ForwardState,
    width: usize,
    height: usize,
    parallel: bool,
) -> Accumulated {
    let stride = state.channels + 2;
    let n_scene = state.contributions.len();
    let render_tile = |tile: usize| -> (Vec<f64>, Vec<(usize, u32)>) {
        let (x0, x1, y0, y1) = tile_bounds(tile, state.tiles_x, width, height);
        let mut buf = vec![0.0; (x1 - x0) * (y1 - y0) * stride];
        let mut counts: Vec<(usize, u32)> = Vec::new();
        let list = &state.tiles[tile];
        let mut local = vec![0u32; list.len()];
        for y in y0..y1 {
            for x in x0..x1 {
                let o = ((y - y0) * (x1 - x0) + (x - x0)) * stride;
                composite_pixel(
                    state,
                    list,
                    x as f64 + 0.5,
                    y as f64 + 0.5,
                    &mut buf[o..o + stride],
                    |pos| local[pos] += 1,
                );
            }
        }
        for (p, &k) in list.iter().enumerate() {
            if local[p] > 0 {
                counts.push((state.splats[k].index, local[p]));
            }
        }
        (buf, counts)
    };
    let n_tiles = state.tiles.len();
    let results: Vec<_> = if parallel {
        (0..n_tiles).into_par_iter().map(render_tile).collect()
    } else {
        (0..n_tiles).map(render_tile).collect()
    };

    let mut data = vec![0.0; width * height * stride];
    let mut contributions = vec![0u32; n_scene];
    for (tile, (buf, counts)) in results.into_iter().enumerate() {
        let (x0, x1, y0, y1) = tile_bounds(tile, state.tiles_x, width, height);
        let tw = x1 - x0;
        for y in y0..y1 {
            let src = (y - y0) * tw * stride;
            let dst = (y * width + x0) * stride;
            data[dst..dst + tw * stride].copy_from_slice(&buf[src..src + tw * stride]);
        }
        for (idx, c) in counts {
            contributions[idx] += c;
        }
    }
    state.contributions = contributions;
    Accumulated { data, stride }
}

fn composite_reference(state: &ForwardState, width: usize, height: usize) -> Accumulated {
    let stride = state.channels + 2;
    let mut data = vec![0.0; width * height * stride];
    for y in 0..height {
        for x in 0..width {
            let o = (y * width + x) * stride;
            composite_pixel(
                state,
                &state.order,
                x as f64 + 0.5,
                y as f64 + 0.5,
                &mut data[o..o + stride],
                |_| {},
            );
        }
    }
    Accumulated { data, stride }
}

/// Splits accumulated pixels into a `channels`-image, alpha and depth.
pub(crate) fn split_accumulated(acc: &Accumulated, width: usize, height: usize) -> (Vec<f64>, Image, Image) {
    let c = acc.stride - 2;
    let mut values = Vec::with_capacity(width * height * c);
    let mut alpha = Image::zeros(width, height, 1);
    let mut depth = Image::zeros(width, height, 1);
    for (p, px) in acc.data.chunks_exact(acc.stride).enumerate() {
        values.extend_from_slice(&px[..c]);
        alpha.data[p] = px[c];
        depth.data[p] = if px[c] > 0.0 { px[c + 1] / px[c] } else { 0.0 };
    }
    (values, alpha, depth)
}

/// Fills `out` with RGB then features for semantic Gaussian `i`.
pub(crate) fn semantic_payload(sg: &SemanticGaussians, i: usize, dir: &Vector3<f64>, out: &mut [f64]) {
    let layout = sg.layout();
    let mut basis = [0.0; 25];
    sh::eval_basis(dir.x, dir.y, dir.z, layout.lmax_rgb, &mut basis);
    let (rgb, feat) = out.split_at_mut(3);
    sh::dot_channels(sg.attrs.sh_rgb_of(i), &basis[..layout.k_rgb()], rgb);
    for v in rgb.iter_mut() {
        *v = sh::color_from_dot(*v);
    }
    sh::eval_basis(dir.x, dir.y, dir.z, layout.lmax_feat, &mut basis);
    sh::dot_channels(sg.features_of(i), &basis[..layout.k_feat()], feat);
}

fn check_inputs(sg: &SemanticGaussians, cam: &Camera) -> Result<()> {
    cam.validate()?;
    let l = sg.layout();
    l.validate()?;
    let n = sg.len();
    if sg.attrs.positions.len() != n
        || sg.attrs.scales.len() != n
        || sg.attrs.rotations.len() != n
        || sg.attrs.sh_rgb.len() != n * l.rgb_len()
        || sg.features.len() != n * l.feat_len()
    {
        return Err(Error::ShapeMismatch("semantic Gaussian arrays disagree on N".into()));
    }
    Ok(())
}

fn assemble(acc: Accumulated, cam: &Camera, d: usize, stats: RenderStats, saved: Option<ForwardState>) -> RenderOutput {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let (values, alpha, depth) = split_accumulated(&acc, w, h);
    let mut rgb = Image::zeros(w, h, 3);
    let mut features = Image::zeros(w, h, d);
    for (p, px) in values.chunks_exact(3 + d).enumerate() {
        rgb.data[p * 3..p * 3 + 3].copy_from_slice(&px[..3]);
        features.data[p * d..(p + 1) * d].copy_from_slice(&px[3..]);
    }
    RenderOutput {
        rgb,
        features,
        alpha,
        depth,
        stats,
        saved,
    }
}

/// Tiled forward pass.
pub fn rasterize(sg: &SemanticGaussians, cam: &Camera, opts: RenderOptions) -> Result<RenderOutput> {
    check_inputs(sg, cam)?;
    let d = sg.layout().feat_dim;
    let mut stats = RenderStats::default();
    let mut state = prepare(&sg.attrs, cam, 3 + d, |i, dir, out| semantic_payload(sg, i, dir, out), &mut stats);
    let acc = composite_tiled(&mut state, cam.width as usize, cam.height as usize, opts.parallel);
    Ok(assemble(acc, cam, d, stats, opts.save_state.then_some(state)))
}

/// Exhaustive per-pixel loop over every visible splat in global depth order.
/// Same math as [`rasterize`] without tiling; used as its equivalence oracle.
pub fn rasterize_reference(sg: &SemanticGaussians, cam: &Camera) -> Result<RenderOutput> {
    check_inputs(sg, cam)?;
    let d = sg.layout().feat_dim;
    let mut stats = RenderStats::default();
    let state = prepare(&sg.attrs, cam, 3 + d, |i, dir, out| semantic_payload(sg, i, dir, out), &mut stats);
    let acc = composite_reference(&state, cam.width as usize, cam.height as usize);
    Ok(assemble(acc, cam, d, stats, None))
}

/// Splats one scalar per Gaussian; returns the composited value and alpha images.
pub(crate) fn rasterize_scalar(
    attrs: &crate::model::SplatAttributes,
    values: &[f64],
    cam: &Camera,
    parallel: bool,
) -> Result<(Image, Image)> {
    cam.validate()?;
    let mut stats = RenderStats::default();
    let mut state = prepare(attrs, cam, 1, |i, _, out| out[0] = values[i], &mut stats);
    let (w, h) = (cam.width as usize, cam.height as usize);
    let acc = composite_tiled(&mut state, w, h, parallel);
    let (v, alpha, _) = split_accumulated(&acc, w, h);
    Ok((Image::from_data(w, h, 1, v)?, alpha))
}
