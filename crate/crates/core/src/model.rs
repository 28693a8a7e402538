//! Scene and camera types, raw-to-constrained parameter activation and 3D
//! covariance construction.
//!
//! Per-Gaussian attributes are stored struct-of-arrays. Spherical harmonic
//! coefficients are flattened channel-major: coefficient `k` of channel `ch`
//! of Gaussian `i` lives at `i * channels * K + ch * K + k`, with `k` in
//! band-major order (see [`crate::sh`]).

use std::fmt;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quaternion stored as `(w, x, y, z)`.
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

const UNIT_TOL: f64 = 1e-6;

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Rotation matrix of a unit quaternion. The formula is evaluated as written,
/// so a non-unit input yields a non-orthogonal matrix.
pub fn quat_to_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn normalize_quat(q: &Quat) -> Result<Quat> {
    let n = quat_norm(q);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateQuaternion);
    }
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// Pinhole camera with a world-to-camera pose.
///
/// Pixel `(i, j)` covers the continuous square `[i, i+1) x [j, j+1)`; its
/// center is `(i + 0.5, j + 0.5)`. Camera space looks down `+z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Quat,
    /// World-to-camera translation.
    pub translation: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("image size must be positive".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidCamera("principal point must be finite".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) || self.far.is_nan() {
            return Err(Error::InvalidCamera(format!(
                "need 0 < near < far (near {}, far {})",
                self.near, self.far
            )));
        }
        let n = quat_norm(&self.rotation);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::NonUnitQuaternion(n));
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidCamera("translation must be finite".into()));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.rotation)
    }

    pub fn translation_vec(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation_vec())
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation_vec()
    }

    /// Continuous pixel coordinates of a camera-space point (no culling).
    pub fn project_camera_point(&self, pc: &Vector3<f64>) -> [f64; 2] {
        [
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        ]
    }

    /// World-space ray direction through continuous pixel coordinates,
    /// scaled so that its camera-space `z` component is one.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let d = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        self.rotation_matrix().transpose() * d
    }

    /// World point at camera-space depth `z` along the ray through `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        self.center() + self.pixel_ray(u, v) * z
    }

    pub fn in_image(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] < self.width as f64 && p[1] < self.height as f64
    }

    /// Camera at `eye` looking at `target`. `up` is a world hint for the
    /// image's negative `y` axis.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: u32,
        height: u32,
        focal: f64,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("eye coincides with target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("up is parallel to view direction".into()))?;
        let down = forward.cross(&right);
        // rows are the camera axes expressed in world coordinates
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let q = nalgebra::UnitQuaternion::from_rotation_matrix(
            &nalgebra::Rotation3::from_matrix_unchecked(rot),
        );
        let q = [q.w, q.i, q.j, q.k];
        let cam = Camera {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation: q,
            translation: (-(quat_to_matrix(&q) * eye)).into(),
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }
}

/// Bounding-sphere radius of the camera centers, measured from their centroid.
pub fn scene_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let centers: Vec<_> = cameras.iter().map(Camera::center).collect();
    let mean = centers.iter().fold(Vector3::zeros(), |a, c| a + c) / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        r
    } else {
        1.0
    }
}

/// Number of spherical harmonic bands and feature channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShLayout {
    pub lmax_rgb: usize,
    pub lmax_feat: usize,
    pub feat_dim: usize,
}

impl Default for ShLayout {
    fn default() -> Self {
        ShLayout {
            lmax_rgb: 4,
            lmax_feat: 2,
            feat_dim: 4,
        }
    }
}

impl ShLayout {
    pub fn k_rgb(&self) -> usize {
        (self.lmax_rgb + 1) * (self.lmax_rgb + 1)
    }

    pub fn k_feat(&self) -> usize {
        (self.lmax_feat + 1) * (self.lmax_feat + 1)
    }

    /// Coefficients per Gaussian in the RGB block.
    pub fn rgb_len(&self) -> usize {
        3 * self.k_rgb()
    }

    /// Coefficients per Gaussian in each feature block.
    pub fn feat_len(&self) -> usize {
        self.feat_dim * self.k_feat()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lmax_rgb > 4 {
            return Err(Error::UnsupportedDegree(self.lmax_rgb));
        }
        if self.lmax_feat > 4 {
            return Err(Error::UnsupportedDegree(self.lmax_feat));
        }
        if self.feat_dim == 0 {
            return Err(Error::InvalidParams("feature dimension must be positive".into()));
        }
        Ok(())
    }
}

/// Bounds of the scaled-and-shifted sigmoid used for the scale activation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRange {
    pub min: f64,
    pub max: f64,
}

impl ScaleRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min > 0.0 && min < max && max.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "scale range needs 0 < min < max (got {min}, {max})"
            )));
        }
        Ok(ScaleRange { min, max })
    }

    pub fn from_extent(extent: f64) -> Self {
        ScaleRange {
            min: 1e-4 * extent,
            max: 0.5 * extent,
        }
    }

    pub fn activate(&self, raw: f64) -> f64 {
        self.min + sigmoid(raw) * (self.max - self.min)
    }

    /// Derivative of [`Self::activate`] with respect to the raw value.
    pub fn derivative(&self, raw: f64) -> f64 {
        let s = sigmoid(raw);
        s * (1.0 - s) * (self.max - self.min)
    }

    /// Raw value that activates to `scale`, which must lie strictly inside the range.
    pub fn inverse(&self, scale: f64) -> f64 {
        logit((scale - self.min) / (self.max - self.min))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Pre-activation parameters, the values the optimizer updates.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParamsRaw {
    pub layout: ShLayout,
    /// `3N` world positions.
    pub position: Vec<f64>,
    /// `3N`
    pub scale_raw: Vec<f64>,
    /// `4N`, `(w, x, y, z)` per Gaussian, not necessarily normalized.
    pub rotation_raw: Vec<f64>,
    /// `N`
    pub opacity_raw: Vec<f64>,
    /// `N * 3 * K_rgb`
    pub sh_rgb: Vec<f64>,
    /// `N * D * K_feat`
    pub feat_mu: Vec<f64>,
    /// `N * D * K_feat`
    pub feat_log_sigma: Vec<f64>,
}

impl GaussianParamsRaw {
    pub fn zeros(n: usize, layout: ShLayout) -> Self {
        let mut rotation_raw = vec![0.0; 4 * n];
        for q in rotation_raw.chunks_exact_mut(4) {
            q[0] = 1.0;
        }
        GaussianParamsRaw {
            layout,
            position: vec![0.0; 3 * n],
            scale_raw: vec![0.0; 3 * n],
            rotation_raw,
            opacity_raw: vec![0.0; n],
            sh_rgb: vec![0.0; n * layout.rgb_len()],
            feat_mu: vec![0.0; n * layout.feat_len()],
            feat_log_sigma: vec![0.0; n * layout.feat_len()],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_raw.is_empty()
    }

    /// Named parameter groups in a fixed order.
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

    pub fn groups_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 7] {
        [
            ("position", &mut self.position),
            ("scale", &mut self.scale_raw),
            ("rotation", &mut self.rotation_raw),
            ("opacity", &mut self.opacity_raw),
            ("sh_rgb", &mut self.sh_rgb),
            ("feat_mu", &mut self.feat_mu),
            ("feat_log_sigma", &mut self.feat_log_sigma),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        let n = self.len();
        let l = self.layout;
        let expect = [
            3 * n,
            3 * n,
            4 * n,
            n,
            n * l.rgb_len(),
            n * l.feat_len(),
            n * l.feat_len(),
        ];
        for ((name, v), e) in self.groups().iter().zip(expect) {
            if v.len() != e {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {e} values, got {}",
                    v.len()
                )));
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::InvalidParams(format!("{name}[{i}] is not finite")));
            }
        }
        Ok(())
    }

    /// Concatenate two parameter sets with the same layout.
    pub fn extend(&mut self, other: &GaussianParamsRaw) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::ShapeMismatch("layouts differ".into()));
        }
        for ((_, dst), (_, src)) in self.groups_mut().into_iter().zip(other.groups()) {
            dst.extend_from_slice(src);
        }
        Ok(())
    }

    /// Round every value to single precision, the storage precision of scene files.
    pub fn round_to_f32(&mut self) {
        for (_, g) in self.groups_mut() {
            for v in g.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Structural and color attributes shared by variational and semantic Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatAttributes {
    pub layout: ShLayout,
    pub positions: Vec<Vector3<f64>>,
    pub scales: Vec<Vector3<f64>>,
    pub rotations: Vec<Quat>,
    pub opacities: Vec<f64>,
    /// `N * 3 * K_rgb`
    pub sh_rgb: Vec<f64>,
}

impl SplatAttributes {
    pub fn len(&self) -> usize {
        self.opacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacities.is_empty()
    }

    pub fn empty(layout: ShLayout) -> Self {
        SplatAttributes {
            layout,
            positions: Vec::new(),
            scales: Vec::new(),
            rotations: Vec::new(),
            opacities: Vec::new(),
            sh_rgb: Vec::new(),
        }
    }

    pub fn sh_rgb_of(&self, i: usize) -> &[f64] {
        let n = self.layout.rgb_len();
        &self.sh_rgb[i * n..(i + 1) * n]
    }
}

/// A set of Gaussians whose feature coefficients are normal distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalGaussians {
    pub attrs: SplatAttributes,
    /// `N * D * K_feat`
    pub feat_mu: Vec<f64>,
    /// `N * D * K_feat`, strictly positive.
    pub feat_sigma: Vec<f64>,
}

impl VariationalGaussians {
    pub fn empty(layout: ShLayout) -> Self {
        VariationalGaussians {
            attrs: SplatAttributes::empty(layout),
            feat_mu: Vec::new(),
            feat_sigma: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.attrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }

    pub fn layout(&self) -> ShLayout {
        self.attrs.layout
    }

    pub fn feat_sigma_of(&self, i: usize) -> &[f64] {
        let n = self.attrs.layout.feat_len();
        &self.feat_sigma[i * n..(i + 1) * n]
    }
}

/// One sampled instance of a [`VariationalGaussians`] set.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticGaussians {
    pub attrs: SplatAttributes,
    /// Sampled feature coefficients, `N * D * K_feat`.
    pub features: Vec<f64>,
    /// Standard-normal draws used to produce `features`; the pathwise
    /// derivative of `features` with respect to the stored sigma.
    pub epsilon: Vec<f64>,
}

impl SemanticGaussians {
    pub fn len(&self) -> usize {
        self.attrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }

    pub fn layout(&self) -> ShLayout {
        self.attrs.layout
    }

    pub fn features_of(&self, i: usize) -> &[f64] {
        let n = self.attrs.layout.feat_len();
        &self.features[i * n..(i + 1) * n]
    }

    /// Semantic Gaussians whose features are taken as given, with zero noise.
    pub fn from_features(attrs: SplatAttributes, features: Vec<f64>) -> Self {
        let epsilon = vec![0.0; features.len()];
        SemanticGaussians {
            attrs,
            features,
            epsilon,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// L1 on the feature-path image.
    pub lambda1: f64,
    /// Perceptual term on the feature path. Carried for completeness; no term uses it.
    pub lambda2: f64,
    /// Squared error on the auxiliary RGB rendering.
    pub lambda3: f64,
    /// Perceptual term on the auxiliary path. Carried for completeness; no term uses it.
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 10.0,
            lambda4: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Row-major, interleaved-channel float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{width}x{height}x{channels} image needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::ShapeMismatch("crop exceeds image bounds".into()));
        }
        let mut out = Image::zeros(w, h, self.channels);
        for y in 0..h {
            let src = self.index(x0, y0 + y, 0);
            let dst = out.index(0, y, 0);
            out.data[dst..dst + w * self.channels]
                .copy_from_slice(&self.data[src..src + w * self.channels]);
        }
        Ok(out)
    }

    /// The first `n` channels of every pixel.
    pub fn leading_channels(&self, n: usize) -> Result<Image> {
        if n > self.channels {
            return Err(Error::ShapeMismatch(format!(
                "requested {n} channels from a {}-channel image",
                self.channels
            )));
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .flat_map(|p| p[..n].iter().copied())
            .collect();
        Image::from_data(self.width, self.height, n, data)
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn activate_params(raw: &GaussianParamsRaw, scale_range: ScaleRange) -> Result<VariationalGaussians> {
    raw.validate()?;
    ScaleRange::new(scale_range.min, scale_range.max)?;
    let n = raw.len();
    let mut positions = Vec::with_capacity(n);
    let mut scales = Vec::with_capacity(n);
    let mut rotations = Vec::with_capacity(n);
    for i in 0..n {
        let p = &raw.position[3 * i..3 * i + 3];
        positions.push(Vector3::new(p[0], p[1], p[2]));
        let s = &raw.scale_raw[3 * i..3 * i + 3];
        scales.push(Vector3::new(
            scale_range.activate(s[0]),
            scale_range.activate(s[1]),
            scale_range.activate(s[2]),
        ));
        let q = &raw.rotation_raw[4 * i..4 * i + 4];
        rotations.push(normalize_quat(&[q[0], q[1], q[2], q[3]])?);
    }
    Ok(VariationalGaussians {
        attrs: SplatAttributes {
            layout: raw.layout,
            positions,
            scales,
            rotations,
            opacities: raw.opacity_raw.iter().map(|&o| sigmoid(o)).collect(),
            sh_rgb: raw.sh_rgb.clone(),
        },
        feat_mu: raw.feat_mu.clone(),
        feat_sigma: raw.feat_log_sigma.iter().map(|s| s.exp()).collect(),
    })
}

/// `C = M diag(S)^2 M^T` with `M` the rotation matrix of `rotation`.
pub fn build_cov3d(scale: &Vector3<f64>, rotation: &Quat) -> Result<Matrix3<f64>> {
    let n = quat_norm(rotation);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::NonUnitQuaternion(n));
    }
    Ok(cov3d_unchecked(scale, rotation))
}

pub(crate) fn cov3d_unchecked(scale: &Vector3<f64>, rotation: &Quat) -> Matrix3<f64> {
    let m = quat_to_matrix(rotation);
    let ms = m * Matrix3::from_diagonal(scale);
    ms * ms.transpose()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    NonFinite,
    OpacityOutOfRange,
    NonPositiveScale,
    NonUnitRotation,
    NonPositiveSigma,
    ShapeMismatch,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::NonFinite => "non-finite value",
            ViolationKind::OpacityOutOfRange => "opacity out of range",
            ViolationKind::NonPositiveScale => "non-positive scale",
            ViolationKind::NonUnitRotation => "non-unit rotation",
            ViolationKind::NonPositiveSigma => "non-positive sigma",
            ViolationKind::ShapeMismatch => "shape mismatch",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Violation {
    /// Gaussian index; `usize::MAX` for scene-wide shape problems.
    pub index: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.index == usize::MAX {
            write!(f, "scene: {}", self.kind)
        } else {
            write!(f, "gaussian {}: {}", self.index, self.kind)
        }
    }
}

/// Every violated invariant, with its Gaussian index. Empty iff the scene is valid.
pub fn validate_scene(g: &VariationalGaussians) -> Vec<Violation> {
    let mut out = Vec::new();
    let a = &g.attrs;
    let n = a.len();
    let l = a.layout;
    let shapes_ok = a.positions.len() == n
        && a.scales.len() == n
        && a.rotations.len() == n
        && a.sh_rgb.len() == n * l.rgb_len()
        && g.feat_mu.len() == n * l.feat_len()
        && g.feat_sigma.len() == n * l.feat_len();
    if !shapes_ok {
        out.push(Violation {
            index: usize::MAX,
            kind: ViolationKind::ShapeMismatch,
        });
        return out;
    }
    let fl = l.feat_len();
    for i in 0..n {
        let mut push = |kind| out.push(Violation { index: i, kind });
        let finite = a.positions[i].iter().all(|v| v.is_finite())
            && a.scales[i].iter().all(|v| v.is_finite())
            && a.rotations[i].iter().all(|v| v.is_finite())
            && a.opacities[i].is_finite()
            && a.sh_rgb_of(i).iter().all(|v| v.is_finite())
            && g.feat_mu[i * fl..(i + 1) * fl].iter().all(|v| v.is_finite())
            && g.feat_sigma_of(i).iter().all(|v| v.is_finite());
        if !finite {
            push(ViolationKind::NonFinite);
        }
        if !(0.0..=1.0).contains(&a.opacities[i]) {
            push(ViolationKind::OpacityOutOfRange);
        }
        if a.scales[i].iter().any(|s| !(*s > 0.0)) {
            push(ViolationKind::NonPositiveScale);
        }
        if !((quat_norm(&a.rotations[i]) - 1.0).abs() <= UNIT_TOL) {
            push(ViolationKind::NonUnitRotation);
        }
        if g.feat_sigma_of(i).iter().any(|s| !(*s > 0.0)) {
            push(ViolationKind::NonPositiveSigma);
        }
    }
    out
}
