//! Two-view epipolar sampling and the depth-bin math that turns per-ray
//! bin distributions into Gaussians.
//!
//! Depths are spaced uniformly in disparity (`1 / z`). Along a pixel ray of
//! camera A, the homogeneous image point in camera B is affine in disparity,
//! so interpolating homogeneous coordinates linearly in disparity between
//! two samples is exact.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{logit, Camera, GaussianParamsRaw, ShLayout};
use crate::variational::RngStream;

pub const DEFAULT_EPIPOLAR_SAMPLES: usize = 32;

/// Opacity is kept strictly inside (0, 1) so its logit stays finite.
pub const PROB_CLAMP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpipolarSample {
    /// Continuous pixel coordinates in view B.
    pub pixel: [f64; 2],
    /// Camera-space depth along A's ray.
    pub depth_a: f64,
    /// Camera-space depth of the same point in B.
    pub depth_b: f64,
    /// `depth_b / depth_a`, the homogeneous weight of the sample when the
    /// ray is parameterized by disparity.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpipolarSegment {
    /// Continuous pixel coordinates in view A.
    pub pixel_a: [f64; 2],
    /// In-image samples ordered by increasing depth along A's ray.
    pub samples: Vec<EpipolarSample>,
}

impl EpipolarSegment {
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Pixel in B of the point at depth `depth` on A's ray, interpolated from
    /// the two bracketing samples. `None` outside the sampled range.
    pub fn point_at_depth(&self, depth: f64) -> Option<[f64; 2]> {
        if !(depth > 0.0) {
            return None;
        }
        let s = 1.0 / depth;
        let disp = |e: &EpipolarSample| 1.0 / e.depth_a;
        let k = self.samples.windows(2).position(|w| {
            let (s0, s1) = (disp(&w[0]), disp(&w[1]));
            s <= s0 && s >= s1
        });
        let (a, b) = match k {
            Some(k) => (&self.samples[k], &self.samples[k + 1]),
            None => {
                let e = self.samples.iter().find(|e| e.depth_a == depth)?;
                return Some(e.pixel);
            }
        };
        let (s0, s1) = (disp(a), disp(b));
        let t = if s0 == s1 { 0.0 } else { (s - s0) / (s1 - s0) };
        let (w0, w1) = (a.weight, b.weight);
        let w = w0 + t * (w1 - w0);
        let hx = a.pixel[0] * w0 + t * (b.pixel[0] * w1 - a.pixel[0] * w0);
        let hy = a.pixel[1] * w0 + t * (b.pixel[1] * w1 - a.pixel[1] * w0);
        Some([hx / w, hy / w])
    }
}

/// Samples A's ray through `pixel_a` at `n` depths spaced uniformly in
/// disparity over `[near, far]` of camera A, projects them into B and keeps
/// those that land inside B's image in front of it.
pub fn epipolar_segment(pixel_a: [f64; 2], cam_a: &Camera, cam_b: &Camera, n: usize) -> Result<EpipolarSegment> {
    cam_a.validate()?;
    cam_b.validate()?;
    let ca = cam_a.center();
    if (ca - cam_b.center()).norm() <= 1e-12 * (1.0 + ca.norm()) {
        return Err(Error::NoEpipolarGeometry);
    }
    let mut samples = Vec::new();
    if n == 0 {
        return Ok(EpipolarSegment { pixel_a, samples });
    }
    let ray = cam_a.pixel_ray(pixel_a[0], pixel_a[1]);
    let rb = cam_b.rotation_matrix();
    // point at depth z maps to a + b z in B's camera space
    let a = cam_b.world_to_camera(&ca);
    let b = rb * ray;
    let (s_near, s_far) = (1.0 / cam_a.near, 1.0 / cam_a.far);
    for i in 0..n {
        let f = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
        let s = s_near + f * (s_far - s_near);
        if s <= 0.0 {
            // the point at infinity along the ray
            if b.z <= 0.0 {
                continue;
            }
            let px = cam_b.project_camera_point(&b);
            if cam_b.in_image(px) {
                samples.push(EpipolarSample {
                    pixel: px,
                    depth_a: f64::INFINITY,
                    depth_b: f64::INFINITY,
                    weight: b.z,
                });
            }
            continue;
        }
        let pc: Vector3<f64> = a + b / s;
        if pc.z <= 0.0 {
            continue;
        }
        let px = cam_b.project_camera_point(&pc);
        if cam_b.in_image(px) {
            samples.push(EpipolarSample {
                pixel: px,
                depth_a: 1.0 / s,
                depth_b: pc.z,
                weight: pc.z * s,
            });
        }
    }
    Ok(EpipolarSegment { pixel_a, samples })
}

/// `bins + 1` boundaries from `near` to `far`, uniform in disparity.
/// `far` may be infinite.
pub fn depth_bins(near: f64, far: f64, bins: usize) -> Result<Vec<f64>> {
    if !(near > 0.0 && near < far) || near.is_infinite() || bins == 0 {
        return Err(Error::InvalidRange { near, far });
    }
    let (s0, s1) = (1.0 / near, 1.0 / far);
    Ok((0..=bins)
        .map(|i| {
            if i == 0 {
                return near;
            }
            if i == bins {
                return far;
            }
            let s = s0 + (s1 - s0) * i as f64 / bins as f64;
            1.0 / s
        })
        .collect())
}

/// Depth at fraction `offset` of the bin `[lo, hi]`, linear in disparity.
pub fn depth_in_bin(lo: f64, hi: f64, offset: f64) -> f64 {
    let (s0, s1) = (1.0 / lo, 1.0 / hi);
    1.0 / (s0 + offset * (s1 - s0))
}

/// Raw attributes attached to one depth bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinAttributes {
    pub scale_raw: [f64; 3],
    pub rotation_raw: [f64; 4],
    pub sh_rgb: Vec<f64>,
    pub feat_mu: Vec<f64>,
    pub feat_log_sigma: Vec<f64>,
}

impl BinAttributes {
    pub fn zeros(layout: ShLayout) -> Self {
        BinAttributes {
            scale_raw: [0.0; 3],
            rotation_raw: [1.0, 0.0, 0.0, 0.0],
            sh_rgb: vec![0.0; layout.rgb_len()],
            feat_mu: vec![0.0; layout.feat_len()],
            feat_log_sigma: vec![0.0; layout.feat_len()],
        }
    }
}

/// Categorical distribution over the depth bins of one pixel ray.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RayBinDistribution {
    pub camera: Camera,
    /// Continuous pixel coordinates.
    pub pixel: [f64; 2],
    pub probs: Vec<f64>,
    /// Position inside each bin, in `[0, 1)`.
    pub offsets: Vec<f64>,
    pub attributes: Vec<BinAttributes>,
}

impl RayBinDistribution {
    pub fn bins(&self) -> usize {
        self.probs.len()
    }

    pub fn validate(&self, layout: ShLayout) -> Result<()> {
        self.camera.validate()?;
        let b = self.probs.len();
        if b == 0 || self.offsets.len() != b || self.attributes.len() != b {
            return Err(Error::InvalidParams(format!(
                "{} probabilities, {} offsets, {} attribute sets",
                b,
                self.offsets.len(),
                self.attributes.len()
            )));
        }
        if self.probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidParams("probabilities must be nonnegative".into()));
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParams(format!("probabilities sum to {sum}")));
        }
        if self.offsets.iter().any(|o| !(*o >= 0.0 && *o < 1.0)) {
            return Err(Error::InvalidParams("offsets must lie in [0, 1)".into()));
        }
        for a in &self.attributes {
            if a.sh_rgb.len() != layout.rgb_len()
                || a.feat_mu.len() != layout.feat_len()
                || a.feat_log_sigma.len() != layout.feat_len()
            {
                return Err(Error::LengthMismatch {
                    expected: layout.rgb_len(),
                    got: a.sh_rgb.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinSelection {
    /// The most probable bins, lowest index first among ties.
    Expected,
    /// Independent categorical draws from each ray's stream.
    Sampled(u64),
}

fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (k, p) in probs.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        last = k;
        acc += p;
        if u < acc {
            return k;
        }
    }
    last
}

/// Emits `samples_per_ray` Gaussians per ray at the selected bins. Each
/// center lies on the ray; its opacity activates to the bin probability.
pub fn gaussians_from_rays(
    dists: &[RayBinDistribution],
    mode: BinSelection,
    samples_per_ray: usize,
    layout: ShLayout,
) -> Result<GaussianParamsRaw> {
    let mut out = GaussianParamsRaw::zeros(0, layout);
    for (r, d) in dists.iter().enumerate() {
        d.validate(layout)?;
        let cam = &d.camera;
        let bounds = depth_bins(cam.near, cam.far, d.bins())?;
        let chosen: Vec<usize> = match mode {
            BinSelection::Expected => {
                let mut order: Vec<usize> = (0..d.bins()).collect();
                order.sort_by(|&a, &b| d.probs[b].total_cmp(&d.probs[a]).then(a.cmp(&b)));
                order.into_iter().take(samples_per_ray).filter(|&k| d.probs[k] > 0.0).collect()
            }
            BinSelection::Sampled(seed) => {
                let mut rng = RngStream::for_ray(seed, r).rng();
                (0..samples_per_ray)
                    .map(|_| sample_categorical(&d.probs, rng.gen::<f64>()))
                    .collect()
            }
        };
        let mut g = GaussianParamsRaw::zeros(chosen.len(), layout);
        for (j, &k) in chosen.iter().enumerate() {
            let z = depth_in_bin(bounds[k], bounds[k + 1], d.offsets[k]);
            if !z.is_finite() {
                return Err(Error::InvalidParams(format!("ray {r}: bin {k} has no finite depth at its offset")));
            }
            let x = cam.unproject(d.pixel[0], d.pixel[1], z);
            let a = &d.attributes[k];
            g.position[3 * j..3 * j + 3].copy_from_slice(x.as_slice());
            g.scale_raw[3 * j..3 * j + 3].copy_from_slice(&a.scale_raw);
            g.rotation_raw[4 * j..4 * j + 4].copy_from_slice(&a.rotation_raw);
            g.opacity_raw[j] = logit(d.probs[k].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP));
            let (rl, fl) = (layout.rgb_len(), layout.feat_len());
            g.sh_rgb[j * rl..(j + 1) * rl].copy_from_slice(&a.sh_rgb);
            g.feat_mu[j * fl..(j + 1) * fl].copy_from_slice(&a.feat_mu);
            g.feat_log_sigma[j * fl..(j + 1) * fl].copy_from_slice(&a.feat_log_sigma);
        }
        out.extend(&g)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sigmoid, IDENTITY_QUAT};

    fn cam_at(tx: f64) -> Camera {
        Camera {
            width: 64,
            height: 48,
            fx: 50.0,
            fy: 50.0,
            cx: 32.0,
            cy: 24.0,
            rotation: IDENTITY_QUAT,
            translation: [tx, 0.0, 0.0],
            near: 1.0,
            far: 10.0,
        }
    }

    #[test]
    fn rectified_pair_gives_horizontal_line() {
        let seg = epipolar_segment([20.5, 30.5], &cam_at(0.0), &cam_at(-0.5), 32).unwrap();
        assert!(!seg.is_empty());
        for s in &seg.samples {
            assert!((s.pixel[1] - 30.5).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_centers_rejected() {
        let mut b = cam_at(0.0);
        b.rotation = crate::model::normalize_quat(&[1.0, 0.0, 0.3, 0.0]).unwrap();
        assert!(matches!(
            epipolar_segment([1.0, 1.0], &cam_at(0.0), &b, 8),
            Err(Error::NoEpipolarGeometry)
        ));
    }

    #[test]
    fn camera_facing_away_sees_nothing() {
        let mut b = cam_at(0.0);
        // behind A, rotated 180 degrees about y
        b.rotation = [0.0, 0.0, 1.0, 0.0];
        b.translation = [0.0, 0.0, -5.0];
        let seg = epipolar_segment([32.0, 24.0], &cam_at(0.0), &b, 32).unwrap();
        assert!(seg.is_empty());
    }

    #[test]
    fn interpolation_matches_direct_projection() {
        let a = cam_at(0.0);
        let b = Camera::look_at(Vector3::new(1.0, 0.3, -0.2), Vector3::new(0.0, 0.0, 5.0), Vector3::y(), 64, 48, 50.0, 1.0, 10.0).unwrap();
        let seg = epipolar_segment([40.0, 20.0], &a, &b, 32).unwrap();
        assert!(seg.samples.len() > 2);
        let lo = seg.samples[0].depth_a;
        let hi = seg.samples.last().unwrap().depth_a;
        for k in 0..50 {
            let d = lo + (hi - lo) * k as f64 / 49.0;
            let p = b.project_camera_point(&b.world_to_camera(&a.unproject(40.0, 20.0, d)));
            let q = seg.point_at_depth(d).unwrap();
            assert!((p[0] - q[0]).abs() < 1e-6 && (p[1] - q[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn bins_uniform_in_disparity() {
        assert_eq!(depth_bins(1.0, 3.0, 2).unwrap(), vec![1.0, 1.5, 3.0]);
        assert_eq!(depth_bins(1.0, f64::INFINITY, 2).unwrap(), vec![1.0, 2.0, f64::INFINITY]);
        assert_eq!(depth_bins(0.5, 7.0, 1).unwrap(), vec![0.5, 7.0]);
        assert!(depth_bins(2.0, 1.0, 3).is_err());
        assert!(depth_bins(0.0, 1.0, 3).is_err());
        assert!(depth_bins(1.0, 2.0, 0).is_err());
    }

    fn dist(probs: Vec<f64>) -> RayBinDistribution {
        let b = probs.len();
        RayBinDistribution {
            camera: cam_at(0.3),
            pixel: [10.5, 7.5],
            offsets: vec![0.0; b],
            attributes: vec![BinAttributes::zeros(ShLayout::default()); b],
            probs,
        }
    }

    #[test]
    fn certain_first_bin_gives_opaque_gaussian_at_near() {
        let d = dist(vec![1.0, 0.0, 0.0]);
        let g = gaussians_from_rays(&[d.clone()], BinSelection::Expected, 1, ShLayout::default()).unwrap();
        assert_eq!(g.len(), 1);
        let x = Vector3::new(g.position[0], g.position[1], g.position[2]);
        assert!((d.camera.world_to_camera(&x).z - 1.0).abs() < 1e-12);
        assert!((sigmoid(g.opacity_raw[0]) - 1.0).abs() < 1e-6);
        // zero-probability bins are skipped
        let g = gaussians_from_rays(&[d], BinSelection::Expected, 3, ShLayout::default()).unwrap();
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn uniform_probabilities_pick_lowest_index() {
        let mut d = dist(vec![0.25; 4]);
        d.offsets = vec![0.5; 4];
        let g = gaussians_from_rays(&[d.clone()], BinSelection::Expected, 1, ShLayout::default()).unwrap();
        let bounds = depth_bins(1.0, 10.0, 4).unwrap();
        let z = d.camera.world_to_camera(&Vector3::new(g.position[0], g.position[1], g.position[2])).z;
        assert!((z - depth_in_bin(bounds[0], bounds[1], 0.5)).abs() < 1e-12);
        assert!((sigmoid(g.opacity_raw[0]) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn centers_lie_on_their_rays() {
        let mut d = dist(vec![0.1, 0.2, 0.3, 0.4]);
        d.offsets = vec![0.1, 0.5, 0.9, 0.3];
        d.camera = Camera::look_at(Vector3::new(2.0, -1.0, -3.0), Vector3::zeros(), Vector3::y(), 64, 48, 50.0, 0.5, 9.0).unwrap();
        let g = gaussians_from_rays(&[d.clone()], BinSelection::Sampled(4), 50, ShLayout::default()).unwrap();
        let c = d.camera.center();
        let dir = d.camera.pixel_ray(d.pixel[0], d.pixel[1]).normalize();
        for i in 0..g.len() {
            let x = Vector3::new(g.position[3 * i], g.position[3 * i + 1], g.position[3 * i + 2]);
            assert!((x - c).cross(&dir).norm() < 1e-9);
        }
    }

    #[test]
    fn sampled_frequencies_follow_probabilities() {
        let d = dist(vec![0.3, 0.7]);
        let g = gaussians_from_rays(&[d], BinSelection::Sampled(1), 100_000, ShLayout::default()).unwrap();
        let first = g.opacity_raw.iter().filter(|o| (sigmoid(**o) - 0.3).abs() < 1e-9).count();
        assert!((first as f64 / 1e5 - 0.3).abs() < 0.01);
    }

    #[test]
    fn invalid_distribution_rejected() {
        let d = dist(vec![0.5, 0.6]);
        assert!(gaussians_from_rays(&[d], BinSelection::Expected, 1, ShLayout::default()).is_err());
        let mut d = dist(vec![0.5, 0.5]);
        d.offsets[1] = 1.0;
        assert!(gaussians_from_rays(&[d], BinSelection::Expected, 1, ShLayout::default()).is_err());
    }
}
