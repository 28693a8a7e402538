//! Sampling semantic Gaussians from variational ones, opacity-driven noise
//! fill of the rendered feature image, and uncertainty rendering.
//!
//! All noise comes from counter-based streams: a ChaCha8 generator keyed by
//! `(seed, domain)` and positioned on stream `id`, where `id` is a Gaussian
//! index or an absolute pixel coordinate. A variate therefore depends only on
//! `(seed, id, draw index)`, never on scheduling or iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Camera, Image, SemanticGaussians, VariationalGaussians};
use crate::raster;

const DOMAIN_GAUSSIAN: u64 = 0x6761_7573_7369_616e;
const DOMAIN_PIXEL: u64 = 0x7069_7865_6c66_696c;
const DOMAIN_RAY: u64 = 0x7261_7973_616d_706c;

/// One independent noise stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub domain: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, domain: u64, stream: u64) -> Self {
        RngStream { seed, domain, stream }
    }

    pub fn for_gaussian(seed: u64, index: usize) -> Self {
        Self::new(seed, DOMAIN_GAUSSIAN, index as u64)
    }

    /// Keyed by absolute pixel coordinates, independent of image size.
    pub fn for_pixel(seed: u64, x: u64, y: u64) -> Self {
        Self::new(seed, DOMAIN_PIXEL, (y << 32) | (x & 0xffff_ffff))
    }

    pub fn for_ray(seed: u64, ray: usize) -> Self {
        Self::new(seed, DOMAIN_RAY, ray as u64)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.domain.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng
    }

    /// Standard-normal variates in draw order.
    pub fn normals(&self) -> impl Iterator<Item = f64> {
        let mut rng = self.rng();
        std::iter::repeat_with(move || StandardNormal.sample(&mut rng))
    }
}

/// Where the reparameterization noise comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Noise {
    /// Per-Gaussian streams under this seed.
    Seeded(u64),
    /// Every draw is zero; sampling returns the means.
    Zero,
}

/// `h = h_mu + eps * h_sigma` for every coefficient, `eps ~ N(0, 1)` drawn
/// from the Gaussian's own stream in coefficient order.
pub fn sample_semantic(g: &VariationalGaussians, noise: Noise) -> SemanticGaussians {
    let fl = g.layout().feat_len();
    let n = g.len();
    let mut epsilon = vec![0.0; n * fl];
    if let Noise::Seeded(seed) = noise {
        epsilon.par_chunks_mut(fl.max(1)).enumerate().for_each(|(i, chunk)| {
            for (e, z) in chunk.iter_mut().zip(RngStream::for_gaussian(seed, i).normals()) {
                *e = z;
            }
        });
    }
    let features = g
        .feat_mu
        .iter()
        .zip(&g.feat_sigma)
        .zip(&epsilon)
        .map(|((mu, sigma), e)| mu + e * sigma)
        .collect();
    SemanticGaussians {
        attrs: g.attrs.clone(),
        features,
        epsilon,
    }
}

/// `F = F_ren + sqrt(1 - O) * eps`, streams keyed by absolute pixel coordinates
/// `(origin.0 + x, origin.1 + y)`.
pub fn background_fill_at(f_ren: &Image, opacity: &Image, seed: u64, origin: (u64, u64)) -> Result<Image> {
    if opacity.channels != 1 || opacity.width != f_ren.width || opacity.height != f_ren.height {
        return Err(Error::ShapeMismatch(format!(
            "opacity image {}x{}x{} does not match features {}x{}",
            opacity.width, opacity.height, opacity.channels, f_ren.width, f_ren.height
        )));
    }
    const TOL: f64 = 1e-6;
    if opacity.data.iter().any(|o| !(*o >= -TOL && *o <= 1.0 + TOL)) {
        return Err(Error::InvalidOpacityImage);
    }
    let d = f_ren.channels;
    let w = f_ren.width;
    let mut out = f_ren.clone();
    out.data.par_chunks_mut(d.max(1)).enumerate().for_each(|(p, px)| {
        let std = (1.0 - opacity.data[p]).max(0.0).sqrt();
        if std == 0.0 {
            return;
        }
        let (x, y) = ((p % w) as u64 + origin.0, (p / w) as u64 + origin.1);
        for (v, e) in px.iter_mut().zip(RngStream::for_pixel(seed, x, y).normals()) {
            *v += std * e;
        }
    });
    Ok(out)
}

pub fn background_fill(f_ren: &Image, opacity: &Image, seed: u64) -> Result<Image> {
    background_fill_at(f_ren, opacity, seed, (0, 0))
}

/// Per-Gaussian uncertainty: mean over feature channels of the band-0 sigma.
pub fn gaussian_uncertainty(g: &VariationalGaussians) -> Vec<f64> {
    let l = g.layout();
    let (d, k) = (l.feat_dim, l.k_feat());
    (0..g.len())
        .map(|i| {
            let s = g.feat_sigma_of(i);
            (0..d).map(|ch| s[ch * k]).sum::<f64>() / d as f64
        })
        .collect()
}

/// Splats the per-Gaussian uncertainty and composites it over a background
/// standard deviation of one: `rendered + (1 - O)`.
pub fn render_uncertainty(g: &VariationalGaussians, cam: &Camera, parallel: bool) -> Result<Image> {
    let values = gaussian_uncertainty(g);
    let (mut img, alpha) = raster::rasterize_scalar(&g.attrs, &values, cam, parallel)?;
    for (v, o) in img.data.iter_mut().zip(&alpha.data) {
        *v += 1.0 - o;
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{activate_params, GaussianParamsRaw, ScaleRange, ShLayout};

    fn scene(n: usize) -> VariationalGaussians {
        let mut raw = GaussianParamsRaw::zeros(n, ShLayout::default());
        for (i, v) in raw.feat_mu.iter_mut().enumerate() {
            *v = (i as f64 * 0.13).sin();
        }
        for (i, v) in raw.feat_log_sigma.iter_mut().enumerate() {
            *v = -1.0 + (i as f64 * 0.7).cos();
        }
        activate_params(&raw, ScaleRange::new(0.01, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn zero_noise_returns_means() {
        let g = scene(7);
        let s = sample_semantic(&g, Noise::Zero);
        assert_eq!(s.features, g.feat_mu);
        assert!(s.epsilon.iter().all(|e| *e == 0.0));
        assert_eq!(s.attrs, g.attrs);
    }

    #[test]
    fn zero_sigma_returns_means_for_any_seed() {
        let mut g = scene(5);
        g.feat_sigma.fill(0.0);
        for seed in [0, 1, 99] {
            assert_eq!(sample_semantic(&g, Noise::Seeded(seed)).features, g.feat_mu);
        }
    }

    #[test]
    fn sampling_is_keyed_by_gaussian_index() {
        let g = scene(6);
        let a = sample_semantic(&g, Noise::Seeded(4));
        let b = sample_semantic(&g, Noise::Seeded(4));
        assert_eq!(a, b);
        // a prefix of the scene draws the same noise for the shared Gaussians
        let mut small = g.clone();
        let fl = g.layout().feat_len();
        small.attrs.positions.truncate(3);
        small.attrs.scales.truncate(3);
        small.attrs.rotations.truncate(3);
        small.attrs.opacities.truncate(3);
        small.attrs.sh_rgb.truncate(3 * g.layout().rgb_len());
        small.feat_mu.truncate(3 * fl);
        small.feat_sigma.truncate(3 * fl);
        let c = sample_semantic(&small, Noise::Seeded(4));
        assert_eq!(c.epsilon[..], a.epsilon[..3 * fl]);
        assert_ne!(sample_semantic(&g, Noise::Seeded(5)).epsilon, a.epsilon);
    }

    #[test]
    fn full_opacity_leaves_features_untouched() {
        let f = Image::from_data(3, 2, 2, (0..12).map(|v| v as f64 * 0.1).collect()).unwrap();
        let o = Image::filled(3, 2, 1, 1.0);
        assert_eq!(background_fill(&f, &o, 7).unwrap(), f);
    }

    #[test]
    fn fill_rejects_bad_opacity() {
        let f = Image::zeros(2, 2, 4);
        let o = Image::filled(2, 2, 1, 1.1);
        assert!(matches!(background_fill(&f, &o, 0), Err(Error::InvalidOpacityImage)));
        let o = Image::filled(2, 2, 1, -0.01);
        assert!(matches!(background_fill(&f, &o, 0), Err(Error::InvalidOpacityImage)));
        let o = Image::zeros(3, 2, 1);
        assert!(background_fill(&f, &o, 0).is_err());
    }

    #[test]
    fn fill_std_follows_opacity() {
        let n = 200 * 250;
        let f = Image::zeros(200, 250, 1);
        let o = Image::filled(200, 250, 1, 0.75);
        let out = background_fill(&f, &o, 3).unwrap();
        let mean = out.data.iter().sum::<f64>() / n as f64;
        let var = out.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // std of the sample std is about 0.5 / sqrt(2n) = 1.6e-3
        assert!((var.sqrt() - 0.5).abs() < 5e-3, "{}", var.sqrt());
    }

    #[test]
    fn fill_commutes_with_crop() {
        let f = Image::from_data(20, 15, 4, (0..1200).map(|v| (v as f64 * 0.01).sin()).collect()).unwrap();
        let o = Image::from_data(20, 15, 1, (0..300).map(|v| (v % 7) as f64 / 7.0).collect()).unwrap();
        let full = background_fill(&f, &o, 11).unwrap().crop(5, 3, 9, 8).unwrap();
        let cropped = background_fill_at(&f.crop(5, 3, 9, 8).unwrap(), &o.crop(5, 3, 9, 8).unwrap(), 11, (5, 3)).unwrap();
        assert_eq!(full, cropped);
    }

    #[test]
    fn uncertainty_of_empty_scene_is_one() {
        let g = VariationalGaussians::empty(ShLayout::default());
        let cam = Camera {
            width: 9,
            height: 7,
            fx: 10.0,
            fy: 10.0,
            cx: 4.5,
            cy: 3.5,
            rotation: crate::model::IDENTITY_QUAT,
            translation: [0.0; 3],
            near: 0.1,
            far: 10.0,
        };
        let img = render_uncertainty(&g, &cam, true).unwrap();
        assert!(img.data.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn per_gaussian_uncertainty_uses_dc_band() {
        let mut g = scene(2);
        let k = g.layout().k_feat();
        let fl = g.layout().feat_len();
        g.feat_sigma.fill(9.0);
        for ch in 0..4 {
            g.feat_sigma[fl + ch * k] = ch as f64;
        }
        let u = gaussian_uncertainty(&g);
        assert_eq!(u, vec![9.0, 1.5]);
    }
}
