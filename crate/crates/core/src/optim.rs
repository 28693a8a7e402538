//! Losses, image metrics, Adam and the per-scene fitting loop.
//!
//! The reconstruction loss reads the first three rendered feature channels
//! as a color image (an identity stand-in for a learned decoder) and compares
//! it with the target under L1. The auxiliary loss is the squared error of
//! the RGB rendering. Perceptual and adversarial terms are not implemented;
//! their weights are carried in [`LossWeights`] but multiply nothing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{rasterize_backward, BackwardOptions, GradientSet, Upstream};
use crate::model::{
    activate_params, scene_extent, Camera, GaussianParamsRaw, Image, LossWeights, ScaleRange,
    VariationalGaussians,
};
use crate::raster::{rasterize, RenderOptions};
use crate::variational::{sample_semantic, Noise, RngStream};

fn check_shapes(pred: &Image, target: &Image) -> Result<()> {
    if !pred.same_shape(target) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            pred.width, pred.height, pred.channels, target.width, target.height, target.channels
        )));
    }
    Ok(())
}

/// Mean absolute error and its subgradient (zero at ties).
pub fn loss_l1(pred: &Image, target: &Image) -> Result<(f64, Image)> {
    check_shapes(pred, target)?;
    let n = pred.data.len().max(1) as f64;
    let mut grad = Image::zeros(pred.width, pred.height, pred.channels);
    let mut sum = 0.0;
    for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let r = p - t;
        sum += r.abs();
        *g = if r > 0.0 {
            1.0 / n
        } else if r < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((sum / n, grad))
}

/// Mean squared error and its gradient.
pub fn loss_mse(pred: &Image, target: &Image) -> Result<(f64, Image)> {
    check_shapes(pred, target)?;
    let n = pred.data.len().max(1) as f64;
    let mut grad = Image::zeros(pred.width, pred.height, pred.channels);
    let mut sum = 0.0;
    for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let r = p - t;
        sum += r * r;
        *g = 2.0 * r / n;
    }
    Ok((sum / n, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Auxiliary RGB loss only.
    Warmup,
    Full,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub total: f64,
    /// Feature-path L1, zero during warmup.
    pub l1: f64,
    pub mse: f64,
}

/// Loss value with gradients for the rendered RGB and feature images.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub terms: LossTerms,
    pub grad_rgb: Image,
    pub grad_features: Image,
}

/// `lambda3 * MSE(rgb, target)`, plus `lambda1 * L1(features[..3], target)`
/// in the full phase.
pub fn total_loss(rgb: &Image, features: &Image, target: &Image, w: &LossWeights, phase: Phase) -> Result<LossOutput> {
    w.validate()?;
    if target.channels != 3 || features.channels < 3 {
        return Err(Error::ShapeMismatch("loss needs a 3-channel target and at least 3 feature channels".into()));
    }
    let (mse, mut grad_rgb) = loss_mse(rgb, target)?;
    for g in grad_rgb.data.iter_mut() {
        *g *= w.lambda3;
    }
    let mut grad_features = Image::zeros(features.width, features.height, features.channels);
    let mut terms = LossTerms {
        total: w.lambda3 * mse,
        l1: 0.0,
        mse,
    };
    if phase == Phase::Full {
        let decoded = features.leading_channels(3)?;
        let (l1, g) = loss_l1(&decoded, target)?;
        terms.l1 = l1;
        terms.total += w.lambda1 * l1;
        let d = features.channels;
        for (p, gp) in g.data.chunks(3).enumerate() {
            for c in 0..3 {
                grad_features.data[p * d + c] = w.lambda1 * gp[c];
            }
        }
    }
    Ok(LossOutput {
        terms,
        grad_rgb,
        grad_features,
    })
}

/// `10 log10(max^2 / MSE)`; identical images give `+inf`.
pub fn psnr(pred: &Image, target: &Image, max_val: f64) -> Result<f64> {
    let (mse, _) = loss_mse(pred, target)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

pub(crate) fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode filtering of one channel.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM over valid window positions and channels, Gaussian window
/// 11x11 with sigma 1.5, `K1 = 0.01`, `K2 = 0.03`.
pub fn ssim(pred: &Image, target: &Image, max_val: f64) -> Result<f64> {
    check_shapes(pred, target)?;
    if pred.width < SSIM_WINDOW || pred.height < SSIM_WINDOW {
        return Err(Error::ShapeMismatch(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    let k = ssim_kernel();
    let (w, h, ch) = (pred.width, pred.height, pred.channels);
    let mut total = 0.0;
    for c in 0..ch {
        let a: Vec<f64> = (0..w * h).map(|p| pred.data[p * ch + c]).collect();
        let b: Vec<f64> = (0..w * h).map(|p| target.data[p * ch + c]).collect();
        let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let (mu_a, ow, oh) = filter_valid(&a, w, h, &k);
        let (mu_b, ..) = filter_valid(&b, w, h, &k);
        let (aa, ..) = filter_valid(&prod(&a, &a), w, h, &k);
        let (bb, ..) = filter_valid(&prod(&b, &b), w, h, &k);
        let (ab, ..) = filter_valid(&prod(&a, &b), w, h, &k);
        let mut sum = 0.0;
        for i in 0..ow * oh {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / (ow * oh) as f64;
    }
    Ok(total / ch as f64)
}

/// Per-group Adam learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub position: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh_rgb: f64,
    pub feat_mu: f64,
    pub feat_log_sigma: f64,
}

impl LearningRates {
    /// Position rate proportional to the scene extent; fixed rates elsewhere.
    pub fn for_extent(extent: f64) -> Self {
        LearningRates {
            position: 2e-4 * extent,
            scale: 5e-3,
            rotation: 5e-3,
            opacity: 5e-3,
            sh_rgb: 2.5e-3,
            feat_mu: 2.5e-3,
            feat_log_sigma: 2.5e-3,
        }
    }

    /// In the order of [`GaussianParamsRaw::groups`].
    pub fn as_array(&self) -> [f64; 7] {
        [
            self.position,
            self.scale,
            self.rotation,
            self.opacity,
            self.sh_rgb,
            self.feat_mu,
            self.feat_log_sigma,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        Ok(())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// First and second moments per raw coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &GaussianParamsRaw) -> Self {
        let sizes: Vec<usize> = params.groups().iter().map(|(_, g)| g.len()).collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }
}

/// One bias-corrected Adam update. On a non-finite gradient nothing is
/// modified and the offending coordinate is reported.
pub fn adam_step(params: &mut GaussianParamsRaw, grads: &GradientSet, state: &mut AdamState, lr: &LearningRates) -> Result<()> {
    let gg = grads.groups();
    for (gi, (name, g)) in gg.iter().enumerate() {
        if g.len() != state.m[gi].len() || g.len() != params.groups()[gi].1.len() {
            return Err(Error::LengthMismatch {
                expected: state.m[gi].len(),
                got: g.len(),
            });
        }
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Diverged { group: name, index });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let rates = lr.as_array();
    for (gi, (_, p)) in params.groups_mut().into_iter().enumerate() {
        let g = gg[gi].1;
        let (m, v) = (&mut state.m[gi], &mut state.v[gi]);
        for k in 0..p.len() {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            p[k] -= rates[gi] * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Settings for [`fit_scene`]. Every field has a default so partial config
/// files are accepted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    /// Iterations trained on the auxiliary loss only. Defaults to 20%.
    pub warmup_iterations: Option<usize>,
    /// Defaults to [`LearningRates::for_extent`] of the training cameras.
    pub learning_rates: Option<LearningRates>,
    pub weights: LossWeights,
    pub seed: u64,
    /// Defaults to [`ScaleRange::from_extent`].
    pub scale_range: Option<[f64; 2]>,
    /// Gaussians in the random initialization.
    pub init_count: usize,
    /// Training views rendered per iteration; their gradients are averaged.
    pub views_per_iteration: usize,
    /// Held-out PSNR is logged every this many iterations (0 disables).
    pub eval_every: usize,
    /// RGB bands above `iteration / sh_degree_interval` receive no updates
    /// (0 trains every band from the start).
    pub sh_degree_interval: usize,
    /// Highest RGB band ever trained.
    pub max_sh_degree: usize,
    pub parallel: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 2000,
            warmup_iterations: None,
            learning_rates: None,
            weights: LossWeights::default(),
            seed: 0,
            scale_range: None,
            init_count: 100,
            views_per_iteration: 1,
            eval_every: 100,
            sh_degree_interval: 1000,
            max_sh_degree: crate::sh::MAX_DEGREE,
            parallel: true,
        }
    }
}

impl FitConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_iterations.unwrap_or(self.iterations / 5)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup() > self.iterations {
            return Err(Error::InvalidConfig("warmup_iterations exceeds iterations".into()));
        }
        if self.views_per_iteration == 0 {
            return Err(Error::InvalidConfig("views_per_iteration must be positive".into()));
        }
        if let Some(lr) = &self.learning_rates {
            lr.validate()?;
        }
        if let Some([a, b]) = self.scale_range {
            ScaleRange::new(a, b)?;
        }
        self.weights.validate()
    }

    pub fn resolved_rates(&self, cameras: &[Camera]) -> LearningRates {
        self.learning_rates
            .unwrap_or_else(|| LearningRates::for_extent(scene_extent(cameras)))
    }

    pub fn resolved_scale_range(&self, cameras: &[Camera]) -> Result<ScaleRange> {
        match self.scale_range {
            Some([a, b]) => ScaleRange::new(a, b),
            None => Ok(ScaleRange::from_extent(scene_extent(cameras))),
        }
    }
}

/// One calibrated target image.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub image: Image,
}

/// One line of the fitting log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub loss: f64,
    pub l1: f64,
    pub mse: f64,
    /// Held-out PSNR of the RGB rendering, when evaluated and finite.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    pub mean_sigma: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Final (or last good) raw parameters, rounded to f32 precision.
    pub raw: GaussianParamsRaw,
    pub scale_range: ScaleRange,
    pub scene: VariationalGaussians,
    pub log: Vec<LogRecord>,
    /// Set when a non-finite gradient stopped the fit.
    pub diverged: Option<String>,
}

/// Gaussians spread over the box spanned by points seen by the cameras.
pub fn random_init(cameras: &[Camera], count: usize, scale_range: ScaleRange, seed: u64) -> Result<GaussianParamsRaw> {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};
    let layout = crate::model::ShLayout::default();
    let mut raw = GaussianParamsRaw::zeros(count, layout);
    let mut rng = RngStream::new(seed, 0x696e_6974, 0).rng();
    // the region every camera looks at: points a typical depth in front of each
    let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
    for c in cameras {
        let center = c.center();
        let depth = center.norm().max(c.near * 2.0).min(c.far * 0.5);
        for (u, v) in [(0.0, 0.0), (c.width as f64, 0.0), (0.0, c.height as f64), (c.width as f64, c.height as f64)] {
            let p = c.unproject(u, v, depth);
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let p = c.unproject(c.cx, c.cy, depth);
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    if cameras.is_empty() {
        lo = [-1.0; 3];
        hi = [1.0; 3];
    }
    // shrink toward the center so initial Gaussians are widely visible
    let center: Vec<f64> = (0..3).map(|a| 0.5 * (lo[a] + hi[a])).collect();
    let half: Vec<f64> = (0..3).map(|a| 0.25 * (hi[a] - lo[a])).collect();
    let extent = half.iter().fold(0.0f64, |m, v| m.max(*v));
    let init_scale = (extent / (count.max(1) as f64).cbrt()).clamp(scale_range.min * 1.01, scale_range.max * 0.99);
    for i in 0..count {
        for a in 0..3 {
            raw.position[3 * i + a] = center[a] + half[a] * rng.gen_range(-1.0..1.0);
            raw.scale_raw[3 * i + a] = scale_range.inverse(init_scale);
        }
        for k in 0..4 {
            raw.rotation_raw[4 * i + k] = StandardNormal.sample(&mut rng);
        }
        raw.opacity_raw[i] = crate::model::logit(0.1);
        let rl = layout.rgb_len();
        for ch in 0..3 {
            raw.sh_rgb[i * rl + ch * layout.k_rgb()] = rng.gen_range(-0.5..0.5);
        }
        let fl = layout.feat_len();
        for ch in 0..layout.feat_dim {
            raw.feat_mu[i * fl + ch * layout.k_feat()] = rng.gen_range(-0.5..0.5);
        }
        for v in &mut raw.feat_log_sigma[i * fl..(i + 1) * fl] {
            *v = (0.1f64).ln();
        }
    }
    Ok(raw)
}

fn mean_sigma(raw: &GaussianParamsRaw) -> f64 {
    if raw.feat_log_sigma.is_empty() {
        return 0.0;
    }
    raw.feat_log_sigma.iter().map(|v| v.exp()).sum::<f64>() / raw.feat_log_sigma.len() as f64
}

/// Stream seed for iteration `it`.
fn iteration_seed(seed: u64, it: usize) -> u64 {
    let mut z = seed ^ (it as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fits a variational scene to calibrated views. Each iteration activates
/// the parameters, draws a fresh feature sample, renders a seeded choice of
/// training views, and applies one Adam step. `on_record` sees every log
/// record as it is produced.
pub fn fit_scene(
    cfg: &FitConfig,
    views: &[View],
    init: Option<GaussianParamsRaw>,
    holdout: Option<&View>,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<FitResult> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::InvalidConfig("no training views".into()));
    }
    for v in views {
        v.camera.validate()?;
        if v.image.width != v.camera.width as usize || v.image.height != v.camera.height as usize || v.image.channels != 3 {
            return Err(Error::ShapeMismatch("training image does not match its camera".into()));
        }
    }
    let cameras: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
    let rates = cfg.resolved_rates(&cameras);
    let scale_range = cfg.resolved_scale_range(&cameras)?;
    let mut raw = match init {
        Some(r) => r,
        None => random_init(&cameras, cfg.init_count, scale_range, cfg.seed)?,
    };
    raw.validate()?;
    let mut state = AdamState::new(&raw);
    let mut order_rng = rand_chacha::ChaCha8Rng::seed_from_u64(iteration_seed(cfg.seed, usize::MAX));
    let mut order: Vec<usize> = Vec::new();
    let ropts = RenderOptions {
        parallel: cfg.parallel,
        save_state: true,
    };
    let bopts = BackwardOptions {
        parallel: cfg.parallel,
        ..Default::default()
    };
    let warmup = cfg.warmup();
    let mut log = Vec::new();
    let mut diverged = None;
    let mut last_good = raw.clone();
    for it in 0..cfg.iterations {
        let phase = if it < warmup { Phase::Warmup } else { Phase::Full };
        let step = (|| -> Result<(LossTerms, GradientSet)> {
            let g = activate_params(&raw, scale_range)?;
            let sg = sample_semantic(&g, Noise::Seeded(iteration_seed(cfg.seed, it)));
            let mut total = GradientSet::zeros_like(&raw);
            let mut terms = LossTerms::default();
            for _ in 0..cfg.views_per_iteration {
                if order.is_empty() {
                    order = (0..views.len()).collect();
                    order.shuffle(&mut order_rng);
                }
                let view = &views[order.pop().expect("refilled")];
                let out = rasterize(&sg, &view.camera, ropts)?;
                let loss = total_loss(&out.rgb, &out.features, &view.image, &cfg.weights, phase)?;
                let up = Upstream {
                    rgb: loss.grad_rgb,
                    features: loss.grad_features,
                    alpha: Image::zeros(view.image.width, view.image.height, 1),
                };
                let grad = rasterize_backward(&raw, scale_range, &sg, &view.camera, &out, &up, bopts)?;
                total.accumulate(&grad);
                terms.total += loss.terms.total;
                terms.l1 += loss.terms.l1;
                terms.mse += loss.terms.mse;
            }
            let k = 1.0 / cfg.views_per_iteration as f64;
            total.scale(k);
            terms.total *= k;
            terms.l1 *= k;
            terms.mse *= k;
            Ok((terms, total))
        })();
        let (terms, mut grads) = step?;
        let degree = match cfg.sh_degree_interval {
            0 => cfg.max_sh_degree,
            n => (it / n).min(cfg.max_sh_degree),
        };
        mask_rgb_bands(&mut grads, raw.layout, degree);
        if !terms.total.is_finite() {
            diverged = Some(format!("non-finite loss at iteration {it}"));
            break;
        }
        let psnr_val = match holdout {
            Some(h) if cfg.eval_every > 0 && (it % cfg.eval_every == 0) => Some(holdout_psnr(&raw, scale_range, h, cfg.parallel)?),
            _ => None,
        };
        let record = LogRecord {
            iteration: it,
            phase,
            loss: terms.total,
            l1: terms.l1,
            mse: terms.mse,
            psnr: psnr_val.filter(|p| p.is_finite()),
            mean_sigma: mean_sigma(&raw),
        };
        on_record(&record);
        log.push(record);
        last_good.clone_from(&raw);
        if let Err(e) = adam_step(&mut raw, &grads, &mut state, &rates) {
            log::error!("stopping at iteration {it}: {e}");
            diverged = Some(e.to_string());
            raw.clone_from(&last_good);
            break;
        }
        if raw.validate().is_err() {
            diverged = Some(format!("non-finite parameters after iteration {it}"));
            raw.clone_from(&last_good);
            break;
        }
    }
    raw.round_to_f32();
    let scene = activate_params(&raw, scale_range)?;
    Ok(FitResult {
        raw,
        scale_range,
        scene,
        log,
        diverged,
    })
}

/// Zeroes RGB coefficient gradients of bands above `degree`.
fn mask_rgb_bands(grads: &mut GradientSet, layout: crate::model::ShLayout, degree: usize) {
    let active = crate::sh::num_coeffs(degree.min(layout.lmax_rgb));
    let k = layout.k_rgb();
    for chunk in grads.sh_rgb.chunks_mut(k) {
        chunk[active..].fill(0.0);
    }
}

/// Loss of one view for a fixed feature sample, without any update.
pub fn evaluate_loss(raw: &GaussianParamsRaw, scale_range: ScaleRange, view: &View, weights: &LossWeights, phase: Phase, noise: Noise) -> Result<LossTerms> {
    let g = activate_params(raw, scale_range)?;
    let sg = sample_semantic(&g, noise);
    let out = rasterize(&sg, &view.camera, RenderOptions::default())?;
    Ok(total_loss(&out.rgb, &out.features, &view.image, weights, phase)?.terms)
}

/// PSNR of the RGB rendering against a view. RGB does not depend on the
/// feature sample, so no noise is drawn.
pub fn holdout_psnr(raw: &GaussianParamsRaw, scale_range: ScaleRange, view: &View, parallel: bool) -> Result<f64> {
    let g = activate_params(raw, scale_range)?;
    let sg = sample_semantic(&g, Noise::Zero);
    let out = rasterize(&sg, &view.camera, RenderOptions { parallel, save_state: false })?;
    psnr(&out.rgb, &view.image, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ShLayout;

    fn img(w: usize, h: usize, c: usize, f: impl Fn(usize) -> f64) -> Image {
        Image::from_data(w, h, c, (0..w * h * c).map(f).collect()).unwrap()
    }

    #[test]
    fn l1_cases() {
        let a = img(4, 3, 3, |i| (i as f64 * 0.3).sin());
        assert_eq!(loss_l1(&a, &a).unwrap().0, 0.0);
        assert!(loss_l1(&a, &a).unwrap().1.data.iter().all(|g| *g == 0.0));
        let b = img(4, 3, 3, |i| (i as f64 * 0.3).sin() + 0.5);
        assert!((loss_l1(&b, &a).unwrap().0 - 0.5).abs() < 1e-15);
        let c = img(4, 3, 3, |i| (i as f64 * 1.7).cos());
        let mut oracle = 0.0;
        for y in 0..3 {
            for x in 0..4 {
                for ch in 0..3 {
                    oracle += (c.get(x, y, ch) - a.get(x, y, ch)).abs();
                }
            }
        }
        assert!((loss_l1(&c, &a).unwrap().0 - oracle / 36.0).abs() < 1e-12);
        assert!(loss_l1(&a, &Image::zeros(4, 3, 1)).is_err());
    }

    #[test]
    fn mse_cases_and_gradient() {
        let a = img(8, 8, 3, |i| (i as f64 * 0.3).sin());
        assert_eq!(loss_mse(&a, &a).unwrap().0, 0.0);
        let b = img(8, 8, 3, |i| (i as f64 * 0.3).sin() + 0.5);
        assert!((loss_mse(&b, &a).unwrap().0 - 0.25).abs() < 1e-15);
        let p = img(8, 8, 3, |i| (i as f64 * 0.77).cos());
        let (_, g) = loss_mse(&p, &a).unwrap();
        let h = 1e-5;
        for k in [0, 17, 100, 191] {
            let mut q = p.clone();
            q.data[k] += h;
            let fp = loss_mse(&q, &a).unwrap().0;
            q.data[k] -= 2.0 * h;
            let fm = loss_mse(&q, &a).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g.data[k]).abs() / g.data[k].abs() < 1e-6);
        }
    }

    #[test]
    fn total_loss_phases() {
        let t = img(4, 4, 3, |i| (i % 5) as f64 * 0.1);
        let rgb = img(4, 4, 3, |i| (i % 5) as f64 * 0.1 + 0.5);
        let w = LossWeights::default();
        let out = total_loss(&rgb, &Image::zeros(4, 4, 4), &t, &w, Phase::Warmup).unwrap();
        assert!((out.terms.total - 2.5).abs() < 1e-12);
        assert!(out.grad_features.data.iter().all(|g| *g == 0.0));

        let feats = img(4, 4, 4, |i| if i % 4 < 3 { t.data[(i / 4) * 3 + i % 4] } else { 9.0 });
        let out = total_loss(&t, &feats, &t, &w, Phase::Full).unwrap();
        assert_eq!(out.terms.total, 0.0);

        let feats = img(4, 4, 4, |i| (i as f64 * 0.37).sin());
        let out = total_loss(&rgb, &feats, &t, &w, Phase::Full).unwrap();
        let l1 = loss_l1(&feats.leading_channels(3).unwrap(), &t).unwrap().0;
        let mse = loss_mse(&rgb, &t).unwrap().0;
        assert!((out.terms.total - (w.lambda1 * l1 + w.lambda3 * mse)).abs() < 1e-12);
        // fourth channel receives no gradient
        assert!(out.grad_features.data.iter().skip(3).step_by(4).all(|g| *g == 0.0));
    }

    #[test]
    fn psnr_closed_form() {
        let a = Image::zeros(5, 5, 3);
        let b = Image::filled(5, 5, 3, 0.1);
        assert!((psnr(&b, &a, 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    }

    /// Direct 2D window sums, no separability.
    fn ssim_naive(a: &Image, b: &Image) -> f64 {
        let k = ssim_kernel();
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        for ch in 0..a.channels {
            let mut sum = 0.0;
            let mut count = 0;
            for y in 0..=a.height - 11 {
                for x in 0..=a.width - 11 {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for j in 0..11 {
                        for i in 0..11 {
                            let w = k[i] * k[j];
                            let (p, q) = (a.get(x + i, y + j, ch), b.get(x + i, y + j, ch));
                            ma += w * p;
                            mb += w * q;
                            saa += w * p * p;
                            sbb += w * q * q;
                            sab += w * p * q;
                        }
                    }
                    let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
            total += sum / count as f64;
        }
        total / a.channels as f64
    }

    #[test]
    fn ssim_matches_naive() {
        let a = img(23, 19, 3, |i| 0.5 + 0.5 * (i as f64 * 0.91).sin());
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let half = Image {
            data: a.data.iter().map(|v| v * 0.5).collect(),
            ..a.clone()
        };
        let s = ssim(&a, &half, 1.0).unwrap();
        assert!((s - ssim_naive(&a, &half)).abs() < 1e-6);
        assert!(s < 1.0);
        assert!(ssim(&Image::zeros(8, 8, 1), &Image::zeros(8, 8, 1), 1.0).is_err());
    }

    fn grads_filled(raw: &GaussianParamsRaw, v: f64) -> GradientSet {
        let mut g = GradientSet::zeros_like(raw);
        for x in [&mut g.position, &mut g.scale_raw, &mut g.rotation_raw, &mut g.opacity_raw, &mut g.sh_rgb, &mut g.feat_mu, &mut g.feat_log_sigma] {
            x.fill(v);
        }
        g
    }

    #[test]
    fn adam_matches_scalar_oracle() {
        let raw0 = GaussianParamsRaw::zeros(2, ShLayout::default());
        let mut raw = raw0.clone();
        let mut st = AdamState::new(&raw);
        let lr = LearningRates::for_extent(1.0);
        let zero = GradientSet::zeros_like(&raw);
        adam_step(&mut raw, &zero, &mut st, &lr).unwrap();
        assert_eq!(raw, raw0);

        let mut raw = raw0.clone();
        let mut st = AdamState::new(&raw);
        let g = 0.3;
        let grads = grads_filled(&raw, g);
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            adam_step(&mut raw, &grads, &mut st, &lr).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= lr.scale * mh / (vh.sqrt() + 1e-15);
        }
        assert!((raw.scale_raw[0] - p).abs() < 1e-15);
        assert!((raw.opacity_raw[1] - (p / lr.scale) * lr.opacity).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut raw = GaussianParamsRaw::zeros(2, ShLayout::default());
        let before = raw.clone();
        let mut st = AdamState::new(&raw);
        let mut grads = GradientSet::zeros_like(&raw);
        grads.opacity_raw[1] = f64::NAN;
        let e = adam_step(&mut raw, &grads, &mut st, &LearningRates::for_extent(1.0)).unwrap_err();
        assert!(e.to_string().starts_with("diverged"));
        assert_eq!(raw, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn adam_first_step_sign_is_scale_invariant() {
        let raw = GaussianParamsRaw::zeros(3, ShLayout::default());
        let mut grads = GradientSet::zeros_like(&raw);
        for (k, v) in grads.position.iter_mut().enumerate() {
            *v = (k as f64 - 4.0) * 0.1;
        }
        let step = |c: f64| {
            let mut g = grads.clone();
            g.scale(c);
            let mut r = raw.clone();
            adam_step(&mut r, &g, &mut AdamState::new(&raw), &LearningRates::for_extent(1.0)).unwrap();
            r.position
        };
        let a = step(1.0);
        let b = step(37.0);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.signum() * (*x != 0.0) as i32 as f64, y.signum() * (*y != 0.0) as i32 as f64);
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg: FitConfig = serde_json::from_str(r#"{"iterations": 50, "seed": 3}"#).unwrap();
        assert_eq!(cfg.warmup(), 10);
        assert!(cfg.validate().is_ok());
        let bad = FitConfig {
            iterations: 5,
            warmup_iterations: Some(6),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<FitConfig>(r#"{"iterationz": 5}"#).is_err());
    }
}
