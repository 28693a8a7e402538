//! File formats: the binary scene container, camera lists, images, and JSON
//! configs and reports. Every writer goes through a temporary file in the
//! destination directory followed by a rename, so readers never observe a
//! partial file.
//!
//! Scene container, all little-endian:
//!
//! ```text
//! offset size
//!      0    4  magic "VGSC"
//!      4    4  u32 version (1)
//!      8    4  u32 kind: 0 variational, 1 semantic
//!     12    8  u64 point count N
//!     20    4  u32 D, feature channels
//!     24    4  u32 K_rgb
//!     28    4  u32 K_feat
//!     32    4  f32 s_min
//!     36    4  f32 s_max
//!     40       N records of f32:
//!                position[3] opacity_raw scale_raw[3] rotation_raw[4]
//!                sh_rgb[K_rgb][3] feat_mu[K_feat][D] feat_log_sigma[K_feat][D]
//! ```
//!
//! Coefficient blocks are band-major: all channels of coefficient 0, then
//! all channels of coefficient 1, and so on. Semantic records store the
//! sampled coefficients `h` in the `feat_mu` slot and omit `feat_log_sigma`.
//!
//! Raw float image: magic "VGIM", then u32 width, height and channels,
//! then row-major interleaved f32 samples.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    activate_params, normalize_quat, quat_norm, Camera, GaussianParamsRaw, Image, ScaleRange, SemanticGaussians,
    ShLayout, VariationalGaussians,
};
use crate::sh::degree_for;
use crate::variational::{sample_semantic, Noise};

pub const SCENE_MAGIC: &[u8; 4] = b"VGSC";
pub const SCENE_VERSION: u32 = 1;
pub const SCENE_HEADER_LEN: usize = 40;
pub const IMAGE_MAGIC: &[u8; 4] = b"VGIM";

/// Writes `bytes` to `path` through a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Variational,
    Semantic,
}

/// Contents of a scene file. For semantic scenes `raw.feat_mu` holds the
/// sampled coefficients and `raw.feat_log_sigma` is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFile {
    pub kind: SceneKind,
    pub raw: GaussianParamsRaw,
    pub scale_range: ScaleRange,
}

impl SceneFile {
    pub fn variational(raw: GaussianParamsRaw, scale_range: ScaleRange) -> Self {
        SceneFile {
            kind: SceneKind::Variational,
            raw,
            scale_range,
        }
    }

    /// A semantic instance: structural parameters of `raw` with features `h`.
    pub fn semantic(raw: &GaussianParamsRaw, h: &[f64], scale_range: ScaleRange) -> Result<Self> {
        if h.len() != raw.feat_mu.len() {
            return Err(Error::LengthMismatch {
                expected: raw.feat_mu.len(),
                got: h.len(),
            });
        }
        let mut raw = raw.clone();
        raw.feat_mu.copy_from_slice(h);
        raw.feat_log_sigma.fill(0.0);
        Ok(SceneFile {
            kind: SceneKind::Semantic,
            raw,
            scale_range,
        })
    }

    pub fn activate(&self) -> Result<VariationalGaussians> {
        activate_params(&self.raw, self.scale_range)
    }

    /// The stored instance for semantic files; a draw under `noise` otherwise.
    pub fn instance(&self, noise: Noise) -> Result<SemanticGaussians> {
        let g = self.activate()?;
        Ok(match self.kind {
            SceneKind::Semantic => SemanticGaussians::from_features(g.attrs, self.raw.feat_mu.clone()),
            SceneKind::Variational => sample_semantic(&g, noise),
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

/// Channel-major `[ch][k]` in memory to band-major `[k][ch]` on disk.
fn put_band_major(out: &mut Vec<u8>, coeffs: &[f64], channels: usize, k: usize) {
    for kk in 0..k {
        for ch in 0..channels {
            put_f32(out, coeffs[ch * k + kk]);
        }
    }
}

pub fn encode_scene(scene: &SceneFile) -> Result<Vec<u8>> {
    let raw = &scene.raw;
    raw.validate()?;
    let l = raw.layout;
    let n = raw.len();
    let mut out = Vec::with_capacity(SCENE_HEADER_LEN + n * record_len(scene.kind, l) * 4);
    out.extend_from_slice(SCENE_MAGIC);
    put_u32(&mut out, SCENE_VERSION);
    put_u32(&mut out, matches!(scene.kind, SceneKind::Semantic) as u32);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    put_u32(&mut out, l.feat_dim as u32);
    put_u32(&mut out, l.k_rgb() as u32);
    put_u32(&mut out, l.k_feat() as u32);
    put_f32(&mut out, scene.scale_range.min);
    put_f32(&mut out, scene.scale_range.max);
    let (rl, fl) = (l.rgb_len(), l.feat_len());
    for i in 0..n {
        for v in &raw.position[3 * i..3 * i + 3] {
            put_f32(&mut out, *v);
        }
        put_f32(&mut out, raw.opacity_raw[i]);
        for v in &raw.scale_raw[3 * i..3 * i + 3] {
            put_f32(&mut out, *v);
        }
        for v in &raw.rotation_raw[4 * i..4 * i + 4] {
            put_f32(&mut out, *v);
        }
        put_band_major(&mut out, &raw.sh_rgb[i * rl..(i + 1) * rl], 3, l.k_rgb());
        put_band_major(&mut out, &raw.feat_mu[i * fl..(i + 1) * fl], l.feat_dim, l.k_feat());
        if scene.kind == SceneKind::Variational {
            put_band_major(&mut out, &raw.feat_log_sigma[i * fl..(i + 1) * fl], l.feat_dim, l.k_feat());
        }
    }
    Ok(out)
}

fn record_len(kind: SceneKind, l: ShLayout) -> usize {
    let sigma = if kind == SceneKind::Variational { l.feat_len() } else { 0 };
    11 + l.rgb_len() + l.feat_len() + sigma
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedPayload)?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::TruncatedPayload)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64)
    }

    fn band_major(&mut self, out: &mut [f64], channels: usize, k: usize) -> Result<()> {
        for kk in 0..k {
            for ch in 0..channels {
                out[ch * k + kk] = self.f32()?;
            }
        }
        Ok(())
    }
}

pub fn decode_scene(bytes: &[u8]) -> Result<SceneFile> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::BadMagic("scene"))? != SCENE_MAGIC {
        return Err(Error::BadMagic("scene"));
    }
    let version = r.u32()?;
    if version != SCENE_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let kind = match r.u32()? {
        0 => SceneKind::Variational,
        1 => SceneKind::Semantic,
        k => return Err(Error::Codec(format!("unknown scene kind {k}"))),
    };
    let n = r.u64()?;
    let d = r.u32()? as usize;
    let k_rgb = r.u32()? as usize;
    let k_feat = r.u32()? as usize;
    let (Some(lmax_rgb), Some(lmax_feat)) = (degree_for(k_rgb), degree_for(k_feat)) else {
        return Err(Error::Codec(format!("coefficient counts {k_rgb}/{k_feat} are not full bands")));
    };
    let layout = ShLayout {
        lmax_rgb,
        lmax_feat,
        feat_dim: d,
    };
    layout.validate()?;
    let scale_range = ScaleRange::new(r.f32()?, r.f32()?)?;
    let rec = record_len(kind, layout) * 4;
    let expected = (n as u128) * rec as u128;
    let remaining = (bytes.len() - r.pos) as u128;
    if remaining < expected {
        return Err(Error::TruncatedPayload);
    }
    if remaining > expected {
        return Err(Error::Codec(format!("{} trailing bytes", remaining - expected)));
    }
    let n = n as usize;
    let mut raw = GaussianParamsRaw::zeros(n, layout);
    let (rl, fl) = (layout.rgb_len(), layout.feat_len());
    for i in 0..n {
        for v in &mut raw.position[3 * i..3 * i + 3] {
            *v = r.f32()?;
        }
        raw.opacity_raw[i] = r.f32()?;
        for v in &mut raw.scale_raw[3 * i..3 * i + 3] {
            *v = r.f32()?;
        }
        for v in &mut raw.rotation_raw[4 * i..4 * i + 4] {
            *v = r.f32()?;
        }
        r.band_major(&mut raw.sh_rgb[i * rl..(i + 1) * rl], 3, k_rgb)?;
        r.band_major(&mut raw.feat_mu[i * fl..(i + 1) * fl], d, k_feat)?;
        if kind == SceneKind::Variational {
            r.band_major(&mut raw.feat_log_sigma[i * fl..(i + 1) * fl], d, k_feat)?;
        }
    }
    raw.validate()?;
    Ok(SceneFile { kind, raw, scale_range })
}

pub fn save_scene(scene: &SceneFile, path: &Path) -> Result<()> {
    write_atomic(path, &encode_scene(scene)?)
}

pub fn load_scene(path: &Path) -> Result<SceneFile> {
    decode_scene(&fs::read(path)?)
}

/// One camera record of a camera list file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub id: u32,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub near: f64,
    pub far: f64,
}

/// Quaternions off unit norm by more than this are reported when loaded.
pub const QUAT_WARN_TOL: f64 = 1e-3;

impl CameraRecord {
    pub fn from_camera(id: u32, c: &Camera) -> Self {
        CameraRecord {
            id,
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            qw: c.rotation[0],
            qx: c.rotation[1],
            qy: c.rotation[2],
            qz: c.rotation[3],
            tx: c.translation[0],
            ty: c.translation[1],
            tz: c.translation[2],
            near: c.near,
            far: c.far,
        }
    }

    /// Validated camera with a normalized rotation.
    pub fn to_camera(&self) -> Result<Camera> {
        let values = [
            self.fx, self.fy, self.cx, self.cy, self.qw, self.qx, self.qy, self.qz, self.tx, self.ty, self.tz, self.near,
        ];
        if values.iter().any(|v| !v.is_finite()) || self.far.is_nan() {
            return Err(Error::InvalidCamera("non-finite value".into()));
        }
        if !(self.near < self.far) {
            return Err(Error::InvalidRange {
                near: self.near,
                far: self.far,
            });
        }
        let q = [self.qw, self.qx, self.qy, self.qz];
        let norm = quat_norm(&q);
        let rotation = normalize_quat(&q)?;
        if (norm - 1.0).abs() > QUAT_WARN_TOL {
            log::warn!("camera {}: quaternion norm {norm} normalized", self.id);
        }
        let cam = Camera {
            width: self.width,
            height: self.height,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            rotation,
            translation: [self.tx, self.ty, self.tz],
            near: self.near,
            far: self.far,
        };
        cam.validate()?;
        Ok(cam)
    }
}

/// Parses a JSON array of camera records into `(id, camera)` pairs.
pub fn parse_cameras(text: &str) -> Result<Vec<(u32, Camera)>> {
    let parse_err = |context: String, message: String| Error::Parse { context, message };
    let values: Vec<serde_json::Value> = serde_json::from_str(text)
        .map_err(|e| parse_err(format!("line {}", e.line()), e.to_string()))?;
    let mut out = Vec::with_capacity(values.len());
    for (i, v) in values.into_iter().enumerate() {
        let id = v.get("id").map(|x| x.to_string()).unwrap_or_else(|| "?".into());
        let context = format!("camera record {i} (id {id})");
        let rec: CameraRecord = serde_json::from_value(v).map_err(|e| parse_err(context.clone(), e.to_string()))?;
        let cam = rec.to_camera().map_err(|e| parse_err(context.clone(), e.to_string()))?;
        if out.iter().any(|(j, _)| *j == rec.id) {
            return Err(parse_err(context, "duplicate id".into()));
        }
        out.push((rec.id, cam));
    }
    Ok(out)
}

pub fn load_cameras(path: &Path) -> Result<Vec<(u32, Camera)>> {
    parse_cameras(&fs::read_to_string(path)?)
}

pub fn save_cameras(cameras: &[(u32, Camera)], path: &Path) -> Result<()> {
    let recs: Vec<CameraRecord> = cameras.iter().map(|(id, c)| CameraRecord::from_camera(*id, c)).collect();
    write_json(&recs, path)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Codec(e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: format!("{} line {}", path.display(), e.line()),
        message: e.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageKind {
    /// 8-bit PNG of a 1- or 3-channel image clamped to `[0, 1]`.
    Png8,
    /// Header plus little-endian f32 samples, any channel count.
    FloatRaw,
}

impl ImageKind {
    pub fn extension(self) -> &'static str {
        match self {
            ImageKind::Png8 => "png",
            ImageKind::FloatRaw => "vgim",
        }
    }

    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "png" => Some(ImageKind::Png8),
            "vgim" => Some(ImageKind::FloatRaw),
            _ => None,
        }
    }
}

/// `floor(clamp(v) * 255 + 0.5)`
pub fn quantize_u8(v: f64) -> u8 {
    let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (c * 255.0 + 0.5).floor() as u8
}

pub fn encode_image(img: &Image, kind: ImageKind) -> Result<Vec<u8>> {
    match kind {
        ImageKind::Png8 => {
            let color = match img.channels {
                1 => image::ExtendedColorType::L8,
                3 => image::ExtendedColorType::Rgb8,
                c => return Err(Error::UnsupportedChannels(c)),
            };
            let bytes: Vec<u8> = img.data.iter().map(|v| quantize_u8(*v)).collect();
            let mut out = Vec::new();
            image::ImageEncoder::write_image(
                image::codecs::png::PngEncoder::new(&mut out),
                &bytes,
                img.width as u32,
                img.height as u32,
                color,
            )
            .map_err(|e| Error::Codec(e.to_string()))?;
            Ok(out)
        }
        ImageKind::FloatRaw => {
            let mut out = Vec::with_capacity(16 + img.data.len() * 4);
            out.extend_from_slice(IMAGE_MAGIC);
            for v in [img.width, img.height, img.channels] {
                put_u32(&mut out, v as u32);
            }
            for v in &img.data {
                put_f32(&mut out, *v);
            }
            Ok(out)
        }
    }
}

pub fn decode_image(bytes: &[u8], kind: ImageKind) -> Result<Image> {
    match kind {
        ImageKind::Png8 => {
            let dynimg = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
                .map_err(|e| Error::Codec(e.to_string()))?;
            let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
            let (channels, data) = match dynimg {
                image::DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
                other => (3, other.into_rgb8().into_raw()),
            };
            Image::from_data(w, h, channels, data.into_iter().map(|v| v as f64 / 255.0).collect())
        }
        ImageKind::FloatRaw => {
            let mut r = Reader { bytes, pos: 0 };
            if r.take(4).map_err(|_| Error::BadMagic("image"))? != IMAGE_MAGIC {
                return Err(Error::BadMagic("image"));
            }
            let (w, h, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            let n = w * h * c;
            if bytes.len() - r.pos != n * 4 {
                return Err(Error::TruncatedPayload);
            }
            let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<f64>>>()?;
            Image::from_data(w, h, c, data)
        }
    }
}

pub fn write_image(img: &Image, path: &Path, kind: ImageKind) -> Result<()> {
    write_atomic(path, &encode_image(img, kind)?)
}

/// Reads a `.png` or `.vgim` image, chosen by extension.
pub fn read_image(path: &Path) -> Result<Image> {
    let kind = ImageKind::from_path(path)
        .ok_or_else(|| Error::Codec(format!("{}: unknown image extension", path.display())))?;
    decode_image(&fs::read(path)?, kind)
}
