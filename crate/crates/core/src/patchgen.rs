//! Distillation-dataset generation from one source image.
//!
//! Each patch index gets its own RNG stream derived from `(seed, index)`, so
//! patch `i` is regenerable in isolation and generation is embarrassingly
//! parallel with results independent of the parallelism degree.
//!
//! Augmentation order is fixed and versioned by the container format:
//! crop -> resize to patch size -> rotation -> horizontal flip -> color
//! jitter. Identity parameters (angle 0, factor 1) skip their stage entirely
//! so that a disabled-in-effect pipeline is pixel-exact crop+resize.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;
use crate::wire::{Reader, Writer};

const CONTAINER_MAGIC: &[u8; 4] = b"FPC1";
const CONTAINER_VERSION: u8 = 1;

/// 8-bit single image, the only pixel payload ever shared.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceImage {
    pub width: usize,
    pub height: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    /// Interleaved row-major `height x width x channels`.
    pub pixels: Vec<u8>,
    digest: [u8; 32],
}

impl SourceImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidConfig(format!(
                "source image must have 1 or 3 channels, got {channels}"
            )));
        }
        if pixels.len() != width * height * channels || width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "pixel buffer length {} does not match {width}x{height}x{channels}",
                pixels.len()
            )));
        }
        let digest = Self::digest_of(width, height, channels, &pixels);
        Ok(Self {
            width,
            height,
            channels,
            pixels,
            digest,
        })
    }

    fn digest_of(width: usize, height: usize, channels: usize, pixels: &[u8]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((width as u32).to_le_bytes());
        h.update((height as u32).to_le_bytes());
        h.update((channels as u32).to_le_bytes());
        h.update(pixels);
        h.finalize().into()
    }

    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    pub fn digest_hex(&self) -> String {
        hex_string(&self.digest)
    }

    /// Reads an 8-bit PNG; RGB(A) collapses to RGB, anything grayscale to luma.
    pub fn from_png(path: &std::path::Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Format(format!("png read: {e}")))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            image::DynamicImage::ImageLuma8(g) => Self::new(w, h, 1, g.into_raw()),
            image::DynamicImage::ImageLumaA8(g) => {
                let pixels = g.into_raw().chunks_exact(2).map(|p| p[0]).collect();
                Self::new(w, h, 1, pixels)
            }
            other => Self::new(w, h, 3, other.to_rgb8().into_raw()),
        }
    }

    pub fn to_png(&self, path: &std::path::Path) -> Result<()> {
        let ok = match self.channels {
            1 => image::GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
                .map(|b| b.save(path)),
            _ => image::RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
                .map(|b| b.save(path)),
        };
        match ok {
            Some(Ok(())) => Ok(()),
            Some(Err(e)) => Err(Error::Format(format!("png write: {e}"))),
            None => Err(Error::InvalidConfig("pixel buffer size mismatch".into())),
        }
    }

    fn pixel(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Seeded augmentation pipeline settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Square patch edge in pixels.
    pub patch_size: usize,
    /// Area fraction range of the random square crop.
    pub crop_scale: (f32, f32),
    /// Rotation bound in degrees; angles are uniform in `[-r, +r]`.
    pub rotation_degrees: f32,
    pub flip_prob: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub enable_rotation: bool,
    pub enable_flip: bool,
    pub enable_color_jitter: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            crop_scale: (0.08, 1.0),
            rotation_degrees: 35.0,
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            enable_rotation: true,
            enable_flip: true,
            enable_color_jitter: true,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "crop_scale must satisfy 0 < min <= max <= 1, got ({lo}, {hi})"
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::InvalidConfig("flip_prob must be in [0, 1]".into()));
        }
        if self.patch_size == 0 {
            return Err(Error::InvalidConfig("patch_size must be >= 1".into()));
        }
        if self.rotation_degrees < 0.0
            || self.brightness < 0.0
            || self.contrast < 0.0
            || self.saturation < 0.0
        {
            return Err(Error::InvalidConfig(
                "rotation and jitter strengths must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// The shared distillation proxy: generated patches plus everything needed to
/// regenerate them bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    /// `[P, C, s, s]`, values in `[0, 1]`.
    pub patches: Tensor,
    pub generation_seed: u64,
    pub source_digest: [u8; 32],
    pub config: AugmentationConfig,
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.patches.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.patches.shape()[1]
    }

    /// Gathers patches in the given order; duplicates allowed. This is the
    /// only per-round payload clients need beyond the one-time image.
    pub fn materialize_subset(&self, indices: &[usize]) -> Result<Tensor> {
        self.patches.gather_rows(indices)
    }

    /// Hash over seed, source digest, config and raw patch bytes; equal
    /// hashes mean bit-identical datasets.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.encode());
        h.finalize().into()
    }

    pub fn content_hash_hex(&self) -> String {
        hex_string(&self.content_hash())
    }

    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_bytes(CONTAINER_MAGIC);
        w.put_u8(CONTAINER_VERSION);
        w.put_u64(self.generation_seed);
        w.put_bytes(&self.source_digest);
        let c = &self.config;
        w.put_u32(c.patch_size as u32);
        w.put_f32(c.crop_scale.0);
        w.put_f32(c.crop_scale.1);
        w.put_f32(c.rotation_degrees);
        w.put_f32(c.flip_prob);
        w.put_f32(c.brightness);
        w.put_f32(c.contrast);
        w.put_f32(c.saturation);
        w.put_u8(
            (c.enable_rotation as u8) | (c.enable_flip as u8) << 1 | (c.enable_color_jitter as u8) << 2,
        );
        let shape = self.patches.shape();
        w.put_u32(shape[0] as u32);
        w.put_u32(shape[1] as u32);
        w.put_u32(shape[2] as u32);
        w.put_f32_slice(self.patches.data());
        w.bytes()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes)
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(CONTAINER_MAGIC, "patch container")?;
        let version = r.get_u8()?;
        if version != CONTAINER_VERSION {
            return Err(Error::Format(format!(
                "unsupported patch container version {version}"
            )));
        }
        let generation_seed = r.get_u64()?;
        let mut source_digest = [0u8; 32];
        source_digest.copy_from_slice(r.get_bytes(32)?);
        let patch_size = r.get_u32()? as usize;
        let crop_scale = (r.get_f32()?, r.get_f32()?);
        let rotation_degrees = r.get_f32()?;
        let flip_prob = r.get_f32()?;
        let brightness = r.get_f32()?;
        let contrast = r.get_f32()?;
        let saturation = r.get_f32()?;
        let flags = r.get_u8()?;
        let config = AugmentationConfig {
            patch_size,
            crop_scale,
            rotation_degrees,
            flip_prob,
            brightness,
            contrast,
            saturation,
            enable_rotation: flags & 1 != 0,
            enable_flip: flags & 2 != 0,
            enable_color_jitter: flags & 4 != 0,
        };
        let p = r.get_u32()? as usize;
        let c = r.get_u32()? as usize;
        let s = r.get_u32()? as usize;
        let data = r.get_f32_vec(p * c * s * s)?;
        if !r.done() {
            return Err(Error::Format("trailing bytes in patch container".into()));
        }
        Ok(Self {
            patches: Tensor::new(vec![p, c, s, s], data)?,
            generation_seed,
            source_digest,
            config,
        })
    }
}

/// Generates exactly `count` patches; the i-th depends only on
/// `(img, seed, cfg, i)`.
pub fn generate_patches(
    img: &SourceImage,
    count: usize,
    seed: u64,
    cfg: &AugmentationConfig,
) -> Result<PatchDataset> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::InvalidConfig("patch count must be >= 1".into()));
    }
    if img.width < cfg.patch_size || img.height < cfg.patch_size {
        return Err(Error::SourceTooSmall(format!(
            "{}x{} image cannot produce {}px patches",
            img.width, img.height, cfg.patch_size
        )));
    }
    let per = img.channels * cfg.patch_size * cfg.patch_size;
    let mut data = vec![0.0f32; count * per];
    data.par_chunks_mut(per).enumerate().for_each(|(i, out)| {
        render_patch(img, seed, cfg, i as u64, out);
    });
    Ok(PatchDataset {
        patches: Tensor::new(
            vec![count, img.channels, cfg.patch_size, cfg.patch_size],
            data,
        )?,
        generation_seed: seed,
        source_digest: img.digest(),
        config: cfg.clone(),
    })
}

/// Renders one patch from its private RNG stream into `out`
/// (`channels * s * s`, channel-major).
pub(crate) fn render_patch(
    img: &SourceImage,
    seed: u64,
    cfg: &AugmentationConfig,
    index: u64,
    out: &mut [f32],
) {
    let mut rng = stream(seed, Purpose::PatchAugment, &[index]);
    let s = cfg.patch_size;
    let ch = img.channels;
    let min_dim = img.width.min(img.height) as f32;

    // 1. Square crop: side from the area-scale draw, position uniform.
    let (lo, hi) = cfg.crop_scale;
    let scale = if lo < hi { rng.random_range(lo..hi) } else { lo };
    let side = ((scale.sqrt() * min_dim).round() as usize).clamp(1, img.width.min(img.height));
    let x0 = if img.width > side {
        rng.random_range(0..=img.width - side)
    } else {
        0
    };
    let y0 = if img.height > side {
        rng.random_range(0..=img.height - side)
    } else {
        0
    };

    // 2. Resize the crop to patch size (bilinear; exact copy when side == s).
    resize_crop(img, x0, y0, side, s, out);

    // 3. Rotation, bilinear with nearest-edge fill. Angle 0 is skipped, which
    //    keeps the crop+resize result bit-exact.
    if cfg.enable_rotation {
        let r = cfg.rotation_degrees;
        let angle = if r > 0.0 { rng.random_range(-r..r) } else { 0.0 };
        if angle != 0.0 {
            rotate_in_place(out, ch, s, angle.to_radians());
        }
    }

    // 4. Horizontal flip.
    if cfg.enable_flip {
        let u: f32 = rng.random_range(0.0..1.0);
        if u < cfg.flip_prob {
            for c in 0..ch {
                let plane = &mut out[c * s * s..(c + 1) * s * s];
                for row in plane.chunks_mut(s) {
                    row.reverse();
                }
            }
        }
    }

    // 5. Color jitter: brightness, contrast, saturation, in that order. The
    //    unit draws always happen so strengths only change factors, and
    //    factor 1 skips its stage.
    if cfg.enable_color_jitter {
        let factor = |rng: &mut rand_chacha::ChaCha8Rng, strength: f32| -> f32 {
            let u: f32 = rng.random_range(0.0..1.0);
            let lo = (1.0 - strength).max(0.0);
            lo + u * (1.0 + strength - lo)
        };
        let b = factor(&mut rng, cfg.brightness);
        let c = factor(&mut rng, cfg.contrast);
        let sat = factor(&mut rng, cfg.saturation);
        if b != 1.0 {
            for v in out.iter_mut() {
                *v = (*v * b).clamp(0.0, 1.0);
            }
        }
        if c != 1.0 {
            let mean = gray_mean(out, ch, s);
            for v in out.iter_mut() {
                *v = (mean + c * (*v - mean)).clamp(0.0, 1.0);
            }
        }
        if sat != 1.0 && ch == 3 {
            let plane = s * s;
            for p in 0..plane {
                let (r, g, bl) = (out[p], out[plane + p], out[2 * plane + p]);
                let gray = luma(r, g, bl);
                out[p] = (gray + sat * (r - gray)).clamp(0.0, 1.0);
                out[plane + p] = (gray + sat * (g - gray)).clamp(0.0, 1.0);
                out[2 * plane + p] = (gray + sat * (bl - gray)).clamp(0.0, 1.0);
            }
        }
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn gray_mean(out: &[f32], ch: usize, s: usize) -> f32 {
    let plane = s * s;
    let mut acc = 0.0f64;
    if ch == 3 {
        for p in 0..plane {
            acc += luma(out[p], out[plane + p], out[2 * plane + p]) as f64;
        }
    } else {
        for &v in &out[..plane] {
            acc += v as f64;
        }
    }
    (acc / plane as f64) as f32
}

/// Bilinear resize of the `side x side` crop at `(x0, y0)` into an `s x s`
/// patch, channel-major output in `[0, 1]`. `side == s` copies pixels.
fn resize_crop(img: &SourceImage, x0: usize, y0: usize, side: usize, s: usize, out: &mut [f32]) {
    let ch = img.channels;
    if side == s {
        for c in 0..ch {
            for y in 0..s {
                for x in 0..s {
                    out[c * s * s + y * s + x] = img.pixel(x0 + x, y0 + y, c) as f32 / 255.0;
                }
            }
        }
        return;
    }
    let ratio = side as f32 / s as f32;
    for y in 0..s {
        let sy = ((y as f32 + 0.5) * ratio - 0.5).clamp(0.0, (side - 1) as f32);
        let y_lo = sy.floor() as usize;
        let y_hi = (y_lo + 1).min(side - 1);
        let wy = sy - y_lo as f32;
        for x in 0..s {
            let sx = ((x as f32 + 0.5) * ratio - 0.5).clamp(0.0, (side - 1) as f32);
            let x_lo = sx.floor() as usize;
            let x_hi = (x_lo + 1).min(side - 1);
            let wx = sx - x_lo as f32;
            for c in 0..ch {
                let p = |px: usize, py: usize| img.pixel(x0 + px, y0 + py, c) as f32 / 255.0;
                let top = p(x_lo, y_lo) * (1.0 - wx) + p(x_hi, y_lo) * wx;
                let bot = p(x_lo, y_hi) * (1.0 - wx) + p(x_hi, y_hi) * wx;
                out[c * s * s + y * s + x] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
}

/// Rotates the patch around its center by `angle` radians, sampling the
/// original bilinearly with edge clamping.
fn rotate_in_place(out: &mut [f32], ch: usize, s: usize, angle: f32) {
    let src = out.to_vec();
    let center = (s as f32 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let max = (s - 1) as f32;
    for y in 0..s {
        for x in 0..s {
            let dx = x as f32 - center;
            let dy = y as f32 - center;
            // Inverse mapping: rotate destination coords by -angle.
            let sx = (cos * dx + sin * dy + center).clamp(0.0, max);
            let sy = (-sin * dx + cos * dy + center).clamp(0.0, max);
            let x_lo = sx.floor() as usize;
            let y_lo = sy.floor() as usize;
            let x_hi = (x_lo + 1).min(s - 1);
            let y_hi = (y_lo + 1).min(s - 1);
            let wx = sx - x_lo as f32;
            let wy = sy - y_lo as f32;
            for c in 0..ch {
                let plane = &src[c * s * s..(c + 1) * s * s];
                let top = plane[y_lo * s + x_lo] * (1.0 - wx) + plane[y_lo * s + x_hi] * wx;
                let bot = plane[y_hi * s + x_lo] * (1.0 - wx) + plane[y_hi * s + x_hi] * wx;
                out[c * s * s + y * s + x] = (top * (1.0 - wy) + bot * wy).clamp(0.0, 1.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Procedural textured test image; deterministic and busy enough that
    /// distinct crops differ.
    fn textured(width: usize, height: usize) -> SourceImage {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                let a = ((x * 7 + y * 13) % 251) as u8;
                let b = ((x * x + 3 * y) % 241) as u8;
                let c = ((x * y + 17) % 239) as u8;
                pixels.extend_from_slice(&[a, b, c]);
            }
        }
        SourceImage::new(width, height, 3, pixels).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let img = textured(64, 64);
        let cfg = AugmentationConfig::default();
        let a = generate_patches(&img, 50, 9, &cfg).unwrap();
        let b = generate_patches(&img, 50, 9, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        let c = generate_patches(&img, 50, 10, &cfg).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn parallel_generation_matches_serial_rendering() {
        let img = textured(64, 48);
        let cfg = AugmentationConfig::default();
        let ds = generate_patches(&img, 32, 5, &cfg).unwrap();
        let per = 3 * cfg.patch_size * cfg.patch_size;
        for i in 0..32usize {
            let mut one = vec![0.0f32; per];
            render_patch(&img, 5, &cfg, i as u64, &mut one);
            assert_eq!(ds.patches.row(i), &one[..], "patch {i}");
        }
    }

    #[test]
    fn degenerate_pipeline_returns_resized_source() {
        let img = textured(32, 32);
        let cfg = AugmentationConfig {
            patch_size: 16,
            crop_scale: (1.0, 1.0),
            enable_rotation: false,
            enable_flip: false,
            enable_color_jitter: false,
            ..AugmentationConfig::default()
        };
        let ds = generate_patches(&img, 3, 123, &cfg).unwrap();
        assert_eq!(ds.patches.row(0), ds.patches.row(1));
        assert_eq!(ds.patches.row(1), ds.patches.row(2));
        let mut want = vec![0.0f32; 3 * 16 * 16];
        resize_crop(&img, 0, 0, 32, 16, &mut want);
        assert_eq!(ds.patches.row(0), &want[..]);
    }

    #[test]
    fn identity_parameters_match_disabled_stages() {
        let img = textured(48, 48);
        let enabled_but_identity = AugmentationConfig {
            rotation_degrees: 0.0,
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            ..AugmentationConfig::default()
        };
        let disabled = AugmentationConfig {
            enable_rotation: false,
            enable_flip: false,
            enable_color_jitter: false,
            ..AugmentationConfig::default()
        };
        let a = generate_patches(&img, 40, 3, &enabled_but_identity).unwrap();
        let b = generate_patches(&img, 40, 3, &disabled).unwrap();
        assert_eq!(a.patches, b.patches);
    }

    #[test]
    fn values_stay_in_unit_range_under_heavy_jitter() {
        let img = textured(40, 40);
        let cfg = AugmentationConfig {
            brightness: 2.0,
            contrast: 2.0,
            saturation: 2.0,
            ..AugmentationConfig::default()
        };
        let ds = generate_patches(&img, 64, 21, &cfg).unwrap();
        assert!(ds
            .patches
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn large_pool_has_few_duplicate_patches() {
        let img = textured(256, 256);
        let cfg = AugmentationConfig {
            patch_size: 16,
            ..AugmentationConfig::default()
        };
        let ds = generate_patches(&img, 1000, 77, &cfg).unwrap();
        let sample = 150;
        let mut equal = 0usize;
        let mut pairs = 0usize;
        for i in 0..sample {
            for j in i + 1..sample {
                pairs += 1;
                if ds.patches.row(i) == ds.patches.row(j) {
                    equal += 1;
                }
            }
        }
        assert!(
            (equal as f64) < 0.01 * pairs as f64,
            "{equal}/{pairs} duplicate pairs"
        );
    }

    #[test]
    fn subset_semantics() {
        let img = textured(32, 32);
        let ds = generate_patches(&img, 5, 1, &AugmentationConfig::default()).unwrap();
        let all: Vec<usize> = (0..5).collect();
        assert_eq!(ds.materialize_subset(&all).unwrap(), ds.patches);
        let empty = ds.materialize_subset(&[]).unwrap();
        assert_eq!(empty.shape(), &[0, 3, 16, 16]);
        let picked = ds.materialize_subset(&[2, 2, 0]).unwrap();
        assert_eq!(picked.row(0), ds.patches.row(2));
        assert_eq!(picked.row(1), ds.patches.row(2));
        assert_eq!(picked.row(2), ds.patches.row(0));
        assert!(ds.materialize_subset(&[5]).is_err());
    }

    #[test]
    fn source_too_small_errors() {
        let img = textured(8, 8);
        let cfg = AugmentationConfig {
            patch_size: 16,
            ..AugmentationConfig::default()
        };
        assert!(matches!(
            generate_patches(&img, 1, 0, &cfg),
            Err(Error::SourceTooSmall(_))
        ));
    }

    #[test]
    fn container_round_trips_bit_exactly() {
        let img = textured(32, 32);
        let ds = generate_patches(&img, 7, 3, &AugmentationConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.fpc");
        ds.save(&path).unwrap();
        let back = PatchDataset::load(&path).unwrap();
        assert_eq!(ds, back);
        assert_eq!(ds.content_hash(), back.content_hash());
    }

    #[test]
    fn png_round_trip_preserves_digest() {
        let img = textured(24, 20);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        img.to_png(&path).unwrap();
        let back = SourceImage::from_png(&path).unwrap();
        assert_eq!(img.digest(), back.digest());
        assert_eq!(img, back);
    }
}
