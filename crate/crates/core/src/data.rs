//! Image samples, folder loading, normalization, augmentation, the synthetic
//! degradation engine and the on-disk dataset layout.
//!
//! A dataset directory holds `high/`, `low/`, optional `masks/` (PNG, 0/255,
//! named after the high-quality id) and an optional `manifest.json` that
//! assigns every id a split. Degraded ids are `{source}_{kind}`, so the low
//! and high pools never share an id.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    High,
    Low,
    Unknown,
}

/// An 8-bit RGB image in CHW order with an optional binary vessel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub quality: Quality,
    /// `height * width` entries in {0, 1}.
    pub mask: Option<Vec<u8>>,
}

impl ImageSample {
    pub fn new(
        id: impl Into<String>,
        height: usize,
        width: usize,
        pixels: Vec<u8>,
        quality: Quality,
    ) -> Result<Self> {
        if pixels.len() != CHANNELS * height * width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "expected {CHANNELS}x{height}x{width} pixels, got {}",
                pixels.len()
            )));
        }
        Ok(ImageSample {
            id: id.into(),
            height,
            width,
            pixels,
            quality,
            mask: None,
        })
    }

    pub fn with_mask(mut self, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != self.height * self.width {
            return Err(Error::Shape(format!(
                "mask has {} entries, image is {}x{}",
                mask.len(),
                self.height,
                self.width
            )));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::Data(format!("mask for {} is not binary", self.id)));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Pixels as a `(3, H, W)` tensor in the given range.
    pub fn to_tensor(&self, range: RangeKind) -> Tensor {
        normalize(self, range)
    }

    /// Mask as a `(1, H, W)` tensor of 0/1.
    pub fn mask_tensor(&self) -> Option<Tensor> {
        self.mask.as_ref().map(|m| {
            Tensor::new(
                &[1, self.height, self.width],
                m.iter().map(|&v| v as f64).collect(),
            )
            .expect("mask length checked on construction")
        })
    }

    /// Inverse of `normalize(Signed)` for a `(3, H, W)` or `(1, 3, H, W)` tensor.
    pub fn from_signed(id: impl Into<String>, t: &Tensor, quality: Quality) -> Result<Self> {
        let (c, h, w) = match *t.shape() {
            [c, h, w] | [1, c, h, w] => (c, h, w),
            _ => return Err(Error::Shape(format!("not an image tensor: {:?}", t.shape()))),
        };
        if c != CHANNELS {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        ImageSample::new(id, h, w, denormalize_signed(t.data()), quality)
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        let p = self.plane();
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            image::Rgb([self.pixels[i], self.pixels[p + i], self.pixels[2 * p + i]])
        })
    }

    pub fn from_rgb_image(id: impl Into<String>, img: &RgbImage, quality: Quality) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut pixels = vec![0u8; CHANNELS * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..CHANNELS {
                pixels[c * h * w + i] = px[c];
            }
        }
        ImageSample {
            id: id.into(),
            height: h,
            width: w,
            pixels,
            quality,
            mask: None,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb_image().save(path).map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })
    }

    pub fn save_mask_png(&self, path: &Path) -> Result<()> {
        let mask = self
            .mask
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{} has no mask", self.id)))?;
        save_mask_png(path, mask, self.height, self.width)
    }
}

pub fn save_mask_png(path: &Path, mask: &[u8], height: usize, width: usize) -> Result<()> {
    let img = GrayImage::from_raw(
        width as u32,
        height as u32,
        mask.iter().map(|&m| if m > 0 { 255 } else { 0 }).collect(),
    )
    .ok_or_else(|| Error::Shape("mask size does not match dimensions".into()))?;
    img.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

/// Load a mask PNG, optionally resized (nearest) to `resolution`, and
/// threshold it at 128. Returns the mask and its (H, W).
pub fn load_mask(path: &Path, resolution: Option<(usize, usize)>) -> Result<(Vec<u8>, (usize, usize))> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?
        .to_luma8();
    let img = match resolution {
        Some((h, w)) if (img.height() as usize, img.width() as usize) != (h, w) => {
            image::imageops::resize(&img, w as u32, h as u32, FilterType::Nearest)
        }
        _ => img,
    };
    let dims = (img.height() as usize, img.width() as usize);
    Ok((img.pixels().map(|p| u8::from(p[0] >= 128)).collect(), dims))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RangeKind {
    /// `[-1, 1]`, consumed by the restoration networks.
    Signed,
    /// `[0, 1]`, consumed by the segmenter.
    Unit,
}

pub fn normalize(sample: &ImageSample, range: RangeKind) -> Tensor {
    let data = sample
        .pixels
        .iter()
        .map(|&p| match range {
            RangeKind::Signed => p as f64 / 127.5 - 1.0,
            RangeKind::Unit => p as f64 / 255.0,
        })
        .collect();
    Tensor::new(&[CHANNELS, sample.height, sample.width], data).expect("pixel length checked on construction")
}

/// `(v + 1) * 127.5`, rounded half away from zero and clipped to 8 bits.
pub fn denormalize_signed(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// PNG/JPEG files in `dir`, sorted by file name.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

fn decode_resized(path: &Path, resolution: Option<(usize, usize)>) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?
        .to_rgb8();
    match resolution {
        Some((h, w)) if (img.height() as usize, img.width() as usize) != (h, w) => Ok(
            image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle),
        ),
        _ => Ok(img),
    }
}

fn file_id(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string()
}

/// Decode one image, bilinearly resized to `resolution` when given. The id
/// is the file stem.
pub fn load_image(path: &Path, quality: Quality, resolution: Option<(usize, usize)>) -> Result<ImageSample> {
    let img = decode_resized(path, resolution)?;
    Ok(ImageSample::from_rgb_image(file_id(path), &img, quality))
}

/// Outcome of a folder scan: decoded samples and the files that were skipped.
#[derive(Debug, Default)]
pub struct FolderLoad {
    pub samples: Vec<ImageSample>,
    pub skipped: Vec<(PathBuf, String)>,
}

pub fn scan_image_folder(dir: &Path, quality: Quality, resolution: (usize, usize)) -> Result<FolderLoad> {
    if resolution.0 == 0 || resolution.1 == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let mut out = FolderLoad::default();
    for path in image_files(dir)? {
        match load_image(&path, quality, Some(resolution)) {
            Ok(s) => out.samples.push(s),
            Err(e) => {
                log::warn!("skipping unreadable image {}: {e}", path.display());
                out.skipped.push((path, e.to_string()));
            }
        }
    }
    if out.samples.is_empty() {
        return Err(Error::Data(format!("no images found in {}", dir.display())));
    }
    Ok(out)
}

/// Decode every PNG/JPEG in `dir` in file-name order, bilinearly resized to
/// `resolution` (H, W). Unreadable files are skipped with a warning.
pub fn load_image_folder(
    dir: &Path,
    quality: Quality,
    resolution: (usize, usize),
) -> Result<Vec<ImageSample>> {
    Ok(scan_image_folder(dir, quality, resolution)?.samples)
}

/// Two unpaired pools of images at a common resolution.
#[derive(Clone, Debug)]
pub struct UnpairedDataset {
    pub low: Vec<ImageSample>,
    pub high: Vec<ImageSample>,
    pub resolution: (usize, usize),
}

impl UnpairedDataset {
    pub fn new(low: Vec<ImageSample>, high: Vec<ImageSample>, resolution: (usize, usize)) -> Result<Self> {
        let high_ids: HashSet<&str> = high.iter().map(|s| s.id.as_str()).collect();
        if let Some(s) = low.iter().find(|s| high_ids.contains(s.id.as_str())) {
            return Err(Error::Data(format!("id {} appears in both pools", s.id)));
        }
        for s in low.iter().chain(&high) {
            if (s.height, s.width) != resolution {
                return Err(Error::Data(format!(
                    "{} is {}x{}, dataset resolution is {}x{}",
                    s.id, s.height, s.width, resolution.0, resolution.1
                )));
            }
        }
        Ok(UnpairedDataset {
            low,
            high,
            resolution,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentOp {
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 5] = [
        AugmentOp::HFlip,
        AugmentOp::VFlip,
        AugmentOp::Rot90,
        AugmentOp::Rot180,
        AugmentOp::Rot270,
    ];

    pub fn inverse(self) -> AugmentOp {
        match self {
            AugmentOp::Rot90 => AugmentOp::Rot270,
            AugmentOp::Rot270 => AugmentOp::Rot90,
            op => op,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AugmentOp::HFlip => "hflip",
            AugmentOp::VFlip => "vflip",
            AugmentOp::Rot90 => "rot90",
            AugmentOp::Rot180 => "rot180",
            AugmentOp::Rot270 => "rot270",
        }
    }

    /// Output dims and the source `(row, col)` for each output `(row, col)`.
    fn geometry(self, h: usize, w: usize) -> ((usize, usize), impl Fn(usize, usize) -> (usize, usize)) {
        let dims = match self {
            AugmentOp::Rot90 | AugmentOp::Rot270 => (w, h),
            _ => (h, w),
        };
        let src = move |r: usize, c: usize| match self {
            AugmentOp::HFlip => (r, w - 1 - c),
            AugmentOp::VFlip => (h - 1 - r, c),
            // counter-clockwise
            AugmentOp::Rot90 => (c, w - 1 - r),
            AugmentOp::Rot180 => (h - 1 - r, w - 1 - c),
            AugmentOp::Rot270 => (h - 1 - c, r),
        };
        (dims, src)
    }
}

fn transform_planes(
    data: &[u8],
    planes: usize,
    h: usize,
    w: usize,
    op: AugmentOp,
) -> (Vec<u8>, usize, usize) {
    let ((oh, ow), src) = op.geometry(h, w);
    let mut out = vec![0u8; data.len()];
    for p in 0..planes {
        for r in 0..oh {
            for c in 0..ow {
                let (sr, sc) = src(r, c);
                out[p * oh * ow + r * ow + c] = data[p * h * w + sr * w + sc];
            }
        }
    }
    (out, oh, ow)
}

/// Apply a flip or right-angle rotation to pixels and mask alike. The id is kept.
pub fn augment(sample: &ImageSample, op: AugmentOp) -> ImageSample {
    let (h, w) = (sample.height, sample.width);
    let (pixels, oh, ow) = transform_planes(&sample.pixels, CHANNELS, h, w, op);
    let mask = sample.mask.as_ref().map(|m| transform_planes(m, 1, h, w, op).0);
    ImageSample {
        id: sample.id.clone(),
        height: oh,
        width: ow,
        pixels,
        quality: sample.quality,
        mask,
    }
}

/// The sample plus one augmented copy per op, ids suffixed with the op name.
pub fn expand_augmented(samples: &[ImageSample]) -> Vec<ImageSample> {
    let mut out = Vec::with_capacity(samples.len() * (1 + AugmentOp::ALL.len()));
    for s in samples {
        out.push(s.clone());
        for op in AugmentOp::ALL {
            let mut a = augment(s, op);
            a.id = format!("{}_{}", s.id, op.name());
            out.push(a);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradeKind {
    Blur,
    LowIllum,
    HighIllum,
    UnevenIllum,
    ColorDistort,
}

impl DegradeKind {
    pub const ALL: [DegradeKind; 5] = [
        DegradeKind::Blur,
        DegradeKind::LowIllum,
        DegradeKind::HighIllum,
        DegradeKind::UnevenIllum,
        DegradeKind::ColorDistort,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DegradeKind::Blur => "blur",
            DegradeKind::LowIllum => "low_illum",
            DegradeKind::HighIllum => "high_illum",
            DegradeKind::UnevenIllum => "uneven_illum",
            DegradeKind::ColorDistort => "color_distort",
        }
    }

    /// Parse a comma-separated list; `all` expands to every kind.
    pub fn parse_list(s: &str) -> Result<Vec<DegradeKind>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part == "all" {
                out.extend(DegradeKind::ALL);
                continue;
            }
            let k = DegradeKind::ALL
                .into_iter()
                .find(|k| k.name() == part)
                .ok_or_else(|| Error::Config(format!("unknown degradation kind {part}")))?;
            out.push(k);
        }
        out.sort();
        out.dedup();
        if out.is_empty() {
            return Err(Error::Config("no degradation kinds given".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for DegradeKind {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Concrete degradation parameters. All stages run in a fixed order
/// (blur, gamma/gain, vignette, channel gains); a stage at its identity
/// setting is skipped, so identity parameters reproduce the input exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    pub kind: DegradeKind,
    pub sigma: f64,
    pub gamma: f64,
    pub gain: f64,
    /// Vignette centre as fractions of (height, width).
    pub center: [f64; 2],
    /// Vignette radius as a fraction of the larger image side.
    pub radius: f64,
    pub depth: f64,
    pub channel_gains: [f64; 3],
}

impl DegradeParams {
    pub fn identity(kind: DegradeKind) -> Self {
        DegradeParams {
            kind,
            sigma: 0.0,
            gamma: 1.0,
            gain: 1.0,
            center: [0.5, 0.5],
            radius: 0.7,
            depth: 0.0,
            channel_gains: [1.0; 3],
        }
    }

    /// Draw parameters for `kind` from the default ranges.
    pub fn sample(kind: DegradeKind, rng: &mut impl Rng) -> Self {
        let mut p = DegradeParams::identity(kind);
        match kind {
            DegradeKind::Blur => p.sigma = rng.random_range(1.0..=3.0),
            DegradeKind::LowIllum => {
                p.gamma = 2.2;
                p.gain = 0.5;
            }
            DegradeKind::HighIllum => {
                p.gamma = 0.7;
                p.gain = 1.4;
            }
            DegradeKind::UnevenIllum => {
                p.depth = 0.6;
                p.center = [rng.random_range(0.25..=0.75), rng.random_range(0.25..=0.75)];
                p.radius = rng.random_range(0.5..=0.8);
            }
            DegradeKind::ColorDistort => {
                for g in &mut p.channel_gains {
                    *g = rng.random_range(0.6..=1.4);
                }
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma.is_finite()
            && self.sigma >= 0.0
            && self.gamma.is_finite()
            && self.gamma > 0.0
            && self.gain.is_finite()
            && self.gain >= 0.0
            && self.radius.is_finite()
            && self.radius > 0.0
            && (0.0..=1.0).contains(&self.depth)
            && self.center.iter().all(|c| c.is_finite())
            && self.channel_gains.iter().all(|g| g.is_finite() && *g > 0.0);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid degradation parameters {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable Gaussian blur of one plane with edge clamping.
pub fn blur_plane(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as i64;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * plane[y * w + clamp(x as i64 + i as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[clamp(y as i64 + i as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Degrade `sample` with explicit parameters. The result is labelled low
/// quality, keeps the mask, and has id `{id}_{kind}`.
pub fn degrade(sample: &ImageSample, p: &DegradeParams) -> Result<ImageSample> {
    p.validate()?;
    let (h, w) = (sample.height, sample.width);
    let plane = h * w;
    let mut v: Vec<f64> = sample.pixels.iter().map(|&x| x as f64).collect();
    if p.sigma > 0.0 {
        for c in 0..CHANNELS {
            let out = blur_plane(&v[c * plane..(c + 1) * plane], h, w, p.sigma);
            v[c * plane..(c + 1) * plane].copy_from_slice(&out);
        }
    }
    if p.gamma != 1.0 || p.gain != 1.0 {
        for x in &mut v {
            *x = 255.0 * (x.max(0.0) / 255.0).powf(p.gamma) * p.gain;
        }
    }
    if p.depth > 0.0 {
        let (cy, cx) = (p.center[0] * (h - 1) as f64, p.center[1] * (w - 1) as f64);
        let scale = p.radius * h.max(w) as f64;
        for y in 0..h {
            for x in 0..w {
                let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                let m = 1.0 - p.depth * smoothstep(d / scale);
                for c in 0..CHANNELS {
                    v[c * plane + y * w + x] *= m;
                }
            }
        }
    }
    if p.channel_gains != [1.0; 3] {
        for (c, g) in p.channel_gains.iter().enumerate() {
            v[c * plane..(c + 1) * plane].iter_mut().for_each(|x| *x *= g);
        }
    }
    Ok(ImageSample {
        id: format!("{}_{}", sample.id, p.kind),
        height: h,
        width: w,
        pixels: v.iter().map(|x| x.round().clamp(0.0, 255.0) as u8).collect(),
        quality: Quality::Low,
        mask: sample.mask.clone(),
    })
}

/// Degrade with parameters drawn from a generator keyed by (seed, id, kind),
/// so each output depends only on its own input and the seed.
pub fn degrade_seeded(
    sample: &ImageSample,
    kind: DegradeKind,
    seed: u64,
) -> Result<(ImageSample, DegradeParams)> {
    let key = format!("{}/{}", sample.id, kind);
    let mut rng = derive_rng(seed, &key, 0);
    let p = DegradeParams::sample(kind, &mut rng);
    Ok((degrade(sample, &p)?, p))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A generator for one purpose (`stream`) and index under a master seed.
/// Stable across platforms and releases.
pub fn derive_rng(seed: u64, stream: &str, index: u64) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed) ^ h) ^ splitmix(index))
}

/// Indices of `n_low` and `n_high` images drawn without replacement,
/// determined by (seed, epoch).
pub fn sample_epoch_subset(
    ds: &UnpairedDataset,
    n_low: usize,
    n_high: usize,
    seed: u64,
    epoch: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    for (name, n, len) in [("low", n_low, ds.low.len()), ("high", n_high, ds.high.len())] {
        if n > len {
            return Err(Error::Data(format!(
                "requested {n} images from the {name} pool, which holds {len}"
            )));
        }
    }
    let mut rng = derive_rng(seed, "epoch-subset", epoch);
    let low = index::sample(&mut rng, ds.low.len(), n_low).into_vec();
    let high = index::sample(&mut rng, ds.high.len(), n_high).into_vec();
    Ok((low, high))
}

/// A synthetic fundus photograph: dark surround, circular field of view with
/// radial shading, an optic disc, a macula and a branching vessel tree. The
/// returned sample carries the exact vessel mask.
pub fn phantom_fundus(id: impl Into<String>, height: usize, width: usize, rng: &mut impl Rng) -> ImageSample {
    let (h, w) = (height, width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let fov = 0.47 * h.min(w) as f64;
    let base = [
        rng.random_range(170.0..210.0),
        rng.random_range(70.0..100.0),
        rng.random_range(30.0..55.0),
    ];
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let disc = (cy + rng.random_range(-0.1..0.1) * fov, cx + side * 0.45 * fov);
    let disc_r = 0.13 * fov;
    let macula = (cy, cx - side * 0.25 * fov);

    // vessel mask from random walks leaving the disc
    let mut mask = vec![0u8; h * w];
    let scale = h.min(w) as f64 / 64.0;
    let mut stack: Vec<(f64, f64, f64, f64, u32)> = Vec::new();
    let trunks = rng.random_range(4..=6);
    for t in 0..trunks {
        let angle = t as f64 / trunks as f64 * std::f64::consts::TAU + rng.random_range(-0.3..0.3);
        stack.push((disc.0, disc.1, angle, rng.random_range(1.3..1.8) * scale, 0));
    }
    while let Some((mut y, mut x, mut a, width_px, depth)) = stack.pop() {
        let steps = (rng.random_range(18.0..30.0) * scale) as usize;
        for _ in 0..steps {
            a += rng.random_range(-0.18..0.18);
            y += a.sin();
            x += a.cos();
            if ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() > fov {
                break;
            }
            let r = width_px / 2.0;
            let (y0, y1) = (
                (y - r).floor().max(0.0) as usize,
                ((y + r).ceil() as usize).min(h - 1),
            );
            let (x0, x1) = (
                (x - r).floor().max(0.0) as usize,
                ((x + r).ceil() as usize).min(w - 1),
            );
            for py in y0..=y1 {
                for px in x0..=x1 {
                    if (py as f64 - y).powi(2) + (px as f64 - x).powi(2) <= r * r {
                        mask[py * w + px] = 1;
                    }
                }
            }
            if depth < 2 && width_px > 1.0 && rng.random_bool(0.06) {
                let turn = if rng.random_bool(0.5) { 0.6 } else { -0.6 };
                stack.push((y, x, a + turn, width_px * 0.75, depth + 1));
            }
        }
    }

    let plane = h * w;
    let mut pixels = vec![0u8; CHANNELS * plane];
    for py in 0..h {
        for px in 0..w {
            let (fy, fx) = (py as f64, px as f64);
            let d = ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt();
            if d > fov {
                mask[py * w + px] = 0;
                continue;
            }
            let shade = 0.7 + 0.3 * (1.0 - (d / fov).powi(2));
            let mut rgb = base.map(|b| b * shade);
            let dd = ((fy - disc.0).powi(2) + (fx - disc.1).powi(2)).sqrt();
            let disc_w = 1.0 - smoothstep(dd / disc_r - 0.5);
            let disc_rgb = [250.0, 215.0, 140.0];
            for c in 0..CHANNELS {
                rgb[c] = rgb[c] * (1.0 - disc_w) + disc_rgb[c] * disc_w;
            }
            let dm = ((fy - macula.0).powi(2) + (fx - macula.1).powi(2)).sqrt();
            let mac = 1.0 - 0.3 * (1.0 - smoothstep(dm / (0.2 * fov)));
            rgb.iter_mut().for_each(|v| *v *= mac);
            if mask[py * w + px] == 1 {
                rgb = [rgb[0] * 0.55, rgb[1] * 0.35, rgb[2] * 0.45];
            }
            for c in 0..CHANNELS {
                pixels[c * plane + py * w + px] = rgb[c].round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    ImageSample {
        id: id.into(),
        height: h,
        width: w,
        pixels,
        quality: Quality::High,
        mask: Some(mask),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub quality: Quality,
    pub split: Split,
    /// Clean image this one was degraded from.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub source: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub degradation: Option<DegradeParams>,
    #[serde(default)]
    pub has_mask: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub resolution: [usize; 2],
    pub seed: u64,
    pub counts: BTreeMap<Split, usize>,
    pub entries: Vec<ManifestEntry>,
}

/// Fractions of clean sources assigned to validation and test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        if !(self.val >= 0.0 && self.test >= 0.0 && self.val + self.test < 1.0) {
            return Err(Error::Config(format!("invalid split fractions {self:?}")));
        }
        Ok(())
    }

    /// Split for the `i`-th of `n` sources: test first, then val, then train.
    fn assign(&self, i: usize, n: usize) -> Split {
        let n_test = (self.test * n as f64).round() as usize;
        let n_val = (self.val * n as f64).round() as usize;
        if i < n_test {
            Split::Test
        } else if i < n_test + n_val {
            Split::Val
        } else {
            Split::Train
        }
    }
}

/// Write clean images (and their masks) to `high/` and `masks/`, one degraded
/// copy per kind to `low/`, and `manifest.json`. Sources are assigned to
/// splits in id order; degraded copies inherit their source's split.
pub fn write_degraded_dataset(
    out: &Path,
    clean: &[ImageSample],
    kinds: &[DegradeKind],
    seed: u64,
    splits: SplitFractions,
) -> Result<Manifest> {
    splits.validate()?;
    if clean.is_empty() {
        return Err(Error::Data("no clean images to degrade".into()));
    }
    let resolution = (clean[0].height, clean[0].width);
    for sub in ["high", "low", "masks"] {
        let d = out.join(sub);
        if d.exists() {
            std::fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut sorted: Vec<&ImageSample> = clean.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let jobs: Vec<(usize, DegradeKind)> = (0..sorted.len())
        .flat_map(|i| kinds.iter().map(move |&k| (i, k)))
        .collect();
    let degraded = crate::parallel::map_collect(&jobs, |&(i, k)| degrade_seeded(sorted[i], k, seed));
    let mut entries = Vec::new();
    let mut counts = BTreeMap::new();
    for (i, s) in sorted.iter().enumerate() {
        if (s.height, s.width) != resolution {
            return Err(Error::Data(format!(
                "{} does not match the dataset resolution",
                s.id
            )));
        }
        let split = splits.assign(i, sorted.len());
        *counts.entry(split).or_insert(0) += 1;
        s.save_png(&out.join("high").join(format!("{}.png", s.id)))?;
        if s.mask.is_some() {
            s.save_mask_png(&out.join("masks").join(format!("{}.png", s.id)))?;
        }
        entries.push(ManifestEntry {
            id: s.id.clone(),
            quality: Quality::High,
            split,
            source: None,
            degradation: None,
            has_mask: s.mask.is_some(),
        });
    }
    for (&(i, _), d) in jobs.iter().zip(degraded) {
        let (d, params) = d?;
        d.save_png(&out.join("low").join(format!("{}.png", d.id)))?;
        entries.push(ManifestEntry {
            id: d.id.clone(),
            quality: Quality::Low,
            split: splits.assign(i, sorted.len()),
            source: Some(sorted[i].id.clone()),
            degradation: Some(params),
            has_mask: false,
        });
    }
    let manifest = Manifest {
        resolution: [resolution.0, resolution.1],
        seed,
        counts,
        entries,
    };
    let path = out.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// `n` phantom images `phantom_0000 ..` at `resolution`, keyed by seed.
pub fn synthetic_clean(n: usize, resolution: (usize, usize), seed: u64) -> Vec<ImageSample> {
    (0..n)
        .map(|i| {
            let mut rng = derive_rng(seed, "phantom", i as u64);
            phantom_fundus(format!("phantom_{i:04}"), resolution.0, resolution.1, &mut rng)
        })
        .collect()
}

/// A dataset directory opened for reading. Without a manifest every image
/// counts as training data.
#[derive(Clone, Debug)]
pub struct DatasetDir {
    pub root: PathBuf,
    pub resolution: (usize, usize),
    pub manifest: Option<Manifest>,
}

impl DatasetDir {
    pub fn open(root: &Path, resolution: Option<(usize, usize)>) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Data(format!(
                "dataset directory {} not found",
                root.display()
            )));
        }
        let path = root.join(MANIFEST);
        let manifest: Option<Manifest> = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::Data(format!("bad manifest: {e}")))?)
        } else {
            None
        };
        let resolution = resolution
            .or_else(|| manifest.as_ref().map(|m| (m.resolution[0], m.resolution[1])))
            .ok_or_else(|| Error::Config("dataset has no manifest; a resolution is required".into()))?;
        Ok(DatasetDir {
            root: root.to_path_buf(),
            resolution,
            manifest,
        })
    }

    fn split_of(&self, id: &str) -> Option<Split> {
        match &self.manifest {
            None => Some(Split::Train),
            Some(m) => m.entries.iter().find(|e| e.id == id).map(|e| e.split),
        }
    }

    fn load_pool(&self, sub: &str, quality: Quality, split: Split) -> Result<Vec<ImageSample>> {
        let dir = self.root.join(sub);
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut samples = match scan_image_folder(&dir, quality, self.resolution) {
            Ok(l) => l.samples,
            Err(Error::Data(_)) => Vec::new(),
            Err(e) => return Err(e),
        };
        samples.retain(|s| self.split_of(&s.id) == Some(split));
        Ok(samples)
    }

    /// High-quality images of a split, with masks attached when present.
    pub fn high(&self, split: Split) -> Result<Vec<ImageSample>> {
        let mut out = Vec::new();
        for s in self.load_pool("high", Quality::High, split)? {
            let mask_path = self.root.join("masks").join(format!("{}.png", s.id));
            if mask_path.exists() {
                let (m, _) = load_mask(&mask_path, Some(self.resolution))?;
                out.push(s.with_mask(m)?);
            } else {
                out.push(s);
            }
        }
        Ok(out)
    }

    pub fn low(&self, split: Split) -> Result<Vec<ImageSample>> {
        self.load_pool("low", Quality::Low, split)
    }

    pub fn unpaired(&self, split: Split) -> Result<UnpairedDataset> {
        UnpairedDataset::new(self.low(split)?, self.high(split)?, self.resolution)
    }

    /// (degraded, clean) pairs of a split, via the manifest's source links.
    pub fn pairs(&self, split: Split) -> Result<Vec<(ImageSample, ImageSample)>> {
        let Some(m) = &self.manifest else {
            return Ok(Vec::new());
        };
        let high: BTreeMap<String, ImageSample> =
            self.high(split)?.into_iter().map(|s| (s.id.clone(), s)).collect();
        let mut out = Vec::new();
        for low in self.low(split)? {
            let src = m
                .entries
                .iter()
                .find(|e| e.id == low.id)
                .and_then(|e| e.source.as_ref());
            if let Some(clean) = src.and_then(|s| high.get(s)) {
                out.push((low, clean.clone()));
            }
        }
        Ok(out)
    }
}
