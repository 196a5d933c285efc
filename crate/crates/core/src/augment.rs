//! Weak and strong augmentation for small CHW images, plus a noise-based
//! analog for vector samples.
//!
//! Transform magnitudes follow RandAugment-style conventions:
//!
//! | transform | magnitude | meaning |
//! |---|---|---|
//! | Autocontrast, Equalize, Identity | ignored | |
//! | Brightness, Color, Contrast, Sharpness | factor in `[0.05, 1.95]` | blend with a degenerate image, 1 is identity |
//! | Posterize | bits in `[4, 8]` | keep the top bits of the 8-bit value |
//! | Rotate | degrees in `[-30, 30]` | about the image center |
//! | ShearX, ShearY | shear in `[-0.3, 0.3]` | |
//! | Solarize | threshold in `[0, 1]` | invert pixels strictly above it |
//! | TranslateX, TranslateY | fraction of side in `[-0.3, 0.3]` | |
//!
//! Geometric transforms sample bilinearly with zero fill. Outputs are clamped to `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::objective::Augmenter;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if pixels.len() != channels * height * width {
            return Err(Error::BadTensor {
                shape: vec![channels, height, width],
                len: pixels.len(),
            });
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite pixel".into()));
        }
        Ok(ImageTensor {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        ImageTensor {
            channels,
            height,
            width,
            pixels: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }

    fn same_dims(&self, pixels: Vec<f64>) -> Self {
        ImageTensor { pixels, ..*self }
    }

    fn clamped(mut self) -> Self {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Transform {
    Autocontrast,
    Brightness,
    Color,
    Contrast,
    Equalize,
    Identity,
    Posterize,
    Rotate,
    Sharpness,
    ShearX,
    ShearY,
    Solarize,
    TranslateX,
    TranslateY,
}

impl Transform {
    pub const ALL: [Transform; 14] = [
        Transform::Autocontrast,
        Transform::Brightness,
        Transform::Color,
        Transform::Contrast,
        Transform::Equalize,
        Transform::Identity,
        Transform::Posterize,
        Transform::Rotate,
        Transform::Sharpness,
        Transform::ShearX,
        Transform::ShearY,
        Transform::Solarize,
        Transform::TranslateX,
        Transform::TranslateY,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Transform::Autocontrast => "Autocontrast",
            Transform::Brightness => "Brightness",
            Transform::Color => "Color",
            Transform::Contrast => "Contrast",
            Transform::Equalize => "Equalize",
            Transform::Identity => "Identity",
            Transform::Posterize => "Posterize",
            Transform::Rotate => "Rotate",
            Transform::Sharpness => "Sharpness",
            Transform::ShearX => "ShearX",
            Transform::ShearY => "ShearY",
            Transform::Solarize => "Solarize",
            Transform::TranslateX => "TranslateX",
            Transform::TranslateY => "TranslateY",
        }
    }

    /// Registered magnitude range.
    pub fn range(self) -> (f64, f64) {
        match self {
            Transform::Autocontrast | Transform::Equalize | Transform::Identity => (0.0, 1.0),
            Transform::Brightness | Transform::Color | Transform::Contrast | Transform::Sharpness => (0.05, 1.95),
            Transform::Posterize => (4.0, 8.0),
            Transform::Rotate => (-30.0, 30.0),
            Transform::ShearX | Transform::ShearY => (-0.3, 0.3),
            Transform::Solarize => (0.0, 1.0),
            Transform::TranslateX | Transform::TranslateY => (-0.3, 0.3),
        }
    }

    fn ignores_magnitude(self) -> bool {
        matches!(self, Transform::Autocontrast | Transform::Equalize | Transform::Identity)
    }

    pub fn apply(self, image: &ImageTensor, magnitude: f64) -> Result<ImageTensor> {
        let (lo, hi) = self.range();
        if !self.ignores_magnitude() && !(magnitude >= lo && magnitude <= hi) {
            return Err(Error::MagnitudeOutOfRange {
                transform: self.name(),
                magnitude,
                lo,
                hi,
            });
        }
        let out = match self {
            Transform::Identity => return Ok(image.clone()),
            Transform::Autocontrast => autocontrast(image),
            Transform::Equalize => equalize(image),
            Transform::Brightness => blend(image, &vec![0.0; image.pixels.len()], magnitude),
            Transform::Color => blend(image, &grayscale(image), magnitude),
            Transform::Contrast => {
                let gray = grayscale(image);
                let mean = gray.iter().sum::<f64>() / gray.len() as f64;
                blend(image, &vec![mean; gray.len()], magnitude)
            }
            Transform::Sharpness => blend(image, &smooth(image), magnitude),
            Transform::Posterize => posterize(image, magnitude.round() as u32),
            Transform::Solarize => image.same_dims(
                image
                    .pixels
                    .iter()
                    .map(|&p| if p > magnitude { 1.0 - p } else { p })
                    .collect(),
            ),
            Transform::Rotate => {
                let (s, c) = magnitude.to_radians().sin_cos();
                affine(image, [c, -s, s, c], [0.0, 0.0])
            }
            Transform::ShearX => affine(image, [1.0, magnitude, 0.0, 1.0], [0.0, 0.0]),
            Transform::ShearY => affine(image, [1.0, 0.0, magnitude, 1.0], [0.0, 0.0]),
            Transform::TranslateX => affine(image, [1.0, 0.0, 0.0, 1.0], [magnitude * image.width as f64, 0.0]),
            Transform::TranslateY => affine(image, [1.0, 0.0, 0.0, 1.0], [0.0, magnitude * image.height as f64]),
        };
        Ok(out.clamped())
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Transform::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownTransform(s.to_string()))
    }
}

/// Applies a transform by name.
pub fn transform_apply(name: &str, image: &ImageTensor, magnitude: f64) -> Result<ImageTensor> {
    name.parse::<Transform>()?.apply(image, magnitude)
}

fn blend(image: &ImageTensor, degenerate: &[f64], factor: f64) -> ImageTensor {
    image.same_dims(
        image
            .pixels
            .iter()
            .zip(degenerate)
            .map(|(&p, &d)| d + factor * (p - d))
            .collect(),
    )
}

/// Luma replicated across channels; single-channel images are returned as is.
fn grayscale(image: &ImageTensor) -> Vec<f64> {
    if image.channels != 3 {
        return image.pixels.clone();
    }
    let hw = image.height * image.width;
    let luma: Vec<f64> = (0..hw)
        .map(|i| 0.299 * image.pixels[i] + 0.587 * image.pixels[hw + i] + 0.114 * image.pixels[2 * hw + i])
        .collect();
    luma.iter().cycle().take(3 * hw).copied().collect()
}

/// 3×3 smoothing with kernel `[1 1 1; 1 5 1; 1 1 1] / 13`; border pixels are kept.
fn smooth(image: &ImageTensor) -> Vec<f64> {
    let mut out = image.pixels.clone();
    let (h, w) = (image.height, image.width);
    for c in 0..image.channels {
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let mut acc = 4.0 * image.get(c, y, x);
                for dy in 0..3 {
                    for dx in 0..3 {
                        acc += image.get(c, y + dy - 1, x + dx - 1);
                    }
                }
                out[(c * h + y) * w + x] = acc / 13.0;
            }
        }
    }
    out
}

fn channel_range(image: &ImageTensor, c: usize) -> std::ops::Range<usize> {
    let hw = image.height * image.width;
    c * hw..(c + 1) * hw
}

fn autocontrast(image: &ImageTensor) -> ImageTensor {
    let mut out = image.clone();
    for c in 0..image.channels {
        let px = &mut out.pixels[channel_range(image, c)];
        let lo = px.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            for p in px.iter_mut() {
                *p = (*p - lo) / (hi - lo);
            }
        }
    }
    out
}

fn to_level(p: f64) -> usize {
    (p.clamp(0.0, 1.0) * 255.0).round() as usize
}

/// Per-channel histogram equalization over 256 levels.
fn equalize(image: &ImageTensor) -> ImageTensor {
    let mut out = image.clone();
    for c in 0..image.channels {
        let px = &mut out.pixels[channel_range(image, c)];
        let mut hist = [0usize; 256];
        for &p in px.iter() {
            hist[to_level(p)] += 1;
        }
        let n = px.len();
        let first = hist.iter().copied().find(|&h| h > 0).unwrap_or(0);
        if n == first {
            continue;
        }
        let mut cdf = [0usize; 256];
        let mut run = 0;
        for (l, &h) in hist.iter().enumerate() {
            run += h;
            cdf[l] = run;
        }
        for p in px.iter_mut() {
            let l = to_level(*p);
            *p = (cdf[l] - first) as f64 / (n - first) as f64;
        }
    }
    out
}

fn posterize(image: &ImageTensor, bits: u32) -> ImageTensor {
    let mask = !((1u32 << (8 - bits)) - 1) & 0xff;
    image.same_dims(
        image
            .pixels
            .iter()
            .map(|&p| (to_level(p) as u32 & mask) as f64 / 255.0)
            .collect(),
    )
}

fn bilinear(image: &ImageTensor, c: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let pick = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= image.height as f64 || xx >= image.width as f64 {
            0.0
        } else {
            image.get(c, yy as usize, xx as usize)
        }
    };
    let mut v = (1.0 - fy) * (1.0 - fx) * pick(y0, x0);
    if fx != 0.0 {
        v += (1.0 - fy) * fx * pick(y0, x0 + 1.0);
    }
    if fy != 0.0 {
        v += fy * (1.0 - fx) * pick(y0 + 1.0, x0);
        if fx != 0.0 {
            v += fy * fx * pick(y0 + 1.0, x0 + 1.0);
        }
    }
    v
}

/// Inverse mapping about the center: output `(x, y)` samples input at
/// `M·(x − cx, y − cy) + (cx, cy) − t`, with `M = [[m0, m1], [m2, m3]]`.
fn affine(image: &ImageTensor, m: [f64; 4], t: [f64; 2]) -> ImageTensor {
    let cx = (image.width as f64 - 1.0) / 2.0;
    let cy = (image.height as f64 - 1.0) / 2.0;
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = m[0] * dx + m[1] * dy + cx - t[0];
            let sy = m[2] * dx + m[3] * dy + cy - t[1];
            for c in 0..image.channels {
                out.set(c, y, x, bilinear(image, c, sy, sx));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaddingMode {
    Reflect,
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub mode: AugmentMode,
    pub pad: usize,
    pub padding: PaddingMode,
    pub flip_probability: f64,
    pub cutout_size: usize,
    pub cutout_fill: f64,
    pub transform_count: usize,
    pub transforms: Vec<Transform>,
    /// Per-transform magnitude overrides; must lie inside the registered range.
    pub magnitude_overrides: Vec<(Transform, (f64, f64))>,
    pub rng_seed: u64,
}

impl AugmentPolicy {
    pub fn weak() -> Self {
        AugmentPolicy {
            mode: AugmentMode::Weak,
            pad: 4,
            padding: PaddingMode::Reflect,
            flip_probability: 0.5,
            cutout_size: 0,
            cutout_fill: 0.5,
            transform_count: 0,
            transforms: Vec::new(),
            magnitude_overrides: Vec::new(),
            rng_seed: 0,
        }
    }

    pub fn strong() -> Self {
        AugmentPolicy {
            mode: AugmentMode::Strong,
            pad: 0,
            cutout_size: 16,
            transform_count: 2,
            transforms: Transform::ALL.to_vec(),
            ..Self::weak()
        }
    }

    /// Disables horizontal flips, e.g. for digit datasets.
    pub fn without_flip(mut self) -> Self {
        self.flip_probability = 0.0;
        self
    }

    pub fn magnitude_range(&self, t: Transform) -> (f64, f64) {
        self.magnitude_overrides
            .iter()
            .rev()
            .find(|(o, _)| *o == t)
            .map_or(t.range(), |&(_, r)| r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config("flip probability must be in [0, 1]".into()));
        }
        if self.mode == AugmentMode::Strong && self.transform_count > self.transforms.len() {
            return Err(Error::Config(format!(
                "cannot pick {} distinct transforms out of {}",
                self.transform_count,
                self.transforms.len()
            )));
        }
        for &(t, (lo, hi)) in &self.magnitude_overrides {
            let (rlo, rhi) = t.range();
            if !(lo <= hi && lo >= rlo && hi <= rhi) {
                return Err(Error::MagnitudeOutOfRange {
                    transform: t.name(),
                    magnitude: if lo < rlo { lo } else { hi },
                    lo: rlo,
                    hi: rhi,
                });
            }
        }
        Ok(())
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
    r as usize
}

/// Pad, crop at a uniformly random offset, then flip with the policy's probability.
pub fn weak_augment(image: &ImageTensor, policy: &AugmentPolicy, rng: &mut Rng) -> Result<ImageTensor> {
    let pad = policy.pad;
    if pad >= image.height || pad >= image.width {
        return Err(Error::InvalidArgument(format!(
            "pad {pad} must be smaller than the image ({}×{})",
            image.height, image.width
        )));
    }
    let mut out = image.clone();
    if pad > 0 {
        let oy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let ox = rng.random_range(0..=2 * pad) as isize - pad as isize;
        for c in 0..image.channels {
            for y in 0..image.height {
                for x in 0..image.width {
                    let (sy, sx) = (y as isize + oy, x as isize + ox);
                    let v = match policy.padding {
                        PaddingMode::Reflect => image.get(c, reflect(sy, image.height), reflect(sx, image.width)),
                        PaddingMode::Zero => {
                            if sy < 0 || sx < 0 || sy >= image.height as isize || sx >= image.width as isize {
                                0.0
                            } else {
                                image.get(c, sy as usize, sx as usize)
                            }
                        }
                    };
                    out.set(c, y, x, v);
                }
            }
        }
    }
    if policy.flip_probability > 0.0 && rng.random::<f64>() < policy.flip_probability {
        out = hflip(&out);
    }
    Ok(out)
}

pub fn hflip(image: &ImageTensor) -> ImageTensor {
    let mut out = image.clone();
    for c in 0..image.channels {
        for y in 0..image.height {
            for x in 0..image.width {
                out.set(c, y, x, image.get(c, y, image.width - 1 - x));
            }
        }
    }
    out
}

/// Fills a square of side `size` centered at `(cy, cx)`, clipped at the borders.
pub fn cutout(image: &ImageTensor, cy: usize, cx: usize, size: usize, fill: f64) -> ImageTensor {
    let mut out = image.clone();
    let half = size / 2;
    let (y0, x0) = (cy.saturating_sub(half), cx.saturating_sub(half));
    let (y1, x1) = ((cy + size - half).min(image.height), (cx + size - half).min(image.width));
    for c in 0..image.channels {
        for y in y0..y1 {
            for x in x0..x1 {
                out.set(c, y, x, fill);
            }
        }
    }
    out
}

/// The transforms sampled by [`strong_augment`] together with their magnitudes.
pub fn sample_transforms(policy: &AugmentPolicy, rng: &mut Rng) -> Result<Vec<(Transform, f64)>> {
    policy.validate()?;
    let picks = index::sample(rng, policy.transforms.len(), policy.transform_count);
    Ok(picks
        .into_iter()
        .map(|i| {
            let t = policy.transforms[i];
            let (lo, hi) = policy.magnitude_range(t);
            let m = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            (t, m)
        })
        .collect())
}

/// Distinct random transforms with random magnitudes, then cutout.
pub fn strong_augment(image: &ImageTensor, policy: &AugmentPolicy, rng: &mut Rng) -> Result<ImageTensor> {
    let mut out = image.clone();
    for (t, m) in sample_transforms(policy, rng)? {
        out = t.apply(&out, m)?;
    }
    if policy.cutout_size > 0 {
        let cy = rng.random_range(0..image.height);
        let cx = rng.random_range(0..image.width);
        out = cutout(&out, cy, cx, policy.cutout_size, policy.cutout_fill);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VectorAugmentConfig {
    pub sigma_weak: f64,
    pub sigma_strong: f64,
    pub drop_fraction: f64,
}

impl Default for VectorAugmentConfig {
    fn default() -> Self {
        VectorAugmentConfig {
            sigma_weak: 0.05,
            sigma_strong: 0.2,
            drop_fraction: 0.25,
        }
    }
}

/// Weak: Gaussian noise `σ_w`. Strong: noise `σ_s`, then zero a random
/// `round(ρ·d)` coordinates.
pub fn vector_augment(sample: &[f64], mode: AugmentMode, cfg: &VectorAugmentConfig, rng: &mut Rng) -> Vec<f64> {
    let sigma = match mode {
        AugmentMode::Weak => cfg.sigma_weak,
        AugmentMode::Strong => cfg.sigma_strong,
    };
    let mut out = sample.to_vec();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for v in &mut out {
            *v += normal.sample(rng);
        }
    }
    if mode == AugmentMode::Strong {
        let k = ((cfg.drop_fraction * out.len() as f64).round() as usize).min(out.len());
        for i in index::sample(rng, out.len(), k) {
            out[i] = 0.0;
        }
    }
    out
}

const WEAK_TAG: u64 = 0x5745_414b;
const STRONG_TAG: u64 = 0x5354_524f;

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum BatchPipeline {
    Vector(VectorAugmentConfig),
    Image {
        channels: usize,
        height: usize,
        width: usize,
        weak: AugmentPolicy,
        strong: AugmentPolicy,
    },
}

/// Batch augmenter with one rng stream per `(step, call, row)`, so results
/// do not depend on how rows are scheduled.
#[derive(Debug, Clone)]
pub struct StreamAugmenter {
    pipeline: BatchPipeline,
    seed: u64,
    step: u64,
    call: u64,
}

impl StreamAugmenter {
    pub fn new(pipeline: BatchPipeline, seed: u64) -> Self {
        StreamAugmenter {
            pipeline,
            seed,
            step: 0,
            call: 0,
        }
    }

    /// Rekeys the streams for a training step.
    pub fn set_step(&mut self, step: u64) {
        self.step = step;
        self.call = 0;
    }

    fn run(&mut self, samples: &Tensor, mode: AugmentMode) -> Result<Tensor> {
        let tag = match mode {
            AugmentMode::Weak => WEAK_TAG,
            AugmentMode::Strong => STRONG_TAG,
        };
        let call = self.call;
        self.call += 1;
        let mut data = Vec::with_capacity(samples.len());
        for r in 0..samples.rows() {
            let mut rng = rng::stream(self.seed, &[tag, self.step, call, r as u64]);
            let row = samples.row(r);
            match &self.pipeline {
                BatchPipeline::Vector(cfg) => data.extend(vector_augment(row, mode, cfg, &mut rng)),
                BatchPipeline::Image {
                    channels,
                    height,
                    width,
                    weak,
                    strong,
                } => {
                    let img = ImageTensor::new(*channels, *height, *width, row.to_vec())?;
                    let out = match mode {
                        AugmentMode::Weak => weak_augment(&img, weak, &mut rng)?,
                        AugmentMode::Strong => strong_augment(&img, strong, &mut rng)?,
                    };
                    data.extend(out.into_pixels());
                }
            }
        }
        Tensor::new(samples.shape().to_vec(), data)
    }
}

impl Augmenter for StreamAugmenter {
    fn weak(&mut self, samples: &Tensor) -> Result<Tensor> {
        self.run(samples, AugmentMode::Weak)
    }

    fn strong(&mut self, samples: &Tensor) -> Result<Tensor> {
        self.run(samples, AugmentMode::Strong)
    }
}
