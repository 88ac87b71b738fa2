//! The nine stimulus perturbations and linear stimulus ladders.
//!
//! Every kind works on per-channel values in `[0, 1]` (f64), then clips and
//! rounds half-up back to 8 bits. A level of exactly zero returns a copy of
//! the input without touching a single pixel.
//!
//! The per-kind formulas and level ranges are this crate's own choices:
//!
//! | kind             | level meaning                                   | range      |
//! |------------------|-------------------------------------------------|------------|
//! | gaussian-blur    | sigma in pixels, radius `ceil(3 sigma)`, reflect| `[0, 8]`   |
//! | gamma-contrast   | `out = in^(2^level)`                            | `[0, 3]`   |
//! | rotation         | degrees about the center, bilinear, black fill  | `[0, 90]`  |
//! | speckle-noise    | `out = in * (1 + n)`, `n ~ N(0, level^2)`       | `[0, 0.5]` |
//! | exposure         | `out = in * 2^level` (stops)                    | `[-4, 4]`  |
//! | saturation       | scale chroma around luma by `1 + level`         | `[-1, 3]`  |
//! | motion-blur      | horizontal box of length `1 + round(level)`     | `[0, 30]`  |
//! | jpeg-compression | 4:2:0 round trip at quality `round(100 - level)`| `[0, 99]`  |
//! | vignette         | `out = in * (1 - level * (d / d_corner)^2)`     | `[0, 1]`   |

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    GaussianBlur,
    GammaContrast,
    Rotation,
    SpeckleNoise,
    Exposure,
    Saturation,
    MotionBlur,
    JpegCompression,
    Vignette,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 9] = [
        PerturbationKind::GaussianBlur,
        PerturbationKind::GammaContrast,
        PerturbationKind::Rotation,
        PerturbationKind::SpeckleNoise,
        PerturbationKind::Exposure,
        PerturbationKind::Saturation,
        PerturbationKind::MotionBlur,
        PerturbationKind::JpegCompression,
        PerturbationKind::Vignette,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::GaussianBlur => "gaussian-blur",
            PerturbationKind::GammaContrast => "gamma-contrast",
            PerturbationKind::Rotation => "rotation",
            PerturbationKind::SpeckleNoise => "speckle-noise",
            PerturbationKind::Exposure => "exposure",
            PerturbationKind::Saturation => "saturation",
            PerturbationKind::MotionBlur => "motion-blur",
            PerturbationKind::JpegCompression => "jpeg-compression",
            PerturbationKind::Vignette => "vignette",
        }
    }

    /// Valid levels, inclusive. Also the default ladder bounds.
    pub fn valid_range(self) -> (f64, f64) {
        match self {
            PerturbationKind::GaussianBlur => (0.0, 8.0),
            PerturbationKind::GammaContrast => (0.0, 3.0),
            PerturbationKind::Rotation => (0.0, 90.0),
            PerturbationKind::SpeckleNoise => (0.0, 0.5),
            PerturbationKind::Exposure => (-4.0, 4.0),
            PerturbationKind::Saturation => (-1.0, 3.0),
            PerturbationKind::MotionBlur => (0.0, 30.0),
            PerturbationKind::JpegCompression => (0.0, 99.0),
            PerturbationKind::Vignette => (0.0, 1.0),
        }
    }

    /// Exposure and saturation sweep through zero from both sides.
    pub fn is_bidirectional(self) -> bool {
        matches!(self, PerturbationKind::Exposure | PerturbationKind::Saturation)
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PerturbationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown perturbation kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    /// Number of ladder levels.
    pub n: usize,
    pub lower: f64,
    pub upper: f64,
    /// Only consumed by speckle noise.
    pub seed: u64,
}

impl PerturbationSpec {
    /// Spec spanning the kind's whole valid range.
    pub fn with_default_bounds(kind: PerturbationKind, n: usize, seed: u64) -> Self {
        let (lower, upper) = kind.valid_range();
        PerturbationSpec {
            kind,
            n,
            lower,
            upper,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("{}: {msg}", self.kind)));
        if self.n < 2 {
            return bad(format!("need at least 2 levels, got {}", self.n));
        }
        if !(self.lower.is_finite() && self.upper.is_finite()) || self.lower >= self.upper {
            return bad(format!("bounds must satisfy lower < upper, got [{}, {}]", self.lower, self.upper));
        }
        let (lo, hi) = self.kind.valid_range();
        if self.lower < lo || self.upper > hi {
            return bad(format!(
                "bounds [{}, {}] outside valid range [{lo}, {hi}]",
                self.lower, self.upper
            ));
        }
        if self.kind.is_bidirectional() {
            if !(self.lower < 0.0 && 0.0 < self.upper) {
                return bad("bidirectional kinds need lower < 0 < upper".into());
            }
        } else if self.lower != 0.0 {
            return bad("unidirectional kinds must start at 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusLadder {
    pub levels: Vec<f64>,
}

impl StimulusLadder {
    pub fn contains_zero(&self) -> bool {
        self.levels.contains(&0.0)
    }
}

/// `n` evenly spaced levels from `lower` to `upper`, both endpoints exact.
pub fn make_ladder(spec: &PerturbationSpec) -> Result<StimulusLadder> {
    spec.validate()?;
    let n = spec.n;
    let step = (spec.upper - spec.lower) / (n - 1) as f64;
    let mut levels: Vec<f64> = (0..n).map(|i| spec.lower + i as f64 * step).collect();
    levels[n - 1] = spec.upper;
    Ok(StimulusLadder { levels })
}

/// Apply one perturbation at level `delta`.
///
/// `seed` and `image_id` only matter for speckle noise, whose generator is
/// keyed on `(seed, image_id, delta)` so the output never depends on which
/// worker processed the image.
pub fn apply(
    image: &RgbImage,
    kind: PerturbationKind,
    delta: f64,
    seed: u64,
    image_id: &str,
) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument("zero-area image".into()));
    }
    let (lo, hi) = kind.valid_range();
    if !delta.is_finite() || delta < lo || delta > hi {
        return Err(Error::InvalidArgument(format!(
            "{kind} level {delta} outside [{lo}, {hi}]"
        )));
    }
    if delta == 0.0 {
        return Ok(image.clone());
    }

    let src = FloatImage::from_rgb(image);
    let out = match kind {
        PerturbationKind::GaussianBlur => gaussian_blur(&src, delta),
        PerturbationKind::GammaContrast => {
            let gamma = delta.exp2();
            src.map(|v| v.powf(gamma))
        }
        PerturbationKind::Rotation => rotate_bilinear(&src, delta),
        PerturbationKind::SpeckleNoise => speckle(&src, delta, seed, image_id),
        PerturbationKind::Exposure => {
            let gain = delta.exp2();
            src.map(|v| v * gain)
        }
        PerturbationKind::Saturation => saturation(&src, delta),
        PerturbationKind::MotionBlur => motion_blur(&src, delta),
        PerturbationKind::JpegCompression => return jpeg_round_trip(image, delta),
        PerturbationKind::Vignette => vignette(&src, delta),
    };
    Ok(out.to_rgb())
}

/// Clip to `[0, 1]` and round half-up to 8 bits.
#[inline]
pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

/// Interleaved RGB in `[0, 1]`.
#[derive(Clone)]
pub(crate) struct FloatImage {
    pub(crate) width: usize,
    pub(crate) height: usize,
    pub(crate) data: Vec<f64>,
}

impl FloatImage {
    pub(crate) fn from_rgb(img: &RgbImage) -> Self {
        FloatImage {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    pub(crate) fn to_rgb(&self) -> RgbImage {
        let bytes = self.data.iter().map(|&v| quantize(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer size")
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        FloatImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    #[inline]
    fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }
}

/// Whole-sample symmetric reflection (`dcba|abcd|dcba`), valid for any offset.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Convolve rows (`horizontal`) or columns with a 1-D kernel whose tap `k`
/// sits at offset `origin + k`.
fn convolve_1d(src: &FloatImage, kernel: &[f64], origin: isize, horizontal: bool) -> FloatImage {
    let (w, h) = (src.width, src.height);
    let mut out = vec![0.0; src.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, &wk) in kernel.iter().enumerate() {
                    let off = origin + k as isize;
                    let v = if horizontal {
                        src.at(reflect(x as isize + off, w), y, c)
                    } else {
                        src.at(x, reflect(y as isize + off, h), c)
                    };
                    acc += wk * v;
                }
                out[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    FloatImage {
        width: w,
        height: h,
        data: out,
    }
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn gaussian_blur(src: &FloatImage, sigma: f64) -> FloatImage {
    let kernel = gaussian_kernel(sigma);
    let origin = -((kernel.len() / 2) as isize);
    let tmp = convolve_1d(src, &kernel, origin, true);
    convolve_1d(&tmp, &kernel, origin, false)
}

fn motion_blur(src: &FloatImage, delta: f64) -> FloatImage {
    let len = 1 + delta.round() as usize;
    let kernel = vec![1.0 / len as f64; len];
    // Even lengths lean one tap to the left.
    let origin = -((len / 2) as isize);
    convolve_1d(src, &kernel, origin, true)
}

/// Rotate counterclockwise (as displayed) by `degrees` about the image
/// center, sampling bilinearly with black outside the source.
pub(crate) fn rotate_bilinear(src: &FloatImage, degrees: f64) -> FloatImage {
    let (w, h) = (src.width, src.height);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let sample = |x: isize, y: isize, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            src.at(x as usize, y as usize, c)
        }
    };
    let mut out = vec![0.0; src.data.len()];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            // Inverse mapping: output pixel looks up the source rotated back.
            let sx = cx + dx * cos - dy * sin;
            let sy = cy + dx * sin + dy * cos;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            for c in 0..3 {
                let top = sample(x0, y0, c) * (1.0 - fx) + sample(x0 + 1, y0, c) * fx;
                let bottom = sample(x0, y0 + 1, c) * (1.0 - fx) + sample(x0 + 1, y0 + 1, c) * fx;
                out[(y * w + x) * 3 + c] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    FloatImage {
        width: w,
        height: h,
        data: out,
    }
}

/// 256-bit generator seed derived from `(seed, image_id, level)`.
pub fn noise_seed(seed: u64, image_id: &str, delta: f64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"fairsa-speckle-v1");
    h.update(seed.to_le_bytes());
    h.update((image_id.len() as u64).to_le_bytes());
    h.update(image_id.as_bytes());
    h.update(delta.to_bits().to_le_bytes());
    h.finalize().into()
}

fn speckle(src: &FloatImage, delta: f64, seed: u64, image_id: &str) -> FloatImage {
    let mut rng = ChaCha8Rng::from_seed(noise_seed(seed, image_id, delta));
    let normal = Normal::new(0.0, delta).expect("positive std-dev");
    // Row-major, channel-interleaved draw order.
    FloatImage {
        width: src.width,
        height: src.height,
        data: src
            .data
            .iter()
            .map(|&v| v * (1.0 + normal.sample(&mut rng)))
            .collect(),
    }
}

fn saturation(src: &FloatImage, delta: f64) -> FloatImage {
    let scale = 1.0 + delta;
    let mut data = Vec::with_capacity(src.data.len());
    for px in src.data.chunks_exact(3) {
        let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        data.extend(px.iter().map(|&v| gray + scale * (v - gray)));
    }
    FloatImage {
        width: src.width,
        height: src.height,
        data,
    }
}

fn vignette(src: &FloatImage, delta: f64) -> FloatImage {
    let (w, h) = (src.width, src.height);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let corner_sq = cx * cx + cy * cy;
    let mut data = src.data.clone();
    for y in 0..h {
        for x in 0..w {
            let d_sq = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let ratio = if corner_sq > 0.0 { d_sq / corner_sq } else { 0.0 };
            let gain = 1.0 - delta * ratio;
            for c in 0..3 {
                data[(y * w + x) * 3 + c] *= gain;
            }
        }
    }
    FloatImage {
        width: w,
        height: h,
        data,
    }
}

fn jpeg_round_trip(image: &RgbImage, delta: f64) -> Result<RgbImage> {
    let quality = (100.0 - delta).round().clamp(1.0, 100.0) as u8;
    let (w, h) = image.dimensions();
    let (w16, h16) = match (u16::try_from(w), u16::try_from(h)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "image {w}x{h} too large for JPEG"
            )))
        }
    };
    let mut buf = Vec::new();
    let mut encoder = jpeg_encoder::Encoder::new(&mut buf, quality);
    encoder.set_sampling_factor(jpeg_encoder::SamplingFactor::R_4_2_0);
    encoder
        .encode(image.as_raw(), w16, h16, jpeg_encoder::ColorType::Rgb)
        .map_err(|e| Error::InvalidArgument(format!("jpeg encode failed: {e}")))?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)
        .map_err(|source| Error::Image {
            what: "jpeg round trip".into(),
            source,
        })?;
    Ok(decoded.to_rgb8())
}
