//! Image augmentations used while adapting the classifier head.
//!
//! The pipeline walks a fixed list of ten transforms. Each one fires with
//! its own probability and draws fresh parameters when it does. Geometric
//! transforms resample with nearest neighbor and reflect padding
//! (`dcb|abcd|cba`), so they never introduce new intensity values.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransformKind {
    Rotate90,
    Flip,
    Transpose,
    GaussNoise,
    MedianBlur,
    Shift,
    Rotate,
    Scale,
    Brightness,
    Hsv,
}

impl TransformKind {
    /// Pipeline order.
    pub const ALL: [TransformKind; 10] = [
        TransformKind::Rotate90,
        TransformKind::Flip,
        TransformKind::Transpose,
        TransformKind::GaussNoise,
        TransformKind::MedianBlur,
        TransformKind::Shift,
        TransformKind::Rotate,
        TransformKind::Scale,
        TransformKind::Brightness,
        TransformKind::Hsv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Rotate90 => "rotate90",
            TransformKind::Flip => "flip",
            TransformKind::Transpose => "transpose",
            TransformKind::GaussNoise => "gauss_noise",
            TransformKind::MedianBlur => "median_blur",
            TransformKind::Shift => "shift",
            TransformKind::Rotate => "rotate",
            TransformKind::Scale => "scale",
            TransformKind::Brightness => "brightness",
            TransformKind::Hsv => "hsv",
        }
    }

    pub fn default_probability(self) -> f64 {
        match self {
            TransformKind::GaussNoise => 0.1,
            TransformKind::MedianBlur => 0.2,
            TransformKind::Brightness => 0.15,
            _ => 0.5,
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown augmentation {s:?}")))
    }
}

/// A transform together with the ranges its random parameters come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransformSpec {
    /// Counter-clockwise quarter turns, `k` uniform in `0..4`.
    Rotate90,
    /// Horizontal, vertical or both, uniformly.
    Flip,
    Transpose,
    GaussNoise { sigma_min: f64, sigma_max: f64 },
    MedianBlur { kernel: usize },
    /// Integer translation of up to `max_fraction` of each dimension.
    Shift { max_fraction: f64 },
    /// Counter-clockwise rotation about the image center, in degrees.
    Rotate { min_degrees: f64, max_degrees: f64 },
    Scale { min_factor: f64, max_factor: f64 },
    /// Additive intensity offset.
    Brightness { min_delta: f64, max_delta: f64 },
    /// Symmetric limits on hue (turns), saturation and value offsets.
    Hsv { hue: f64, saturation: f64, value: f64 },
}

impl TransformSpec {
    pub fn default_for(kind: TransformKind) -> Self {
        match kind {
            TransformKind::Rotate90 => TransformSpec::Rotate90,
            TransformKind::Flip => TransformSpec::Flip,
            TransformKind::Transpose => TransformSpec::Transpose,
            TransformKind::GaussNoise => TransformSpec::GaussNoise {
                sigma_min: 0.01,
                sigma_max: 0.05,
            },
            TransformKind::MedianBlur => TransformSpec::MedianBlur { kernel: 3 },
            TransformKind::Shift => TransformSpec::Shift { max_fraction: 0.1 },
            TransformKind::Rotate => TransformSpec::Rotate {
                min_degrees: 0.0,
                max_degrees: 45.0,
            },
            TransformKind::Scale => TransformSpec::Scale {
                min_factor: 0.8,
                max_factor: 1.2,
            },
            TransformKind::Brightness => TransformSpec::Brightness {
                min_delta: -0.2,
                max_delta: 0.2,
            },
            TransformKind::Hsv => TransformSpec::Hsv {
                hue: 20.0 / 180.0,
                saturation: 30.0 / 255.0,
                value: 20.0 / 255.0,
            },
        }
    }

    pub fn kind(&self) -> TransformKind {
        match self {
            TransformSpec::Rotate90 => TransformKind::Rotate90,
            TransformSpec::Flip => TransformKind::Flip,
            TransformSpec::Transpose => TransformKind::Transpose,
            TransformSpec::GaussNoise { .. } => TransformKind::GaussNoise,
            TransformSpec::MedianBlur { .. } => TransformKind::MedianBlur,
            TransformSpec::Shift { .. } => TransformKind::Shift,
            TransformSpec::Rotate { .. } => TransformKind::Rotate,
            TransformSpec::Scale { .. } => TransformKind::Scale,
            TransformSpec::Brightness { .. } => TransformKind::Brightness,
            TransformSpec::Hsv { .. } => TransformKind::Hsv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            TransformSpec::Rotate90 | TransformSpec::Flip | TransformSpec::Transpose => true,
            TransformSpec::GaussNoise { sigma_min, sigma_max } => 0.0 <= sigma_min && sigma_min <= sigma_max,
            TransformSpec::MedianBlur { kernel } => kernel == 3,
            TransformSpec::Shift { max_fraction } => (0.0..=0.1).contains(&max_fraction),
            TransformSpec::Rotate { min_degrees, max_degrees } => {
                0.0 <= min_degrees && min_degrees <= max_degrees && max_degrees <= 45.0
            }
            TransformSpec::Scale { min_factor, max_factor } => {
                0.8 <= min_factor && min_factor <= max_factor && max_factor <= 1.2
            }
            TransformSpec::Brightness { min_delta, max_delta } => min_delta <= max_delta,
            TransformSpec::Hsv { hue, saturation, value } => hue >= 0.0 && saturation >= 0.0 && value >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Param(format!("transform parameters out of range: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipMode {
    Horizontal,
    Vertical,
    Both,
}

/// Per-transform application probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    probabilities: [f64; 10],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            probabilities: TransformKind::ALL.map(TransformKind::default_probability),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig { probabilities: [0.0; 10] }
    }

    pub fn probability(&self, kind: TransformKind) -> f64 {
        self.probabilities[kind.slot()]
    }

    pub fn set_probability(&mut self, kind: TransformKind, p: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("aug.{kind}.prob = {p} is outside [0, 1]")));
        }
        self.probabilities[kind.slot()] = p;
        Ok(())
    }
}

fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m >= n as i64 { period - m } else { m }) as usize
}

/// Counter-clockwise rotation by `k` quarter turns. Odd `k` swaps height and width.
pub fn rotate90(img: &ImageTensor, k: u32) -> ImageTensor {
    let (h, w, c) = img.shape();
    let k = k % 4;
    let (oh, ow) = if k % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = ImageTensor::zeros(oh, ow, c);
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = match k {
                0 => (y, x),
                1 => (x, w - 1 - y),
                2 => (h - 1 - y, w - 1 - x),
                _ => (h - 1 - x, y),
            };
            for ch in 0..c {
                out.set(y, x, ch, img.get(sy, sx, ch));
            }
        }
    }
    out
}

pub fn flip(img: &ImageTensor, mode: FlipMode) -> ImageTensor {
    let (h, w, c) = img.shape();
    let mut out = ImageTensor::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = match mode {
                FlipMode::Horizontal => (y, w - 1 - x),
                FlipMode::Vertical => (h - 1 - y, x),
                FlipMode::Both => (h - 1 - y, w - 1 - x),
            };
            for ch in 0..c {
                out.set(y, x, ch, img.get(sy, sx, ch));
            }
        }
    }
    out
}

pub fn transpose(img: &ImageTensor) -> ImageTensor {
    let (h, w, c) = img.shape();
    let mut out = ImageTensor::zeros(w, h, c);
    for y in 0..w {
        for x in 0..h {
            for ch in 0..c {
                out.set(y, x, ch, img.get(x, y, ch));
            }
        }
    }
    out
}

pub fn gauss_noise(img: &ImageTensor, sigma: f64, rng: &mut Rng) -> ImageTensor {
    let mut out = img.clone();
    // Box-Muller in single precision; both outputs are used.
    let sigma = sigma as f32;
    for pair in out.data_mut().chunks_mut(2) {
        let radius = (-2.0 * ((1.0 - rng.next_f64()) as f32).ln()).sqrt();
        let (sin, cos) = (std::f32::consts::TAU * rng.next_f64() as f32).sin_cos();
        for (v, z) in pair.iter_mut().zip([radius * cos, radius * sin]) {
            *v = (*v + sigma * z).clamp(0.0, 1.0);
        }
    }
    out
}

/// Median of nine values by a fixed compare-exchange network.
#[inline]
fn median9(p: &[f32; 9]) -> f32 {
    let [mut p0, mut p1, mut p2, mut p3, mut p4, mut p5, mut p6, mut p7, mut p8] = *p;
    macro_rules! cx {
        ($a:ident, $b:ident) => {{
            let lo = if $a < $b { $a } else { $b };
            $b = if $a < $b { $b } else { $a };
            $a = lo;
        }};
    }
    cx!(p1, p2); cx!(p4, p5); cx!(p7, p8); cx!(p0, p1); cx!(p3, p4); cx!(p6, p7);
    cx!(p1, p2); cx!(p4, p5); cx!(p7, p8); cx!(p0, p3); cx!(p5, p8); cx!(p4, p7);
    cx!(p3, p6); cx!(p1, p4); cx!(p2, p5); cx!(p4, p7); cx!(p4, p2); cx!(p6, p4);
    let _ = (p0, p1, p3, p5, p6, p7, p8);
    if p4 < p2 { p4 } else { p2 }
}

/// 3x3 median per channel with reflect padding.
pub fn median_blur3(img: &ImageTensor) -> Result<ImageTensor> {
    let (h, w, c) = img.shape();
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!("median blur needs at least 3x3, got {h}x{w}")));
    }
    let rows: Vec<[usize; 3]> = (0..h as i64)
        .map(|y| [-1, 0, 1].map(|d| reflect(y + d, h)))
        .collect();
    let cols: Vec<[usize; 3]> = (0..w as i64)
        .map(|x| [-1, 0, 1].map(|d| reflect(x + d, w)))
        .collect();
    let src = img.data();
    let mut out = ImageTensor::zeros(h, w, c);
    let dst = out.data_mut();
    let mut window = [0f32; 9];
    for (y, ry) in rows.iter().enumerate() {
        for (x, cx) in cols.iter().enumerate() {
            for ch in 0..c {
                let mut n = 0;
                for &sy in ry {
                    for &sx in cx {
                        window[n] = src[(sy * w + sx) * c + ch];
                        n += 1;
                    }
                }
                dst[(y * w + x) * c + ch] = median9(&window);
            }
        }
    }
    Ok(out)
}

/// Content moves `dx` pixels right and `dy` pixels down.
pub fn shift(img: &ImageTensor, dx: i64, dy: i64) -> ImageTensor {
    let (h, w, c) = img.shape();
    let mut out = ImageTensor::zeros(h, w, c);
    for y in 0..h {
        let sy = reflect(y as i64 - dy, h);
        for x in 0..w {
            let sx = reflect(x as i64 - dx, w);
            for ch in 0..c {
                out.set(y, x, ch, img.get(sy, sx, ch));
            }
        }
    }
    out
}

/// Inverse-maps every output pixel through `f` (centered coordinates),
/// rounding to the nearest source pixel.
fn resample(img: &ImageTensor, f: impl Fn(f64, f64) -> (f64, f64)) -> ImageTensor {
    let (h, w, c) = img.shape();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = ImageTensor::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = f(x as f64 - cx, y as f64 - cy);
            let sx = reflect((sx + cx).round() as i64, w);
            let sy = reflect((sy + cy).round() as i64, h);
            for ch in 0..c {
                out.set(y, x, ch, img.get(sy, sx, ch));
            }
        }
    }
    out
}

/// Counter-clockwise as displayed (rows grow downward).
pub fn rotate(img: &ImageTensor, degrees: f64) -> ImageTensor {
    let (sin, cos) = degrees.to_radians().sin_cos();
    resample(img, |x, y| (x * cos - y * sin, x * sin + y * cos))
}

/// Zoom about the center; factors above one enlarge the content.
pub fn scale(img: &ImageTensor, factor: f64) -> ImageTensor {
    resample(img, |x, y| (x / factor, y / factor))
}

pub fn brightness(img: &ImageTensor, delta: f64) -> ImageTensor {
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v as f64 + delta).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Hexcone RGB to HSV for one pixel; hue in turns `[0, 1)`, and 0 for grays.
pub fn rgb_to_hsv_pixel(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    let s = if max > 0.0 { chroma / max } else { 0.0 };
    let h = if chroma == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    ((h / 6.0).rem_euclid(1.0), s, max)
}

pub fn hsv_to_rgb_pixel(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let chroma = v * s;
    let hp = h.rem_euclid(1.0) * 6.0;
    let x = chroma * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    let m = v - chroma;
    (r + m, g + m, b + m)
}

fn map_pixels3(
    img: &ImageTensor,
    f: impl Fn(f64, f64, f64) -> (f64, f64, f64),
) -> Result<ImageTensor> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!("color conversion needs 3 channels, got {}", img.channels())));
    }
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let (a, b, c) = f(px[0] as f64, px[1] as f64, px[2] as f64);
        px[0] = a as f32;
        px[1] = b as f32;
        px[2] = c as f32;
    }
    Ok(out)
}

pub fn rgb_to_hsv(img: &ImageTensor) -> Result<ImageTensor> {
    map_pixels3(img, rgb_to_hsv_pixel)
}

pub fn hsv_to_rgb(img: &ImageTensor) -> Result<ImageTensor> {
    map_pixels3(img, hsv_to_rgb_pixel)
}

/// Hue rotates (wrapping); saturation and value are offset and clamped.
pub fn shift_hsv(img: &ImageTensor, dh: f64, ds: f64, dv: f64) -> Result<ImageTensor> {
    map_pixels3(img, |r, g, b| {
        let (h, s, v) = rgb_to_hsv_pixel(r, g, b);
        let (r, g, b) = hsv_to_rgb_pixel(
            (h + dh).rem_euclid(1.0),
            (s + ds).clamp(0.0, 1.0),
            (v + dv).clamp(0.0, 1.0),
        );
        (r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0))
    })
}

/// Draws the transform's parameters from `rng` and applies it.
pub fn apply_transform(img: &ImageTensor, spec: &TransformSpec, rng: &mut Rng) -> Result<ImageTensor> {
    spec.validate()?;
    Ok(match *spec {
        TransformSpec::Rotate90 => rotate90(img, rng.int_below(4) as u32),
        TransformSpec::Flip => {
            let mode = [FlipMode::Horizontal, FlipMode::Vertical, FlipMode::Both][rng.index_below(3)];
            flip(img, mode)
        }
        TransformSpec::Transpose => transpose(img),
        TransformSpec::GaussNoise { sigma_min, sigma_max } => {
            let sigma = rng.uniform(sigma_min, sigma_max);
            gauss_noise(img, sigma, rng)
        }
        TransformSpec::MedianBlur { .. } => median_blur3(img)?,
        TransformSpec::Shift { max_fraction } => {
            let max_dx = (max_fraction * img.width() as f64).floor() as i64;
            let max_dy = (max_fraction * img.height() as f64).floor() as i64;
            let dx = rng.int_below(2 * max_dx as u64 + 1) as i64 - max_dx;
            let dy = rng.int_below(2 * max_dy as u64 + 1) as i64 - max_dy;
            shift(img, dx, dy)
        }
        TransformSpec::Rotate { min_degrees, max_degrees } => rotate(img, rng.uniform(min_degrees, max_degrees)),
        TransformSpec::Scale { min_factor, max_factor } => scale(img, rng.uniform(min_factor, max_factor)),
        TransformSpec::Brightness { min_delta, max_delta } => brightness(img, rng.uniform(min_delta, max_delta)),
        TransformSpec::Hsv { hue, saturation, value } => {
            let dh = rng.uniform(-hue, hue);
            let ds = rng.uniform(-saturation, saturation);
            let dv = rng.uniform(-value, value);
            shift_hsv(img, dh, ds, dv)?
        }
    })
}

/// [`apply_pipeline`] that also reports which transforms fired.
///
/// Shape is always preserved: on non-square images quarter turns are
/// restricted to even `k` and transpose is skipped; single-channel images
/// skip the color jitter.
pub fn apply_pipeline_traced(
    img: &ImageTensor,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<(ImageTensor, [bool; 10])> {
    let mut fired = [false; 10];
    let mut cur = img.clone();
    let square = img.height() == img.width();
    for kind in TransformKind::ALL {
        if !rng.bernoulli(cfg.probability(kind)) {
            continue;
        }
        fired[kind.slot()] = true;
        cur = match kind {
            TransformKind::Rotate90 if !square => rotate90(&cur, 2 * rng.int_below(2) as u32),
            TransformKind::Transpose if !square => cur,
            TransformKind::Hsv if cur.channels() != 3 => cur,
            _ => apply_transform(&cur, &TransformSpec::default_for(kind), rng)?,
        };
    }
    Ok((cur, fired))
}

pub fn apply_pipeline(img: &ImageTensor, cfg: &AugmentConfig, rng: &mut Rng) -> Result<ImageTensor> {
    apply_pipeline_traced(img, cfg, rng).map(|(out, _)| out)
}
