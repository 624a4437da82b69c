//! Stochastic image transformations and the deterministic evaluation
//! transform.
//!
//! Images are C×H×W slices with values in `[0, 1]`. Each call to
//! [`augment_into`] consumes exactly [`DRAWS_PER_AUGMENTATION`] uniform draws
//! from its [`Rng`], whatever the policy enables, so that switching one
//! transform on or off leaves every other random decision unchanged:
//!
//! | draws  | transform                                             |
//! |--------|-------------------------------------------------------|
//! | 0..20  | resized crop: 10 attempts × (area scale, log aspect)  |
//! | 20..22 | crop position (x, y)                                  |
//! | 22     | horizontal flip                                       |
//! | 23..27 | color jitter: brightness, contrast, saturation, hue   |
//! | 27..29 | gaussian blur: apply?, sigma                          |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DRAWS_PER_AUGMENTATION: usize = 29;
const CROP_ATTEMPTS: usize = 10;
/// Side fraction kept by [`center_eval_transform`].
pub const CENTER_CROP_FRACTION: f64 = 0.875;
const BLUR_PROB: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Crop area as a fraction of the image area.
    pub crop_scale: (f64, f64),
    /// Crop aspect (width / height) relative to the image's own aspect.
    pub crop_aspect: (f64, f64),
    pub flip_prob: f64,
    /// Enables color jitter and gaussian blur.
    pub strong: bool,
    pub jitter_strength: f64,
    pub blur_sigma_range: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            crop_scale: (0.6, 1.0),
            crop_aspect: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            strong: false,
            jitter_strength: 0.4,
            blur_sigma_range: (0.1, 1.0),
        }
    }
}

impl AugmentPolicy {
    /// Full-image crop, no flip, no strong augmentation.
    pub fn identity() -> Self {
        AugmentPolicy {
            crop_scale: (1.0, 1.0),
            crop_aspect: (1.0, 1.0),
            flip_prob: 0.0,
            ..AugmentPolicy::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo <= hi && lo.is_finite() && hi.is_finite();
        if !ordered(self.crop_scale) || self.crop_scale.0 <= 0.0 || self.crop_scale.1 > 1.0 {
            return Err(Error::Config(format!(
                "crop_scale {:?} must satisfy 0 < lo <= hi <= 1",
                self.crop_scale
            )));
        }
        if !ordered(self.crop_aspect) || self.crop_aspect.0 <= 0.0 {
            return Err(Error::Config(format!(
                "crop_aspect {:?} must satisfy 0 < lo <= hi",
                self.crop_aspect
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "flip_prob {} outside [0, 1]",
                self.flip_prob
            )));
        }
        if !(self.jitter_strength >= 0.0) {
            return Err(Error::Config("jitter_strength must be >= 0".into()));
        }
        if !ordered(self.blur_sigma_range) || self.blur_sigma_range.0 < 0.0 {
            return Err(Error::Config(format!(
                "blur_sigma_range {:?} must satisfy 0 <= lo <= hi",
                self.blur_sigma_range
            )));
        }
        Ok(())
    }
}

/// Channel/height/width of a single image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageShape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn of(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [c, h, w] => Ok(ImageShape::new(*c, *h, *w)),
            s => Err(Error::Shape(format!("expected a C×H×W image, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Window {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

fn lerp(range: (f64, f64), u: f64) -> f64 {
    range.0 + (range.1 - range.0) * u
}

fn pick_crop(shape: ImageShape, policy: &AugmentPolicy, draws: &[f64]) -> Window {
    let (hh, ww) = (shape.height, shape.width);
    let area = (hh * ww) as f64;
    let (log_lo, log_hi) = (policy.crop_aspect.0.ln(), policy.crop_aspect.1.ln());
    let image_aspect = ww as f64 / hh as f64;
    let mut size = (ww, hh);
    for attempt in draws[..2 * CROP_ATTEMPTS].chunks_exact(2) {
        let target = area * lerp(policy.crop_scale, attempt[0]);
        let ratio = lerp((log_lo, log_hi), attempt[1]).exp() * image_aspect;
        let cw = (target * ratio).sqrt().round();
        let ch = (target / ratio).sqrt().round();
        if cw >= 1.0 && ch >= 1.0 && cw <= ww as f64 && ch <= hh as f64 {
            size = (cw as usize, ch as usize);
            break;
        }
    }
    let (cw, ch) = size;
    let x0 = ((draws[20] * (ww - cw + 1) as f64) as usize).min(ww - cw);
    let y0 = ((draws[21] * (hh - ch + 1) as f64) as usize).min(hh - ch);
    Window {
        x0,
        y0,
        w: cw,
        h: ch,
    }
}

/// Bilinear resample of `win` back to the full image size (half-pixel
/// centers). A full-image window reproduces the input bit for bit.
fn resize_window(src: &[f64], shape: ImageShape, win: Window, out: &mut [f64]) {
    let (hh, ww) = (shape.height, shape.width);
    let sy_scale = win.h as f64 / hh as f64;
    let sx_scale = win.w as f64 / ww as f64;
    let xs: Vec<(usize, usize, f64)> = (0..ww)
        .map(|ox| {
            let sx = ((ox as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (win.w - 1) as f64);
            let lo = sx.floor() as usize;
            let hi = (lo + 1).min(win.w - 1);
            (win.x0 + lo, win.x0 + hi, sx - lo as f64)
        })
        .collect();
    for c in 0..shape.channels {
        let plane = &src[c * hh * ww..(c + 1) * hh * ww];
        let dst = &mut out[c * hh * ww..(c + 1) * hh * ww];
        for oy in 0..hh {
            let sy = ((oy as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (win.h - 1) as f64);
            let lo = sy.floor() as usize;
            let hi = (lo + 1).min(win.h - 1);
            let fy = sy - lo as f64;
            let r0 = &plane[(win.y0 + lo) * ww..][..ww];
            let r1 = &plane[(win.y0 + hi) * ww..][..ww];
            for (ox, &(x_lo, x_hi, fx)) in xs.iter().enumerate() {
                let top = (1.0 - fx) * r0[x_lo] + fx * r0[x_hi];
                let bot = (1.0 - fx) * r1[x_lo] + fx * r1[x_hi];
                dst[oy * ww + ox] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
}

fn flip_columns(img: &mut [f64], shape: ImageShape) {
    for row in img.chunks_exact_mut(shape.width) {
        row.reverse();
    }
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn luminance(img: &[f64], hw: usize, p: usize) -> f64 {
    LUMA[0] * img[p] + LUMA[1] * img[hw + p] + LUMA[2] * img[2 * hw + p]
}

/// Brightness, contrast and (for RGB) saturation and hue jitter. Hue is a
/// rotation of the chroma plane in YIQ space, which keeps luminance fixed.
fn color_jitter(img: &mut [f64], shape: ImageShape, strength: f64, draws: &[f64]) {
    let factor = |u: f64| (1.0 + strength * (2.0 * u - 1.0)).max(0.0);
    let brightness = factor(draws[0]);
    let contrast = factor(draws[1]);
    img.iter_mut()
        .for_each(|v| *v = (*v * brightness).clamp(0.0, 1.0));

    let hw = shape.height * shape.width;
    let mean = if shape.channels == 3 {
        (0..hw).map(|p| luminance(img, hw, p)).sum::<f64>() / hw as f64
    } else {
        img.iter().sum::<f64>() / img.len() as f64
    };
    img.iter_mut()
        .for_each(|v| *v = (mean + contrast * (*v - mean)).clamp(0.0, 1.0));

    if shape.channels != 3 {
        return;
    }
    let saturation = factor(draws[2]);
    let angle = (2.0 * draws[3] - 1.0) * strength * std::f64::consts::FRAC_PI_4;
    let (sin, cos) = angle.sin_cos();
    for p in 0..hw {
        let (r, g, b) = (img[p], img[hw + p], img[2 * hw + p]);
        let y = LUMA[0] * r + LUMA[1] * g + LUMA[2] * b;
        let i = 0.596 * r - 0.274 * g - 0.322 * b;
        let q = 0.211 * r - 0.523 * g + 0.312 * b;
        let (i, q) = (
            saturation * (cos * i - sin * q),
            saturation * (sin * i + cos * q),
        );
        img[p] = (y + 0.956 * i + 0.621 * q).clamp(0.0, 1.0);
        img[hw + p] = (y - 0.272 * i - 0.647 * q).clamp(0.0, 1.0);
        img[2 * hw + p] = (y - 1.106 * i + 1.703 * q).clamp(0.0, 1.0);
    }
}

/// Separable gaussian blur with clamped borders.
fn gaussian_blur(img: &mut [f64], shape: ImageShape, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (2.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (hh, ww) = (shape.height as isize, shape.width as isize);
    let mut tmp = vec![0.0; (hh * ww) as usize];
    for plane in img.chunks_exact_mut((hh * ww) as usize) {
        for y in 0..hh {
            for x in 0..ww {
                tmp[(y * ww + x) as usize] = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, k)| {
                        let sx = (x + j as isize - radius).clamp(0, ww - 1);
                        k * plane[(y * ww + sx) as usize]
                    })
                    .sum();
            }
        }
        for y in 0..hh {
            for x in 0..ww {
                plane[(y * ww + x) as usize] = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, k)| {
                        let sy = (y + j as isize - radius).clamp(0, hh - 1);
                        k * tmp[(sy * ww + x) as usize]
                    })
                    .sum();
            }
        }
    }
}

/// Apply `policy` to `src` (shape `shape`) and write the result to `out`.
pub fn augment_into(
    src: &[f64],
    shape: ImageShape,
    policy: &AugmentPolicy,
    rng: &mut Rng,
    out: &mut [f64],
) {
    debug_assert_eq!(src.len(), shape.len());
    debug_assert_eq!(out.len(), shape.len());
    let mut draws = [0.0; DRAWS_PER_AUGMENTATION];
    draws.iter_mut().for_each(|d| *d = rng.uniform());

    let win = pick_crop(shape, policy, &draws);
    resize_window(src, shape, win, out);
    if draws[22] < policy.flip_prob {
        flip_columns(out, shape);
    }
    if policy.strong {
        color_jitter(out, shape, policy.jitter_strength, &draws[23..27]);
        if draws[27] < BLUR_PROB {
            gaussian_blur(out, shape, lerp(policy.blur_sigma_range, draws[28]));
        }
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

pub fn apply_augmentation(image: &Tensor, policy: &AugmentPolicy, rng: &mut Rng) -> Result<Tensor> {
    let shape = ImageShape::of(image)?;
    policy.validate()?;
    let mut out = Tensor::zeros(image.shape());
    augment_into(image.data(), shape, policy, rng, out.data_mut());
    Ok(out)
}

/// Deterministic center crop of [`CENTER_CROP_FRACTION`] of each side,
/// resized back to the input size.
pub fn center_eval_into(src: &[f64], shape: ImageShape, out: &mut [f64]) {
    let side = |n: usize| ((n as f64 * CENTER_CROP_FRACTION).round() as usize).clamp(1, n);
    let (cw, ch) = (side(shape.width), side(shape.height));
    let win = Window {
        x0: (shape.width - cw) / 2,
        y0: (shape.height - ch) / 2,
        w: cw,
        h: ch,
    };
    resize_window(src, shape, win, out);
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

pub fn center_eval_transform(image: &Tensor) -> Result<Tensor> {
    let shape = ImageShape::of(image)?;
    let mut out = Tensor::zeros(image.shape());
    center_eval_into(image.data(), shape, out.data_mut());
    Ok(out)
}

/// How an image is turned into a network input for one pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum View<'a> {
    Augmented(&'a AugmentPolicy),
    CenterEval,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_image(c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..c * h * w)
            .map(|i| ((i * 7919) % 101) as f64 / 100.0)
            .collect();
        Tensor::from_vec(&[c, h, w], data).unwrap()
    }

    #[test]
    fn identity_policy_is_exact() {
        let img = ramp_image(3, 12, 10);
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let out = apply_augmentation(&img, &AugmentPolicy::identity(), &mut rng).unwrap();
            assert_eq!(out, img);
        }
    }

    #[test]
    fn flip_is_involution() {
        let img = ramp_image(1, 6, 7);
        let policy = AugmentPolicy {
            flip_prob: 1.0,
            ..AugmentPolicy::identity()
        };
        let mut rng = Rng::new(0);
        let once = apply_augmentation(&img, &policy, &mut rng).unwrap();
        for y in 0..6 {
            for x in 0..7 {
                assert_eq!(once.data()[y * 7 + x], img.data()[y * 7 + (6 - x)]);
            }
        }
        let twice = apply_augmentation(&once, &policy, &mut rng).unwrap();
        assert_eq!(twice, img);
    }

    #[test]
    fn fixed_draw_count() {
        let img = ramp_image(3, 8, 8);
        for policy in [
            AugmentPolicy::identity(),
            AugmentPolicy::default(),
            AugmentPolicy {
                strong: true,
                ..AugmentPolicy::default()
            },
        ] {
            let mut rng = Rng::new(5);
            apply_augmentation(&img, &policy, &mut rng).unwrap();
            let mut reference = Rng::new(5);
            for _ in 0..DRAWS_PER_AUGMENTATION {
                reference.uniform();
            }
            assert_eq!(rng.position(), reference.position());
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        let img = ramp_image(3, 16, 16);
        let policy = AugmentPolicy {
            strong: true,
            ..AugmentPolicy::default()
        };
        for seed in 0..50 {
            let a = apply_augmentation(&img, &policy, &mut Rng::new(seed)).unwrap();
            let b = apply_augmentation(&img, &policy, &mut Rng::new(seed)).unwrap();
            assert_eq!(a, b);
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn degenerate_crop_falls_back_to_full_image() {
        // aspect 100:1 can never fit in an 8x8 image
        let img = ramp_image(1, 8, 8);
        let policy = AugmentPolicy {
            crop_scale: (0.5, 0.5),
            crop_aspect: (100.0, 100.0),
            flip_prob: 0.0,
            ..AugmentPolicy::default()
        };
        let out = apply_augmentation(&img, &policy, &mut Rng::new(1)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn center_transform_constant_and_deterministic() {
        let img = Tensor::from_vec(&[1, 16, 16], vec![0.3; 256]).unwrap();
        let out = center_eval_transform(&img).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let img = ramp_image(2, 16, 16);
        assert_eq!(
            center_eval_transform(&img).unwrap(),
            center_eval_transform(&img).unwrap()
        );
    }

    #[test]
    fn hue_rotation_keeps_luminance() {
        let img = ramp_image(3, 4, 4);
        let mut out = img.data().to_vec();
        let shape = ImageShape::new(3, 4, 4);
        // brightness/contrast/saturation neutral, hue at its extreme
        color_jitter(&mut out, shape, 0.4, &[0.5, 0.5, 0.5, 1.0]);
        for p in 0..16 {
            let before = luminance(img.data(), 16, p);
            let after = luminance(&out, 16, p);
            // clamping may shift saturated pixels slightly
            assert!((before - after).abs() < 0.05, "{before} vs {after}");
        }
    }

    #[test]
    fn invalid_policies_rejected() {
        let bad = AugmentPolicy {
            flip_prob: 1.5,
            ..AugmentPolicy::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentPolicy {
            crop_scale: (0.9, 0.5),
            ..AugmentPolicy::default()
        };
        assert!(bad.validate().is_err());
    }
}
