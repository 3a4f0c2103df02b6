//! Stochastic view augmentation for contrastive pre-training: random
//! resized crop, horizontal flip, color jitter, random grayscale.
//!
//! Augmentation operates on plain images outside the autodiff graph; the
//! augmented view enters losses as a constant of the draw. Every transform
//! is skipped outright when its drawn parameter is the identity, so an
//! all-zero-strength config reproduces the input bit for bit. Grayscale and
//! saturation use the Rec. 601 luminance weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Strengths for the augmentation pipeline. Ranges follow the usual
/// contrastive-learning conventions and are fully config-exposed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Lower bound of the crop area scale; 1.0 disables cropping.
    pub crop_min_scale: f64,
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Max absolute cyclic hue shift.
    pub hue: f64,
    pub grayscale_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_min_scale: 0.5,
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_prob: 0.2,
        }
    }
}

impl AugmentConfig {
    /// A pipeline whose every draw is the identity.
    pub fn identity() -> Self {
        AugmentConfig {
            crop_min_scale: 1.0,
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in01 = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.crop_min_scale > 0.0 && self.crop_min_scale <= 1.0) {
            return Err(Error::contract("crop_min_scale must be in (0,1]"));
        }
        if !in01(self.flip_prob) || !in01(self.grayscale_prob) {
            return Err(Error::contract("probabilities must be in [0,1]"));
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if v < 0.0 {
                return Err(Error::contract(format!("{name} range must be >= 0")));
            }
        }
        Ok(())
    }
}

/// The parameters actually drawn for one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub crop_x: usize,
    pub crop_y: usize,
    pub crop_size: usize,
    pub flipped: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue_shift: f64,
    pub grayscale: bool,
}

/// Two independently augmented views of the same source image.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub view1: Tensor,
    pub view2: Tensor,
    pub params1: AugmentParams,
    pub params2: AugmentParams,
}

/// Augment one `[3,h,w]` image and return the view with the drawn
/// parameters.
pub fn augment_view(
    image: &Tensor,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor, AugmentParams)> {
    cfg.validate()?;
    if image.ndim() != 3 || image.shape()[0] != 3 {
        return Err(Error::contract(format!(
            "augment_view expects a [3,h,w] image, got {:?}",
            image.shape()
        )));
    }
    if !image.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
        return Err(Error::contract("image values must lie in [0,1]"));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let side = h.min(w);

    // The draw count is independent of the config so streams stay aligned
    // across config variations.
    let scale: f64 = rng.gen_range(cfg.crop_min_scale..=1.0);
    let crop_size = ((scale.sqrt() * side as f64).round() as usize).clamp(1, side);
    let crop_y = rng.gen_range(0..=(h - crop_size));
    let crop_x = rng.gen_range(0..=(w - crop_size));
    let flipped = rng.gen::<f64>() < cfg.flip_prob;
    let brightness = rng.gen_range((1.0 - cfg.brightness).max(0.0)..=(1.0 + cfg.brightness));
    let contrast = rng.gen_range((1.0 - cfg.contrast).max(0.0)..=(1.0 + cfg.contrast));
    let saturation = rng.gen_range((1.0 - cfg.saturation).max(0.0)..=(1.0 + cfg.saturation));
    let hue_shift = rng.gen_range(-cfg.hue..=cfg.hue);
    let grayscale = rng.gen::<f64>() < cfg.grayscale_prob;

    let params = AugmentParams {
        crop_x,
        crop_y,
        crop_size,
        flipped,
        brightness,
        contrast,
        saturation,
        hue_shift,
        grayscale,
    };
    Ok((apply_params(image, &params)?, params))
}

/// Deterministically apply previously drawn parameters.
pub fn apply_params(image: &Tensor, p: &AugmentParams) -> Result<Tensor> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = image.clone();

    if p.crop_size < h.min(w) {
        out = resize_crop(&out, p.crop_y, p.crop_x, p.crop_size, h, w);
    }
    if p.flipped {
        out = hflip(&out);
    }
    if p.brightness != 1.0 {
        for v in out.data_mut() {
            *v = (*v * p.brightness).clamp(0.0, 1.0);
        }
    }
    if p.contrast != 1.0 {
        let mean = luma_mean(&out);
        for v in out.data_mut() {
            *v = ((*v - mean) * p.contrast + mean).clamp(0.0, 1.0);
        }
    }
    if p.saturation != 1.0 {
        apply_saturation(&mut out, p.saturation);
    }
    if p.hue_shift != 0.0 {
        apply_hue_shift(&mut out, p.hue_shift);
    }
    if p.grayscale {
        apply_grayscale(&mut out);
    }
    Ok(out)
}

/// Draw two views of one image.
pub fn augment_pair(
    image: &Tensor,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<AugmentedPair> {
    let (view1, params1) = augment_view(image, cfg, rng)?;
    let (view2, params2) = augment_view(image, cfg, rng)?;
    Ok(AugmentedPair {
        view1,
        view2,
        params1,
        params2,
    })
}

pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
}

fn luma_mean(img: &Tensor) -> f64 {
    let hw = img.shape()[1] * img.shape()[2];
    let d = img.data();
    let mut acc = 0.0;
    for p in 0..hw {
        acc += luma(d[p], d[hw + p], d[2 * hw + p]);
    }
    acc / hw as f64
}

fn apply_grayscale(img: &mut Tensor) {
    let hw = img.shape()[1] * img.shape()[2];
    for p in 0..hw {
        let l = luma(img.data()[p], img.data()[hw + p], img.data()[2 * hw + p]);
        img.data_mut()[p] = l;
        img.data_mut()[hw + p] = l;
        img.data_mut()[2 * hw + p] = l;
    }
}

fn apply_saturation(img: &mut Tensor, factor: f64) {
    let hw = img.shape()[1] * img.shape()[2];
    for p in 0..hw {
        let l = luma(img.data()[p], img.data()[hw + p], img.data()[2 * hw + p]);
        for c in 0..3 {
            let v = img.data()[c * hw + p];
            img.data_mut()[c * hw + p] = (l + (v - l) * factor).clamp(0.0, 1.0);
        }
    }
}

fn apply_hue_shift(img: &mut Tensor, shift: f64) {
    let hw = img.shape()[1] * img.shape()[2];
    for p in 0..hw {
        let (r, g, b) = (img.data()[p], img.data()[hw + p], img.data()[2 * hw + p]);
        let (h, s, v) = rgb_to_hsv_scalar(r, g, b);
        let nh = (h + shift).rem_euclid(1.0);
        let (nr, ng, nb) = hsv_to_rgb_scalar(nh, s, v);
        img.data_mut()[p] = nr.clamp(0.0, 1.0);
        img.data_mut()[hw + p] = ng.clamp(0.0, 1.0);
        img.data_mut()[2 * hw + p] = nb.clamp(0.0, 1.0);
    }
}

fn rgb_to_hsv_scalar(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let mx = r.max(g).max(b);
    let mn = r.min(g).min(b);
    let c = mx - mn;
    let v = mx;
    let s = if mx > 0.0 { c / mx } else { 0.0 };
    let h = if c == 0.0 {
        0.0
    } else if mx == r {
        ((g - b) / c).rem_euclid(6.0) / 6.0
    } else if mx == g {
        ((b - r) / c + 2.0) / 6.0
    } else {
        ((r - g) / c + 4.0) / 6.0
    };
    (h, s, v)
}

fn hsv_to_rgb_scalar(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn hflip(img: &Tensor) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = img.clone();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out.data_mut()[(c * h + y) * w + x] = img.data()[(c * h + y) * w + (w - 1 - x)];
            }
        }
    }
    out
}

/// Crop `[cy..cy+size, cx..cx+size]` and bilinearly resize back to `h x w`.
fn resize_crop(img: &Tensor, cy: usize, cx: usize, size: usize, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(vec![3, h, w]);
    let sy = size as f64 / h as f64;
    let sx = size as f64 / w as f64;
    for c in 0..3 {
        for y in 0..h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, size as f64 - 1.0);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(size - 1);
            let wy = fy - y0 as f64;
            for x in 0..w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, size as f64 - 1.0);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(size - 1);
                let wx = fx - x0 as f64;
                let at = |yy: usize, xx: usize| {
                    img.data()[(c * img.shape()[1] + cy + yy) * img.shape()[2] + cx + xx]
                };
                let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
                let bot = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
                out.data_mut()[(c * h + y) * w + x] = (top * (1.0 - wy) + bot * wy).clamp(0.0, 1.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn test_image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = crate::rng::derive(seed, &[0xaa]);
        Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.gen()).collect())
    }

    #[test]
    fn identity_pipeline_returns_input_exactly() {
        let img = test_image(1, 8, 8);
        let mut rng = crate::rng::derive(1, &[1]);
        let (view, params) = augment_view(&img, &AugmentConfig::identity(), &mut rng).unwrap();
        assert_eq!(view, img);
        assert_eq!(params.crop_size, 8);
        assert!(!params.flipped && !params.grayscale);
        assert_eq!(params.brightness, 1.0);
    }

    #[test]
    fn same_seed_gives_identical_views_and_params() {
        let img = test_image(2, 8, 8);
        let cfg = AugmentConfig::default();
        let mut r1 = crate::rng::derive(5, &[2]);
        let mut r2 = crate::rng::derive(5, &[2]);
        let (v1, p1) = augment_view(&img, &cfg, &mut r1).unwrap();
        let (v2, p2) = augment_view(&img, &cfg, &mut r2).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn grayscale_output_matches_luminance_weights() {
        let img = test_image(3, 6, 6);
        let cfg = AugmentConfig {
            grayscale_prob: 1.0,
            crop_min_scale: 1.0,
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        };
        let mut rng = crate::rng::derive(6, &[3]);
        let (view, params) = augment_view(&img, &cfg, &mut rng).unwrap();
        assert!(params.grayscale);
        let hw = 36;
        for p in 0..hw {
            let expect = 0.299 * img.data()[p] + 0.587 * img.data()[hw + p]
                + 0.114 * img.data()[2 * hw + p];
            for c in 0..3 {
                assert!((view.data()[c * hw + p] - expect).abs() < 1e-6);
            }
            assert!((view.data()[p] - view.data()[hw + p]).abs() < 1e-6);
            assert!((view.data()[p] - view.data()[2 * hw + p]).abs() < 1e-6);
        }
    }

    #[test]
    fn outputs_stay_in_unit_range_and_params_in_announced_ranges() {
        let img = test_image(4, 8, 8);
        let cfg = AugmentConfig::default();
        let mut rng = crate::rng::derive(7, &[4]);
        for _ in 0..10_000 {
            let (view, p) = augment_view(&img, &cfg, &mut rng).unwrap();
            debug_assert!(view.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(p.crop_size >= 1 && p.crop_size <= 8);
            assert!(p.crop_x + p.crop_size <= 8 && p.crop_y + p.crop_size <= 8);
            assert!(p.brightness >= 0.6 && p.brightness <= 1.4);
            assert!(p.contrast >= 0.6 && p.contrast <= 1.4);
            assert!(p.saturation >= 0.6 && p.saturation <= 1.4);
            assert!(p.hue_shift.abs() <= 0.1);
        }
        // Spot-check range on a handful of full views too.
        let (view, _) = augment_view(&img, &cfg, &mut rng).unwrap();
        assert!(view.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn views_preserve_shape() {
        let img = test_image(5, 10, 10);
        let cfg = AugmentConfig::default();
        let mut rng = crate::rng::derive(8, &[5]);
        let pair = augment_pair(&img, &cfg, &mut rng).unwrap();
        assert_eq!(pair.view1.shape(), img.shape());
        assert_eq!(pair.view2.shape(), img.shape());
    }

    #[test]
    fn hsv_roundtrip_scalar() {
        let mut rng = crate::rng::derive(9, &[6]);
        for _ in 0..500 {
            let (r, g, b) = (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let (h, s, v) = rgb_to_hsv_scalar(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb_scalar(h, s, v);
            assert!((r - r2).abs() < 1e-9 && (g - g2).abs() < 1e-9 && (b - b2).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_out_of_range_input() {
        let img = Tensor::full(vec![3, 4, 4], 1.5);
        let mut rng = crate::rng::derive(10, &[7]);
        assert!(augment_view(&img, &AugmentConfig::default(), &mut rng).is_err());
    }
}
