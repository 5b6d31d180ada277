//! View generation: two core views from the basic pipeline and one auxiliary
//! view from the auxiliary operation pool.
//!
//! All randomness comes from the `rng` argument, so a view stream is a pure
//! function of its seed.

mod auxiliary;
mod image;
pub mod kernels;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::{Error, Result};

pub use auxiliary::{
    apply_aux_op, apply_draw, parse_policy_file, AuxOp, OpDraw, SubPolicy, SubPolicyOp, MAX_LEVEL,
};
pub use image::Image;
pub use kernels::CropRect;

/// Aspect-ratio range of the random resized crop.
pub const CROP_RATIO_RANGE: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);

/// Parameters of the five-op basic pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasicPolicy {
    /// Crop area as a fraction of the source area.
    pub crop_scale_range: (f64, f64),
    /// Brightness, contrast and saturation factors in `[1 − s, 1 + s]`; hue shift in `±s/4` turns.
    pub jitter_strength: f64,
    pub grayscale_prob: f64,
    pub flip_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_range: (f64, f64),
    pub output_size: usize,
}

impl Default for BasicPolicy {
    fn default() -> Self {
        BasicPolicy {
            crop_scale_range: (0.2, 1.0),
            jitter_strength: 0.4,
            grayscale_prob: 0.2,
            flip_prob: 0.5,
            blur_prob: 0.5,
            blur_sigma_range: (0.1, 2.0),
            output_size: 32,
        }
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
    }
    Ok(())
}

fn check_scale(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(0.0 < lo && lo <= hi && hi <= 1.0) {
        return Err(Error::Config(format!(
            "{name} must satisfy 0 < lo ≤ hi ≤ 1, got ({lo}, {hi})"
        )));
    }
    Ok(())
}

impl BasicPolicy {
    /// Deterministic policy: full-frame crop, no jitter, no random ops.
    pub fn identity(output_size: usize) -> Self {
        BasicPolicy {
            crop_scale_range: (1.0, 1.0),
            jitter_strength: 0.0,
            grayscale_prob: 0.0,
            flip_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma_range: (0.1, 2.0),
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_scale("crop_scale_range", self.crop_scale_range)?;
        check_prob("grayscale_prob", self.grayscale_prob)?;
        check_prob("flip_prob", self.flip_prob)?;
        check_prob("blur_prob", self.blur_prob)?;
        if !(0.0..=1.0).contains(&self.jitter_strength) {
            return Err(Error::Config(format!(
                "jitter_strength must be in [0, 1], got {}",
                self.jitter_strength
            )));
        }
        let (lo, hi) = self.blur_sigma_range;
        if !(0.0 < lo && lo <= hi) {
            return Err(Error::Config(format!("blur_sigma_range invalid: ({lo}, {hi})")));
        }
        if self.output_size == 0 {
            return Err(Error::Config("output_size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Parameters of the auxiliary pipeline.
///
/// With `sub_policies` empty this is RandAugment: `num_ops` ops drawn uniformly
/// with replacement from `op_pool`, each at `magnitude`. Otherwise one
/// sub-policy is drawn uniformly and its two ops fire with their own probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxPolicy {
    pub num_ops: usize,
    pub magnitude: u32,
    pub op_pool: Vec<AuxOp>,
    pub sub_policies: Vec<SubPolicy>,
    pub crop_scale_range: (f64, f64),
    pub output_size: usize,
}

impl Default for AuxPolicy {
    fn default() -> Self {
        AuxPolicy {
            num_ops: 2,
            magnitude: 10,
            op_pool: AuxOp::RANDAUGMENT.to_vec(),
            sub_policies: Vec::new(),
            crop_scale_range: (0.2, 1.0),
            output_size: 32,
        }
    }
}

impl AuxPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.num_ops == 0 {
            return Err(Error::Config("aux num_ops must be ≥ 1".into()));
        }
        if self.op_pool.is_empty() {
            return Err(Error::Config("aux op_pool is empty".into()));
        }
        if self.magnitude as f64 > MAX_LEVEL {
            return Err(Error::Config(format!(
                "aux magnitude {} exceeds {MAX_LEVEL}",
                self.magnitude
            )));
        }
        check_scale("aux crop_scale_range", self.crop_scale_range)?;
        if self.output_size == 0 {
            return Err(Error::Config("output_size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// The three views of one source image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewTriplet {
    pub core1: Image,
    pub core2: Image,
    pub aux: Image,
}

fn unit<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

/// Samples a random-resized-crop window: up to ten tries at a random area and
/// log-uniform aspect ratio, falling back to the largest centred crop within the ratio range.
pub fn sample_crop<R: RngCore + ?Sized>(
    width: usize,
    height: usize,
    scale: (f64, f64),
    rng: &mut R,
) -> CropRect {
    let area = (width * height) as f64;
    let (log_lo, log_hi) = (CROP_RATIO_RANGE.0.ln(), CROP_RATIO_RANGE.1.ln());
    for _ in 0..10 {
        let target = area * (scale.0 + (scale.1 - scale.0) * unit(rng));
        let ratio = (log_lo + (log_hi - log_lo) * unit(rng)).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if (1..=width).contains(&w) && (1..=height).contains(&h) {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return CropRect {
                left,
                top,
                width: w,
                height: h,
            };
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < CROP_RATIO_RANGE.0 {
        (width, ((width as f64 / CROP_RATIO_RANGE.0).round() as usize).min(height))
    } else if in_ratio > CROP_RATIO_RANGE.1 {
        (((height as f64 * CROP_RATIO_RANGE.1).round() as usize).min(width), height)
    } else {
        (width, height)
    };
    CropRect {
        left: (width - w) / 2,
        top: (height - h) / 2,
        width: w.max(1),
        height: h.max(1),
    }
}

/// Random resized crop, color jitter, random grayscale, random flip, random blur, in that order.
pub fn basic_augment<R: RngCore + ?Sized>(img: &Image, policy: &BasicPolicy, rng: &mut R) -> Image {
    let rect = sample_crop(img.width(), img.height(), policy.crop_scale_range, rng);
    let mut out = kernels::resized_crop(img, rect, policy.output_size, policy.output_size);

    let s = policy.jitter_strength;
    let factor = |rng: &mut R| (1.0 - s + 2.0 * s * unit(rng)).max(0.0) as f32;
    let brightness = factor(rng);
    let contrast = factor(rng);
    let saturation = factor(rng);
    let hue = ((2.0 * unit(rng) - 1.0) * s / 4.0) as f32;
    out = kernels::adjust_brightness(&out, brightness);
    out = kernels::adjust_contrast(&out, contrast);
    out = kernels::adjust_saturation(&out, saturation);
    out = kernels::adjust_hue(&out, hue);

    if unit(rng) < policy.grayscale_prob {
        out = kernels::grayscale(&out);
    }
    if unit(rng) < policy.flip_prob {
        out = kernels::hflip(&out);
    }
    let blur = unit(rng) < policy.blur_prob;
    let (lo, hi) = policy.blur_sigma_range;
    let sigma = lo + (hi - lo) * unit(rng);
    if blur {
        out = kernels::gaussian_blur(&out, sigma as f32);
    }
    out
}

/// Draws the op sequence of one auxiliary application.
///
/// RandAugment mode draws all `num_ops` pool indices first, then a direction
/// and a cutout anchor per op.
pub fn sample_ops<R: RngCore + ?Sized>(policy: &AuxPolicy, rng: &mut R) -> Vec<OpDraw> {
    if policy.sub_policies.is_empty() {
        let ops: Vec<AuxOp> = (0..policy.num_ops)
            .map(|_| policy.op_pool[rng.random_range(0..policy.op_pool.len())])
            .collect();
        ops.into_iter()
            .map(|op| OpDraw {
                op,
                magnitude: policy.magnitude as f64,
                negate: rng.random::<bool>(),
                anchor: (unit(rng), unit(rng)),
            })
            .collect()
    } else {
        let sub = &policy.sub_policies[rng.random_range(0..policy.sub_policies.len())];
        sub.iter()
            .filter_map(|SubPolicyOp(op, p, m)| {
                let fire = unit(rng) < *p;
                let draw = OpDraw {
                    op: *op,
                    magnitude: *m,
                    negate: rng.random::<bool>(),
                    anchor: (unit(rng), unit(rng)),
                };
                fire.then_some(draw)
            })
            .collect()
    }
}

/// Applies the sampled aux ops, then a random resized crop.
///
/// The crop window is drawn before the ops so that the crop stream does not
/// depend on which ops were chosen.
pub fn aux_augment<R: RngCore + ?Sized>(img: &Image, policy: &AuxPolicy, rng: &mut R) -> Result<Image> {
    policy.validate()?;
    let rect = sample_crop(img.width(), img.height(), policy.crop_scale_range, rng);
    let mut out = img.clone();
    for draw in sample_ops(policy, rng) {
        out = apply_draw(&draw, &out)?;
    }
    Ok(kernels::resized_crop(&out, rect, policy.output_size, policy.output_size))
}

/// What produces the third view of an image, if any.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThirdView<'a> {
    Aux(&'a AuxPolicy),
    Basic,
    None,
}

/// Views of one image. Each view uses its own sub-stream seeded from `rng`.
pub fn make_views<R: RngCore + ?Sized>(
    img: &Image,
    basic: &BasicPolicy,
    third: ThirdView<'_>,
    rng: &mut R,
) -> Result<(Image, Image, Option<Image>)> {
    let seeds = [rng.next_u64(), rng.next_u64(), rng.next_u64()];
    let core1 = basic_augment(img, basic, &mut seed::rng(seeds[0], &[]));
    let core2 = basic_augment(img, basic, &mut seed::rng(seeds[1], &[]));
    let third = match third {
        ThirdView::Aux(aux) => Some(aux_augment(img, aux, &mut seed::rng(seeds[2], &[]))?),
        ThirdView::Basic => Some(basic_augment(img, basic, &mut seed::rng(seeds[2], &[]))),
        ThirdView::None => None,
    };
    Ok((core1, core2, third))
}

/// Two independent basic views and one auxiliary view.
pub fn make_triplet<R: RngCore + ?Sized>(
    img: &Image,
    basic: &BasicPolicy,
    aux: &AuxPolicy,
    rng: &mut R,
) -> Result<ViewTriplet> {
    let (core1, core2, aux) = make_views(img, basic, ThirdView::Aux(aux), rng)?;
    Ok(ViewTriplet {
        core1,
        core2,
        aux: aux.expect("aux view requested"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::Rng as SeedRng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn noise_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = SeedRng::seed_from_u64(seed);
        let pixels = (0..w * h * 3).map(|_| rng.random::<u8>()).collect();
        Image::new(w, h, pixels).unwrap()
    }

    #[test]
    fn identity_policy_returns_original() {
        let img = noise_image(1, 32, 32);
        for s in 0..20 {
            let mut rng = SeedRng::seed_from_u64(s);
            assert_eq!(basic_augment(&img, &BasicPolicy::identity(32), &mut rng), img);
        }
    }

    #[test]
    fn basic_is_deterministic() {
        let img = noise_image(2, 32, 32);
        let p = BasicPolicy::default();
        let a = basic_augment(&img, &p, &mut SeedRng::seed_from_u64(7));
        let b = basic_augment(&img, &p, &mut SeedRng::seed_from_u64(7));
        assert_eq!(a, b);
        assert_eq!(a.width(), 32);
    }

    #[test]
    fn constant_gray_survives_blur() {
        let img = Image::filled(32, 32, [97; 3]);
        let p = BasicPolicy {
            blur_prob: 1.0,
            ..BasicPolicy::default()
        };
        for s in 0..10 {
            let out = basic_augment(&img, &p, &mut SeedRng::seed_from_u64(s));
            assert!(out.pixels().iter().all(|&v| v == out.pixels()[0]));
        }
        let blurred = kernels::gaussian_blur(&img, 2.0);
        assert_eq!(blurred, img);
    }

    #[test]
    fn crop_only_path_for_identity_ops() {
        let img = noise_image(3, 32, 32);
        let pool = vec![
            AuxOp::Identity,
            AuxOp::Rotate,
            AuxOp::ShearX,
            AuxOp::TranslateY,
            AuxOp::Solarize,
            AuxOp::Posterize,
            AuxOp::Contrast,
            AuxOp::Brightness,
            AuxOp::Color,
            AuxOp::Sharpness,
            AuxOp::Cutout,
        ];
        let policy = AuxPolicy {
            num_ops: 3,
            magnitude: 0,
            op_pool: pool,
            ..AuxPolicy::default()
        };
        for s in 0..10 {
            let out = aux_augment(&img, &policy, &mut SeedRng::seed_from_u64(s)).unwrap();
            let mut rng = SeedRng::seed_from_u64(s);
            let rect = sample_crop(32, 32, policy.crop_scale_range, &mut rng);
            assert_eq!(out, kernels::resized_crop(&img, rect, 32, 32));
        }
    }

    #[test]
    fn ops_sampler_matches_reference() {
        let policy = AuxPolicy::default();
        assert_eq!(policy.op_pool.len(), 14);
        for s in 0..50 {
            let drawn: Vec<AuxOp> = sample_ops(&policy, &mut SeedRng::seed_from_u64(s))
                .iter()
                .map(|d| d.op)
                .collect();
            // Reference: the first num_ops draws of the stream pick pool indices.
            let mut rng = SeedRng::seed_from_u64(s);
            let reference: Vec<AuxOp> = (0..2)
                .map(|_| AuxOp::RANDAUGMENT[rng.random_range(0..14usize)])
                .collect();
            assert_eq!(drawn, reference);
        }
    }

    #[test]
    fn triplet_determinism_and_identity_cores() {
        let img = noise_image(4, 32, 32);
        let aux = AuxPolicy::default();
        let t1 = make_triplet(&img, &BasicPolicy::default(), &aux, &mut SeedRng::seed_from_u64(5)).unwrap();
        let t2 = make_triplet(&img, &BasicPolicy::default(), &aux, &mut SeedRng::seed_from_u64(5)).unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1.core1, t1.core2);

        let t = make_triplet(&img, &BasicPolicy::identity(32), &aux, &mut SeedRng::seed_from_u64(5)).unwrap();
        assert_eq!(t.core1, t.core2);
    }

    #[test]
    fn unknown_aux_op_in_policy_json() {
        let err = serde_json::from_str::<AuxPolicy>(r#"{"op_pool": ["rotate", "warp"]}"#);
        assert!(err.is_err());
        let p: AuxPolicy = serde_json::from_str(r#"{"op_pool": ["rotate", "shear-x"]}"#).unwrap();
        assert_eq!(p.op_pool, vec![AuxOp::Rotate, AuxOp::ShearX]);
    }

    #[test]
    fn policy_validation() {
        let mut p = BasicPolicy::default();
        p.crop_scale_range = (0.0, 1.0);
        assert!(p.validate().is_err());
        let mut p = BasicPolicy::default();
        p.flip_prob = 1.5;
        assert!(p.validate().is_err());
        let mut a = AuxPolicy::default();
        a.num_ops = 0;
        assert!(a.validate().is_err());
    }

    #[test]
    fn grayscale_rate() {
        let img = noise_image(6, 16, 16);
        let p = BasicPolicy {
            crop_scale_range: (1.0, 1.0),
            jitter_strength: 0.0,
            grayscale_prob: 0.2,
            flip_prob: 0.5,
            blur_prob: 0.0,
            output_size: 16,
            ..BasicPolicy::default()
        };
        let aux = AuxPolicy {
            output_size: 16,
            ..AuxPolicy::default()
        };
        let mut rng = SeedRng::seed_from_u64(99);
        let mut gray = 0;
        for _ in 0..1000 {
            let t = make_triplet(&img, &p, &aux, &mut rng).unwrap();
            gray += t.core1.is_grayscale() as usize;
        }
        let rate = gray as f64 / 1000.0;
        assert!((0.15..=0.25).contains(&rate), "rate {rate}");
    }

    #[test]
    fn auto_augment_sub_policies() {
        let img = noise_image(8, 16, 16);
        let policy = AuxPolicy {
            sub_policies: vec![[
                SubPolicyOp(AuxOp::Invert, 1.0, 0.0),
                SubPolicyOp(AuxOp::Rotate, 0.0, 10.0),
            ]],
            crop_scale_range: (1.0, 1.0),
            output_size: 16,
            ..AuxPolicy::default()
        };
        let out = aux_augment(&img, &policy, &mut SeedRng::seed_from_u64(0)).unwrap();
        assert_eq!(out, kernels::invert(&img));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn flip_is_involution(seed in any::<u64>(), w in 1usize..9, h in 1usize..9) {
            let img = noise_image(seed, w, h);
            prop_assert_eq!(kernels::hflip(&kernels::hflip(&img)), img);
        }

        #[test]
        fn grayscale_channels_equal(seed in any::<u64>()) {
            let img = noise_image(seed, 7, 5);
            prop_assert!(kernels::grayscale(&img).is_grayscale());
        }

        #[test]
        fn aux_ops_keep_valid_images(
            seed in any::<u64>(),
            op in prop::sample::select(AuxOp::ALL.to_vec()),
            magnitude in 0u32..=30,
            negate in any::<bool>(),
        ) {
            let img = noise_image(seed, 9, 7);
            let draw = OpDraw { op, magnitude: magnitude as f64, negate, anchor: (0.3, 0.8) };
            let out = apply_draw(&draw, &img).unwrap();
            prop_assert_eq!((out.width(), out.height()), (9, 7));
            prop_assert_eq!(out.pixels().len(), 9 * 7 * 3);
        }

        #[test]
        fn views_have_output_size(seed in any::<u64>(), w in 8usize..40, h in 8usize..40) {
            let img = noise_image(seed, w, h);
            let t = make_triplet(
                &img,
                &BasicPolicy::default(),
                &AuxPolicy::default(),
                &mut SeedRng::seed_from_u64(seed),
            ).unwrap();
            for v in [&t.core1, &t.core2, &t.aux] {
                prop_assert_eq!((v.width(), v.height()), (32, 32));
            }
        }
    }
}
