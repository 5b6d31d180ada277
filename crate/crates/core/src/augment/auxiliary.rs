//! The auxiliary operation pool.
//!
//! Magnitudes are levels on a 0–30 scale; each op maps a level linearly onto
//! its own range (table below, value at level 30). Signed ops take their
//! direction from the caller.
//!
//! | op            | level 30                  |
//! |---------------|---------------------------|
//! | rotate        | 30°                       |
//! | shear_x/y     | 0.3                       |
//! | translate_x/y | 0.45 × image side         |
//! | solarize      | threshold 256 → 0         |
//! | posterize     | 8 bits → 4 bits           |
//! | contrast, brightness, color, sharpness | factor 1 ± 0.9 |
//! | cutout        | square side 0.5 × min side |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::kernels::{self, cutout};
use super::Image;
use crate::{Error, Result};

pub const MAX_LEVEL: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxOp {
    Identity,
    Rotate,
    #[serde(alias = "shear-x")]
    ShearX,
    #[serde(alias = "shear-y")]
    ShearY,
    #[serde(alias = "translate-x")]
    TranslateX,
    #[serde(alias = "translate-y")]
    TranslateY,
    #[serde(alias = "autocontrast")]
    AutoContrast,
    Invert,
    Equalize,
    Solarize,
    Posterize,
    Contrast,
    Brightness,
    Color,
    Sharpness,
    Cutout,
}

impl AuxOp {
    pub const ALL: [AuxOp; 16] = [
        AuxOp::Identity,
        AuxOp::Rotate,
        AuxOp::ShearX,
        AuxOp::ShearY,
        AuxOp::TranslateX,
        AuxOp::TranslateY,
        AuxOp::AutoContrast,
        AuxOp::Invert,
        AuxOp::Equalize,
        AuxOp::Solarize,
        AuxOp::Posterize,
        AuxOp::Contrast,
        AuxOp::Brightness,
        AuxOp::Color,
        AuxOp::Sharpness,
        AuxOp::Cutout,
    ];

    /// The 14-op RandAugment pool.
    pub const RANDAUGMENT: [AuxOp; 14] = [
        AuxOp::Identity,
        AuxOp::AutoContrast,
        AuxOp::Equalize,
        AuxOp::Rotate,
        AuxOp::Solarize,
        AuxOp::Color,
        AuxOp::Posterize,
        AuxOp::Contrast,
        AuxOp::Brightness,
        AuxOp::Sharpness,
        AuxOp::ShearX,
        AuxOp::ShearY,
        AuxOp::TranslateX,
        AuxOp::TranslateY,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AuxOp::Identity => "identity",
            AuxOp::Rotate => "rotate",
            AuxOp::ShearX => "shear_x",
            AuxOp::ShearY => "shear_y",
            AuxOp::TranslateX => "translate_x",
            AuxOp::TranslateY => "translate_y",
            AuxOp::AutoContrast => "auto_contrast",
            AuxOp::Invert => "invert",
            AuxOp::Equalize => "equalize",
            AuxOp::Solarize => "solarize",
            AuxOp::Posterize => "posterize",
            AuxOp::Contrast => "contrast",
            AuxOp::Brightness => "brightness",
            AuxOp::Color => "color",
            AuxOp::Sharpness => "sharpness",
            AuxOp::Cutout => "cutout",
        }
    }

    /// Whether the op has a direction (a random sign in the samplers).
    pub fn is_signed(self) -> bool {
        matches!(
            self,
            AuxOp::Rotate
                | AuxOp::ShearX
                | AuxOp::ShearY
                | AuxOp::TranslateX
                | AuxOp::TranslateY
                | AuxOp::Contrast
                | AuxOp::Brightness
                | AuxOp::Color
                | AuxOp::Sharpness
        )
    }
}

impl fmt::Display for AuxOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AuxOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        let norm = if norm == "autocontrast" { "auto_contrast".to_string() } else { norm };
        AuxOp::ALL
            .into_iter()
            .find(|op| op.name() == norm)
            .ok_or_else(|| {
                let valid: Vec<_> = AuxOp::ALL.iter().map(|o| o.name()).collect();
                Error::Config(format!("unknown augmentation op {s:?}; supported: {}", valid.join(", ")))
            })
    }
}

/// One fully-specified application of an aux op.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpDraw {
    pub op: AuxOp,
    pub magnitude: f64,
    /// Reverse the direction of a signed op.
    pub negate: bool,
    /// Cutout centre as fractions of width and height.
    pub anchor: (f64, f64),
}

fn fraction(magnitude: f64) -> Result<f64> {
    if !(0.0..=MAX_LEVEL).contains(&magnitude) {
        return Err(Error::Config(format!(
            "magnitude {magnitude} outside [0, {MAX_LEVEL}]"
        )));
    }
    Ok(magnitude / MAX_LEVEL)
}

/// Applies `op` in its positive direction at `magnitude`; cutout is centred.
pub fn apply_aux_op(op: AuxOp, magnitude: f64, img: &Image) -> Result<Image> {
    apply_draw(
        &OpDraw {
            op,
            magnitude,
            negate: false,
            anchor: (0.5, 0.5),
        },
        img,
    )
}

pub fn apply_draw(draw: &OpDraw, img: &Image) -> Result<Image> {
    let frac = fraction(draw.magnitude)?;
    let sign = if draw.negate && draw.op.is_signed() { -1.0 } else { 1.0 };
    let signed = sign * frac;
    let (w, h) = (img.width() as f64, img.height() as f64);
    let factor = (1.0 + 0.9 * signed) as f32;
    let out = match draw.op {
        AuxOp::Identity => img.clone(),
        AuxOp::Rotate => {
            if signed == 0.0 {
                img.clone()
            } else {
                let theta = (30.0 * signed).to_radians();
                let (s, c) = theta.sin_cos();
                kernels::affine_warp(img, [c, s, -s, c], (0.0, 0.0))
            }
        }
        AuxOp::ShearX => {
            if signed == 0.0 {
                img.clone()
            } else {
                kernels::affine_warp(img, [1.0, 0.3 * signed, 0.0, 1.0], (0.0, 0.0))
            }
        }
        AuxOp::ShearY => {
            if signed == 0.0 {
                img.clone()
            } else {
                kernels::affine_warp(img, [1.0, 0.0, 0.3 * signed, 1.0], (0.0, 0.0))
            }
        }
        AuxOp::TranslateX => {
            if signed == 0.0 {
                img.clone()
            } else {
                kernels::affine_warp(img, [1.0, 0.0, 0.0, 1.0], (-0.45 * signed * w, 0.0))
            }
        }
        AuxOp::TranslateY => {
            if signed == 0.0 {
                img.clone()
            } else {
                kernels::affine_warp(img, [1.0, 0.0, 0.0, 1.0], (0.0, -0.45 * signed * h))
            }
        }
        AuxOp::AutoContrast => kernels::autocontrast(img),
        AuxOp::Invert => kernels::invert(img),
        AuxOp::Equalize => kernels::equalize(img),
        AuxOp::Solarize => kernels::solarize(img, (256.0 * (1.0 - frac)).round() as u16),
        AuxOp::Posterize => kernels::posterize(img, 8 - (4.0 * frac).round() as u8),
        AuxOp::Contrast => kernels::adjust_contrast(img, factor),
        AuxOp::Brightness => kernels::adjust_brightness(img, factor),
        AuxOp::Color => kernels::adjust_saturation(img, factor),
        AuxOp::Sharpness => kernels::adjust_sharpness(img, factor),
        AuxOp::Cutout => {
            let side = (0.5 * frac * w.min(h)).round() as usize;
            let cx = ((draw.anchor.0 * w) as usize).min(img.width() - 1);
            let cy = ((draw.anchor.1 * h) as usize).min(img.height() - 1);
            cutout(img, cx, cy, side)
        }
    };
    Ok(out)
}

/// One step of an AutoAugment sub-policy: `(op, probability, magnitude)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubPolicyOp(pub AuxOp, pub f64, pub f64);

/// A pair of ops applied together, each with its own probability.
pub type SubPolicy = [SubPolicyOp; 2];

/// Parses an AutoAugment policy document: a JSON list of sub-policies, each a
/// pair of `[op, probability, magnitude]` triples. Magnitudes use the 0–30 level scale.
pub fn parse_policy_file(json: &str) -> Result<Vec<SubPolicy>> {
    let raw: Vec<[(String, f64, f64); 2]> =
        serde_json::from_str(json).map_err(|e| Error::Config(format!("policy file: {e}")))?;
    if raw.is_empty() {
        return Err(Error::Config("policy file has no sub-policies".into()));
    }
    raw.into_iter()
        .map(|pair| {
            let convert = |(name, p, m): (String, f64, f64)| -> Result<SubPolicyOp> {
                let op = name.parse()?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!("probability {p} for {name} outside [0, 1]")));
                }
                fraction(m)?;
                Ok(SubPolicyOp(op, p, m))
            };
            let [a, b] = pair;
            Ok([convert(a)?, convert(b)?])
        })
        .collect()
}
