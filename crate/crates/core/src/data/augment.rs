//! Deterministic image augmentations. Every augmentation is an exact pixel
//! permutation applied per channel — no interpolation, no value changes:
//!
//!   hflip:  output(r, c) = input(r, W−1−c)        (mirror columns)
//!   vflip:  output(r, c) = input(H−1−r, c)        (mirror rows)
//!   rot90:  output(r, c) = input(H−1−c, r)        (clockwise quarter turn)
//!   rot180 = rot90 ∘ rot90,  rot270 = rot90 ∘ rot90 ∘ rot90
//!
//! Rotations require square images.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentationKind {
    Hflip,
    Vflip,
    Rot90,
    Rot180,
    Rot270,
}

impl AugmentationKind {
    pub const ALL: [AugmentationKind; 5] = [
        AugmentationKind::Hflip,
        AugmentationKind::Vflip,
        AugmentationKind::Rot90,
        AugmentationKind::Rot180,
        AugmentationKind::Rot270,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentationKind::Hflip => "hflip",
            AugmentationKind::Vflip => "vflip",
            AugmentationKind::Rot90 => "rot90",
            AugmentationKind::Rot180 => "rot180",
            AugmentationKind::Rot270 => "rot270",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        AugmentationKind::ALL
            .into_iter()
            .find(|k| k.name() == text)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown augmentation '{text}' (expected one of hflip, vflip, rot90, rot180, rot270)"
                ))
            })
    }
}

fn flip(image: &Tensor<f32>, horizontal: bool) -> Tensor<f32> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        let plane = ch * h * w;
        for r in 0..h {
            for col in 0..w {
                let (sr, sc) = if horizontal {
                    (r, w - 1 - col)
                } else {
                    (h - 1 - r, col)
                };
                out[plane + r * w + col] = src[plane + sr * w + sc];
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("flip preserves shape")
}

fn rot90_clockwise(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h != w {
        return Err(Error::Contract(format!(
            "rotation requires a square image, got {h}×{w}"
        )));
    }
    let src = image.data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        let plane = ch * h * w;
        for r in 0..h {
            for col in 0..w {
                out[plane + r * w + col] = src[plane + (h - 1 - col) * w + r];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Apply one augmentation to a (C, H, W) image.
pub fn augment(kind: AugmentationKind, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    if image.shape().len() != 3 {
        return Err(Error::Contract(format!(
            "augment expects a (C, H, W) image, got shape {:?}",
            image.shape()
        )));
    }
    match kind {
        AugmentationKind::Hflip => Ok(flip(image, true)),
        AugmentationKind::Vflip => Ok(flip(image, false)),
        AugmentationKind::Rot90 => rot90_clockwise(image),
        AugmentationKind::Rot180 => rot90_clockwise(&rot90_clockwise(image)?),
        AugmentationKind::Rot270 => {
            rot90_clockwise(&rot90_clockwise(&rot90_clockwise(image)?)?)
        }
    }
}
