//! Photometric augmentation pipelines. No op moves pixels, so prompts and
//! pseudo labels stay aligned across differently augmented views.

use ndarray::{Array3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Weak,
    Strong,
}

/// One photometric op. Magnitudes are sampled uniformly in the stated range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugOp {
    /// Multiply by `1 + U(-max, max)`.
    Brightness {
        max: f64,
    },
    /// Scale deviations from the image mean by `1 + U(-max, max)`.
    Contrast {
        max: f64,
    },
    /// Blend with the luminance image by `1 + U(-max, max)`.
    Saturation {
        max: f64,
    },
    Grayscale,
    GaussianBlur {
        sigma_min: f64,
        sigma_max: f64,
    },
    /// Quantize to `bits` bits, drawn from `[bits_min, bits_max]`.
    Posterize {
        bits_min: u32,
        bits_max: u32,
    },
    /// Invert values at or above `threshold`.
    Solarize {
        threshold: f64,
    },
    /// Additive per-pixel Gaussian noise with `sigma` drawn from the range.
    GaussianNoise {
        sigma_min: f64,
        sigma_max: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpSpec {
    #[serde(flatten)]
    pub op: AugOp,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub kind: AugmentKind,
    pub ops: Vec<OpSpec>,
}

impl AugmentationPolicy {
    /// Brightness and contrast jitter of at most `magnitude` (default 0.1).
    pub fn weak_with(magnitude: f64) -> Self {
        Self {
            kind: AugmentKind::Weak,
            ops: vec![
                OpSpec {
                    op: AugOp::Brightness { max: magnitude },
                    prob: 1.0,
                },
                OpSpec {
                    op: AugOp::Contrast { max: magnitude },
                    prob: 1.0,
                },
            ],
        }
    }

    pub fn weak() -> Self {
        Self::weak_with(0.1)
    }

    pub fn strong() -> Self {
        let op = |op, prob| OpSpec { op, prob };
        Self {
            kind: AugmentKind::Strong,
            ops: vec![
                op(AugOp::Brightness { max: 0.4 }, 0.8),
                op(AugOp::Contrast { max: 0.4 }, 0.8),
                op(AugOp::Saturation { max: 0.4 }, 0.8),
                op(AugOp::Grayscale, 0.2),
                op(
                    AugOp::GaussianBlur {
                        sigma_min: 0.1,
                        sigma_max: 2.0,
                    },
                    0.5,
                ),
                op(
                    AugOp::Posterize {
                        bits_min: 4,
                        bits_max: 6,
                    },
                    0.2,
                ),
                op(AugOp::Solarize { threshold: 0.7 }, 0.1),
                // Sensor noise; without it the student sees nothing the teacher cannot already handle.
                op(
                    AugOp::GaussianNoise {
                        sigma_min: 0.0,
                        sigma_max: 0.3,
                    },
                    1.0,
                ),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for spec in &self.ops {
            if !(0.0..=1.0).contains(&spec.prob) {
                return Err(Error::config(format!(
                    "op probability {} outside [0,1]",
                    spec.prob
                )));
            }
            let ok = match spec.op {
                AugOp::Brightness { max } | AugOp::Contrast { max } | AugOp::Saturation { max } => {
                    (0.0..1.0).contains(&max)
                }
                AugOp::GaussianBlur { sigma_min, sigma_max } => sigma_min > 0.0 && sigma_min <= sigma_max,
                AugOp::Posterize { bits_min, bits_max } => {
                    (1..=8).contains(&bits_min) && bits_min <= bits_max && bits_max <= 8
                }
                AugOp::Solarize { threshold } => (0.0..=1.0).contains(&threshold),
                AugOp::GaussianNoise { sigma_min, sigma_max } => sigma_min >= 0.0 && sigma_min <= sigma_max,
                AugOp::Grayscale => true,
            };
            if !ok {
                return Err(Error::config(format!("invalid magnitude in {:?}", spec.op)));
            }
        }
        Ok(())
    }

    /// Applies each op with its probability, in order, then clamps to [0,1].
    pub fn apply<R: Rng + ?Sized>(&self, image: &ImageTensor, rng: &mut R) -> ImageTensor {
        let mut x = image.data().clone();
        for spec in &self.ops {
            // Draw the gate unconditionally so op order fixes the stream.
            let fire = rng.random::<f64>() < spec.prob;
            let u: f64 = rng.random_range(-1.0..=1.0);
            let v: f64 = rng.random();
            if fire && !spec.op.is_noop() {
                if let AugOp::GaussianNoise { sigma_min, sigma_max } = spec.op {
                    let sigma = sigma_min + v * (sigma_max - sigma_min);
                    x.mapv_inplace(|p| p + sigma * rng.sample::<f64, _>(StandardNormal));
                } else {
                    apply_op(&mut x, spec.op, u, v);
                }
            }
        }
        x.mapv_inplace(|v| v.clamp(0.0, 1.0));
        ImageTensor::new(x).expect("photometric ops keep shape and finiteness")
    }
}

impl AugOp {
    fn is_noop(&self) -> bool {
        matches!(
            self,
            AugOp::Brightness { max: 0.0 } | AugOp::Contrast { max: 0.0 } | AugOp::Saturation { max: 0.0 }
        )
    }
}

fn luminance(x: &Array3<f64>) -> ndarray::Array2<f64> {
    &x.index_axis(Axis(0), 0) * 0.299 + &x.index_axis(Axis(0), 1) * 0.587 + &x.index_axis(Axis(0), 2) * 0.114
}

fn apply_op(x: &mut Array3<f64>, op: AugOp, u: f64, v: f64) {
    match op {
        AugOp::Brightness { max } => x.mapv_inplace(|p| p * (1.0 + u * max)),
        AugOp::Contrast { max } => {
            let mean = x.mean().unwrap_or(0.0);
            let f = 1.0 + u * max;
            x.mapv_inplace(|p| mean + (p - mean) * f);
        }
        AugOp::Saturation { max } => {
            let gray = luminance(x);
            let f = 1.0 + u * max;
            for mut ch in x.axis_iter_mut(Axis(0)) {
                ch.zip_mut_with(&gray, |p, &g| *p = g + (*p - g) * f);
            }
        }
        AugOp::Grayscale => {
            let gray = luminance(x);
            for mut ch in x.axis_iter_mut(Axis(0)) {
                ch.assign(&gray);
            }
        }
        AugOp::GaussianBlur { sigma_min, sigma_max } => {
            *x = gaussian_blur(x, sigma_min + v * (sigma_max - sigma_min))
        }
        AugOp::Posterize { bits_min, bits_max } => {
            let span = (bits_max - bits_min + 1) as f64;
            let bits = bits_min + ((v * span) as u32).min(bits_max - bits_min);
            let levels = (1u32 << bits) as f64;
            x.mapv_inplace(|p| (p.clamp(0.0, 1.0) * (levels - 1.0)).round() / (levels - 1.0));
        }
        AugOp::Solarize { threshold } => x.mapv_inplace(|p| if p >= threshold { 1.0 - p } else { p }),
        AugOp::GaussianNoise { .. } => unreachable!("noise needs the rng"),
    }
}

/// Separable Gaussian blur per channel with edge clamping.
pub fn gaussian_blur(x: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return x.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (c, h, w) = x.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let tmp = Array3::from_shape_fn((c, h, w), |(ch, y, xx)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wk)| wk * x[[ch, y, clamp(xx as isize + k as isize - radius, w)]])
            .sum::<f64>()
    });
    Array3::from_shape_fn((c, h, w), |(ch, y, xx)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wk)| wk * tmp[[ch, clamp(y as isize + k as isize - radius, h), xx]])
            .sum::<f64>()
    })
}

pub fn weak_augment<R: Rng + ?Sized>(image: &ImageTensor, rng: &mut R) -> ImageTensor {
    AugmentationPolicy::weak().apply(image, rng)
}

pub fn strong_augment<R: Rng + ?Sized>(image: &ImageTensor, rng: &mut R) -> ImageTensor {
    AugmentationPolicy::strong().apply(image, rng)
}
