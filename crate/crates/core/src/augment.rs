//! Mixup, argmax pseudo-labels and the random intensity shift used by the
//! threshold self-training baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FatError, Result};
use crate::loss::LabelMap;
use crate::tensor::Tensor;

/// How the mixup coefficient is chosen for each unsupervised step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixupPolicy {
    Fixed { lambda: f64 },
    Uniform { low: f64, high: f64 },
}

impl Default for MixupPolicy {
    fn default() -> Self {
        MixupPolicy::Uniform { low: 0.3, high: 0.7 }
    }
}

impl MixupPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            MixupPolicy::Fixed { lambda } => lambda > 0.0 && lambda < 1.0,
            MixupPolicy::Uniform { low, high } => low > 0.0 && high < 1.0 && low <= high,
        };
        if ok {
            Ok(())
        } else {
            Err(FatError::invalid(format!("mixup coefficient must lie in (0, 1): {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            MixupPolicy::Fixed { lambda } => lambda,
            MixupPolicy::Uniform { low, high } if low == high => low,
            MixupPolicy::Uniform { low, high } => rng.random_range(low..high),
        }
    }
}

/// Two batches and the coefficient that mixes them.
#[derive(Clone, Debug)]
pub struct MixupPair {
    lambda: f64,
    a: Tensor,
    b: Tensor,
}

impl MixupPair {
    pub fn new(lambda: f64, a: Tensor, b: Tensor) -> Result<Self> {
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(FatError::invalid(format!("mixup lambda {lambda} outside (0, 1)")));
        }
        if a.shape() != b.shape() {
            return Err(FatError::shape("mixup", a.shape(), b.shape()));
        }
        Ok(MixupPair { lambda, a, b })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn first(&self) -> &Tensor {
        &self.a
    }

    pub fn second(&self) -> &Tensor {
        &self.b
    }

    pub fn mixed(&self) -> Result<Tensor> {
        mixup(&self.a, &self.b, self.lambda)
    }
}

/// `λ·a + (1 − λ)·b`, evaluated as `b + λ(a − b)` so that mixing a tensor
/// with itself returns it unchanged.
pub fn mixup(a: &Tensor, b: &Tensor, lambda: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(FatError::shape("mixup", a.shape(), b.shape()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(FatError::invalid(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (y as f64 + lambda * (x as f64 - y as f64)) as f32)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Per-pixel argmax over channels; ties go to the lowest class index.
pub fn pseudo_label(probs: &Tensor) -> Result<LabelMap> {
    let (b, c, h, w) = probs.dims4()?;
    let plane = h * w;
    let mut labels = Vec::with_capacity(b * plane);
    for bi in 0..b {
        for i in 0..plane {
            let mut best = 0usize;
            let mut best_v = probs.data()[bi * c * plane + i];
            for ch in 1..c {
                let v = probs.data()[(bi * c + ch) * plane + i];
                if v > best_v {
                    best = ch;
                    best_v = v;
                }
            }
            labels.push(best as u8);
        }
    }
    LabelMap::new(b, h, w, c, labels)
}

/// Per-pixel maximum channel probability, `[B·H·W]`.
pub fn max_probability(probs: &Tensor) -> Result<Vec<f32>> {
    let (b, c, h, w) = probs.dims4()?;
    let plane = h * w;
    Ok((0..b * plane)
        .map(|pix| {
            let (bi, i) = (pix / plane, pix % plane);
            (0..c)
                .map(|ch| probs.data()[(bi * c + ch) * plane + i])
                .fold(f32::NEG_INFINITY, f32::max)
        })
        .collect())
}

/// Adds `r · level · std(sample)` to every pixel of each sample, with one
/// `r ~ U(-1, 1)` drawn per sample.
pub fn intensity_shift<R: Rng + ?Sized>(x: &Tensor, level: f64, rng: &mut R) -> Result<Tensor> {
    if !(level >= 0.0) {
        return Err(FatError::invalid(format!("intensity shift level must be >= 0, got {level}")));
    }
    let n = x.shape()[0];
    let per = x.numel() / n;
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_mut(per) {
        let r: f64 = rng.random_range(-1.0..1.0);
        let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
        let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per as f64;
        let shift = (r * level * var.sqrt()) as f32;
        for v in chunk.iter_mut() {
            *v += shift;
        }
    }
    out.ensure_finite("intensity_shift")?;
    Ok(out)
}
