//! Soft Dice loss, cross-entropy and the Dice evaluation metric.

use std::sync::Arc;

use crate::error::{FatError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Smoothing term of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;
/// Lower clamp applied to probabilities before the log in cross-entropy.
pub const CE_CLAMP: f32 = 1e-7;

/// Per-pixel class indices, `[B, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    batch: usize,
    height: usize,
    width: usize,
    n_classes: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(batch: usize, height: usize, width: usize, n_classes: usize, data: Vec<u8>) -> Result<Self> {
        if n_classes < 2 || n_classes > u8::MAX as usize {
            return Err(FatError::invalid(format!("n_classes must be in 2..=255, got {n_classes}")));
        }
        if data.len() != batch * height * width {
            return Err(FatError::invalid(format!(
                "label map [{batch}, {height}, {width}] needs {} values, got {}",
                batch * height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v as usize >= n_classes) {
            return Err(FatError::invalid(format!("label {bad} out of range for {n_classes} classes")));
        }
        Ok(LabelMap {
            batch,
            height,
            width,
            n_classes,
            data,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.height, self.width]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self, class_id: usize) -> usize {
        self.data.iter().filter(|&&v| v as usize == class_id).count()
    }

    pub fn select_batch(&self, indices: &[usize]) -> Result<LabelMap> {
        let per = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.batch {
                return Err(FatError::invalid(format!("sample index {i} out of range {}", self.batch)));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        LabelMap::new(indices.len(), self.height, self.width, self.n_classes, data)
    }

    /// Concatenates label maps along the batch axis.
    pub fn concat(maps: &[&LabelMap]) -> Result<LabelMap> {
        let first = maps.first().ok_or_else(|| FatError::invalid("no label maps to concatenate"))?;
        let mut data = Vec::new();
        let mut batch = 0;
        for m in maps {
            if (m.height, m.width, m.n_classes) != (first.height, first.width, first.n_classes) {
                return Err(FatError::shape("LabelMap::concat", &first.shape(), &m.shape()));
            }
            data.extend_from_slice(&m.data);
            batch += m.batch;
        }
        LabelMap::new(batch, first.height, first.width, first.n_classes, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub n_pixels: usize,
}

fn check_probs(probs: &Tensor, y: &LabelMap, strict: bool) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = probs.dims4()?;
    if [b, h, w] != y.shape() || c != y.n_classes {
        return Err(FatError::shape("loss", probs.shape(), &[y.batch, y.n_classes, y.height, y.width]));
    }
    if strict {
        let plane = h * w;
        for bi in 0..b {
            for i in 0..plane {
                let mut total = 0f64;
                for ch in 0..c {
                    let v = probs.data()[(bi * c + ch) * plane + i];
                    if !(-1e-6..=1.0 + 1e-6).contains(&v) {
                        return Err(FatError::invalid(format!("probability {v} outside [0, 1]")));
                    }
                    total += v as f64;
                }
                if (total - 1.0).abs() > 1e-4 {
                    return Err(FatError::invalid(format!("channel probabilities sum to {total}, not 1")));
                }
            }
        }
    }
    Ok((b, c, h * w))
}

fn check_mask(mask: Option<&[bool]>, y: &LabelMap) -> Result<()> {
    match mask {
        Some(m) if m.len() != y.data.len() => Err(FatError::invalid(format!(
            "mask has {} entries for {} pixels",
            m.len(),
            y.data.len()
        ))),
        _ => Ok(()),
    }
}

struct DiceParts {
    classes: std::ops::Range<usize>,
    inter: Vec<f64>,
    psum: Vec<f64>,
    ysum: Vec<f64>,
}

impl DiceParts {
    fn compute(probs: &Tensor, y: &LabelMap, mask: Option<&[bool]>, include_background: bool) -> Result<Self> {
        let (b, c, plane) = check_probs(probs, y, true)?;
        check_mask(mask, y)?;
        let mut inter = vec![0f64; c];
        let mut psum = vec![0f64; c];
        let mut ysum = vec![0f64; c];
        for bi in 0..b {
            for i in 0..plane {
                let pix = bi * plane + i;
                if mask.is_some_and(|m| !m[pix]) {
                    continue;
                }
                let label = y.data[pix] as usize;
                for ch in 0..c {
                    let p = probs.data()[(bi * c + ch) * plane + i] as f64;
                    psum[ch] += p;
                    if ch == label {
                        inter[ch] += p;
                        ysum[ch] += 1.0;
                    }
                }
            }
        }
        let classes = if include_background { 0..c } else { 1..c };
        Ok(DiceParts {
            classes,
            inter,
            psum,
            ysum,
        })
    }

    fn loss(&self) -> f64 {
        let n = self.classes.len() as f64;
        let mean: f64 = self
            .classes
            .clone()
            .map(|ch| (2.0 * self.inter[ch] + DICE_EPS) / (self.psum[ch] + self.ysum[ch] + DICE_EPS))
            .sum::<f64>()
            / n;
        1.0 - mean
    }
}

/// `1 - mean_c (2 Σ p·y + ε) / (Σ p + Σ y + ε)` over all classes, with sums
/// over every pixel of the batch.
pub fn soft_dice_loss(probs: &Tensor, y: &LabelMap) -> Result<LossValue> {
    let parts = DiceParts::compute(probs, y, None, true)?;
    Ok(LossValue {
        value: parts.loss(),
        n_pixels: y.data.len(),
    })
}

/// Mean over pixels of `-ln(clamp(p_label, 1e-7, 1))`.
pub fn cross_entropy(probs: &Tensor, y: &LabelMap) -> Result<LossValue> {
    let (value, n) = ce_value(probs, y, None)?;
    Ok(LossValue { value, n_pixels: n })
}

fn ce_value(probs: &Tensor, y: &LabelMap, mask: Option<&[bool]>) -> Result<(f64, usize)> {
    let (b, c, plane) = check_probs(probs, y, false)?;
    check_mask(mask, y)?;
    let mut total = 0f64;
    let mut n = 0usize;
    for bi in 0..b {
        for i in 0..plane {
            let pix = bi * plane + i;
            if mask.is_some_and(|m| !m[pix]) {
                continue;
            }
            let p = probs.data()[(bi * c + y.data[pix] as usize) * plane + i];
            total -= (p.clamp(CE_CLAMP, 1.0) as f64).ln();
            n += 1;
        }
    }
    Ok((if n == 0 { 0.0 } else { total / n as f64 }, n))
}

/// Records the soft Dice loss of `probs` against `y` on the tape. Pixels
/// with `mask[i] == false` are left out of every sum.
pub fn dice_loss_node(
    tape: &mut Tape,
    probs: Var,
    y: &LabelMap,
    mask: Option<&[bool]>,
    include_background: bool,
) -> Result<Var> {
    let p = tape.value(probs).clone();
    let parts = DiceParts::compute(&p, y, mask, include_background)?;
    let loss = parts.loss();
    let y = Arc::new(y.clone());
    let mask: Option<Arc<[bool]>> = mask.map(Arc::from);
    let backward = Box::new(move |g: &Tensor| -> Result<Vec<Tensor>> {
        let (b, c, h, w) = p.dims4()?;
        let plane = h * w;
        let scale = g.data()[0] as f64 / parts.classes.len() as f64;
        let mut out = vec![0f32; p.numel()];
        for ch in parts.classes.clone() {
            let num = 2.0 * parts.inter[ch] + DICE_EPS;
            let den = parts.psum[ch] + parts.ysum[ch] + DICE_EPS;
            let d_on = -scale * (2.0 * den - num) / (den * den);
            let d_off = -scale * (-num) / (den * den);
            for bi in 0..b {
                for i in 0..plane {
                    let pix = bi * plane + i;
                    if mask.as_ref().is_some_and(|m| !m[pix]) {
                        continue;
                    }
                    out[(bi * c + ch) * plane + i] = if y.data[pix] as usize == ch { d_on } else { d_off } as f32;
                }
            }
        }
        Ok(vec![Tensor::new(p.shape().to_vec(), out)?])
    });
    tape.custom("soft_dice_loss", vec![probs], Tensor::scalar(loss as f32), Some(loss), backward)
}

/// Records masked mean cross-entropy on the tape. A fully masked batch
/// yields zero loss and zero gradient.
pub fn cross_entropy_node(tape: &mut Tape, probs: Var, y: &LabelMap, mask: Option<&[bool]>) -> Result<Var> {
    let p = tape.value(probs).clone();
    let (loss, n) = ce_value(&p, y, mask)?;
    let y = Arc::new(y.clone());
    let mask: Option<Arc<[bool]>> = mask.map(Arc::from);
    let backward = Box::new(move |g: &Tensor| -> Result<Vec<Tensor>> {
        let (b, c, h, w) = p.dims4()?;
        let plane = h * w;
        let mut out = vec![0f32; p.numel()];
        if n > 0 {
            let scale = g.data()[0] as f64 / n as f64;
            for bi in 0..b {
                for i in 0..plane {
                    let pix = bi * plane + i;
                    if mask.as_ref().is_some_and(|m| !m[pix]) {
                        continue;
                    }
                    let idx = (bi * c + y.data[pix] as usize) * plane + i;
                    let v = p.data()[idx];
                    if v > CE_CLAMP && v <= 1.0 {
                        out[idx] = (-scale / v as f64) as f32;
                    }
                }
            }
        }
        Ok(vec![Tensor::new(p.shape().to_vec(), out)?])
    });
    tape.custom("cross_entropy", vec![probs], Tensor::scalar(loss as f32), Some(loss), backward)
}

/// Dice + cross-entropy, the training objective of every silo.
pub fn dice_ce_node(
    tape: &mut Tape,
    probs: Var,
    y: &LabelMap,
    mask: Option<&[bool]>,
    include_background: bool,
) -> Result<Var> {
    let dl = dice_loss_node(tape, probs, y, mask, include_background)?;
    let ce = cross_entropy_node(tape, probs, y, mask)?;
    tape.add(dl, ce)
}

/// `2|A∩B| / (|A|+|B|)` for the pixels of `class_id`; 1.0 when both sets
/// are empty.
pub fn dice_score(pred: &LabelMap, truth: &LabelMap, class_id: usize) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(FatError::shape("dice_score", &pred.shape(), &truth.shape()));
    }
    let n_classes = pred.n_classes.min(truth.n_classes);
    if class_id >= n_classes {
        return Err(FatError::invalid(format!("class {class_id} out of range for {n_classes} classes")));
    }
    let c = class_id as u8;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        a += (p == c) as usize;
        b += (t == c) as usize;
        both += (p == c && t == c) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

pub fn dice_per_class(pred: &LabelMap, truth: &LabelMap) -> Result<Vec<f64>> {
    (0..truth.n_classes).map(|c| dice_score(pred, truth, c)).collect()
}
