//! Dense row-major `f32` tensors and the forward/backward kernels of the
//! closed operation set used by the segmentation network.
//!
//! Kernels here are pure functions of their inputs; the tape in
//! [`crate::tape`] records which kernel ran and replays the matching
//! backward kernel. Reductions inside `conv2d` accumulate in `f64`.

use crate::error::{FatError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(FatError::invalid(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(FatError::invalid(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Like [`Tensor::new`] but allows zero-sized dimensions, e.g. an
    /// empty channel block for concatenation.
    pub fn new_allow_empty(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(FatError::invalid(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(FatError::NonFinite { op })
        }
    }

    /// Splits a rank-4 shape into `(b, c, h, w)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(FatError::invalid(format!(
                "expected a rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Gathers samples along the leading axis.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.shape[0];
        let per: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= n {
                return Err(FatError::invalid(format!("sample index {i} out of range {n}")));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }

    /// Channel slice `[start, end)` of a rank-4 tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        if start > end || end > c {
            return Err(FatError::invalid(format!("channel range {start}..{end} out of 0..{c}")));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * (end - start) * plane);
        for bi in 0..b {
            let base = bi * c * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Tensor::new_allow_empty(vec![b, end - start, h, w], data)
    }
}

/// Output indices `o` in `[lo, hi)` for which `o * stride + k - pad` falls
/// inside `0..in_len`.
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let top = in_len as isize - 1 + pad as isize - k as isize;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (batch, in_channels, in_h, in_w) = input.dims4()?;
        let (out_channels, k_in, k_h, k_w) = kernel.dims4()?;
        if k_in != in_channels {
            return Err(FatError::shape("conv2d", input.shape(), kernel.shape()));
        }
        if bias.shape() != [out_channels] {
            return Err(FatError::shape("conv2d", kernel.shape(), bias.shape()));
        }
        if k_h % 2 == 0 || k_w % 2 == 0 {
            return Err(FatError::invalid(format!("conv2d: kernel dims must be odd, got {k_h}x{k_w}")));
        }
        if stride != 1 && stride != 2 {
            return Err(FatError::invalid(format!("conv2d: stride must be 1 or 2, got {stride}")));
        }
        let span_h = in_h + 2 * padding;
        let span_w = in_w + 2 * padding;
        // Output size is floored; a trailing padded row/column may go unused.
        if span_h < k_h || span_w < k_w {
            return Err(FatError::shape("conv2d", input.shape(), kernel.shape()));
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            out_channels,
            in_h,
            in_w,
            k_h,
            k_w,
            out_h: (span_h - k_h) / stride + 1,
            out_w: (span_w - k_w) / stride + 1,
            stride,
            padding,
        })
    }
}

/// 2-D cross-correlation with per-output-channel bias.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernel, bias, stride, padding)?;
    let x = input.data();
    let k = kernel.data();
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut out = Vec::with_capacity(g.batch * g.out_channels * out_plane);
    let mut acc = vec![0f64; out_plane];
    for b in 0..g.batch {
        for co in 0..g.out_channels {
            acc.fill(bias.data()[co] as f64);
            for ci in 0..g.in_channels {
                let xin = &x[(b * g.in_channels + ci) * in_plane..][..in_plane];
                for ky in 0..g.k_h {
                    let (oy_lo, oy_hi) = valid_range(ky, g.padding, g.stride, g.in_h, g.out_h);
                    for kx in 0..g.k_w {
                        let w = k[((co * g.in_channels + ci) * g.k_h + ky) * g.k_w + kx] as f64;
                        let (ox_lo, ox_hi) = valid_range(kx, g.padding, g.stride, g.in_w, g.out_w);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let row = &xin[iy * g.in_w..][..g.in_w];
                            let dst = &mut acc[oy * g.out_w + ox_lo..oy * g.out_w + ox_hi];
                            let ix0 = ox_lo * g.stride + kx - g.padding;
                            if g.stride == 1 {
                                for (d, &v) in dst.iter_mut().zip(&row[ix0..ix0 + (ox_hi - ox_lo)]) {
                                    *d += w * v as f64;
                                }
                            } else {
                                for (j, d) in dst.iter_mut().enumerate() {
                                    *d += w * row[ix0 + j * g.stride] as f64;
                                }
                            }
                        }
                    }
                }
            }
            out.extend(acc.iter().map(|&v| v as f32));
        }
    }
    let out = Tensor::new(vec![g.batch, g.out_channels, g.out_h, g.out_w], out)?;
    out.ensure_finite("conv2d")?;
    Ok(out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Backward pass of [`conv2d`]. The input gradient is skipped when
/// `need_input` is false.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input, kernel, bias, stride, padding)?;
    if grad_out.shape() != [g.batch, g.out_channels, g.out_h, g.out_w] {
        return Err(FatError::shape("conv2d_backward", grad_out.shape(), input.shape()));
    }
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut gin = if need_input { vec![0f64; input.numel()] } else { Vec::new() };
    let mut gk = vec![0f64; kernel.numel()];
    let mut gb = vec![0f64; g.out_channels];
    for b in 0..g.batch {
        for co in 0..g.out_channels {
            let gplane = &go[(b * g.out_channels + co) * out_plane..][..out_plane];
            gb[co] += gplane.iter().map(|&v| v as f64).sum::<f64>();
            for ci in 0..g.in_channels {
                let base = (b * g.in_channels + ci) * in_plane;
                let xin = &x[base..base + in_plane];
                for ky in 0..g.k_h {
                    let (oy_lo, oy_hi) = valid_range(ky, g.padding, g.stride, g.in_h, g.out_h);
                    for kx in 0..g.k_w {
                        let kidx = ((co * g.in_channels + ci) * g.k_h + ky) * g.k_w + kx;
                        let w = k[kidx] as f64;
                        let (ox_lo, ox_hi) = valid_range(kx, g.padding, g.stride, g.in_w, g.out_w);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let n = ox_hi - ox_lo;
                        let ix0 = ox_lo * g.stride + kx - g.padding;
                        let mut kacc = 0f64;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let grow = &gplane[oy * g.out_w + ox_lo..][..n];
                            let xrow = &xin[iy * g.in_w..][..g.in_w];
                            if g.stride == 1 {
                                let xs = &xrow[ix0..ix0 + n];
                                kacc += grow.iter().zip(xs).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>();
                                if need_input {
                                    let dst = &mut gin[base + iy * g.in_w + ix0..][..n];
                                    for (d, &gv) in dst.iter_mut().zip(grow) {
                                        *d += w * gv as f64;
                                    }
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    let ix = ix0 + j * g.stride;
                                    kacc += gv as f64 * xrow[ix] as f64;
                                    if need_input {
                                        gin[base + iy * g.in_w + ix] += w * gv as f64;
                                    }
                                }
                            }
                        }
                        gk[kidx] += kacc;
                    }
                }
            }
        }
    }
    let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    let input_grad = if need_input {
        Some(Tensor::new(input.shape().to_vec(), to32(gin))?)
    } else {
        None
    };
    Ok(ConvGrads {
        input: input_grad,
        kernel: Tensor::new(kernel.shape().to_vec(), to32(gk))?,
        bias: Tensor::new(bias.shape().to_vec(), to32(gb))?,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    }
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0f32; b * c * oh * ow];
    for p in 0..b * c {
        let src = &x.data[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

pub fn upsample_nearest2x_backward(x_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = match *x_shape {
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(FatError::invalid("upsample backward expects rank-4 shape")),
    };
    if grad_out.shape() != [b, c, 2 * h, 2 * w] {
        return Err(FatError::shape("upsample_nearest2x_backward", x_shape, grad_out.shape()));
    }
    let ow = 2 * w;
    let mut out = vec![0f32; b * c * h * w];
    for p in 0..b * c {
        let src = &grad_out.data[p * 4 * h * w..][..4 * h * w];
        for y in 0..h {
            for x in 0..w {
                let (r0, r1) = (2 * y * ow, (2 * y + 1) * ow);
                out[p * h * w + y * w + x] = src[r0 + 2 * x] + src[r0 + 2 * x + 1] + src[r1 + 2 * x] + src[r1 + 2 * x + 1];
            }
        }
    }
    Tensor::new(x_shape.to_vec(), out)
}

/// Per-pixel softmax over the channel axis, with max subtraction.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    if c < 2 {
        return Err(FatError::invalid(format!("softmax_channels needs C >= 2, got {c}")));
    }
    let plane = h * w;
    let mut out = vec![0f32; logits.numel()];
    let mut buf = vec![0f64; c];
    for bi in 0..b {
        let base = bi * c * plane;
        for i in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for (ch, slot) in buf.iter_mut().enumerate() {
                *slot = logits.data[base + ch * plane + i] as f64;
                max = max.max(*slot);
            }
            let mut total = 0f64;
            for slot in buf.iter_mut() {
                *slot = (*slot - max).exp();
                total += *slot;
            }
            for (ch, slot) in buf.iter().enumerate() {
                out[base + ch * plane + i] = (slot / total) as f32;
            }
        }
    }
    let out = Tensor::new(logits.shape.clone(), out)?;
    out.ensure_finite("softmax_channels")?;
    Ok(out)
}

/// Given softmax output `y`, returns `y_c * (g_c - sum_j g_j y_j)` per pixel.
pub fn softmax_channels_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = y.dims4()?;
    if grad_out.shape() != y.shape() {
        return Err(FatError::shape("softmax_channels_backward", y.shape(), grad_out.shape()));
    }
    let plane = h * w;
    let mut out = vec![0f32; y.numel()];
    for bi in 0..b {
        let base = bi * c * plane;
        for i in 0..plane {
            let dot: f64 = (0..c)
                .map(|ch| y.data[base + ch * plane + i] as f64 * grad_out.data[base + ch * plane + i] as f64)
                .sum();
            for ch in 0..c {
                let idx = base + ch * plane + i;
                out[idx] = (y.data[idx] as f64 * (grad_out.data[idx] as f64 - dot)) as f32;
            }
        }
    }
    Tensor::new(y.shape.clone(), out)
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, ca, ha, wa) = a.dims4()?;
    let (bb, cb, hb, wb) = b.dims4()?;
    if ba != bb || ha != hb || wa != wb {
        return Err(FatError::shape("concat_channels", a.shape(), b.shape()));
    }
    let plane = ha * wa;
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for bi in 0..ba {
        out.extend_from_slice(&a.data[bi * ca * plane..(bi + 1) * ca * plane]);
        out.extend_from_slice(&b.data[bi * cb * plane..(bi + 1) * cb * plane]);
    }
    Tensor::new_allow_empty(vec![ba, ca + cb, ha, wa], out)
}

pub fn concat_channels_backward(a_channels: usize, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, c, _, _) = grad_out.dims4()?;
    Ok((grad_out.slice_channels(0, a_channels)?, grad_out.slice_channels(a_channels, c)?))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(FatError::shape("add", a.shape(), b.shape()));
    }
    let out = Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    };
    out.ensure_finite("add")?;
    Ok(out)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(FatError::shape("mul", a.shape(), b.shape()));
    }
    let out = Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    };
    out.ensure_finite("mul")?;
    Ok(out)
}

/// Sum of all elements, reduced in `f64`.
pub fn sum(x: &Tensor) -> f64 {
    x.data.iter().map(|&v| v as f64).sum()
}
