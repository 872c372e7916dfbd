//! A one-level encoder/decoder segmentation network with a single skip
//! connection.
//!
//! ```text
//! x ─ conv3x3(Cin→F)+relu ─┬─ conv3x3/2(F→2F)+relu ─ conv3x3(2F→2F)+relu ─ up2x ─┐
//!                          └──────────────────── skip ──────────────────────── concat(3F)
//!                                                   ─ conv3x3(3F→F)+relu ─ conv1x1(F→C) ─ logits
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FatError, Result};
use crate::tape::{self, Tape, Var};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub in_channels: usize,
    pub base_width: usize,
    pub n_classes: usize,
}

impl ArchDescriptor {
    pub fn new(in_channels: usize, base_width: usize, n_classes: usize) -> Result<Self> {
        let d = ArchDescriptor {
            in_channels,
            base_width,
            n_classes,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 1 || self.base_width < 2 || self.n_classes < 2 {
            return Err(FatError::invalid(format!(
                "invalid architecture: in_channels={} base_width={} n_classes={}",
                self.in_channels, self.base_width, self.n_classes
            )));
        }
        Ok(())
    }

    /// `(name, kernel shape, stride, padding)` for each layer, in forward order.
    pub fn layer_specs(&self) -> Vec<(&'static str, [usize; 4], usize, usize)> {
        let (cin, f, c) = (self.in_channels, self.base_width, self.n_classes);
        vec![
            ("enc", [f, cin, 3, 3], 1, 1),
            ("down", [2 * f, f, 3, 3], 2, 1),
            ("mid", [2 * f, 2 * f, 3, 3], 1, 1),
            ("dec", [f, 3 * f, 3, 3], 1, 1),
            ("head", [c, f, 1, 1], 1, 0),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layer_specs()
            .iter()
            .map(|(_, s, _, _)| s.iter().product::<usize>() + s[0])
            .sum()
    }
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        ArchDescriptor {
            in_channels: 1,
            base_width: 8,
            n_classes: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    desc: ArchDescriptor,
    layers: Vec<Layer>,
}

/// Tape handles for every kernel and bias of a model.
pub struct ParamVars {
    pub kernels: Vec<Var>,
    pub biases: Vec<Var>,
}

impl ParamVars {
    /// Kernel/bias pairs flattened in layer order, matching
    /// [`ModelParams::tensors`].
    pub fn flat(&self) -> Vec<Var> {
        self.kernels
            .iter()
            .zip(&self.biases)
            .flat_map(|(k, b)| [*k, *b])
            .collect()
    }
}

/// He-normal kernels, zero biases.
pub fn init_model(desc: ArchDescriptor, seed: u64) -> Result<ModelParams> {
    desc.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = desc
        .layer_specs()
        .into_iter()
        .map(|(name, shape, _, _)| {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
            Ok(Layer {
                name: name.to_string(),
                kernel: Tensor::new(shape.to_vec(), data)?,
                bias: Tensor::zeros(&[shape[0]]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelParams { desc, layers })
}

impl ModelParams {
    pub fn zeros(desc: ArchDescriptor) -> Result<Self> {
        desc.validate()?;
        let layers = desc
            .layer_specs()
            .into_iter()
            .map(|(name, shape, _, _)| Layer {
                name: name.to_string(),
                kernel: Tensor::zeros(&shape),
                bias: Tensor::zeros(&[shape[0]]),
            })
            .collect();
        Ok(ModelParams { desc, layers })
    }

    /// Rebuilds a model from kernel/bias tensors in layer order, checking
    /// every shape against the descriptor.
    pub fn from_tensors(desc: ArchDescriptor, tensors: Vec<Tensor>) -> Result<Self> {
        desc.validate()?;
        let specs = desc.layer_specs();
        if tensors.len() != 2 * specs.len() {
            return Err(FatError::Descriptor(format!(
                "expected {} tensors, got {}",
                2 * specs.len(),
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::with_capacity(specs.len());
        for (name, shape, _, _) in specs {
            let kernel = it.next().expect("length checked");
            let bias = it.next().expect("length checked");
            if kernel.shape() != shape || bias.shape() != [shape[0]] {
                return Err(FatError::Descriptor(format!(
                    "layer {name}: expected kernel {shape:?}, got {:?} / bias {:?}",
                    kernel.shape(),
                    bias.shape()
                )));
            }
            layers.push(Layer {
                name: name.to_string(),
                kernel,
                bias,
            });
        }
        Ok(ModelParams { desc, layers })
    }

    pub fn descriptor(&self) -> ArchDescriptor {
        self.desc
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Kernel/bias tensors in layer order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.kernel, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.kernel, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// All weights concatenated in layer order.
    pub fn flat_values(&self) -> Vec<f32> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn check_same_arch(&self, other: &ModelParams) -> Result<()> {
        if self.desc != other.desc {
            return Err(FatError::Descriptor(format!("{:?} vs {:?}", self.desc, other.desc)));
        }
        Ok(())
    }

    /// Applies `f(dst, src)` elementwise into a copy of `self`.
    pub fn zip_map(&self, other: &ModelParams, f: impl Fn(f32, f32) -> f32) -> Result<ModelParams> {
        self.check_same_arch(other)?;
        let mut out = self.clone();
        for (dst, src) in out.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = f(*d, s);
            }
        }
        Ok(out)
    }

    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let mut kernels = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            kernels.push(tape.param(l.kernel.clone()));
            biases.push(tape.param(l.bias.clone()));
        }
        ParamVars { kernels, biases }
    }
}

/// `dst + scale * src`, elementwise.
pub fn axpy(dst: &ModelParams, scale: f32, src: &ModelParams) -> Result<ModelParams> {
    dst.zip_map(src, |d, s| d + scale * s)
}

fn check_input(desc: &ArchDescriptor, x: &Tensor) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    if c != desc.in_channels {
        return Err(FatError::shape("forward", x.shape(), &[desc.in_channels]));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(FatError::invalid(format!("forward: spatial size {h}x{w} must be divisible by 2")));
    }
    Ok(())
}

/// Records the network on `tape` and returns the logits node `[B, C, H, W]`.
pub fn forward(tape: &mut Tape, params: &ModelParams, vars: &ParamVars, x: Var) -> Result<Var> {
    check_input(&params.desc, tape.value(x))?;
    let specs = params.desc.layer_specs();
    let conv = |tape: &mut Tape, i: usize, input: Var| {
        let (_, _, stride, pad) = specs[i];
        tape.conv2d(input, vars.kernels[i], vars.biases[i], stride, pad)
    };
    let enc = conv(tape, 0, x)?;
    let skip = tape.relu(enc);
    let down = conv(tape, 1, skip)?;
    let down = tape.relu(down);
    let mid = conv(tape, 2, down)?;
    let mid = tape.relu(mid);
    let up = tape.upsample_nearest2x(mid)?;
    let cat = tape.concat_channels(up, skip)?;
    let dec = conv(tape, 3, cat)?;
    let dec = tape.relu(dec);
    conv(tape, 4, dec)
}

/// Gradient-free forward pass; same arithmetic as [`forward`].
pub fn forward_inference(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    check_input(&params.desc, x)?;
    let specs = params.desc.layer_specs();
    let conv = |i: usize, input: &Tensor| {
        let (_, _, stride, pad) = specs[i];
        let l = &params.layers[i];
        tensor::conv2d(input, &l.kernel, &l.bias, stride, pad)
    };
    let skip = tensor::relu(&conv(0, x)?);
    let down = tensor::relu(&conv(1, &skip)?);
    let mid = tensor::relu(&conv(2, &down)?);
    let up = tensor::upsample_nearest2x(&mid)?;
    let cat = tensor::concat_channels(&up, &skip)?;
    let dec = tensor::relu(&conv(3, &cat)?);
    conv(4, &dec)
}

pub fn predict_probs(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    tensor::softmax_channels(&forward_inference(params, x)?)
}

/// [`tape::finite_diff_check`] over every weight of a model.
pub fn finite_diff_check_model<F>(f: F, params: &ModelParams, eps: f32, n_probes: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &ModelParams, &ParamVars) -> Result<Var>,
{
    let desc = params.descriptor();
    let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    tape::finite_diff_check(
        |t, vars| {
            let owned: Vec<Tensor> = vars.iter().map(|v| t.value(*v).clone()).collect();
            let p = ModelParams::from_tensors(desc, owned)?;
            let pv = ParamVars {
                kernels: vars.iter().step_by(2).copied().collect(),
                biases: vars.iter().skip(1).step_by(2).copied().collect(),
            };
            f(t, &p, &pv)
        },
        &tensors,
        eps,
        n_probes,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc() -> ArchDescriptor {
        ArchDescriptor::default()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_model(desc(), 11).unwrap();
        let b = init_model(desc(), 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_model(desc(), 12).unwrap());
        for l in a.layers() {
            assert!(l.bias.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn he_init_std_monte_carlo() {
        // "down" layer: 3x3 kernel, fan_in = 8 * 9 = 72, F=8 -> 16*72 = 1152 draws
        // per model; pool over seeds until >= 1e4 draws.
        let mut draws = Vec::new();
        let mut seed = 0;
        while draws.len() < 10_000 {
            let m = init_model(desc(), seed).unwrap();
            draws.extend(m.layers()[1].kernel.data().iter().map(|&v| v as f64));
            seed += 1;
        }
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let std = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let expected = (2.0f64 / 72.0).sqrt();
        assert!((std - expected).abs() / expected < 0.10, "std {std} vs {expected}");
    }

    #[test]
    fn param_count_closed_form() {
        let (cin, f, c) = (1usize, 8usize, 3usize);
        let expected = (9 * cin * f + f) + (9 * f * 2 * f + 2 * f) + (9 * 2 * f * 2 * f + 2 * f) + (9 * 3 * f * f + f) + (f * c + c);
        assert_eq!(expected, 5331);
        assert_eq!(init_model(desc(), 0).unwrap().param_count(), expected);
        assert_eq!(desc().param_count(), expected);
    }

    #[test]
    fn zero_params_give_uniform_softmax() {
        let p = ModelParams::zeros(desc()).unwrap();
        let x = Tensor::full(&[1, 1, 8, 8], 0.3);
        let probs = predict_probs(&p, &x).unwrap();
        assert!(forward_inference(&p, &x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(probs.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-7));
    }

    #[test]
    fn output_shape() {
        let p = init_model(desc(), 3).unwrap();
        let x = Tensor::full(&[2, 1, 16, 16], 0.1);
        assert_eq!(forward_inference(&p, &x).unwrap().shape(), &[2, 3, 16, 16]);
    }

    #[test]
    fn forward_rejects_odd_size_and_wrong_channels() {
        let p = init_model(desc(), 3).unwrap();
        assert!(forward_inference(&p, &Tensor::zeros(&[1, 1, 15, 16])).is_err());
        assert!(forward_inference(&p, &Tensor::zeros(&[1, 2, 16, 16])).is_err());
    }

    #[test]
    fn tape_and_inference_agree_bitwise() {
        let p = init_model(desc(), 5).unwrap();
        let x = Tensor::new(vec![1, 1, 8, 8], (0..64).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let mut t = Tape::new();
        let vars = p.register(&mut t);
        let xv = t.constant(x.clone());
        let out = forward(&mut t, &p, &vars, xv).unwrap();
        assert_eq!(t.value(out), &forward_inference(&p, &x).unwrap());
    }

    #[test]
    fn axpy_examples() {
        let theta = init_model(desc(), 1).unwrap();
        let other = init_model(desc(), 2).unwrap();
        let zeros = ModelParams::zeros(desc()).unwrap();
        assert_eq!(axpy(&theta, 0.0, &other).unwrap(), theta);
        assert_eq!(axpy(&zeros, 1.0, &theta).unwrap(), theta);
        assert!(axpy(&theta, -1.0, &theta).unwrap().flat_values().iter().all(|&v| v == 0.0));
        let small = init_model(ArchDescriptor::new(1, 4, 3).unwrap(), 0).unwrap();
        assert!(axpy(&theta, 1.0, &small).is_err());
    }

    #[test]
    fn from_tensors_rejects_wrong_shapes() {
        let p = init_model(desc(), 1).unwrap();
        let mut ts: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
        assert_eq!(ModelParams::from_tensors(desc(), ts.clone()).unwrap(), p);
        ts.swap(0, 2);
        assert!(ModelParams::from_tensors(desc(), ts).is_err());
    }

    #[test]
    fn descriptor_validation() {
        assert!(ArchDescriptor::new(0, 8, 3).is_err());
        assert!(ArchDescriptor::new(1, 1, 3).is_err());
        assert!(ArchDescriptor::new(1, 8, 1).is_err());
    }
}
