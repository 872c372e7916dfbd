//! Reverse-mode gradient tape.
//!
//! Every op appends one node holding its output value. `backward` walks the
//! node list from the loss back to index 0, so operations are visited in
//! exact reverse execution order. Nodes created with [`Tape::constant`]
//! never receive gradients, and neither does anything computed only from
//! constants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FatError, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of an op implemented outside this module:
/// maps the output gradient to one gradient per input.
pub type CustomBackward = Box<dyn Fn(&Tensor) -> Result<Vec<Tensor>> + Send + Sync>;

enum Op {
    Constant,
    Param,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    Upsample2x(Var),
    Softmax(Var),
    Concat(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Custom {
        name: &'static str,
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Upsample2x(_) => "upsample_nearest2x",
            Op::Softmax(_) => "softmax_channels",
            Op::Concat(..) => "concat_channels",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Sum(_) => "sum",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node {
    value: Tensor,
    /// Full-precision copy of scalar reductions.
    scalar: Option<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Op names in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Param)).count()
    }

    /// Which inputs of every ReLU on the tape are positive, in execution
    /// order. Two evaluations with equal patterns lie on the same linear
    /// piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Scalar value of a one-element node, at full precision when the op
    /// kept one.
    pub fn scalar(&self, var: Var) -> Result<f64> {
        let node = &self.nodes[var.0];
        if node.value.numel() != 1 {
            return Err(FatError::invalid(format!(
                "expected a scalar node, got shape {:?}",
                node.value.shape()
            )));
        }
        Ok(node.scalar.unwrap_or(node.value.data()[0] as f64))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            scalar: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Param, true)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = tensor::conv2d(self.value(input), self.value(kernel), self.value(bias), stride, padding)?;
        let ng = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = tensor::relu(self.value(x));
        let ng = self.needs_grad(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let out = tensor::upsample_nearest2x(self.value(x))?;
        let ng = self.needs_grad(x);
        Ok(self.push(out, Op::Upsample2x(x), ng))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = tensor::softmax_channels(self.value(x))?;
        let ng = self.needs_grad(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::concat_channels(self.value(a), self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Concat(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        let scalar = match (self.nodes[a.0].scalar, self.nodes[b.0].scalar) {
            (Some(x), Some(y)) => Some(x + y),
            _ => None,
        };
        let v = self.push(out, Op::Add(a, b), ng);
        self.nodes[v.0].scalar = scalar;
        Ok(v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::mul(self.value(a), self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = tensor::sum(self.value(x));
        if !total.is_finite() {
            return Err(FatError::NonFinite { op: "sum" });
        }
        let ng = self.needs_grad(x);
        let v = self.push(Tensor::scalar(total as f32), Op::Sum(x), ng);
        self.nodes[v.0].scalar = Some(total);
        Ok(v)
    }

    /// Records an op whose forward value was computed by the caller.
    /// `scalar` carries an optional full-precision value for one-element
    /// outputs.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: Vec<Var>,
        value: Tensor,
        scalar: Option<f64>,
        backward: CustomBackward,
    ) -> Result<Var> {
        value.ensure_finite(name)?;
        let ng = self.any_grad(&inputs);
        let v = self.push(
            value,
            Op::Custom {
                name,
                inputs,
                backward,
            },
            ng,
        );
        self.nodes[v.0].scalar = scalar;
        Ok(v)
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// needs one. The seed gradient is 1.0.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(FatError::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let send = |grads: &mut Vec<Option<Tensor>>, to: Var, delta: Tensor| -> Result<()> {
                if !self.nodes[to.0].needs_grad {
                    return Ok(());
                }
                match &mut grads[to.0] {
                    Some(acc) => {
                        if acc.shape() != delta.shape() {
                            return Err(FatError::shape("backward", acc.shape(), delta.shape()));
                        }
                        for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
                Ok(())
            };
            match &node.op {
                Op::Constant | Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let cg = tensor::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        self.value(*bias),
                        *stride,
                        *padding,
                        &g,
                        self.needs_grad(*input),
                    )?;
                    if let Some(gi) = cg.input {
                        send(&mut grads, *input, gi)?;
                    }
                    send(&mut grads, *kernel, cg.kernel)?;
                    send(&mut grads, *bias, cg.bias)?;
                }
                Op::Relu(x) => {
                    let gx = tensor::relu_backward(self.value(*x), &g);
                    send(&mut grads, *x, gx)?;
                }
                Op::Upsample2x(x) => {
                    let gx = tensor::upsample_nearest2x_backward(self.value(*x).shape(), &g)?;
                    send(&mut grads, *x, gx)?;
                }
                Op::Softmax(x) => {
                    let gx = tensor::softmax_channels_backward(&node.value, &g)?;
                    send(&mut grads, *x, gx)?;
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).dims4()?.1;
                    let (ga, gb) = tensor::concat_channels_backward(ca, &g)?;
                    send(&mut grads, *a, ga)?;
                    send(&mut grads, *b, gb)?;
                }
                Op::Add(a, b) => {
                    send(&mut grads, *a, g.clone())?;
                    send(&mut grads, *b, g)?;
                }
                Op::Mul(a, b) => {
                    let ga = tensor::mul(&g, self.value(*b))?;
                    let gb = tensor::mul(&g, self.value(*a))?;
                    send(&mut grads, *a, ga)?;
                    send(&mut grads, *b, gb)?;
                }
                Op::Sum(x) => {
                    let gx = Tensor::full(self.value(*x).shape(), g.data()[0]);
                    send(&mut grads, *x, gx)?;
                }
                Op::Custom { name, inputs, backward } => {
                    let gs = backward(&g)?;
                    if gs.len() != inputs.len() {
                        return Err(FatError::invalid(format!(
                            "{name}: backward returned {} gradients for {} inputs",
                            gs.len(),
                            inputs.len()
                        )));
                    }
                    for (v, gv) in inputs.iter().zip(gs) {
                        send(&mut grads, *v, gv)?;
                    }
                }
            }
        }
        // Intermediate gradients are dropped as they are consumed; only
        // leaves keep theirs.
        Ok(Gradients { grads })
    }
}

/// Compares tape gradients against central differences on `n_probes`
/// randomly chosen scalar parameters and returns the largest relative
/// error `|g_fd - g_ad| / max(|g_fd|, |g_ad|, 1e-8)`.
///
/// `f` builds a scalar from the parameter vars on a fresh tape. A central
/// difference is only meaningful where the function is smooth on
/// `[w - eps, w + eps]`, so a probe whose perturbation flips any ReLU
/// (see [`Tape::relu_pattern`]) is discarded and another parameter drawn.
/// Fails if fewer than `n_probes` smooth probes turn up within
/// `50 · n_probes` draws.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f32, n_probes: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(FatError::invalid(format!("eps must be positive, got {eps}")));
    }
    if n_probes == 0 {
        return Err(FatError::invalid("n_probes must be at least 1"));
    }
    let total: usize = params.iter().map(Tensor::numel).sum();
    if total == 0 {
        return Err(FatError::invalid("no parameters to probe"));
    }

    let eval = |ps: &[Tensor]| -> Result<(f64, Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.scalar(out)?;
        if !value.is_finite() {
            return Err(FatError::NonFinite { op: "finite_diff_check" });
        }
        Ok((value, tape, vars, out))
    };

    let (_, tape, vars, out) = eval(params)?;
    let grads = tape.backward(out)?;
    let pattern = tape.relu_pattern();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut accepted = 0;
    for _ in 0..50 * n_probes {
        if accepted == n_probes {
            break;
        }
        let mut flat = rng.random_range(0..total);
        let mut ti = 0;
        while flat >= params[ti].numel() {
            flat -= params[ti].numel();
            ti += 1;
        }
        let w = params[ti].data()[flat];
        let analytic = grads.get(vars[ti]).map_or(0.0, |g| g.data()[flat] as f64);

        let w_plus = w + eps;
        let w_minus = w - eps;
        work[ti].data_mut()[flat] = w_plus;
        let (f_plus, tape_plus, ..) = eval(&work)?;
        work[ti].data_mut()[flat] = w_minus;
        let (f_minus, tape_minus, ..) = eval(&work)?;
        work[ti].data_mut()[flat] = w;
        if tape_plus.relu_pattern() != pattern || tape_minus.relu_pattern() != pattern {
            continue;
        }
        accepted += 1;

        // divide by the step actually representable in f32
        let numeric = (f_plus - f_minus) / (w_plus as f64 - w_minus as f64);
        let denom = numeric.abs().max(analytic.abs()).max(1e-8);
        worst = worst.max((numeric - analytic).abs() / denom);
    }
    if accepted < n_probes {
        return Err(FatError::invalid(format!(
            "only {accepted} of {n_probes} probes avoided ReLU kinks; use a smaller eps"
        )));
    }
    Ok(worst)
}
