//! Reverse-mode automatic differentiation on dense 64-bit matrices.
//!
//! Just enough machinery for the operator networks: a tape of rank-2
//! tensors (batch × features), the handful of ops the architectures
//! compose — matrix product, elementwise add/sub/mul, bias broadcast,
//! `tanh`, feature concatenation, scalar scaling, mean squared error —
//! and a bias-corrected Adam optimizer. Everything runs in `f64`, which
//! keeps finite-difference gradient checks tight.
//!
//! A [`Tape`] is built fresh for every forward pass; parameters live
//! outside it (plain `Array2<f64>`) and are staged onto the tape as
//! leaves. After [`Tape::backward`] the leaf gradients are harvested and
//! fed to [`AdamState::step`]. Tapes are strictly single-threaded.
//!
//! Weight persistence: [`write_weights`] / [`read_weights`] store a
//! parameter list as raw little-endian `f64` in row-major order, arrays
//! back to back — the caller documents the order (the checkpoint's
//! `model.json` does this for trained models).

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

/// How a node was produced; parents are tape indices.
#[derive(Debug, Clone)]
enum Op {
    /// Input or parameter leaf.
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    /// `[b,n] + [1,n]`, the bias broadcast.
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Tanh(usize),
    /// Concatenation along the feature axis.
    Concat(usize, usize),
    Scale(usize, f64),
    Mse(usize, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    grad: Array2<f64>,
    op: Op,
}

/// A Wengert list: ops append nodes, [`Tape::backward`] walks them in
/// reverse. Acyclic by construction (parents always precede children).
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shapes(a: &Array2<f64>, b: &Array2<f64>) -> String {
    format!("{:?} vs {:?}", a.shape(), b.shape())
}

impl Tape {
    /// Empty tape.
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Tensor {
        let grad = Array2::zeros(value.raw_dim());
        self.nodes.push(Node { value, grad, op });
        Tensor(self.nodes.len() - 1)
    }

    /// Stage a leaf (input or parameter) onto the tape.
    pub fn leaf(&mut self, value: Array2<f64>) -> Tensor {
        self.push(value, Op::Leaf)
    }

    /// Value of a node.
    pub fn value(&self, t: Tensor) -> &Array2<f64> {
        &self.nodes[t.0].value
    }

    /// Gradient of a node (zeros before [`Tape::backward`]).
    pub fn grad(&self, t: Tensor) -> &Array2<f64> {
        &self.nodes[t.0].grad
    }

    /// Matrix product `[b,k]·[k,n] → [b,n]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.ncols() != vb.nrows() {
            return Err(Error::Shape(format!("matmul of {}", shapes(va, vb))));
        }
        let out = va.dot(vb);
        Ok(self.push(out, Op::Matmul(a.0, b.0)))
    }

    /// Elementwise sum; `b` may also be a `[1,n]` bias broadcast over the
    /// batch rows of `a`.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() == vb.shape() {
            let out = va + vb;
            return Ok(self.push(out, Op::Add(a.0, b.0)));
        }
        if vb.nrows() == 1 && vb.ncols() == va.ncols() {
            let out = va + &vb.row(0);
            return Ok(self.push(out, Op::AddBias(a.0, b.0)));
        }
        Err(Error::Shape(format!("add of {}", shapes(va, vb))))
    }

    /// Elementwise difference.
    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("sub of {}", shapes(va, vb))));
        }
        let out = va - vb;
        Ok(self.push(out, Op::Sub(a.0, b.0)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("mul of {}", shapes(va, vb))));
        }
        let out = va * vb;
        Ok(self.push(out, Op::Mul(a.0, b.0)))
    }

    /// Elementwise `tanh`.
    pub fn tanh(&mut self, a: Tensor) -> Tensor {
        let out = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(out, Op::Tanh(a.0))
    }

    /// Concatenate along the feature axis: `[b,n]++[b,m] → [b,n+m]`.
    pub fn concat(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.nrows() != vb.nrows() {
            return Err(Error::Shape(format!("concat of {}", shapes(va, vb))));
        }
        let out = concatenate(Axis(1), &[va.view(), vb.view()]).expect("checked rows");
        Ok(self.push(out, Op::Concat(a.0, b.0)))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Tensor, factor: f64) -> Tensor {
        let out = self.nodes[a.0].value.mapv(|v| factor * v);
        self.push(out, Op::Scale(a.0, factor))
    }

    /// Mean squared error over all elements, a `[1,1]` scalar.
    pub fn mse(&mut self, pred: Tensor, target: Tensor) -> Result<Tensor> {
        let (vp, vt) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
        if vp.shape() != vt.shape() {
            return Err(Error::Shape(format!("mse of {}", shapes(vp, vt))));
        }
        let n = vp.len() as f64;
        let loss = vp
            .iter()
            .zip(vt.iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let out = Array2::from_elem((1, 1), loss);
        Ok(self.push(out, Op::Mse(pred.0, target.0)))
    }

    /// Populate gradients of everything `loss` depends on.
    ///
    /// Gradients are reset first, so repeated calls are idempotent rather
    /// than accumulating; unreachable nodes keep zero gradients.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
        self.nodes[loss.0].grad[(0, 0)] = 1.0;

        for i in (0..=loss.0).rev() {
            let op = self.nodes[i].op.clone();
            let grad = self.nodes[i].grad.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let da = grad.dot(&self.nodes[b].value.t());
                    let db = self.nodes[a].value.t().dot(&grad);
                    self.nodes[a].grad += &da;
                    self.nodes[b].grad += &db;
                }
                Op::Add(a, b) => {
                    self.nodes[a].grad += &grad;
                    self.nodes[b].grad += &grad;
                }
                Op::AddBias(a, b) => {
                    self.nodes[a].grad += &grad;
                    let db = grad.sum_axis(Axis(0));
                    self.nodes[b].grad += &db.insert_axis(Axis(0));
                }
                Op::Sub(a, b) => {
                    self.nodes[a].grad += &grad;
                    self.nodes[b].grad -= &grad;
                }
                Op::Mul(a, b) => {
                    let da = &grad * &self.nodes[b].value;
                    let db = &grad * &self.nodes[a].value;
                    self.nodes[a].grad += &da;
                    self.nodes[b].grad += &db;
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let da = &grad * &y.mapv(|v| 1.0 - v * v);
                    self.nodes[a].grad += &da;
                }
                Op::Concat(a, b) => {
                    let na = self.nodes[a].value.ncols();
                    let (ga, gb) = grad.view().split_at(Axis(1), na);
                    self.nodes[a].grad += &ga;
                    self.nodes[b].grad += &gb;
                }
                Op::Scale(a, factor) => {
                    self.nodes[a].grad.scaled_add(factor, &grad);
                }
                Op::Mse(p, t) => {
                    let scale = 2.0 * grad[(0, 0)]
                        / self.nodes[p].value.len() as f64;
                    let diff = (&self.nodes[p].value - &self.nodes[t].value)
                        .mapv(|v| scale * v);
                    self.nodes[p].grad += &diff;
                    self.nodes[t].grad -= &diff;
                }
            }
        }
        Ok(())
    }
}

/// Activation applied after a dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Hyperbolic tangent — every hidden layer.
    Tanh,
    /// Identity — final layers that regress a rate.
    Linear,
}

/// One fully-connected layer: `activation(x·W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// Weights, `in × out`.
    pub weight: Array2<f64>,
    /// Bias, `1 × out`.
    pub bias: Array2<f64>,
    /// Nonlinearity.
    pub activation: Activation,
}

/// Tape handles of one staged layer.
#[derive(Debug, Clone, Copy)]
pub struct StagedLayer {
    /// Weight leaf.
    pub w: Tensor,
    /// Bias leaf.
    pub b: Tensor,
}

impl DenseLayer {
    /// Glorot-uniform initialization: `U(±sqrt(6/(fan_in+fan_out)))`,
    /// zero bias, fully determined by the stream.
    pub fn glorot(n_in: usize, n_out: usize, activation: Activation, rng: &mut StreamRng) -> Self {
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        let weight =
            Array2::from_shape_fn((n_in, n_out), |_| rng.uniform_in(-limit, limit));
        DenseLayer { weight, bias: Array2::zeros((1, n_out)), activation }
    }

    /// Push this layer's parameters onto a tape.
    pub fn stage(&self, tape: &mut Tape) -> StagedLayer {
        StagedLayer { w: tape.leaf(self.weight.clone()), b: tape.leaf(self.bias.clone()) }
    }

    /// Apply the staged layer to `x`.
    pub fn apply(&self, tape: &mut Tape, staged: StagedLayer, x: Tensor) -> Result<Tensor> {
        let lin = tape.matmul(x, staged.w)?;
        let lin = tape.add(lin, staged.b)?;
        Ok(match self.activation {
            Activation::Tanh => tape.tanh(lin),
            Activation::Linear => lin,
        })
    }

    /// Parameter count.
    pub fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    /// Learning rate.
    pub lr: f64,
    /// First-moment decay.
    pub beta1: f64,
    /// Second-moment decay.
    pub beta2: f64,
    /// Denominator guard.
    pub eps: f64,
    /// L2 coefficient folded into the gradient before the moment
    /// updates; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Hyperparameters.
    pub config: AdamConfig,
    /// Completed steps.
    pub step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamState {
    /// Fresh state for parameters of the given shapes.
    pub fn new(config: AdamConfig, params: &[&Array2<f64>]) -> Self {
        let m = params.iter().map(|p| Array2::zeros(p.raw_dim())).collect::<Vec<_>>();
        let v = m.clone();
        AdamState { config, step: 0, m, v }
    }

    /// One update. Refuses non-finite gradients before touching any
    /// parameter, so a failed step leaves the model intact.
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "{} parameters, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("parameter {i}: {}", shapes(p, g))));
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient ({bad}) in parameter {i}; step refused"
                )));
            }
        }

        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v))
        {
            for ((pe, &ge), (me, ve)) in
                p.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                let ge = ge + c.weight_decay * *pe;
                *me = c.beta1 * *me + (1.0 - c.beta1) * ge;
                *ve = c.beta2 * *ve + (1.0 - c.beta2) * ge * ge;
                let mhat = *me / bc1;
                let vhat = *ve / bc2;
                *pe -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Central-difference check of an analytic gradient.
///
/// `loss_fn` evaluates the loss at a parameter vector; `picks` selects
/// individual entries `(param, row, col)` to perturb by `±h`. Returns
/// the worst relative disagreement, with the denominator floored at
/// `1e-3` so near-zero gradient entries compare absolutely (central
/// differences carry ~1e-10 roundoff at `h = 1e-6`).
pub fn max_relative_fd_error(
    mut loss_fn: impl FnMut(&[Array2<f64>]) -> Result<f64>,
    params: &[Array2<f64>],
    analytic: &[Array2<f64>],
    picks: &[(usize, usize, usize)],
    h: f64,
) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for &(pi, r, c) in picks {
        let base = params[pi][(r, c)];
        work[pi][(r, c)] = base + h;
        let up = loss_fn(&work)?;
        work[pi][(r, c)] = base - h;
        let down = loss_fn(&work)?;
        work[pi][(r, c)] = base;
        let fd = (up - down) / (2.0 * h);
        let ad = analytic[pi][(r, c)];
        worst = worst.max((fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-3));
    }
    Ok(worst)
}

/// Write a parameter list as raw little-endian `f64`, row-major, arrays
/// back to back in the caller's order.
pub fn write_weights(path: &Path, params: &[&Array2<f64>]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for p in params {
        for v in p.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Read back a weight file written by [`write_weights`]; `shapes` must
/// repeat the original parameter shapes in order.
pub fn read_weights(path: &Path, shapes: &[[usize; 2]]) -> Result<Vec<Array2<f64>>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let want: usize = shapes.iter().map(|s| s[0] * s[1] * 8).sum();
    if bytes.len() != want {
        return Err(Error::Format(format!(
            "{} holds {} bytes, the declared shapes need {want}",
            path.display(),
            bytes.len()
        )));
    }
    let mut vals = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    let mut out = Vec::with_capacity(shapes.len());
    for s in shapes {
        let data: Vec<f64> = vals.by_ref().take(s[0] * s[1]).collect();
        out.push(
            Array2::from_shape_vec((s[0], s[1]), data)
                .map_err(|e| Error::Format(e.to_string()))?,
        );
    }
    Ok(out)
}
