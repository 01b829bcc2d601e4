//! The operator networks and the auto-regressive rollout.
//!
//! Three architectures share a branch/trunk skeleton. `B` embeds the
//! branch features `u` (local permeability plus boundary drive), `T`
//! embeds the space-time query `x = (x, y, t)`; both produce
//! width-`w` encodings, all hidden layers `tanh`:
//!
//! * **deeponet** — the dot-product baseline: `G = ε_B·ε_T + b₀`.
//! * **endeeponet** — a root MLP consumes the three combined encodings
//!   `concat(ε_B⊙ε_T, ε_B⊕ε_T, ε_B⊖ε_T)`.
//! * **stonet** — `L` residual blocks refine a state that starts at the
//!   trunk encoding, `ε_Z⁰ = ε_T`. Each block passes the elementwise
//!   streams through their own dense layers,
//!   `s_∘ = Φ_∘^l(ε_B ∘ ε_Z^{l−1})` for `∘ ∈ {⊙, ⊕, ⊖}`, fuses them with
//!   one dense layer on the concatenation, and adds the result back:
//!   `ε_Z^l = ε_Z^{l−1} + Φ_f^l(concat(s_⊙, s_⊕, s_⊖))`. The root MLP
//!   reads `ε_Z^L`. That "reinject" recurrence is the default; the
//!   `literal-chain` mode instead evolves the three streams as
//!   independent chains seeded at `ε_B ∘ ε_T`, with the fusion layers
//!   still feeding the state.
//!
//! The network regresses the concentration *rate* (1/h). A plume is then
//! predicted auto-regressively by forward Euler,
//! `c(t+Δt) = c(t) + G(u)(x, t+Δt)·Δt`, with the rate queried at the end
//! of the step — the same alignment as the backward-difference training
//! targets.
//!
//! Parameter counts (dense layer `i→o` costs `i·o + o`):
//!
//! * branch: `(n_u+1)·w + (d_B−1)·(w+1)·w`, trunk alike with `n_x`;
//! * stonet blocks: `L · (3·(w+1)·w + (3w+1)·w)`;
//! * root on input `i`: `(i+1)·w + (d_R−2)·(w+1)·w + (w+1)` for
//!   `d_R ≥ 2`, or a single `(i+1)` row for `d_R = 1`;
//! * deeponet adds the scalar output bias instead of a root.
//!
//! The defaults (stonet, width 100, depths 8/8, root 2, `L = 8`, 4
//! branch features, 3 query coordinates) come to 635,701 parameters.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    read_weights, write_weights, Activation, AdamConfig, DenseLayer, StagedLayer, Tape, Tensor,
};
use crate::dataset::NormalizationStats;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::StreamRng;

/// Which network to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Dot-product branch/trunk baseline.
    Deeponet,
    /// Root MLP over the three combined encodings.
    Endeeponet,
    /// Stacked elementwise-stream blocks with a running state.
    Stonet,
}

/// How stonet blocks obtain their stream inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Streams recombine the branch encoding with the current state in
    /// every block (default).
    Reinject,
    /// Streams evolve as independent chains seeded at `ε_B ∘ ε_T`.
    LiteralChain,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorConfig {
    /// Network kind.
    pub arch: Architecture,
    /// Width of every embedding and hidden layer.
    pub width: usize,
    /// Dense layers in the branch network.
    pub branch_depth: usize,
    /// Dense layers in the trunk network.
    pub trunk_depth: usize,
    /// Dense layers in the root network (final layer linear).
    pub root_depth: usize,
    /// Stream blocks `L` (stonet only).
    pub blocks: usize,
    /// Stream recurrence (stonet only).
    pub fusion: FusionMode,
    /// Residual state update `ε_Z^l = ε_Z^{l−1} + …` (stonet only).
    pub residual: bool,
    /// Subtraction stream order: `true` is branch minus state.
    pub branch_minus_state: bool,
    /// Branch feature count (4, or 6 with velocity features).
    pub n_u: usize,
    /// Query coordinate count.
    pub n_x: usize,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        OperatorConfig {
            arch: Architecture::Stonet,
            width: 100,
            branch_depth: 8,
            trunk_depth: 8,
            root_depth: 2,
            blocks: 8,
            fusion: FusionMode::Reinject,
            residual: true,
            branch_minus_state: true,
            n_u: 4,
            n_x: 3,
        }
    }
}

impl OperatorConfig {
    /// Check the hyperparameters.
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("network width must be positive".into()));
        }
        if self.branch_depth == 0 || self.trunk_depth == 0 {
            return Err(Error::Config("branch and trunk need at least one layer".into()));
        }
        if self.arch != Architecture::Deeponet && self.root_depth == 0 {
            return Err(Error::Config("root network needs at least one layer".into()));
        }
        if self.arch == Architecture::Stonet && self.blocks == 0 {
            return Err(Error::Config("stonet needs at least one stream block".into()));
        }
        if self.n_u == 0 || self.n_x == 0 {
            return Err(Error::Config("feature dimensions must be positive".into()));
        }
        Ok(())
    }

    fn dense_count(i: usize, o: usize) -> usize {
        i * o + o
    }

    fn root_count(&self, input: usize) -> usize {
        let w = self.width;
        if self.root_depth == 1 {
            Self::dense_count(input, 1)
        } else {
            Self::dense_count(input, w)
                + (self.root_depth - 2) * Self::dense_count(w, w)
                + Self::dense_count(w, 1)
        }
    }

    /// Closed-form parameter count (see the module docs). Matches
    /// enumeration over [`OperatorModel::parameters`].
    pub fn param_count(&self) -> usize {
        let w = self.width;
        let mlp = |input: usize, depth: usize| {
            Self::dense_count(input, w) + (depth - 1) * Self::dense_count(w, w)
        };
        let core = mlp(self.n_u, self.branch_depth) + mlp(self.n_x, self.trunk_depth);
        match self.arch {
            Architecture::Deeponet => core + 1,
            Architecture::Endeeponet => core + self.root_count(3 * w),
            Architecture::Stonet => {
                core + self.blocks * (3 * Self::dense_count(w, w) + Self::dense_count(3 * w, w))
                    + self.root_count(w)
            }
        }
    }
}

/// Plain multi-layer perceptron.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mlp {
    /// Layers in application order.
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// `dims[0] → dims[1] → …`, all `tanh` except a linear final layer
    /// when `final_linear`.
    fn new(dims: &[usize], final_linear: bool, rng: &mut StreamRng) -> Mlp {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let act = if final_linear && i + 2 == dims.len() {
                    Activation::Linear
                } else {
                    Activation::Tanh
                };
                DenseLayer::glorot(d[0], d[1], act, rng)
            })
            .collect();
        Mlp { layers }
    }

    fn stage(&self, tape: &mut Tape) -> Vec<StagedLayer> {
        self.layers.iter().map(|l| l.stage(tape)).collect()
    }

    fn apply(&self, tape: &mut Tape, staged: &[StagedLayer], mut x: Tensor) -> Result<Tensor> {
        for (layer, s) in self.layers.iter().zip(staged) {
            x = layer.apply(tape, *s, x)?;
        }
        Ok(x)
    }

    fn eval(&self, mut x: Array2<f64>) -> Array2<f64> {
        for layer in &self.layers {
            let mut out = x.dot(&layer.weight) + layer.bias.row(0);
            if layer.activation == Activation::Tanh {
                out.mapv_inplace(f64::tanh);
            }
            x = out;
        }
        x
    }
}

/// One stonet block's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBlock {
    /// `Φ_⊙`: dense layer on the product stream.
    pub mul: DenseLayer,
    /// `Φ_⊕`: dense layer on the sum stream.
    pub add: DenseLayer,
    /// `Φ_⊖`: dense layer on the difference stream.
    pub sub: DenseLayer,
    /// Fusion layer, `3w → w`, applied to the concatenated streams.
    pub fusion: DenseLayer,
}

/// A built operator network.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorModel {
    /// Hyperparameters the model was built from.
    pub config: OperatorConfig,
    /// Branch network `B`.
    pub branch: Mlp,
    /// Trunk network `T`.
    pub trunk: Mlp,
    /// Stream blocks (stonet only, length `L`).
    pub stream_blocks: Vec<StreamBlock>,
    /// Root network `R` (empty for deeponet).
    pub root: Mlp,
    /// Output bias of the dot-product architecture, `[1,1]`.
    pub bias0: Array2<f64>,
}

/// Tape handles of a staged model.
#[derive(Debug, Clone)]
pub struct StagedModel {
    branch: Vec<StagedLayer>,
    trunk: Vec<StagedLayer>,
    blocks: Vec<[StagedLayer; 4]>,
    root: Vec<StagedLayer>,
    bias0: Option<Tensor>,
}

impl StagedModel {
    /// Leaf gradients in [`OperatorModel::parameters`] order.
    pub fn grads(&self, tape: &Tape) -> Vec<Array2<f64>> {
        let mut out = Vec::new();
        let mut push = |s: &StagedLayer| {
            out.push(tape.grad(s.w).clone());
            out.push(tape.grad(s.b).clone());
        };
        self.branch.iter().for_each(&mut push);
        self.trunk.iter().for_each(&mut push);
        for b in &self.blocks {
            b.iter().for_each(&mut push);
        }
        self.root.iter().for_each(&mut push);
        if let Some(b0) = self.bias0 {
            out.push(tape.grad(b0).clone());
        }
        out
    }
}

impl OperatorModel {
    /// Build a model with Glorot-initialized weights drawn from `rng`.
    pub fn new(config: &OperatorConfig, rng: &mut StreamRng) -> Result<OperatorModel> {
        config.validate()?;
        let w = config.width;
        let mlp_dims = |input: usize, depth: usize| {
            let mut dims = vec![input];
            dims.extend(std::iter::repeat_n(w, depth));
            dims
        };
        let branch = Mlp::new(&mlp_dims(config.n_u, config.branch_depth), false, rng);
        let trunk = Mlp::new(&mlp_dims(config.n_x, config.trunk_depth), false, rng);

        let stream_blocks = if config.arch == Architecture::Stonet {
            (0..config.blocks)
                .map(|_| StreamBlock {
                    mul: DenseLayer::glorot(w, w, Activation::Tanh, rng),
                    add: DenseLayer::glorot(w, w, Activation::Tanh, rng),
                    sub: DenseLayer::glorot(w, w, Activation::Tanh, rng),
                    fusion: DenseLayer::glorot(3 * w, w, Activation::Tanh, rng),
                })
                .collect()
        } else {
            Vec::new()
        };

        let root = match config.arch {
            Architecture::Deeponet => Mlp::default(),
            Architecture::Endeeponet | Architecture::Stonet => {
                let input = if config.arch == Architecture::Endeeponet { 3 * w } else { w };
                let mut dims = vec![input];
                dims.extend(std::iter::repeat_n(w, config.root_depth - 1));
                dims.push(1);
                Mlp::new(&dims, true, rng)
            }
        };

        Ok(OperatorModel {
            config: config.clone(),
            branch,
            trunk,
            stream_blocks,
            root,
            bias0: Array2::zeros((1, 1)),
        })
    }

    /// All parameters in checkpoint order: branch, trunk, per block
    /// (`Φ_⊙`, `Φ_⊕`, `Φ_⊖`, fusion), root, then the deeponet bias —
    /// each layer contributing weight before bias.
    pub fn parameters(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        let layers = self.layer_iter();
        for l in layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        if self.config.arch == Architecture::Deeponet {
            out.push(&self.bias0);
        }
        out
    }

    /// Mutable view in the same order as [`Self::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let deeponet = self.config.arch == Architecture::Deeponet;
        let mut out = Vec::new();
        let blocks = self.stream_blocks.iter_mut().flat_map(|b| {
            [&mut b.mul, &mut b.add, &mut b.sub, &mut b.fusion]
        });
        for l in self
            .branch
            .layers
            .iter_mut()
            .chain(self.trunk.layers.iter_mut())
            .chain(blocks)
            .chain(self.root.layers.iter_mut())
        {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if deeponet {
            out.push(&mut self.bias0);
        }
        out
    }

    fn layer_iter(&self) -> impl Iterator<Item = &DenseLayer> {
        self.branch
            .layers
            .iter()
            .chain(self.trunk.layers.iter())
            .chain(
                self.stream_blocks
                    .iter()
                    .flat_map(|b| [&b.mul, &b.add, &b.sub, &b.fusion]),
            )
            .chain(self.root.layers.iter())
    }

    /// Names matching [`Self::parameters`], for the checkpoint manifest.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let mut layer = |prefix: String| {
            names.push(format!("{prefix}.weight"));
            names.push(format!("{prefix}.bias"));
        };
        for i in 0..self.branch.layers.len() {
            layer(format!("branch.{i}"));
        }
        for i in 0..self.trunk.layers.len() {
            layer(format!("trunk.{i}"));
        }
        for b in 0..self.stream_blocks.len() {
            for name in ["mul", "add", "sub", "fusion"] {
                layer(format!("block.{b}.{name}"));
            }
        }
        for i in 0..self.root.layers.len() {
            layer(format!("root.{i}"));
        }
        if self.config.arch == Architecture::Deeponet {
            names.push("bias0".into());
        }
        names
    }

    /// Total parameter count by enumeration.
    pub fn n_params(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    fn check_io(&self, u: &Array2<f64>, x: &Array2<f64>) -> Result<()> {
        if u.ncols() != self.config.n_u || x.ncols() != self.config.n_x {
            return Err(Error::Shape(format!(
                "features {:?} / queries {:?}, model expects {} and {} columns",
                u.shape(),
                x.shape(),
                self.config.n_u,
                self.config.n_x
            )));
        }
        if u.nrows() != x.nrows() {
            return Err(Error::Shape(format!(
                "batch mismatch: {:?} features vs {:?} queries",
                u.shape(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Stage all parameters onto a tape.
    pub fn stage(&self, tape: &mut Tape) -> StagedModel {
        StagedModel {
            branch: self.branch.stage(tape),
            trunk: self.trunk.stage(tape),
            blocks: self
                .stream_blocks
                .iter()
                .map(|b| {
                    [b.mul.stage(tape), b.add.stage(tape), b.sub.stage(tape), b.fusion.stage(tape)]
                })
                .collect(),
            root: self.root.stage(tape),
            bias0: (self.config.arch == Architecture::Deeponet)
                .then(|| tape.leaf(self.bias0.clone())),
        }
    }

    /// Differentiable forward pass; `u` and `x` are already tape nodes
    /// (normalized features). Returns the `[batch, 1]` rate prediction.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        staged: &StagedModel,
        u: Tensor,
        x: Tensor,
    ) -> Result<Tensor> {
        self.check_io(tape.value(u), tape.value(x))?;
        let e_b = self.branch.apply(tape, &staged.branch, u)?;
        let e_t = self.trunk.apply(tape, &staged.trunk, x)?;

        match self.config.arch {
            Architecture::Deeponet => {
                let prod = tape.mul(e_b, e_t)?;
                let ones = tape.leaf(Array2::ones((self.config.width, 1)));
                let dot = tape.matmul(prod, ones)?;
                tape.add(dot, staged.bias0.expect("deeponet stages bias0"))
            }
            Architecture::Endeeponet => {
                let m = tape.mul(e_b, e_t)?;
                let a = tape.add(e_b, e_t)?;
                let s = if self.config.branch_minus_state {
                    tape.sub(e_b, e_t)?
                } else {
                    tape.sub(e_t, e_b)?
                };
                let ma = tape.concat(m, a)?;
                let mas = tape.concat(ma, s)?;
                self.root.apply(tape, &staged.root, mas)
            }
            Architecture::Stonet => {
                let mut z = e_t;
                // Literal-chain stream states, seeded at ε_B ∘ ε_Z⁰.
                let mut chain: Option<[Tensor; 3]> = None;
                for (block, staged_block) in self.stream_blocks.iter().zip(&staged.blocks) {
                    let raw = match (self.config.fusion, &chain) {
                        (FusionMode::Reinject, _) | (FusionMode::LiteralChain, None) => {
                            let m = tape.mul(e_b, z)?;
                            let a = tape.add(e_b, z)?;
                            let s = if self.config.branch_minus_state {
                                tape.sub(e_b, z)?
                            } else {
                                tape.sub(z, e_b)?
                            };
                            [m, a, s]
                        }
                        (FusionMode::LiteralChain, Some(prev)) => *prev,
                    };
                    let s_m = block.mul.apply(tape, staged_block[0], raw[0])?;
                    let s_a = block.add.apply(tape, staged_block[1], raw[1])?;
                    let s_s = block.sub.apply(tape, staged_block[2], raw[2])?;
                    if self.config.fusion == FusionMode::LiteralChain {
                        chain = Some([s_m, s_a, s_s]);
                    }
                    let cat = tape.concat(s_m, s_a)?;
                    let cat = tape.concat(cat, s_s)?;
                    let inc = block.fusion.apply(tape, staged_block[3], cat)?;
                    z = if self.config.residual { tape.add(z, inc)? } else { inc };
                }
                self.root.apply(tape, &staged.root, z)
            }
        }
    }

    /// Inference forward pass, no tape. Same operation order as
    /// [`Self::forward_on_tape`], so the two agree bitwise.
    pub fn forward(&self, u: &Array2<f64>, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_io(u, x)?;
        let e_b = self.branch.eval(u.clone());
        let e_t = self.trunk.eval(x.clone());

        let dense = |l: &DenseLayer, v: &Array2<f64>| -> Array2<f64> {
            let mut out = v.dot(&l.weight) + l.bias.row(0);
            if l.activation == Activation::Tanh {
                out.mapv_inplace(f64::tanh);
            }
            out
        };
        let cat3 = |a: &Array2<f64>, b: &Array2<f64>, c: &Array2<f64>| {
            ndarray::concatenate(Axis(1), &[a.view(), b.view(), c.view()]).expect("equal rows")
        };

        Ok(match self.config.arch {
            Architecture::Deeponet => {
                let prod = &e_b * &e_t;
                let ones = Array2::ones((self.config.width, 1));
                prod.dot(&ones) + self.bias0[(0, 0)]
            }
            Architecture::Endeeponet => {
                let m = &e_b * &e_t;
                let a = &e_b + &e_t;
                let s = if self.config.branch_minus_state { &e_b - &e_t } else { &e_t - &e_b };
                self.root.eval(cat3(&m, &a, &s))
            }
            Architecture::Stonet => {
                let mut z = e_t;
                let mut chain: Option<[Array2<f64>; 3]> = None;
                for block in &self.stream_blocks {
                    let raw = match (self.config.fusion, chain.take()) {
                        (FusionMode::Reinject, _) | (FusionMode::LiteralChain, None) => {
                            let m = &e_b * &z;
                            let a = &e_b + &z;
                            let s = if self.config.branch_minus_state {
                                &e_b - &z
                            } else {
                                &z - &e_b
                            };
                            [m, a, s]
                        }
                        (FusionMode::LiteralChain, Some(prev)) => prev,
                    };
                    let s_m = dense(&block.mul, &raw[0]);
                    let s_a = dense(&block.add, &raw[1]);
                    let s_s = dense(&block.sub, &raw[2]);
                    let inc = dense(&block.fusion, &cat3(&s_m, &s_a, &s_s));
                    if self.config.fusion == FusionMode::LiteralChain {
                        chain = Some([s_m, s_a, s_s]);
                    }
                    z = if self.config.residual { z + inc } else { inc };
                }
                self.root.eval(z)
            }
        })
    }

    /// Canonical tokens of the layer graph, in evaluation order. Stream
    /// layers carry a `stream ` prefix so structural comparisons can set
    /// them aside.
    pub fn structure(&self) -> Vec<String> {
        let mut out = Vec::new();
        let dense_token = |l: &DenseLayer| {
            let act = match l.activation {
                Activation::Tanh => "tanh",
                Activation::Linear => "linear",
            };
            format!("dense {}x{} {act}", l.weight.nrows(), l.weight.ncols())
        };
        for l in &self.branch.layers {
            out.push(format!("branch {}", dense_token(l)));
        }
        for l in &self.trunk.layers {
            out.push(format!("trunk {}", dense_token(l)));
        }
        match self.config.arch {
            Architecture::Deeponet => {
                out.push("mul(branch,trunk)".into());
                out.push("rowsum".into());
                out.push("bias".into());
            }
            Architecture::Endeeponet => {
                out.push("mul(branch,trunk)".into());
                out.push("add(branch,trunk)".into());
                out.push(if self.config.branch_minus_state {
                    "sub(branch,trunk)".into()
                } else {
                    "sub(trunk,branch)".into()
                });
                out.push("concat3".into());
                for l in &self.root.layers {
                    out.push(dense_token(l));
                }
            }
            Architecture::Stonet => {
                for (i, block) in self.stream_blocks.iter().enumerate() {
                    let state = if i == 0 { "trunk".to_string() } else { format!("state{i}") };
                    let seeded = self.config.fusion == FusionMode::LiteralChain && i > 0;
                    if !seeded {
                        out.push(format!("mul(branch,{state})"));
                        out.push(format!("add(branch,{state})"));
                        out.push(if self.config.branch_minus_state {
                            format!("sub(branch,{state})")
                        } else {
                            format!("sub({state},branch)")
                        });
                    }
                    out.push(format!("stream {}", dense_token(&block.mul)));
                    out.push(format!("stream {}", dense_token(&block.add)));
                    out.push(format!("stream {}", dense_token(&block.sub)));
                    out.push("concat3".into());
                    out.push(dense_token(&block.fusion));
                    if self.config.residual {
                        out.push("residual-add".into());
                    }
                }
                for l in &self.root.layers {
                    out.push(dense_token(l));
                }
            }
        }
        out
    }
}

/// Column-wise normalization of raw `(u, x)` feature matrices with the
/// dataset statistics (`u` columns first, then `x`; the statistics'
/// trailing target column is not touched here).
pub fn normalize_features(
    stats: &NormalizationStats,
    u: &mut Array2<f64>,
    x: &mut Array2<f64>,
) -> Result<()> {
    if stats.fields.len() != u.ncols() + x.ncols() + 1 {
        return Err(Error::Shape(format!(
            "{} statistics for {} + {} feature columns plus a target",
            stats.fields.len(),
            u.ncols(),
            x.ncols()
        )));
    }
    let n_u = u.ncols();
    for (j, mut col) in u.columns_mut().into_iter().enumerate() {
        col.mapv_inplace(|v| (v - stats.mean[j]) / stats.std[j]);
    }
    for (j, mut col) in x.columns_mut().into_iter().enumerate() {
        col.mapv_inplace(|v| (v - stats.mean[n_u + j]) / stats.std[n_u + j]);
    }
    Ok(())
}

/// Forward-Euler integration of nodal rates: entry `k` of the result is
/// the state after applying `rates[0..=k]`, one `dt_h`-hour step each.
pub fn integrate_rates(c0: &[f64], rates: &[Vec<f64>], dt_h: f64) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(rates.len());
    let mut c = c0.to_vec();
    for (k, rate) in rates.iter().enumerate() {
        if rate.len() != c.len() {
            return Err(Error::Shape(format!(
                "rate {k} covers {} nodes, state has {}",
                rate.len(),
                c.len()
            )));
        }
        for (ci, ri) in c.iter_mut().zip(rate) {
            *ci += ri * dt_h;
        }
        out.push(c.clone());
    }
    Ok(out)
}

/// Rollout output: predicted nodal concentrations at the requested
/// times, plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Snapshot times (h), starting at the initial state's time.
    pub times_h: Vec<f64>,
    /// Nodal concentration per time; entry 0 is the initial state.
    pub c: Vec<Vec<f64>>,
    /// Fraction of predicted values outside `[0, 1]` (the update never
    /// clips, this is a diagnostic).
    pub out_of_unit_fraction: f64,
    /// Wall-clock seconds spent in network inference.
    pub inference_seconds: f64,
}

/// Shared input validation of the rollout entry points: returns the
/// uniform step (h) and the step count.
fn check_rollout_inputs(
    grid: &Grid,
    u_nodes: &Array2<f64>,
    c0: &[f64],
    times_h: &[f64],
) -> Result<(f64, usize)> {
    let n = grid.n_nodes();
    if u_nodes.nrows() != n || c0.len() != n {
        return Err(Error::Shape(format!(
            "{} feature rows and {} initial values for a {n}-node grid",
            u_nodes.nrows(),
            c0.len()
        )));
    }
    if times_h.len() < 2 {
        return Err(Error::Config("rollout needs at least two snapshot times".into()));
    }
    let dt_h = times_h[1] - times_h[0];
    if dt_h <= 0.0 || dt_h.is_nan() {
        return Err(Error::Config(format!("snapshot spacing {dt_h} h must be positive")));
    }
    for pair in times_h.windows(2) {
        if ((pair[1] - pair[0]) - dt_h).abs() > 1e-9 * dt_h {
            return Err(Error::Config(format!(
                "snapshot times must be uniform: spacing {} h after {} h",
                pair[1] - pair[0],
                dt_h
            )));
        }
    }
    Ok((dt_h, times_h.len() - 1))
}

/// Package integrated states into a [`Rollout`] with the out-of-unit
/// diagnostic.
fn finish_rollout(
    c0: &[f64],
    rates: &[Vec<f64>],
    dt_h: f64,
    times_h: &[f64],
    inference_seconds: f64,
) -> Result<Rollout> {
    let mut c = integrate_rates(c0, rates, dt_h)?;
    c.insert(0, c0.to_vec());
    let predicted = rates.len() * c0.len();
    let outside = c[1..]
        .iter()
        .flat_map(|snap| snap.iter())
        .filter(|&&v| !(0.0..=1.0).contains(&v))
        .count();
    Ok(Rollout {
        times_h: times_h.to_vec(),
        c,
        out_of_unit_fraction: outside as f64 / predicted as f64,
        inference_seconds,
    })
}

/// Auto-regressive plume prediction on every grid node.
///
/// `u_nodes` holds raw (unnormalized) branch features per node;
/// `times_h` must be uniformly spaced and start at the time of `c0`.
/// Rates for all steps are evaluated in one batched forward pass — the
/// branch features do not depend on the evolving state — and integrated
/// by forward Euler with each step's rate queried at the step's end.
///
/// This is the exact f64 path, bitwise consistent with the training
/// tape; production prediction uses [`rollout_f32`].
pub fn rollout(
    model: &OperatorModel,
    stats: &NormalizationStats,
    grid: &Grid,
    u_nodes: &Array2<f64>,
    c0: &[f64],
    times_h: &[f64],
) -> Result<Rollout> {
    let (dt_h, steps) = check_rollout_inputs(grid, u_nodes, c0, times_h)?;
    let n = grid.n_nodes();
    let mut u = Array2::zeros((steps * n, model.config.n_u));
    let mut x = Array2::zeros((steps * n, model.config.n_x));
    for k in 0..steps {
        for node in 0..n {
            let row = k * n + node;
            u.row_mut(row).assign(&u_nodes.row(node));
            let (px, py) = grid.node_pos(node);
            x[(row, 0)] = px;
            x[(row, 1)] = py;
            x[(row, 2)] = times_h[k + 1];
        }
    }
    normalize_features(stats, &mut u, &mut x)?;

    let started = Instant::now();
    let pred = model.forward(&u, &x)?;
    // The network regresses standardized targets; undo that to get
    // physical rates in 1/h.
    let rates: Vec<Vec<f64>> = (0..steps)
        .map(|k| {
            (0..n).map(|node| stats.denormalize_target(pred[(k * n + node, 0)])).collect()
        })
        .collect();
    let inference_seconds = started.elapsed().as_secs_f64();
    finish_rollout(c0, &rates, dt_h, times_h, inference_seconds)
}

/// Base-2 exponential in f32: degree-6 Taylor of `2^f` on `[-½, ½]`
/// scaled by exponent-bit construction of `2^k`. Absolute relative
/// error ≲ 1.3e-7 on the clamped range; branch-free, so the compiler
/// can vectorize loops over it.
#[inline]
fn exp2_f32(y: f32) -> f32 {
    let y = y.clamp(-126.0, 126.0);
    let k = y.round();
    let f = y - k;
    // 2^f = e^{f·ln2}: Taylor coefficients ln2^i / i!.
    let p = 1.0
        + f * (std::f32::consts::LN_2
            + f * (0.240_226_5
                + f * (0.055_504_11
                    + f * (0.009_618_13 + f * (0.001_333_36 + f * 0.000_154_04)))));
    let scale = f32::from_bits(((k as i32 + 127) as u32) << 23);
    p * scale
}

/// `tanh` in f32 via `(1 − e^{−2|x|}) / (1 + e^{−2|x|})`, sign
/// restored. Absolute error < 1e-6 against the f64 reference (errors
/// near zero are absolute, not relative — fine for bounded
/// activations). Roughly 4× cheaper than `f64::tanh` and vectorizable.
#[inline]
fn tanh_f32(x: f32) -> f32 {
    let t = exp2_f32(-2.0 * std::f32::consts::LOG2_E * x.abs());
    ((1.0 - t) / (1.0 + t)).copysign(x)
}

/// One f32 dense layer of the deployment net.
struct F32Layer {
    w: ndarray::Array2<f32>,
    b: Vec<f32>,
    tanh: bool,
}

impl F32Layer {
    fn from(l: &DenseLayer) -> F32Layer {
        F32Layer {
            w: l.weight.mapv(|v| v as f32),
            b: l.bias.iter().map(|&v| v as f32).collect(),
            tanh: l.activation == Activation::Tanh,
        }
    }

    /// `activation(x·W + b)` with the bias add and activation fused
    /// into one pass over the product.
    fn apply(&self, x: &ndarray::Array2<f32>) -> ndarray::Array2<f32> {
        let mut out = x.dot(&self.w);
        for mut row in out.rows_mut() {
            let row = row.as_slice_mut().expect("row-major output");
            for (o, &b) in row.iter_mut().zip(&self.b) {
                let v = *o + b;
                *o = if self.tanh { tanh_f32(v) } else { v };
            }
        }
        out
    }
}

/// Single-precision copy of a model, converted once per rollout.
struct F32Net {
    branch: Vec<F32Layer>,
    trunk: Vec<F32Layer>,
    blocks: Vec<[F32Layer; 4]>,
    root: Vec<F32Layer>,
    bias0: f32,
}

impl F32Net {
    fn from_model(m: &OperatorModel) -> F32Net {
        F32Net {
            branch: m.branch.layers.iter().map(F32Layer::from).collect(),
            trunk: m.trunk.layers.iter().map(F32Layer::from).collect(),
            blocks: m
                .stream_blocks
                .iter()
                .map(|b| {
                    [
                        F32Layer::from(&b.mul),
                        F32Layer::from(&b.add),
                        F32Layer::from(&b.sub),
                        F32Layer::from(&b.fusion),
                    ]
                })
                .collect(),
            root: m.root.layers.iter().map(F32Layer::from).collect(),
            bias0: m.bias0[(0, 0)] as f32,
        }
    }

    fn mlp(layers: &[F32Layer], mut x: ndarray::Array2<f32>) -> ndarray::Array2<f32> {
        for l in layers {
            x = l.apply(&x);
        }
        x
    }

    /// Mirror of [`OperatorModel::forward`] given precomputed branch
    /// encodings (deduplicated across time steps by the caller).
    fn forward_from_branch(
        &self,
        cfg: &OperatorConfig,
        e_b: &ndarray::Array2<f32>,
        x: ndarray::Array2<f32>,
    ) -> ndarray::Array2<f32> {
        let e_t = Self::mlp(&self.trunk, x);
        let cat3 = |a: &ndarray::Array2<f32>, b: &ndarray::Array2<f32>, c: &ndarray::Array2<f32>| {
            ndarray::concatenate(Axis(1), &[a.view(), b.view(), c.view()]).expect("equal rows")
        };
        match cfg.arch {
            Architecture::Deeponet => {
                let prod = e_b * &e_t;
                let mut out = ndarray::Array2::zeros((prod.nrows(), 1));
                for (i, row) in prod.rows().into_iter().enumerate() {
                    out[(i, 0)] = row.sum() + self.bias0;
                }
                out
            }
            Architecture::Endeeponet => {
                let m = e_b * &e_t;
                let a = e_b + &e_t;
                let s = if cfg.branch_minus_state { e_b - &e_t } else { &e_t - e_b };
                Self::mlp(&self.root, cat3(&m, &a, &s))
            }
            Architecture::Stonet => {
                let mut z = e_t;
                let mut chain: Option<[ndarray::Array2<f32>; 3]> = None;
                for block in &self.blocks {
                    let raw = match chain.take() {
                        Some(prev) if cfg.fusion == FusionMode::LiteralChain => prev,
                        _ => {
                            let m = e_b * &z;
                            let a = e_b + &z;
                            let s = if cfg.branch_minus_state { e_b - &z } else { &z - e_b };
                            [m, a, s]
                        }
                    };
                    let s_m = block[0].apply(&raw[0]);
                    let s_a = block[1].apply(&raw[1]);
                    let s_s = block[2].apply(&raw[2]);
                    let inc = block[3].apply(&cat3(&s_m, &s_a, &s_s));
                    if cfg.fusion == FusionMode::LiteralChain {
                        chain = Some([s_m, s_a, s_s]);
                    }
                    z = if cfg.residual { z + inc } else { inc };
                }
                Self::mlp(&self.root, z)
            }
        }
    }
}

/// Deployment rollout: same contract as [`rollout`], evaluated in
/// single precision.
///
/// Training and gradient checks stay f64; prediction runs an f32 copy
/// of the weights with a polynomial `tanh`, the branch encoding
/// computed once and shared across time steps, and one chunk per
/// snapshot. The deviation from the f64 path is far below the model's
/// own error (see `f32_rollout_tracks_the_f64_path`); wall-clock cost
/// is several times lower, which is what makes surrogate prediction
/// worthwhile next to the simulator.
pub fn rollout_f32(
    model: &OperatorModel,
    stats: &NormalizationStats,
    grid: &Grid,
    u_nodes: &Array2<f64>,
    c0: &[f64],
    times_h: &[f64],
) -> Result<Rollout> {
    let (dt_h, steps) = check_rollout_inputs(grid, u_nodes, c0, times_h)?;
    let n = grid.n_nodes();

    let mut u = u_nodes.clone();
    let mut x0 = Array2::zeros((n, model.config.n_x));
    for node in 0..n {
        let (px, py) = grid.node_pos(node);
        x0[(node, 0)] = px;
        x0[(node, 1)] = py;
    }
    normalize_features(stats, &mut u, &mut x0)?;
    // Only the time column changes between steps; precompute its
    // normalized values.
    let n_u = model.config.n_u;
    let t_norm: Vec<f32> = times_h[1..]
        .iter()
        .map(|&t| ((t - stats.mean[n_u + 2]) / stats.std[n_u + 2]) as f32)
        .collect();

    let net = F32Net::from_model(model);
    let u32m = u.mapv(|v| v as f32);
    let x_base = x0.mapv(|v| v as f32);

    let started = Instant::now();
    let e_b = F32Net::mlp(&net.branch, u32m);
    let mut rates = Vec::with_capacity(steps);
    for &t in &t_norm {
        let mut x = x_base.clone();
        x.column_mut(2).fill(t);
        let pred = net.forward_from_branch(&model.config, &e_b, x);
        rates.push(
            pred.column(0)
                .iter()
                .map(|&v| stats.denormalize_target(v as f64))
                .collect::<Vec<f64>>(),
        );
    }
    let inference_seconds = started.elapsed().as_secs_f64();
    finish_rollout(c0, &rates, dt_h, times_h, inference_seconds)
}

/// Differentiable `K`-step rollout loss against a target final state.
///
/// Stages the model once (shared weights across steps), advances
/// `c0` by forward Euler using tape-predicted rates at `x_steps[k]`,
/// and returns the MSE of the final state along with the staged
/// handles for gradient harvesting. Features must be pre-normalized.
pub fn rollout_mse_on_tape(
    model: &OperatorModel,
    tape: &mut Tape,
    u: &Array2<f64>,
    x_steps: &[Array2<f64>],
    c0: &Array2<f64>,
    target: &Array2<f64>,
    dt_h: f64,
) -> Result<(Tensor, StagedModel)> {
    let staged = model.stage(tape);
    let u_leaf = tape.leaf(u.clone());
    let mut c = tape.leaf(c0.clone());
    for x_k in x_steps {
        let x_leaf = tape.leaf(x_k.clone());
        let rate = model.forward_on_tape(tape, &staged, u_leaf, x_leaf)?;
        let scaled = tape.scale(rate, dt_h);
        c = tape.add(c, scaled)?;
    }
    let target_leaf = tape.leaf(target.clone());
    let loss = tape.mse(c, target_leaf)?;
    Ok((loss, staged))
}

/// Optimizer bookkeeping stored in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    /// Optimizer kind (always "adam" in this crate).
    pub kind: String,
    /// Hyperparameters.
    pub config: AdamConfig,
    /// Completed update steps.
    pub steps: u64,
}

/// `model.json`: everything needed to rebuild and use the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Architecture hyperparameters.
    pub architecture: OperatorConfig,
    /// Feature normalization measured on the training split.
    pub stats: NormalizationStats,
    /// Optimizer bookkeeping, absent for untrained or inference-only
    /// checkpoints.
    pub optimizer: Option<OptimizerMeta>,
    /// Parameter names in `weights.bin` order.
    pub param_order: Vec<String>,
    /// Parameter shapes in the same order.
    pub param_shapes: Vec<[usize; 2]>,
    /// Total parameter count.
    pub n_params: usize,
}

/// Write `model.json` + `weights.bin` into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    model: &OperatorModel,
    stats: &NormalizationStats,
    optimizer: Option<OptimizerMeta>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let params = model.parameters();
    let meta = CheckpointMeta {
        architecture: model.config.clone(),
        stats: stats.clone(),
        optimizer,
        param_order: model.parameter_names(),
        param_shapes: params.iter().map(|p| [p.nrows(), p.ncols()]).collect(),
        n_params: model.n_params(),
    };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(dir.join("model.json"), text)?;
    write_weights(&dir.join("weights.bin"), &params)
}

/// Read back a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(
    dir: &Path,
) -> Result<(OperatorModel, NormalizationStats, Option<OptimizerMeta>)> {
    let meta: CheckpointMeta =
        serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)?;
    let mut rng = StreamRng::from_parts(&[0]);
    let mut model = OperatorModel::new(&meta.architecture, &mut rng)?;
    let expected: Vec<[usize; 2]> =
        model.parameters().iter().map(|p| [p.nrows(), p.ncols()]).collect();
    if expected != meta.param_shapes {
        return Err(Error::Format(format!(
            "checkpoint lists {} parameter shapes that do not match its architecture ({} expected)",
            meta.param_shapes.len(),
            expected.len()
        )));
    }
    let loaded = read_weights(&dir.join("weights.bin"), &meta.param_shapes)?;
    for (p, l) in model.parameters_mut().into_iter().zip(loaded) {
        *p = l;
    }
    Ok((model, meta.stats, meta.optimizer))
}
