//! Define-by-run tape for reverse-mode differentiation.
//!
//! A [`Graph`] records each operation as it executes. Because nodes are
//! appended in execution order, the tape index order is already a topological
//! order, and [`Graph::backward`] is a single reverse sweep that visits each
//! node exactly once, accumulating gradients into every recorded input that
//! requires them.
//!
//! Graphs are cheap and short-lived: build one per training step, run
//! `backward`, harvest gradients, drop it.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Clone, Copy, Debug)]
pub struct Var(pub(crate) usize);

/// Per-channel batch statistics captured by a train-mode batchnorm, used by
/// layers to maintain running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<R: Real> {
    pub mean: Vec<R>,
    pub var: Vec<R>,
}

/// Recorded operation, holding input handles plus whatever forward context
/// the backward rule needs.
pub(crate) enum Op<R: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, R),
    Neg(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Clamp {
        x: Var,
        lo: R,
        hi: R,
    },
    ClampMin {
        x: Var,
        lo: R,
    },
    LeakyRelu {
        x: Var,
        slope: R,
    },
    Sigmoid(Var),
    Tanh(Var),
    PowScalar {
        x: Var,
        e: R,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    UpsampleBilinear {
        x: Var,
        factor: usize,
    },
    AvgPool2(Var),
    ConcatChannels(Vec<Var>),
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Normalized input, saved for the backward pass.
        xhat: Tensor<R>,
        inv_std: Vec<R>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<R>,
        inv_std: Vec<R>,
    },
    Matmul(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    ColSumGrouped {
        x: Var,
        groups: usize,
    },
    /// Row-normalized Gaussian kernel weights of a clamped image against a
    /// bin-center bank; one row per pixel, nonzero only inside `windows`.
    GaussWeights {
        x: Var,
        sigma: R,
        centers: Vec<R>,
        /// Per-row half-open bin range `[lo, hi)` outside which weights are
        /// exactly zero.
        windows: Vec<(u32, u32)>,
    },
    /// Per-image joint histogram accumulated from two weight fields.
    JointHist {
        wa: Var,
        wb: Var,
        groups: usize,
    },
    /// Conditional entropy (bits) of each joint distribution slice.
    MiCondEntropy(Var),
    /// Mean binary cross-entropy on logits against a constant target.
    BceWithLogits {
        z: Var,
        target: R,
    },
}

pub(crate) struct Node<R: Real> {
    pub value: Tensor<R>,
    pub op: Op<R>,
    pub needs_grad: bool,
}

/// Reverse-mode differentiation tape.
pub struct Graph<R: Real> {
    pub(crate) nodes: Vec<Node<R>>,
    pub(crate) grads: Vec<Option<Tensor<R>>>,
    params: Vec<(String, Var)>,
    /// When set, every forward result is scanned for NaN/Inf and the first
    /// offender aborts with a numeric error.
    pub validate_finite: bool,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            grads: Vec::with_capacity(256),
            params: Vec::new(),
            validate_finite: true,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True when no nodes have been recorded.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Result<Var> {
        if self.validate_finite && !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {} (output shape {:?})",
                op_name(&op),
                value.shape()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a leaf that does not require a gradient.
    pub fn constant(&mut self, value: Tensor<R>) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Record a leaf that accumulates a gradient during backward.
    pub fn variable(&mut self, value: Tensor<R>) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Record a named trainable leaf. The name must be unique per graph;
    /// gradients are harvested by name after backward.
    pub fn param(&mut self, name: &str, value: &Tensor<R>) -> Result<Var> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::Contract(format!(
                "parameter {name:?} registered twice in one graph"
            )));
        }
        let v = self.variable(value.clone())?;
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    /// Record a parameter as a frozen constant: values participate in the
    /// forward pass and gradients still flow *through* ops that consume it,
    /// but no gradient is computed *for* it. Used when one network is held
    /// fixed while another trains against it.
    pub fn param_frozen(&mut self, value: &Tensor<R>) -> Result<Var> {
        self.constant(value.clone())
    }

    /// The forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    /// Clone a node's value out of the graph (e.g. to re-enter it elsewhere
    /// as a detached leaf).
    pub fn detached(&self, v: Var) -> Tensor<R> {
        self.nodes[v.0].value.clone()
    }

    /// The gradient accumulated at a node, if any.
    pub fn grad(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of all named parameters, in registration order. Parameters
    /// the loss does not reach get a zero gradient of matching shape.
    pub fn param_grads(&self) -> Vec<(String, Tensor<R>)> {
        self.params
            .iter()
            .map(|(name, var)| {
                let g = match &self.grads[var.0] {
                    Some(t) => t.clone(),
                    None => Tensor::zeros(self.nodes[var.0].value.shape()),
                };
                (name.clone(), g)
            })
            .collect()
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Propagate gradients from a scalar node back to every reachable leaf.
    ///
    /// The tape is visited once in reverse insertion order (a reverse
    /// topological order by construction); each node adds its contribution
    /// into its inputs' gradient buffers, so diamond-shaped reuse of a value
    /// accumulates correctly.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss node, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.data()[0].is_finite() {
            return Err(Error::Numeric(
                "backward called on a non-finite loss".to_string(),
            ));
        }
        self.grads[loss.0] = Some(Tensor::new(lt.shape(), vec![R::one()])?);
        for idx in (0..=loss.0).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let gout = self.grads[idx].take().expect("grad present");
            super::ops::backward_node(&self.nodes, &mut self.grads, idx, &gout)?;
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }
}

/// Accumulate `delta` into the gradient slot of `var`, allocating zeros on
/// first touch.
pub(crate) fn add_grad<R: Real>(
    grads: &mut [Option<Tensor<R>>],
    var: Var,
    shape: &[usize],
    delta: &[R],
) {
    let slot = grads[var.0].get_or_insert_with(|| Tensor::zeros(shape));
    for (a, b) in slot.data_mut().iter_mut().zip(delta) {
        *a = *a + *b;
    }
}

pub(crate) fn op_name<R: Real>(op: &Op<R>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddScalar(..) => "add_scalar",
        Op::MulScalar(..) => "mul_scalar",
        Op::Neg(..) => "neg",
        Op::Exp(..) => "exp",
        Op::Ln(..) => "ln",
        Op::Abs(..) => "abs",
        Op::Clamp { .. } => "clamp",
        Op::ClampMin { .. } => "clamp_min",
        Op::LeakyRelu { .. } => "leaky_relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::PowScalar { .. } => "pow_scalar",
        Op::Conv2d { .. } => "conv2d",
        Op::UpsampleBilinear { .. } => "upsample_bilinear",
        Op::AvgPool2(..) => "avg_pool2",
        Op::ConcatChannels(..) => "concat_channels",
        Op::BatchNormTrain { .. } => "batchnorm_train",
        Op::BatchNormEval { .. } => "batchnorm_eval",
        Op::Matmul(..) => "matmul",
        Op::SumAll(..) => "sum_all",
        Op::MeanAll(..) => "mean_all",
        Op::Reshape(..) => "reshape",
        Op::ColSumGrouped { .. } => "col_sum_grouped",
        Op::GaussWeights { .. } => "gauss_weights",
        Op::JointHist { .. } => "joint_hist",
        Op::MiCondEntropy(..) => "mi_cond_entropy",
        Op::BceWithLogits { .. } => "bce_with_logits",
    }
}
