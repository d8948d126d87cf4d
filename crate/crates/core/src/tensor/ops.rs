//! Elementwise operations, reductions, matrix products, batch normalization,
//! and the backward dispatch table.
//!
//! Convolution-family kernels live in `conv.rs`; the fused histogram
//! operations live in `hist.rs`. Every backward rule here checks whether an
//! input actually requires a gradient before doing work for it.

use super::graph::{add_grad, Node, Op};
use super::{BatchStats, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

impl<R: Real> Graph<R> {
    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!(
                "{what} requires matching shapes, got {sa:?} and {sb:?}"
            )));
        }
        Ok(())
    }

    fn unary_map(&mut self, x: Var, op: Op<R>, f: impl Fn(R) -> R) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape(), data)?;
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    /// Elementwise `a + b` (shapes must match exactly; no broadcasting).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    /// Elementwise `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), needs)
    }

    /// Elementwise `a * b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), needs)
    }

    /// Elementwise `a / b`. The caller is responsible for keeping `b` away
    /// from zero; a zero divisor surfaces as a numeric error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "div")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x / y)
            .collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Div(a, b), needs)
    }

    /// `x + c` for a scalar constant.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = R::of(c);
        self.unary_map(x, Op::AddScalar(x), |v| v + c)
    }

    /// `x * c` for a scalar constant.
    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = R::of(c);
        self.unary_map(x, Op::MulScalar(x, c), |v| v * c)
    }

    /// `-x`.
    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, Op::Neg(x), |v| -v)
    }

    /// Elementwise `exp(x)`.
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, Op::Exp(x), |v| v.exp())
    }

    /// Elementwise natural log. Non-positive inputs produce a numeric error
    /// (clamp first when the domain is not guaranteed).
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, Op::Ln(x), |v| v.ln())
    }

    /// Elementwise `|x|`. The derivative at exactly zero is taken as zero.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, Op::Abs(x), |v| v.abs())
    }

    /// Clamp into `[lo, hi]`. Gradient passes where `lo <= x <= hi` and is
    /// zero outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::Contract(format!(
                "clamp bounds must satisfy lo <= hi, got [{lo}, {hi}]"
            )));
        }
        let (lo, hi) = (R::of(lo), R::of(hi));
        self.unary_map(x, Op::Clamp { x, lo, hi }, |v| {
            if v < lo {
                lo
            } else if v > hi {
                hi
            } else {
                v
            }
        })
    }

    /// Clamp from below at `lo`.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Result<Var> {
        let lo = R::of(lo);
        self.unary_map(
            x,
            Op::ClampMin { x, lo },
            |v| if v < lo { lo } else { v },
        )
    }

    /// Leaky rectifier: `x` for positive input, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let slope = R::of(slope);
        self.unary_map(x, Op::LeakyRelu { x, slope }, |v| {
            if v > R::zero() {
                v
            } else {
                slope * v
            }
        })
    }

    /// Rectifier (leaky rectifier with zero slope).
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu(x, 0.0)
    }

    /// Numerically stable logistic sigmoid.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, Op::Sigmoid(x), stable_sigmoid)
    }

    /// Elementwise `tanh(x)`.
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, Op::Tanh(x), |v| v.tanh())
    }

    /// Elementwise `x^e` for a constant exponent. Where the derivative is
    /// unbounded (e.g. `x = 0` with `e < 1`), it is taken as zero; callers
    /// should clamp away from such points.
    pub fn pow_scalar(&mut self, x: Var, e: f64) -> Result<Var> {
        let e = R::of(e);
        self.unary_map(x, Op::PowScalar { x, e }, |v| v.powf(e))
    }

    /// Concatenate along the channel axis; all inputs must share batch and
    /// spatial dimensions.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat_channels needs at least one input".into()));
        }
        let (b0, _, h0, w0) = self.value(inputs[0]).dims4()?;
        let mut c_total = 0;
        for &v in inputs {
            let (b, c, h, w) = self.value(v).dims4()?;
            if (b, h, w) != (b0, h0, w0) {
                return Err(Error::Shape(format!(
                    "concat_channels inputs disagree: [{b0},_,{h0},{w0}] vs [{b},_,{h},{w}]"
                )));
            }
            c_total += c;
        }
        let hw = h0 * w0;
        let mut out = vec![R::zero(); b0 * c_total * hw];
        for bi in 0..b0 {
            let mut off = 0;
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                let src = &t.data()[bi * c * hw..(bi + 1) * c * hw];
                let dst_start = (bi * c_total + off) * hw;
                out[dst_start..dst_start + c * hw].copy_from_slice(src);
                off += c;
            }
        }
        let value = Tensor::new(&[b0, c_total, h0, w0], out)?;
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(value, Op::ConcatChannels(inputs.to_vec()), needs)
    }

    /// Matrix product `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: [{m},{ka}] x [{kb},{n}]"
            )));
        }
        let mut out = vec![R::zero(); m * n];
        mm(self.value(a).data(), self.value(b).data(), m, ka, n, &mut out);
        let value = Tensor::new(&[m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Matmul(a, b), needs)
    }

    /// Sum of every element, as a scalar node.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(value, Op::SumAll(x), needs)
    }

    /// Mean of every element, as a scalar node.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Contract("mean_all of an empty tensor".into()));
        }
        let n = R::of(t.len() as f64);
        let value = Tensor::scalar(t.sum() / n);
        let needs = self.needs(x);
        self.push(value, Op::MeanAll(x), needs)
    }

    /// Same data viewed under a new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        self.push(value, Op::Reshape(x), needs)
    }

    /// Column sums of a `[groups * rows, k]` matrix, one output row per
    /// group: the result is `[groups, k]`.
    pub fn col_sum_grouped(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (rows, k) = self.value(x).dims2()?;
        if groups == 0 || rows % groups != 0 {
            return Err(Error::Shape(format!(
                "col_sum_grouped: {rows} rows not divisible into {groups} groups"
            )));
        }
        let per = rows / groups;
        let data = self.value(x).data();
        let mut out = vec![R::zero(); groups * k];
        for gi in 0..groups {
            let acc = &mut out[gi * k..(gi + 1) * k];
            for r in gi * per..(gi + 1) * per {
                let row = &data[r * k..(r + 1) * k];
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a = *a + v;
                }
            }
        }
        let value = Tensor::new(&[groups, k], out)?;
        let needs = self.needs(x);
        self.push(value, Op::ColSumGrouped { x, groups }, needs)
    }

    /// Mean binary cross-entropy of logits `z` against a constant target in
    /// `[0, 1]`, computed in the numerically stable log-sum-exp form
    /// `max(z,0) - z·t + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(&mut self, z: Var, target: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::Contract(format!(
                "bce_with_logits target must lie in [0,1], got {target}"
            )));
        }
        let t = R::of(target);
        let zt = self.value(z);
        if zt.is_empty() {
            return Err(Error::Contract("bce_with_logits on an empty tensor".into()));
        }
        let mut acc = R::zero();
        for &v in zt.data() {
            let pos = if v > R::zero() { v } else { R::zero() };
            acc = acc + pos - v * t + (-v.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar(acc / R::of(zt.len() as f64));
        let needs = self.needs(z);
        self.push(value, Op::BceWithLogits { z, target: t }, needs)
    }

    /// Train-mode batch normalization over `[B,C,H,W]` with per-channel
    /// affine parameters. Normalizes with biased batch statistics and
    /// returns them so the owning layer can update its running averages.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<R>)> {
        let (b, c, h, w) = self.value(x).dims4()?;
        self.check_affine_shapes(gamma, beta, c)?;
        let n = b * h * w;
        if n < 2 {
            return Err(Error::Shape(format!(
                "batchnorm_train needs at least 2 values per channel, got {n}"
            )));
        }
        let hw = h * w;
        let data = self.value(x).data();
        let nf = R::of(n as f64);
        let eps = R::of(eps);
        let mut mean = vec![R::zero(); c];
        let mut var = vec![R::zero(); c];
        let mut inv_std = vec![R::zero(); c];
        for ci in 0..c {
            let mut s = R::zero();
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                for &v in &data[base..base + hw] {
                    s = s + v;
                }
            }
            let mu = s / nf;
            let mut sq = R::zero();
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                for &v in &data[base..base + hw] {
                    let d = v - mu;
                    sq = sq + d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = sq / nf;
            inv_std[ci] = R::one() / (var[ci] + eps).sqrt();
        }
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut xhat = vec![R::zero(); data.len()];
        let mut out = vec![R::zero(); data.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let (mu, is, ga, be) = (mean[ci], inv_std[ci], gv[ci], bv[ci]);
                for j in base..base + hw {
                    let xh = (data[j] - mu) * is;
                    xhat[j] = xh;
                    out[j] = ga * xh + be;
                }
            }
        }
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        let value = Tensor::new(&[b, c, h, w], out)?;
        let xhat = Tensor::new(&[b, c, h, w], xhat)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let var_node = self.push(
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        )?;
        Ok((var_node, stats))
    }

    /// Eval-mode batch normalization using fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        self.check_affine_shapes(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape(format!(
                "batchnorm_eval running stats must have {c} channels, got {} and {}",
                running_mean.len(),
                running_var.len()
            )));
        }
        let hw = h * w;
        let mean: Vec<R> = running_mean.iter().map(|&v| R::of(v)).collect();
        let inv_std: Vec<R> = running_var
            .iter()
            .map(|&v| R::one() / R::of((v + eps).sqrt()))
            .collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let data = self.value(x).data();
        let mut out = vec![R::zero(); data.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let (mu, is, ga, be) = (mean[ci], inv_std[ci], gv[ci], bv[ci]);
                for j in base..base + hw {
                    out[j] = ga * (data[j] - mu) * is + be;
                }
            }
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            needs,
        )
    }

    fn check_affine_shapes(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let sh = self.value(v).shape();
            if self.value(v).len() != c {
                return Err(Error::Shape(format!(
                    "batchnorm {name} must have {c} elements, got shape {sh:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Numerically stable logistic function.
pub(crate) fn stable_sigmoid<R: Real>(v: R) -> R {
    if v >= R::zero() {
        R::one() / (R::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (R::one() + e)
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`, accumulating in ascending `k` order.
/// The `ikj` loop order keeps the inner loop contiguous in both `b` and
/// `out`, which vectorizes without reassociating the reduction.
pub(crate) fn mm<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, out: &mut [R]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = av.mul_add(bv, *o);
            }
        }
    }
}

/// `out[k,n] += aᵀ[k,m]·... ` i.e. `out = aᵀ · b` for `a[r,k]`, `b[r,n]`,
/// accumulating over rows `r` in ascending order.
pub(crate) fn mm_tn<R: Real>(a: &[R], b: &[R], r: usize, k: usize, n: usize, out: &mut [R]) {
    debug_assert_eq!(a.len(), r * k);
    debug_assert_eq!(b.len(), r * n);
    debug_assert_eq!(out.len(), k * n);
    for ri in 0..r {
        let arow = &a[ri * k..(ri + 1) * k];
        let brow = &b[ri * n..(ri + 1) * n];
        for (ki, &av) in arow.iter().enumerate() {
            let orow = &mut out[ki * n..(ki + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = av.mul_add(bv, *o);
            }
        }
    }
}

/// Row-major transpose: `out[cols, rows]` from `a[rows, cols]`.
pub(crate) fn transpose<R: Real>(a: &[R], rows: usize, cols: usize, out: &mut [R]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

/// Backward rule dispatch: add the gradient contributions of node `idx`
/// (whose output gradient is `gout`) into its inputs.
pub(crate) fn backward_node<R: Real>(
    nodes: &[Node<R>],
    grads: &mut [Option<Tensor<R>>],
    idx: usize,
    gout: &Tensor<R>,
) -> Result<()> {
    let needs = |v: Var| nodes[v.0].needs_grad;
    let val = |v: Var| &nodes[v.0].value;
    let g = gout.data();
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &v in [a, b] {
                if needs(v) {
                    add_grad(grads, v, val(v).shape(), g);
                }
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                add_grad(grads, *a, val(*a).shape(), g);
            }
            if needs(*b) {
                let d: Vec<R> = g.iter().map(|&x| -x).collect();
                add_grad(grads, *b, val(*b).shape(), &d);
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let d: Vec<R> = g.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                add_grad(grads, *a, val(*a).shape(), &d);
            }
            if needs(*b) {
                let d: Vec<R> = g.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                add_grad(grads, *b, val(*b).shape(), &d);
            }
        }
        Op::Div(a, b) => {
            let y = nodes[idx].value.data();
            if needs(*a) {
                let d: Vec<R> = g.iter().zip(val(*b).data()).map(|(&x, &v)| x / v).collect();
                add_grad(grads, *a, val(*a).shape(), &d);
            }
            if needs(*b) {
                let d: Vec<R> = g
                    .iter()
                    .zip(y.iter().zip(val(*b).data()))
                    .map(|(&x, (&yy, &v))| -x * yy / v)
                    .collect();
                add_grad(grads, *b, val(*b).shape(), &d);
            }
        }
        Op::AddScalar(x) => {
            if needs(*x) {
                add_grad(grads, *x, val(*x).shape(), g);
            }
        }
        Op::MulScalar(x, c) => {
            if needs(*x) {
                let d: Vec<R> = g.iter().map(|&v| v * *c).collect();
                add_grad(grads, *x, val(*x).shape(), &d);
            }
        }
        Op::Neg(x) => {
            if needs(*x) {
                let d: Vec<R> = g.iter().map(|&v| -v).collect();
                add_grad(grads, *x, val(*x).shape(), &d);
            }
        }
        Op::Exp(x) => {
            if needs(*x) {
                let y = nodes[idx].value.data();
                let d: Vec<R> = g.iter().zip(y).map(|(&gg, &yy)| gg * yy).collect();
                add_grad(grads, *x, val(*x).shape(), &d);
            }
        }
        Op::Ln(x) => {
            if needs(*x) {
                let d: Vec<R> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gg, &v)| gg / v)
                    .collect();
                add_grad(grads, *x, val(*x).shape(), &d);
            }
        }
        Op::Abs(x) => {
            if needs(*x) {
                let d: Vec<R> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gg, &v)| {
                        if v > R::zero() {
                            gg
                        } else if v < R::zero() {
                            -gg
                        } else {
                            R::zero()
                        }
                    })
                    .collect();
                add_grad(grads, *x, val(*x).shape(), &d);
            }
        }
        Op::Clamp { x, lo, hi } => {
            if needs(*x) {
                let d: Vec<R> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gg, &v)| if v >= *lo && v <= *hi { gg } else { R::zero() })
                    .collect();
                add_grad(grads, *x, val(*x).shape(), &d);
            }
        }
        Op::ClampMin { x, lo } => {
            if needs(*x) {
                let d: Vec<R> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gg, &v)| if v >= *lo { gg } else { R::zero() })
                    .collect();
                add_grad(grads, *x, val(*x).shape(), &d);
            }
        }
        Op::LeakyRelu { x, slope } => {
            if needs(*x) {
                let d: Vec<R> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gg, &v)| if v > R::zero() { gg } else { gg * *slope })
                    .collect();
                add_grad(grads, *x, val(*x).shape(), &d);
            }
        }
        Op::Sigmoid(x) => {
            if needs(*x) {
                let y = nodes[idx].value.data();
                let d: Vec<R> = g
                    .iter()
                    .zip(y)
                    .map(|(&gg, &yy)| gg * yy * (R::one() - yy))
                    .collect();
                add_grad(grads, *x, val(*x).shape(), &d);
            }
        }
        Op::Tanh(x) => {
            if needs(*x) {
                let y = nodes[idx].value.data();
                let d: Vec<R> = g
                    .iter()
                    .zip(y)
                    .map(|(&gg, &yy)| gg * (R::one() - yy * yy))
                    .collect();
                add_grad(grads, *x, val(*x).shape(), &d);
            }
        }
        Op::PowScalar { x, e } => {
            if needs(*x) {
                let d: Vec<R> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gg, &v)| {
                        let m = *e * v.powf(*e - R::one());
                        if m.is_finite() {
                            gg * m
                        } else {
                            R::zero()
                        }
                    })
                    .collect();
                add_grad(grads, *x, val(*x).shape(), &d);
            }
        }
        Op::ConcatChannels(inputs) => {
            let (b, c_total, h, w) = nodes[idx].value.dims4()?;
            let hw = h * w;
            let mut off = 0;
            for &v in inputs {
                let c = val(v).shape()[1];
                if needs(v) {
                    let mut d = vec![R::zero(); b * c * hw];
                    for bi in 0..b {
                        let src = (bi * c_total + off) * hw;
                        let dst = bi * c * hw;
                        d[dst..dst + c * hw].copy_from_slice(&g[src..src + c * hw]);
                    }
                    add_grad(grads, v, val(v).shape(), &d);
                }
                off += c;
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = val(*a).dims2()?;
            let n = val(*b).shape()[1];
            if needs(*a) {
                // dA = G · Bᵀ, computed as mm against a transposed B.
                let mut bt = vec![R::zero(); k * n];
                transpose(val(*b).data(), k, n, &mut bt);
                let mut d = vec![R::zero(); m * k];
                mm(g, &bt, m, n, k, &mut d);
                add_grad(grads, *a, val(*a).shape(), &d);
            }
            if needs(*b) {
                // dB = Aᵀ · G.
                let mut d = vec![R::zero(); k * n];
                mm_tn(val(*a).data(), g, m, k, n, &mut d);
                add_grad(grads, *b, val(*b).shape(), &d);
            }
        }
        Op::SumAll(x) => {
            if needs(*x) {
                let d = vec![g[0]; val(*x).len()];
                add_grad(grads, *x, val(*x).shape(), &d);
            }
        }
        Op::MeanAll(x) => {
            if needs(*x) {
                let n = R::of(val(*x).len() as f64);
                let d = vec![g[0] / n; val(*x).len()];
                add_grad(grads, *x, val(*x).shape(), &d);
            }
        }
        Op::Reshape(x) => {
            if needs(*x) {
                add_grad(grads, *x, val(*x).shape(), g);
            }
        }
        Op::ColSumGrouped { x, groups } => {
            if needs(*x) {
                let (rows, k) = val(*x).dims2()?;
                let per = rows / groups;
                let mut d = vec![R::zero(); rows * k];
                for gi in 0..*groups {
                    let src = &g[gi * k..(gi + 1) * k];
                    for r in gi * per..(gi + 1) * per {
                        d[r * k..(r + 1) * k].copy_from_slice(src);
                    }
                }
                add_grad(grads, *x, val(*x).shape(), &d);
            }
        }
        Op::BceWithLogits { z, target } => {
            if needs(*z) {
                let n = R::of(val(*z).len() as f64);
                let scale = g[0] / n;
                let d: Vec<R> = val(*z)
                    .data()
                    .iter()
                    .map(|&v| (stable_sigmoid(v) - *target) * scale)
                    .collect();
                add_grad(grads, *z, val(*z).shape(), &d);
            }
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (b, c, h, w) = val(*x).dims4()?;
            let hw = h * w;
            let n = R::of((b * hw) as f64);
            let xh = xhat.data();
            // Per-channel reductions of g and g*xhat, ascending batch index.
            let mut sum_g = vec![R::zero(); c];
            let mut sum_gx = vec![R::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    let mut sg = R::zero();
                    let mut sgx = R::zero();
                    for j in base..base + hw {
                        sg = sg + g[j];
                        sgx = g[j].mul_add(xh[j], sgx);
                    }
                    sum_g[ci] = sum_g[ci] + sg;
                    sum_gx[ci] = sum_gx[ci] + sgx;
                }
            }
            if needs(*beta) {
                add_grad(grads, *beta, val(*beta).shape(), &sum_g);
            }
            if needs(*gamma) {
                add_grad(grads, *gamma, val(*gamma).shape(), &sum_gx);
            }
            if needs(*x) {
                let gv = val(*gamma).data();
                let mut d = vec![R::zero(); val(*x).len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        let coeff = gv[ci] * inv_std[ci];
                        let mg = sum_g[ci] / n;
                        let mgx = sum_gx[ci] / n;
                        for j in base..base + hw {
                            d[j] = coeff * (g[j] - mg - xh[j] * mgx);
                        }
                    }
                }
                add_grad(grads, *x, val(*x).shape(), &d);
            }
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let (b, c, h, w) = val(*x).dims4()?;
            let hw = h * w;
            if needs(*beta) || needs(*gamma) {
                let xd = val(*x).data();
                let mut sum_g = vec![R::zero(); c];
                let mut sum_gx = vec![R::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for j in base..base + hw {
                            sum_g[ci] = sum_g[ci] + g[j];
                            sum_gx[ci] = sum_gx[ci] + g[j] * (xd[j] - mean[ci]) * inv_std[ci];
                        }
                    }
                }
                if needs(*beta) {
                    add_grad(grads, *beta, val(*beta).shape(), &sum_g);
                }
                if needs(*gamma) {
                    add_grad(grads, *gamma, val(*gamma).shape(), &sum_gx);
                }
            }
            if needs(*x) {
                let gv = val(*gamma).data();
                let mut d = vec![R::zero(); val(*x).len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        let coeff = gv[ci] * inv_std[ci];
                        for j in base..base + hw {
                            d[j] = g[j] * coeff;
                        }
                    }
                }
                add_grad(grads, *x, val(*x).shape(), &d);
            }
        }
        Op::Conv2d { .. } | Op::UpsampleBilinear { .. } | Op::AvgPool2(..) => {
            super::conv::backward_conv_family(nodes, grads, idx, gout)?;
        }
        Op::GaussWeights { .. } | Op::JointHist { .. } | Op::MiCondEntropy(..) => {
            super::hist::backward_hist_family(nodes, grads, idx, gout)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{grad_check, grad_check_multi, DEFAULT_STEP};
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| r.gen_range(-1.5..1.5)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn forward_values_elementwise() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap()).unwrap();
        let b = g.variable(Tensor::from_f64(&[3], &[2.0, 3.0, -1.0]).unwrap()).unwrap();
        let cases: Vec<(Var, Vec<f64>)> = vec![
            (g.add(a, b).unwrap(), vec![3.0, 1.0, -0.5]),
            (g.sub(a, b).unwrap(), vec![-1.0, -5.0, 1.5]),
            (g.mul(a, b).unwrap(), vec![2.0, -6.0, -0.5]),
            (g.div(a, b).unwrap(), vec![0.5, -2.0 / 3.0, -0.5]),
            (g.neg(a).unwrap(), vec![-1.0, 2.0, -0.5]),
            (g.abs(a).unwrap(), vec![1.0, 2.0, 0.5]),
            (g.clamp(a, -1.0, 0.75).unwrap(), vec![0.75, -1.0, 0.5]),
            (g.leaky_relu(a, 0.2).unwrap(), vec![1.0, -0.4, 0.5]),
            (g.relu(a).unwrap(), vec![1.0, 0.0, 0.5]),
        ];
        for (v, expect) in cases {
            assert_eq!(g.value(v).data(), expect.as_slice());
        }
        let s = g.sigmoid(a).unwrap();
        assert!((g.value(s).data()[0] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let mut g = Graph::<f32>::new();
        let x = g
            .variable(Tensor::from_f64(&[2], &[500.0, -500.0]).unwrap())
            .unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(Tensor::zeros(&[2, 2])).unwrap();
        let b = g.variable(Tensor::zeros(&[4])).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_forward_is_a_numeric_error() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_f64(&[1], &[-1.0]).unwrap()).unwrap();
        assert!(matches!(g.ln(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn matmul_small_known_product() {
        let mut g = Graph::<f64>::new();
        let a = g
            .variable(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let b = g
            .variable(Tensor::from_f64(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap())
            .unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn backward_accumulates_through_diamond() {
        // y = x*x + x: dy/dx = 2x + 1, reached via two paths to x.
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_f64(&[1], &[3.0]).unwrap()).unwrap();
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_f64(&[1], &[2.0]).unwrap()).unwrap();
        let c = g.constant(Tensor::from_f64(&[1], &[5.0]).unwrap()).unwrap();
        let y = g.mul(x, c).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[5.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn param_grads_harvested_by_name() {
        let mut g = Graph::<f64>::new();
        let w = Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap();
        let v = g.param("w", &w).unwrap();
        let s = g.sum_all(v).unwrap();
        g.backward(s).unwrap();
        let grads = g.param_grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, "w");
        assert_eq!(grads[0].1.data(), &[1.0, 1.0]);
        assert!(g.param("w", &w).is_err(), "duplicate names rejected");
    }

    #[test]
    fn gradients_elementwise_ops_match_finite_differences() {
        let mut r = rng(11);
        let x = rand_tensor(&[2, 3], &mut r);
        type BuildFn = fn(&mut Graph<f64>, Var) -> crate::error::Result<Var>;
        let cases: Vec<(&str, BuildFn)> = vec![
            ("exp", |g, v| {
                let e = g.exp(v)?;
                g.sum_all(e)
            }),
            ("ln(abs)+", |g, v| {
                let a = g.abs(v)?;
                let c = g.add_scalar(a, 1.0)?;
                let l = g.ln(c)?;
                g.sum_all(l)
            }),
            ("sigmoid", |g, v| {
                let s = g.sigmoid(v)?;
                g.sum_all(s)
            }),
            ("tanh", |g, v| {
                let t = g.tanh(v)?;
                g.sum_all(t)
            }),
            ("leaky", |g, v| {
                let t = g.leaky_relu(v, 0.2)?;
                g.sum_all(t)
            }),
            ("clamp", |g, v| {
                let t = g.clamp(v, -0.9, 0.9)?;
                let sq = g.mul(t, t)?;
                g.sum_all(sq)
            }),
            ("pow", |g, v| {
                let sq = g.mul(v, v)?;
                let c = g.add_scalar(sq, 0.5)?;
                let p = g.pow_scalar(c, 1.7)?;
                g.sum_all(p)
            }),
            ("mean", |g, v| g.mean_all(v)),
            ("scalar-ops", |g, v| {
                let a = g.mul_scalar(v, 2.5)?;
                let b = g.add_scalar(a, -0.3)?;
                let n = g.neg(b)?;
                g.sum_all(n)
            }),
        ];
        for (name, f) in cases {
            let rep = grad_check(f, &x, DEFAULT_STEP).unwrap();
            assert!(rep.passes(1e-4), "{name}: max rel err {}", rep.max_rel_err);
        }
    }

    #[test]
    fn gradients_binary_ops_match_finite_differences() {
        let mut r = rng(12);
        let a = rand_tensor(&[6], &mut r);
        // Keep divisors away from zero.
        let mut b = rand_tensor(&[6], &mut r);
        for v in b.data_mut() {
            *v = v.signum() * (v.abs() + 0.5);
        }
        let rep = grad_check_multi(
            |g, vs| {
                let m = g.mul(vs[0], vs[1])?;
                let d = g.div(vs[0], vs[1])?;
                let s = g.sub(m, d)?;
                let sum = g.sum_all(s)?;
                let sq = g.mul(sum, sum)?;
                g.sum_all(sq)
            },
            &[a, b],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn gradient_matmul_matches_finite_differences() {
        let mut r = rng(13);
        let a = rand_tensor(&[3, 4], &mut r);
        let b = rand_tensor(&[4, 2], &mut r);
        let rep = grad_check_multi(
            |g, vs| {
                let c = g.matmul(vs[0], vs[1])?;
                let sq = g.mul(c, c)?;
                g.sum_all(sq)
            },
            &[a, b],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn gradient_bce_with_logits_matches_finite_differences() {
        let mut r = rng(14);
        let z = rand_tensor(&[2, 1, 2, 2], &mut r);
        for target in [0.0, 1.0, 0.5] {
            let rep = grad_check(
                move |g, v| g.bce_with_logits(v, target),
                &z,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(rep.passes(1e-4), "target {target}: {}", rep.max_rel_err);
        }
    }

    #[test]
    fn bce_of_zero_logits_is_ln2() {
        let mut g = Graph::<f64>::new();
        let z = g.variable(Tensor::zeros(&[4, 1, 3, 3])).unwrap();
        for target in [0.0, 1.0] {
            let l = g.bce_with_logits(z, target).unwrap();
            assert!((g.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_channels_round_trip_and_gradient() {
        let mut r = rng(15);
        let a = rand_tensor(&[2, 2, 2, 2], &mut r);
        let b = rand_tensor(&[2, 1, 2, 2], &mut r);
        let mut g = Graph::<f64>::new();
        let va = g.variable(a.clone()).unwrap();
        let vb = g.variable(b.clone()).unwrap();
        let c = g.concat_channels(&[va, vb]).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 3, 2, 2]);
        // Batch 1, channel 2 of the concat must equal channel 0 of b.
        let got = &g.value(c).data()[(1 * 3 + 2) * 4..(1 * 3 + 2) * 4 + 4];
        assert_eq!(got, &b.data()[4..8]);

        let rep = grad_check_multi(
            |g, vs| {
                let c = g.concat_channels(&[vs[0], vs[1]])?;
                let sq = g.mul(c, c)?;
                g.sum_all(sq)
            },
            &[a, b],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(rep.passes(1e-4));
    }

    #[test]
    fn col_sum_grouped_values_and_gradient() {
        let x = Tensor::from_f64(&[4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let v = g.variable(x.clone()).unwrap();
        let s = g.col_sum_grouped(v, 2).unwrap();
        assert_eq!(g.value(s).shape(), &[2, 2]);
        assert_eq!(g.value(s).data(), &[4.0, 6.0, 12.0, 14.0]);
        let rep = grad_check(
            |g, v| {
                let s = g.col_sum_grouped(v, 2)?;
                let sq = g.mul(s, s)?;
                g.sum_all(sq)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(rep.passes(1e-4));
    }

    #[test]
    fn batchnorm_train_normalizes_and_matches_finite_differences() {
        let mut r = rng(16);
        let x = rand_tensor(&[2, 2, 2, 2], &mut r);
        let gamma = Tensor::from_f64(&[2], &[1.3, 0.7]).unwrap();
        let beta = Tensor::from_f64(&[2], &[0.1, -0.2]).unwrap();

        // Forward: per-channel standardized output scaled by gamma + beta.
        let mut g = Graph::<f64>::new();
        let vx = g.variable(x.clone()).unwrap();
        let vg = g.variable(gamma.clone()).unwrap();
        let vb = g.variable(beta.clone()).unwrap();
        let (y, stats) = g.batchnorm_train(vx, vg, vb, 1e-5).unwrap();
        // Batch statistics of the output: mean beta, variance ~gamma^2.
        let yd = g.value(y).data();
        for ci in 0..2 {
            let mut vals = Vec::new();
            for bi in 0..2 {
                let base = (bi * 2 + ci) * 4;
                vals.extend_from_slice(&yd[base..base + 4]);
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((mean - beta.data()[ci]).abs() < 1e-12);
            assert!(stats.var[ci] > 0.0);
        }

        let rep = grad_check_multi(
            |g, vs| {
                let (y, _) = g.batchnorm_train(vs[0], vs[1], vs[2], 1e-5)?;
                let sq = g.mul(y, y)?;
                g.sum_all(sq)
            },
            &[x, gamma, beta],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn batchnorm_eval_uses_fixed_stats_and_matches_finite_differences() {
        let mut r = rng(17);
        let x = rand_tensor(&[2, 2, 2, 2], &mut r);
        let gamma = Tensor::from_f64(&[2], &[1.1, 0.9]).unwrap();
        let beta = Tensor::from_f64(&[2], &[0.0, 0.5]).unwrap();
        let rm = [0.2, -0.1];
        let rv = [1.5, 0.8];

        let mut g = Graph::<f64>::new();
        let vx = g.variable(x.clone()).unwrap();
        let vg = g.variable(gamma.clone()).unwrap();
        let vb = g.variable(beta.clone()).unwrap();
        let y = g.batchnorm_eval(vx, vg, vb, &rm, &rv, 1e-5).unwrap();
        let expect = gamma.data()[0] * (x.data()[0] - 0.2) / (1.5f64 + 1e-5).sqrt();
        assert!((g.value(y).data()[0] - expect).abs() < 1e-12);

        let rep = grad_check_multi(
            |g, vs| {
                let y = g.batchnorm_eval(vs[0], vs[1], vs[2], &[0.2, -0.1], &[1.5, 0.8], 1e-5)?;
                let sq = g.mul(y, y)?;
                g.sum_all(sq)
            },
            &[x, gamma, beta],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(rep.passes(1e-4));
    }

    #[test]
    fn reshape_gradient_flows_back_in_original_shape() {
        let x = Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let v = g.variable(x).unwrap();
        let r = g.reshape(v, &[3, 2]).unwrap();
        let s = g.sum_all(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap().shape(), &[2, 3]);
    }
}
