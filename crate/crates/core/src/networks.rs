//! Generator and discriminator models.
//!
//! The generator is a U-Net: a strided-convolution encoder mirrored by an
//! upsample-convolution decoder with skip connections, followed by a chain
//! of three residual refinement stages attached to the last four decoder
//! layers. Numbering decoder layers D₁ (deepest) to D_n (full resolution),
//! the stages produce
//!
//! ```text
//! G₁ = σ( shortcut(Ũ(D_{n-3}) ‖ D_{n-2}) + main(Ũ(D_{n-3}) ‖ D_{n-2}) )
//! Gₘ = σ( shortcut(Ũ(G_{m-1}) ‖ D_l)    + main(Ũ(G_{m-1}) ‖ D_l) )
//! ```
//!
//! for (m,l) ∈ {(2, n−1), (3, n)}, where Ũ is bilinear ×2 upsampling, ‖ is
//! channel concatenation, `main` is two 3×3 convolutions with a leaky ReLU
//! between, and `shortcut` is a 1×1 convolution. G₁, G₂, G₃ land at 1/4,
//! 1/2, and full label resolution, each squashed into (0,1) by a sigmoid so
//! downstream histogram losses always see valid intensities.
//!
//! The discriminator scores (candidate, speckle) pairs patch-wise: the two
//! images are concatenated channel-wise and passed through strided 4×4
//! convolutions, then a stride-1 convolution emits a logit grid at 1/8 of
//! the input extent (no sigmoid — losses take logits).
//!
//! Models own their parameters as plain tensors. Each forward pass
//! registers them in the caller's graph, either trainable (named, gradients
//! harvested by name) or frozen (constants: gradients flow through them but
//! are not computed for them), which is how one network trains against the
//! other held fixed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{BatchStats, Graph, Parameter, Real, Tensor, Var};

/// Negative-slope coefficient of every leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Batch-normalization stabilizer.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics update rate: `new = (1-m)·old + m·batch`.
pub const BN_MOMENTUM: f64 = 0.1;
/// Standard deviation of initial convolution weights.
pub const INIT_STD: f64 = 0.02;
/// Standard deviation of a unit normal truncated to [-2, 2]
/// (= sqrt(1 - 4·φ(2)/erf(√2))); initial draws are rescaled by it so the
/// post-truncation standard deviation equals the configured value.
const TRUNC2_STD: f64 = 0.879_625_7;

/// Whether batch normalization uses batch statistics (and reports them for
/// running-average updates) or fixed running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Draws from a normal with the given standard deviation, resampling any
/// value beyond two standard deviations, rescaled so the truncated sample
/// keeps standard deviation `std`.
fn truncated_normal<R: Real>(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<R> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            out.push(R::of(z * std / TRUNC2_STD));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// A convolution's parameters held outside any graph.
#[derive(Debug, Clone)]
pub(crate) struct Conv2d<R: Real> {
    pub weight: Parameter<R>,
    pub bias: Parameter<R>,
    stride: usize,
    pad: usize,
}

/// Graph handles of one registered convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvVars {
    w: Var,
    b: Var,
}

impl<R: Real> Conv2d<R> {
    fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = Tensor::new(
            &[out_ch, in_ch, k, k],
            truncated_normal(rng, INIT_STD, out_ch * in_ch * k * k),
        )
        .expect("weight element count matches its shape");
        Conv2d {
            weight: Parameter::new(format!("{name}.w"), weight, true),
            bias: Parameter::new(format!("{name}.b"), Tensor::zeros(&[out_ch]), true),
            stride,
            pad,
        }
    }

    fn register(&self, g: &mut Graph<R>, trainable: bool) -> Result<ConvVars> {
        let (w, b) = if trainable {
            (
                g.param(&self.weight.name, &self.weight.value)?,
                g.param(&self.bias.name, &self.bias.value)?,
            )
        } else {
            (
                g.param_frozen(&self.weight.value)?,
                g.param_frozen(&self.bias.value)?,
            )
        };
        Ok(ConvVars { w, b })
    }

    fn apply(&self, g: &mut Graph<R>, vars: ConvVars, x: Var) -> Result<Var> {
        g.conv2d(x, vars.w, Some(vars.b), self.stride, self.pad)
    }
}

/// Batch-normalization parameters and running statistics.
#[derive(Debug, Clone)]
pub(crate) struct BatchNorm2d<R: Real> {
    name: String,
    pub gamma: Parameter<R>,
    pub beta: Parameter<R>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BnVars {
    gamma: Var,
    beta: Var,
}

impl<R: Real> BatchNorm2d<R> {
    fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            name: name.to_string(),
            gamma: Parameter::new(format!("{name}.g"), Tensor::filled(&[channels], R::of(1.0)), true),
            beta: Parameter::new(format!("{name}.b"), Tensor::zeros(&[channels]), true),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    fn register(&self, g: &mut Graph<R>, trainable: bool) -> Result<BnVars> {
        let (gamma, beta) = if trainable {
            (
                g.param(&self.gamma.name, &self.gamma.value)?,
                g.param(&self.beta.name, &self.beta.value)?,
            )
        } else {
            (
                g.param_frozen(&self.gamma.value)?,
                g.param_frozen(&self.beta.value)?,
            )
        };
        Ok(BnVars { gamma, beta })
    }

    fn apply(
        &self,
        g: &mut Graph<R>,
        vars: BnVars,
        x: Var,
        mode: Mode,
        stats_out: &mut Vec<BatchStats<R>>,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (y, stats) = g.batchnorm_train(x, vars.gamma, vars.beta, BN_EPS)?;
                stats_out.push(stats);
                Ok(y)
            }
            Mode::Eval => g.batchnorm_eval(
                x,
                vars.gamma,
                vars.beta,
                &self.running_mean,
                &self.running_var,
                BN_EPS,
            ),
        }
    }

    fn update_running(&mut self, stats: &BatchStats<R>) {
        // Results are snapped to the model's arithmetic precision so that
        // in-memory state always round-trips exactly through checkpoint
        // files (which hold single-precision payloads).
        for (rm, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *rm = R::of((1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m.as_f64()).as_f64();
        }
        for (rv, v) in self.running_var.iter_mut().zip(&stats.var) {
            *rv = R::of((1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * v.as_f64()).as_f64();
        }
    }
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

/// Generator architecture description.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Input (speckle) and output (label) extent; images are square.
    pub extent: usize,
    /// Encoder output channels per downsampling, shallow to deep.
    pub encoder_channels: Vec<usize>,
    /// Decoder output channels per upsampling, deep to shallow. Must match
    /// the encoder depth; [`GeneratorConfig::mirrored_decoder`] builds the
    /// conventional mirror of an encoder schedule.
    pub decoder_channels: Vec<usize>,
    /// Hidden width of each refinement stage's main path (three stages).
    pub refine_channels: Vec<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let encoder = vec![32, 64, 128, 256, 256, 256];
        let decoder = Self::mirrored_decoder(&encoder);
        GeneratorConfig {
            extent: 64,
            encoder_channels: encoder,
            decoder_channels: decoder,
            refine_channels: vec![32, 32, 32],
        }
    }
}

impl GeneratorConfig {
    /// The decoder schedule mirroring an encoder schedule: each decoder
    /// layer restores the extent of the encoder feature it fuses with, and
    /// the full-resolution layer reuses the shallowest width.
    pub fn mirrored_decoder(encoder: &[usize]) -> Vec<usize> {
        let n = encoder.len();
        let mut dec: Vec<usize> = (0..n.saturating_sub(1)).map(|j| encoder[n - 2 - j]).collect();
        if n > 0 {
            dec.push(encoder[0]);
        }
        dec
    }

    /// Depth (number of downsamplings).
    pub fn depth(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Recovers the architecture from saved state entries (weight shapes
    /// fix every channel count; the extent comes from the caller, e.g. a
    /// dataset header).
    pub fn from_state_entries(
        extent: usize,
        entries: &[(String, Vec<usize>, Vec<f64>)],
    ) -> Result<Self> {
        let out_channels = |pattern: &dyn Fn(usize) -> String| -> Result<Vec<usize>> {
            let mut widths = Vec::new();
            for i in 1.. {
                let name = pattern(i);
                match entries.iter().find(|(n, _, _)| *n == name) {
                    Some((_, shape, _)) if shape.len() == 4 => widths.push(shape[0]),
                    Some((name, shape, _)) => {
                        return Err(Error::Contract(format!(
                            "state entry {name:?} has shape {shape:?}, expected 4-D weights"
                        )))
                    }
                    None => break,
                }
            }
            Ok(widths)
        };
        let cfg = GeneratorConfig {
            extent,
            encoder_channels: out_channels(&|i| format!("g.enc{i}.w"))?,
            decoder_channels: out_channels(&|i| format!("g.dec{i}.w"))?,
            refine_channels: out_channels(&|i| format!("g.ref{i}.m1.w"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.depth();
        if n < 4 {
            return Err(Error::Config(format!(
                "generator needs at least 4 encoder layers so the refinement \
                 chain has four decoder layers to attach to, got {n}"
            )));
        }
        if self.decoder_channels.len() != n {
            return Err(Error::Config(format!(
                "decoder depth {} does not mirror encoder depth {n}",
                self.decoder_channels.len()
            )));
        }
        if self.refine_channels.len() != 3 {
            return Err(Error::Config(format!(
                "exactly 3 refinement stages are built, got {} widths",
                self.refine_channels.len()
            )));
        }
        if self
            .encoder_channels
            .iter()
            .chain(&self.decoder_channels)
            .chain(&self.refine_channels)
            .any(|&c| c == 0)
        {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let div = 1usize << n;
        if self.extent == 0 || self.extent % div != 0 {
            return Err(Error::Config(format!(
                "extent {} is not divisible by 2^{n} = {div}",
                self.extent
            )));
        }
        Ok(())
    }
}

/// One residual refinement stage: upsamples the incoming refined features,
/// concatenates them with the decoder features at the new extent, and adds
/// a two-convolution main path onto a 1×1 shortcut before the sigmoid.
#[derive(Debug, Clone)]
pub(crate) struct RefineStage<R: Real> {
    main1: Conv2d<R>,
    main2: Conv2d<R>,
    shortcut: Conv2d<R>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct RefineVars {
    main1: ConvVars,
    main2: ConvVars,
    shortcut: ConvVars,
}

impl<R: Real> RefineStage<R> {
    fn new(name: &str, in_ch: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        RefineStage {
            main1: Conv2d::new(&format!("{name}.m1"), in_ch, width, 3, 1, 1, rng),
            main2: Conv2d::new(&format!("{name}.m2"), width, 1, 3, 1, 1, rng),
            shortcut: Conv2d::new(&format!("{name}.sc"), in_ch, 1, 1, 1, 0, rng),
        }
    }

    fn register(&self, g: &mut Graph<R>, trainable: bool) -> Result<RefineVars> {
        Ok(RefineVars {
            main1: self.main1.register(g, trainable)?,
            main2: self.main2.register(g, trainable)?,
            shortcut: self.shortcut.register(g, trainable)?,
        })
    }

    /// Applies the stage to already-upsampled-and-concatenated features;
    /// returns (pre-sigmoid residual sum, sigmoid output).
    fn apply(&self, g: &mut Graph<R>, vars: RefineVars, joined: Var) -> Result<(Var, Var)> {
        let h = self.main1.apply(g, vars.main1, joined)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE)?;
        let main = self.main2.apply(g, vars.main2, h)?;
        let sc = self.shortcut.apply(g, vars.shortcut, joined)?;
        let sum = g.add(main, sc)?;
        let out = g.sigmoid(sum)?;
        Ok((sum, out))
    }
}

/// The three generator outputs of one forward pass, plus the batch
/// statistics collected by train-mode normalization layers (feed them back
/// via [`Generator::absorb_batch_stats`] once per optimization step).
#[derive(Debug)]
pub struct GeneratorOutputs<R: Real> {
    /// Quarter-resolution output in (0,1).
    pub g1: Var,
    /// Half-resolution output in (0,1).
    pub g2: Var,
    /// Full-resolution output in (0,1) — the prediction.
    pub g3: Var,
    /// Batch statistics in normalization-layer order (empty in eval mode).
    pub stats: Vec<BatchStats<R>>,
}

/// U-Net generator with three refinement outputs.
#[derive(Debug, Clone)]
pub struct Generator<R: Real> {
    cfg: GeneratorConfig,
    enc: Vec<Conv2d<R>>,
    enc_bn: Vec<BatchNorm2d<R>>, // one per encoder layer after the first
    dec: Vec<Conv2d<R>>,
    dec_bn: Vec<BatchNorm2d<R>>, // one per decoder layer
    refine: Vec<RefineStage<R>>,
}

impl<R: Real> Generator<R> {
    /// Builds a generator with deterministic seeded initialization:
    /// truncated-normal convolution weights, zero biases, unit-gain
    /// normalization. The same seed yields bit-identical parameters.
    pub fn new(cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.depth();
        let enc_ch = &cfg.encoder_channels;
        let dec_ch = &cfg.decoder_channels;

        let mut enc = Vec::with_capacity(n);
        let mut enc_bn = Vec::with_capacity(n - 1);
        for i in 0..n {
            let in_ch = if i == 0 { 1 } else { enc_ch[i - 1] };
            enc.push(Conv2d::new(
                &format!("g.enc{}", i + 1),
                in_ch,
                enc_ch[i],
                4,
                2,
                1,
                &mut rng,
            ));
            if i > 0 {
                enc_bn.push(BatchNorm2d::new(&format!("g.enc{}.bn", i + 1), enc_ch[i]));
            }
        }

        let mut dec = Vec::with_capacity(n);
        let mut dec_bn = Vec::with_capacity(n);
        for j in 0..n {
            let prev_ch = if j == 0 { enc_ch[n - 1] } else { dec_ch[j - 1] };
            let in_ch = if j < n - 1 {
                prev_ch + enc_ch[n - 2 - j]
            } else {
                prev_ch
            };
            dec.push(Conv2d::new(
                &format!("g.dec{}", j + 1),
                in_ch,
                dec_ch[j],
                3,
                1,
                1,
                &mut rng,
            ));
            dec_bn.push(BatchNorm2d::new(&format!("g.dec{}.bn", j + 1), dec_ch[j]));
        }

        let mut refine = Vec::with_capacity(3);
        for m in 0..3 {
            let prev_ch = if m == 0 { dec_ch[n - 4] } else { 1 };
            let in_ch = prev_ch + dec_ch[n - 3 + m];
            refine.push(RefineStage::new(
                &format!("g.ref{}", m + 1),
                in_ch,
                cfg.refine_channels[m],
                &mut rng,
            ));
        }

        Ok(Generator {
            cfg: cfg.clone(),
            enc,
            enc_bn,
            dec,
            dec_bn,
            refine,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Forward pass over a `[B,1,extent,extent]` speckle batch. With
    /// `trainable` the parameters register by name and receive gradients;
    /// otherwise they enter the graph as frozen constants.
    pub fn forward(
        &self,
        g: &mut Graph<R>,
        x: Var,
        mode: Mode,
        trainable: bool,
    ) -> Result<GeneratorOutputs<R>> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != 1 || h != self.cfg.extent || w != self.cfg.extent {
            return Err(Error::Shape(format!(
                "generator expects [B,1,{0},{0}] input, got [B,{c},{h},{w}]",
                self.cfg.extent
            )));
        }
        let n = self.cfg.depth();
        let mut stats = Vec::new();

        // Encoder: strided convolutions, leaky ReLU, normalization after
        // every layer except the first.
        let mut feats = Vec::with_capacity(n);
        let mut cur = x;
        for i in 0..n {
            let vars = self.enc[i].register(g, trainable)?;
            cur = self.enc[i].apply(g, vars, cur)?;
            if i > 0 {
                let bnv = self.enc_bn[i - 1].register(g, trainable)?;
                cur = self.enc_bn[i - 1].apply(g, bnv, cur, mode, &mut stats)?;
            }
            cur = g.leaky_relu(cur, LEAKY_SLOPE)?;
            feats.push(cur);
        }

        // Decoder: upsample, fuse the mirrored encoder feature, convolve,
        // normalize, ReLU. The full-resolution layer has no skip (there is
        // no encoder feature at input extent).
        let mut douts = Vec::with_capacity(n);
        let mut cur = feats[n - 1];
        for j in 0..n {
            let up = g.upsample_bilinear_x2(cur)?;
            let fused = if j < n - 1 {
                g.concat_channels(&[up, feats[n - 2 - j]])?
            } else {
                up
            };
            let vars = self.dec[j].register(g, trainable)?;
            let conv = self.dec[j].apply(g, vars, fused)?;
            let bnv = self.dec_bn[j].register(g, trainable)?;
            let normed = self.dec_bn[j].apply(g, bnv, conv, mode, &mut stats)?;
            cur = g.relu(normed)?;
            douts.push(cur);
        }

        // Refinement chain over the last four decoder layers.
        let mut prev = douts[n - 4];
        let mut outs = Vec::with_capacity(3);
        for m in 0..3 {
            let skip = douts[n - 3 + m];
            let up = g.upsample_bilinear_x2(prev)?;
            let joined = g.concat_channels(&[up, skip])?;
            let vars = self.refine[m].register(g, trainable)?;
            let (_, out) = self.refine[m].apply(g, vars, joined)?;
            outs.push(out);
            prev = out;
        }

        Ok(GeneratorOutputs {
            g1: outs[0],
            g2: outs[1],
            g3: outs[2],
            stats,
        })
    }

    /// Reconstructs a single speckle image in eval mode (fixed statistics).
    pub fn reconstruct(&self, speckle: &Image) -> Result<Image> {
        let mut g = Graph::<R>::new();
        let x = g.constant(speckle.to_tensor())?;
        let outs = self.forward(&mut g, x, Mode::Eval, false)?;
        Image::from_tensor(g.value(outs.g3), 0)
    }

    /// Rebuilds a generator from its own state entries (the `g.`-prefixed
    /// model entries of a checkpoint) at the given extent.
    pub fn from_state(
        extent: usize,
        entries: &[(String, Vec<usize>, Vec<f64>)],
    ) -> Result<Self> {
        let cfg = GeneratorConfig::from_state_entries(extent, entries)?;
        let mut gen = Generator::new(&cfg, 0)?;
        gen.set_state(entries)?;
        Ok(gen)
    }

    fn bns_mut(&mut self) -> Vec<&mut BatchNorm2d<R>> {
        self.enc_bn.iter_mut().chain(self.dec_bn.iter_mut()).collect()
    }

    fn bns(&self) -> Vec<&BatchNorm2d<R>> {
        self.enc_bn.iter().chain(self.dec_bn.iter()).collect()
    }

    /// Applies one forward pass's batch statistics to the running averages,
    /// in the same normalization-layer order the forward collected them.
    pub fn absorb_batch_stats(&mut self, stats: &[BatchStats<R>]) -> Result<()> {
        let mut bns = self.bns_mut();
        if stats.len() != bns.len() {
            return Err(Error::Contract(format!(
                "{} batch-stat sets for {} normalization layers",
                stats.len(),
                bns.len()
            )));
        }
        for (bn, s) in bns.iter_mut().zip(stats) {
            bn.update_running(s);
        }
        Ok(())
    }

    /// All trainable parameters in fixed registration order.
    pub fn params(&self) -> Vec<&Parameter<R>> {
        let mut out = Vec::new();
        let n = self.cfg.depth();
        for i in 0..n {
            out.push(&self.enc[i].weight);
            out.push(&self.enc[i].bias);
            if i > 0 {
                out.push(&self.enc_bn[i - 1].gamma);
                out.push(&self.enc_bn[i - 1].beta);
            }
        }
        for j in 0..n {
            out.push(&self.dec[j].weight);
            out.push(&self.dec[j].bias);
            out.push(&self.dec_bn[j].gamma);
            out.push(&self.dec_bn[j].beta);
        }
        for st in &self.refine {
            out.push(&st.main1.weight);
            out.push(&st.main1.bias);
            out.push(&st.main2.weight);
            out.push(&st.main2.bias);
            out.push(&st.shortcut.weight);
            out.push(&st.shortcut.bias);
        }
        out
    }

    /// Mutable view of the trainable parameters, same order as
    /// [`Generator::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Parameter<R>> {
        let n = self.cfg.depth();
        let mut out: Vec<&mut Parameter<R>> = Vec::new();
        let (enc, enc_bn, dec, dec_bn, refine) = (
            &mut self.enc,
            &mut self.enc_bn,
            &mut self.dec,
            &mut self.dec_bn,
            &mut self.refine,
        );
        let mut bn_iter = enc_bn.iter_mut();
        for (i, layer) in enc.iter_mut().enumerate().take(n) {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
            if i > 0 {
                let bn = bn_iter.next().expect("one bn per non-first encoder layer");
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        for (layer, bn) in dec.iter_mut().zip(dec_bn.iter_mut()) {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        for st in refine.iter_mut() {
            out.push(&mut st.main1.weight);
            out.push(&mut st.main1.bias);
            out.push(&mut st.main2.weight);
            out.push(&mut st.main2.bias);
            out.push(&mut st.shortcut.weight);
            out.push(&mut st.shortcut.bias);
        }
        out
    }

    /// Loads harvested gradients (name, tensor) into the parameters,
    /// replacing previous gradients. Order and names must match
    /// [`Generator::params`].
    pub fn load_grads(&mut self, grads: &[(String, Tensor<R>)]) -> Result<()> {
        load_grads_into(&mut self.params_mut(), grads)
    }

    /// Full persistent state: parameters plus running statistics.
    pub fn state(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = self
            .params()
            .into_iter()
            .map(|p| {
                (
                    p.name.clone(),
                    p.value.shape().to_vec(),
                    p.value.data().iter().map(|v| v.as_f64()).collect(),
                )
            })
            .collect();
        for bn in self.bns() {
            out.push((
                format!("{}.rm", bn.name),
                vec![bn.running_mean.len()],
                bn.running_mean.clone(),
            ));
            out.push((
                format!("{}.rv", bn.name),
                vec![bn.running_var.len()],
                bn.running_var.clone(),
            ));
        }
        out
    }

    /// Restores state saved by [`Generator::state`]; entry names, order,
    /// and shapes must match this model's architecture.
    pub fn set_state(&mut self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let expected = self.state();
        if entries.len() != expected.len() {
            return Err(Error::Contract(format!(
                "state has {} entries, model needs {}",
                entries.len(),
                expected.len()
            )));
        }
        for ((name, shape, _), (ename, eshape, _)) in entries.iter().zip(&expected) {
            if name != ename || shape != eshape {
                return Err(Error::Contract(format!(
                    "state entry {name:?} {shape:?} does not match expected {ename:?} {eshape:?}"
                )));
            }
        }
        let n_params = self.params().len();
        {
            let mut params = self.params_mut();
            for (p, (_, shape, data)) in params.iter_mut().zip(&entries[..n_params]) {
                p.value = Tensor::from_f64(shape, data)?;
            }
        }
        let mut bns = self.bns_mut();
        for (i, bn) in bns.iter_mut().enumerate() {
            bn.running_mean = entries[n_params + 2 * i].2.clone();
            bn.running_var = entries[n_params + 2 * i + 1].2.clone();
        }
        Ok(())
    }
}

fn load_grads_into<R: Real>(
    params: &mut [&mut Parameter<R>],
    grads: &[(String, Tensor<R>)],
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, (name, g)) in params.iter_mut().zip(grads) {
        if name != &p.name {
            return Err(Error::Contract(format!(
                "gradient {name:?} does not match parameter {:?} at its position",
                p.name
            )));
        }
        p.zero_grad();
        p.accumulate_grad(g)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

/// Patch-discriminator architecture description.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Extent of the (candidate, speckle) input pair.
    pub extent: usize,
    /// Channels of the strided layers; the logit grid side is
    /// `extent / 2^len`.
    pub channels: Vec<usize>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            extent: 64,
            channels: vec![32, 64, 128],
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(
                "discriminator needs at least one strided layer with positive channels".into(),
            ));
        }
        let div = 1usize << self.channels.len();
        if self.extent == 0 || self.extent % div != 0 {
            return Err(Error::Config(format!(
                "extent {} is not divisible by 2^{} = {div}",
                self.extent,
                self.channels.len()
            )));
        }
        Ok(())
    }

    /// Side of the output logit grid.
    pub fn logit_extent(&self) -> usize {
        self.extent >> self.channels.len()
    }
}

/// Graph handles of one registered discriminator.
#[derive(Debug, Clone)]
pub struct DiscriminatorVars {
    convs: Vec<ConvVars>,
    bns: Vec<BnVars>,
    logit: ConvVars,
}

/// Conditional patch discriminator over (candidate, speckle) pairs.
#[derive(Debug, Clone)]
pub struct Discriminator<R: Real> {
    cfg: DiscriminatorConfig,
    convs: Vec<Conv2d<R>>,
    bns: Vec<BatchNorm2d<R>>, // one per strided layer after the first
    logit: Conv2d<R>,
}

impl<R: Real> Discriminator<R> {
    /// Seeded deterministic initialization, like [`Generator::new`].
    pub fn new(cfg: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(cfg.channels.len());
        let mut bns = Vec::with_capacity(cfg.channels.len().saturating_sub(1));
        for (i, &ch) in cfg.channels.iter().enumerate() {
            let in_ch = if i == 0 { 2 } else { cfg.channels[i - 1] };
            convs.push(Conv2d::new(
                &format!("d.conv{}", i + 1),
                in_ch,
                ch,
                4,
                2,
                1,
                &mut rng,
            ));
            if i > 0 {
                bns.push(BatchNorm2d::new(&format!("d.conv{}.bn", i + 1), ch));
            }
        }
        // Stride-1 logit head; 3x3 with padding 1 keeps the grid at
        // extent / 2^len (an even-sized stride-1 kernel cannot, with
        // symmetric padding).
        let logit = Conv2d::new(
            "d.logit",
            *cfg.channels.last().expect("validated nonempty"),
            1,
            3,
            1,
            1,
            &mut rng,
        );
        Ok(Discriminator {
            cfg: cfg.clone(),
            convs,
            bns,
            logit,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    /// Registers the parameters once per graph; the returned handles can
    /// score several batches (e.g. a real pair and a generated pair).
    pub fn register(&self, g: &mut Graph<R>, trainable: bool) -> Result<DiscriminatorVars> {
        // Registration order must mirror params() so that gradients read
        // back from the graph line up with the parameter list.
        let mut convs = Vec::with_capacity(self.convs.len());
        let mut bns = Vec::with_capacity(self.bns.len());
        for (i, conv) in self.convs.iter().enumerate() {
            convs.push(conv.register(g, trainable)?);
            if i > 0 {
                bns.push(self.bns[i - 1].register(g, trainable)?);
            }
        }
        Ok(DiscriminatorVars {
            convs,
            bns,
            logit: self.logit.register(g, trainable)?,
        })
    }

    /// Scores one (candidate, speckle) pair batch; returns the logit grid
    /// `[B,1,extent/2^len,extent/2^len]` and any batch statistics.
    pub fn apply(
        &self,
        g: &mut Graph<R>,
        vars: &DiscriminatorVars,
        candidate: Var,
        speckle: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<BatchStats<R>>)> {
        for (what, v) in [("candidate", candidate), ("speckle", speckle)] {
            let (_, c, h, w) = g.value(v).dims4()?;
            if c != 1 || h != self.cfg.extent || w != self.cfg.extent {
                return Err(Error::Shape(format!(
                    "discriminator {what} must be [B,1,{0},{0}], got [B,{c},{h},{w}]",
                    self.cfg.extent
                )));
            }
        }
        let mut stats = Vec::new();
        let mut cur = g.concat_channels(&[candidate, speckle])?;
        for (i, conv) in self.convs.iter().enumerate() {
            cur = conv.apply(g, vars.convs[i], cur)?;
            if i > 0 {
                cur = self.bns[i - 1].apply(g, vars.bns[i - 1], cur, mode, &mut stats)?;
            }
            cur = g.leaky_relu(cur, LEAKY_SLOPE)?;
        }
        let logits = self.logit.apply(g, vars.logit, cur)?;
        Ok((logits, stats))
    }

    /// Register-and-score convenience for single-batch use.
    pub fn forward(
        &self,
        g: &mut Graph<R>,
        candidate: Var,
        speckle: Var,
        mode: Mode,
        trainable: bool,
    ) -> Result<(Var, Vec<BatchStats<R>>)> {
        let vars = self.register(g, trainable)?;
        self.apply(g, &vars, candidate, speckle, mode)
    }

    /// Applies batch statistics (one set per normalization layer per
    /// scored batch, concatenated in scoring order) to the running
    /// averages.
    pub fn absorb_batch_stats(&mut self, stats: &[BatchStats<R>]) -> Result<()> {
        if self.bns.is_empty() {
            return Ok(());
        }
        if stats.is_empty() || stats.len() % self.bns.len() != 0 {
            return Err(Error::Contract(format!(
                "{} batch-stat sets for {} normalization layers",
                stats.len(),
                self.bns.len()
            )));
        }
        let n = self.bns.len();
        for (i, s) in stats.iter().enumerate() {
            self.bns[i % n].update_running(s);
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Parameter<R>> {
        let mut out = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            out.push(&conv.weight);
            out.push(&conv.bias);
            if i > 0 {
                out.push(&self.bns[i - 1].gamma);
                out.push(&self.bns[i - 1].beta);
            }
        }
        out.push(&self.logit.weight);
        out.push(&self.logit.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<R>> {
        let mut out: Vec<&mut Parameter<R>> = Vec::new();
        let mut bn_iter = self.bns.iter_mut();
        for (i, conv) in self.convs.iter_mut().enumerate() {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
            if i > 0 {
                let bn = bn_iter.next().expect("one bn per non-first layer");
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out.push(&mut self.logit.weight);
        out.push(&mut self.logit.bias);
        out
    }

    pub fn load_grads(&mut self, grads: &[(String, Tensor<R>)]) -> Result<()> {
        load_grads_into(&mut self.params_mut(), grads)
    }

    pub fn state(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = self
            .params()
            .into_iter()
            .map(|p| {
                (
                    p.name.clone(),
                    p.value.shape().to_vec(),
                    p.value.data().iter().map(|v| v.as_f64()).collect(),
                )
            })
            .collect();
        for bn in &self.bns {
            out.push((
                format!("{}.rm", bn.name),
                vec![bn.running_mean.len()],
                bn.running_mean.clone(),
            ));
            out.push((
                format!("{}.rv", bn.name),
                vec![bn.running_var.len()],
                bn.running_var.clone(),
            ));
        }
        out
    }

    pub fn set_state(&mut self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let expected = self.state();
        if entries.len() != expected.len() {
            return Err(Error::Contract(format!(
                "state has {} entries, model needs {}",
                entries.len(),
                expected.len()
            )));
        }
        for ((name, shape, _), (ename, eshape, _)) in entries.iter().zip(&expected) {
            if name != ename || shape != eshape {
                return Err(Error::Contract(format!(
                    "state entry {name:?} {shape:?} does not match expected {ename:?} {eshape:?}"
                )));
            }
        }
        let n_params = self.params().len();
        {
            let mut params = self.params_mut();
            for (p, (_, shape, data)) in params.iter_mut().zip(&entries[..n_params]) {
                p.value = Tensor::from_f64(shape, data)?;
            }
        }
        for (i, bn) in self.bns.iter_mut().enumerate() {
            bn.running_mean = entries[n_params + 2 * i].2.clone();
            bn.running_var = entries[n_params + 2 * i + 1].2.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::HashMap;

    fn tiny_gen_config() -> GeneratorConfig {
        GeneratorConfig {
            extent: 16,
            encoder_channels: vec![2, 2, 2, 2],
            decoder_channels: vec![2, 2, 2, 2],
            refine_channels: vec![2, 2, 2],
        }
    }

    fn unit_batch(b: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            &[b, 1, h, w],
            (0..b * h * w).map(|_| r.gen_range(0.05..0.95)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation_rejects_bad_geometry() {
        let mut c = tiny_gen_config();
        c.extent = 20; // not divisible by 2^4
        assert!(c.validate().is_err());
        let mut c = tiny_gen_config();
        c.encoder_channels = vec![2, 2, 2]; // too shallow for the chain
        c.decoder_channels = vec![2, 2, 2];
        assert!(c.validate().is_err());
        let mut c = tiny_gen_config();
        c.decoder_channels = vec![2, 2];
        assert!(c.validate().is_err());
        let mut c = tiny_gen_config();
        c.refine_channels = vec![2, 2];
        assert!(c.validate().is_err());
        assert!(GeneratorConfig::default().validate().is_ok());
    }

    #[test]
    fn mirrored_decoder_reverses_and_repeats_shallowest() {
        assert_eq!(
            GeneratorConfig::mirrored_decoder(&[32, 64, 128, 256, 256, 256]),
            vec![256, 256, 128, 64, 32, 32]
        );
        assert_eq!(GeneratorConfig::default().decoder_channels, vec![
            256, 256, 128, 64, 32, 32
        ]);
    }

    #[test]
    fn output_shape_chain_is_quarter_half_full() {
        for (cfg, b) in [
            (tiny_gen_config(), 2usize),
            (
                GeneratorConfig {
                    extent: 32,
                    encoder_channels: vec![4, 4, 8, 8, 8],
                    decoder_channels: GeneratorConfig::mirrored_decoder(&[4, 4, 8, 8, 8]),
                    refine_channels: vec![4, 4, 4],
                },
                2,
            ),
        ] {
            let gen = Generator::<f64>::new(&cfg, 1).unwrap();
            let mut g = Graph::<f64>::new();
            let x = g.constant(unit_batch(b, cfg.extent, cfg.extent, 5)).unwrap();
            let outs = gen.forward(&mut g, x, Mode::Train, false).unwrap();
            let l = cfg.extent;
            assert_eq!(g.value(outs.g1).shape(), &[b, 1, l / 4, l / 4]);
            assert_eq!(g.value(outs.g2).shape(), &[b, 1, l / 2, l / 2]);
            assert_eq!(g.value(outs.g3).shape(), &[b, 1, l, l]);
            // Sigmoid keeps every output strictly inside (0,1).
            for v in [outs.g1, outs.g2, outs.g3] {
                assert!(g
                    .value(v)
                    .data()
                    .iter()
                    .all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }

    #[test]
    fn input_extent_mismatch_is_rejected() {
        let gen = Generator::<f64>::new(&tiny_gen_config(), 1).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.constant(unit_batch(1, 32, 32, 5)).unwrap();
        assert!(matches!(
            gen.forward(&mut g, x, Mode::Eval, false),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dead_network_outputs_one_half_everywhere() {
        let mut gen = Generator::<f64>::new(&tiny_gen_config(), 2).unwrap();
        for p in gen.params_mut() {
            if !p.name.ends_with(".g") {
                for v in p.value.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut g = Graph::<f64>::new();
        let x = g.constant(unit_batch(2, 16, 16, 9)).unwrap();
        let outs = gen.forward(&mut g, x, Mode::Train, false).unwrap();
        for v in [outs.g1, outs.g2, outs.g3] {
            for &p in g.value(v).data() {
                assert!((p - 0.5).abs() < 1e-15, "got {p}");
            }
        }
    }

    #[test]
    fn same_seed_reproduces_state_different_seed_does_not() {
        let cfg = tiny_gen_config();
        let a = Generator::<f64>::new(&cfg, 7).unwrap();
        let b = Generator::<f64>::new(&cfg, 7).unwrap();
        let c = Generator::<f64>::new(&cfg, 8).unwrap();
        let (sa, sb, sc) = (a.state(), b.state(), c.state());
        assert_eq!(sa, sb);
        let max_delta = sa
            .iter()
            .zip(&sc)
            .flat_map(|((_, _, x), (_, _, y))| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
            .fold(0.0f64, f64::max);
        assert!(max_delta > 0.0);
    }

    #[test]
    fn initial_weight_spread_matches_target() {
        let gen = Generator::<f64>::new(&GeneratorConfig::default(), 11).unwrap();
        let mut vals = Vec::new();
        for p in gen.params() {
            if p.name.ends_with(".w") {
                vals.extend(p.value.data().iter().copied());
                if vals.len() >= 20_000 {
                    break;
                }
            }
        }
        assert!(vals.len() >= 10_000);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / vals.len() as f64;
        let std = var.sqrt();
        assert!(
            (std - INIT_STD).abs() / INIT_STD < 0.10,
            "sample std {std} vs {INIT_STD}"
        );
        // Truncation bound: rescaled draws stay within 2/TRUNC2_STD
        // standard deviations.
        let lim = 2.0 * INIT_STD / TRUNC2_STD + 1e-12;
        assert!(vals.iter().all(|v| v.abs() <= lim));
        // Biases start at zero.
        for p in gen.params() {
            if p.name.ends_with(".b") && !p.name.contains(".bn") {
                assert!(p.value.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn residual_stage_reduces_to_shortcut_when_main_is_zeroed() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut stage = RefineStage::<f64>::new("t", 3, 4, &mut rng);
        for v in stage.main2.weight.value.data_mut() {
            *v = 0.0;
        }
        for v in stage.main2.bias.value.data_mut() {
            *v = 0.0;
        }
        let mut g = Graph::<f64>::new();
        let joined = g
            .variable(Tensor::new(
                &[1, 3, 4, 4],
                (0..48).map(|i| (i as f64 * 0.37).sin()).collect(),
            ).unwrap())
            .unwrap();
        let vars = stage.register(&mut g, false).unwrap();
        let (sum, out) = stage.apply(&mut g, vars, joined).unwrap();

        // Independent 1x1 convolution over the same input.
        let w = stage.shortcut.weight.value.data();
        let b = stage.shortcut.bias.value.data()[0];
        let x = g.value(joined).data().to_vec();
        let sum_got = g.value(sum).data().to_vec();
        let out_got = g.value(out).data().to_vec();
        for y in 0..4 {
            for xi in 0..4 {
                let mut acc = b;
                for c in 0..3 {
                    acc += w[c] * x[(c * 4 + y) * 4 + xi];
                }
                let idx = y * 4 + xi;
                assert!((sum_got[idx] - acc).abs() < 1e-12);
                let sig = 1.0 / (1.0 + (-acc).exp());
                assert!((out_got[idx] - sig).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn discriminator_logit_grid_is_one_eighth_extent() {
        let cfg = DiscriminatorConfig::default();
        assert_eq!(cfg.logit_extent(), 8);
        let d = Discriminator::<f64>::new(&cfg, 3).unwrap();
        let mut g = Graph::<f64>::new();
        let cand = g.constant(unit_batch(2, 64, 64, 31)).unwrap();
        let spk = g.constant(unit_batch(2, 64, 64, 32)).unwrap();
        let (logits, _) = d.forward(&mut g, cand, spk, Mode::Train, false).unwrap();
        assert_eq!(g.value(logits).shape(), &[2, 1, 8, 8]);
    }

    #[test]
    fn zero_weight_discriminator_scores_ln2_bce() {
        let cfg = DiscriminatorConfig {
            extent: 16,
            channels: vec![2, 2, 2],
        };
        let mut d = Discriminator::<f64>::new(&cfg, 4).unwrap();
        for p in d.params_mut() {
            if !p.name.ends_with(".g") {
                for v in p.value.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut g = Graph::<f64>::new();
        let cand = g.constant(unit_batch(2, 16, 16, 41)).unwrap();
        let spk = g.constant(unit_batch(2, 16, 16, 42)).unwrap();
        let (logits, _) = d.forward(&mut g, cand, spk, Mode::Train, false).unwrap();
        assert!(g.value(logits).data().iter().all(|&v| v == 0.0));
        let bce = g.bce_with_logits(logits, 1.0).unwrap();
        assert!((g.value(bce).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn every_generator_parameter_receives_gradient_from_total_loss() {
        use crate::hcu::KernelBank;
        use crate::losses;

        let gen = Generator::<f64>::new(&tiny_gen_config(), 5).unwrap();
        let dcfg = DiscriminatorConfig {
            extent: 16,
            channels: vec![2, 2, 2],
        };
        let disc = Discriminator::<f64>::new(&dcfg, 6).unwrap();
        let bank = KernelBank::new(32, 0.02).unwrap();
        let sscfg = losses::MsSsimConfig {
            scales: 2,
            exponents: vec![0.5, 0.5],
        };

        let mut g = Graph::<f64>::new();
        let x = g.constant(unit_batch(2, 16, 16, 51)).unwrap();
        let y = g.constant(unit_batch(2, 16, 16, 52)).unwrap();
        let outs = gen.forward(&mut g, x, Mode::Train, true).unwrap();
        let (logits, _) = disc.forward(&mut g, outs.g3, x, Mode::Train, false).unwrap();
        let adv = losses::adversarial_g_loss(&mut g, logits).unwrap();
        let (mi, _) = losses::mi_loss(&mut g, y, outs.g3, &bank).unwrap();
        let ssim =
            losses::ssim_loss_3scale(&mut g, outs.g1, outs.g2, outs.g3, y, &sscfg).unwrap();
        let total =
            losses::generator_total(&mut g, adv, mi, ssim, &losses::LossWeights::default())
                .unwrap();
        g.backward(total).unwrap();

        let grads = g.param_grads();
        assert_eq!(grads.len(), gen.params().len());
        for (name, t) in &grads {
            let max = t.data().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            assert!(max > 0.0, "parameter {name} received a zero gradient");
        }
    }

    #[test]
    fn frozen_discriminator_adds_no_named_parameters() {
        let gen = Generator::<f64>::new(&tiny_gen_config(), 5).unwrap();
        let dcfg = DiscriminatorConfig {
            extent: 16,
            channels: vec![2, 2, 2],
        };
        let disc = Discriminator::<f64>::new(&dcfg, 6).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.constant(unit_batch(2, 16, 16, 51)).unwrap();
        let outs = gen.forward(&mut g, x, Mode::Train, true).unwrap();
        let (logits, _) = disc.forward(&mut g, outs.g3, x, Mode::Train, false).unwrap();
        let adv = g.bce_with_logits(logits, 1.0).unwrap();
        g.backward(adv).unwrap();
        let names: Vec<String> = g.param_grads().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), gen.params().len());
        assert!(names.iter().all(|n| n.starts_with("g.")));
    }

    #[test]
    fn state_round_trips_and_rejects_mismatches() {
        let cfg = tiny_gen_config();
        let mut a = Generator::<f64>::new(&cfg, 13).unwrap();
        let b = Generator::<f64>::new(&cfg, 14).unwrap();
        let sb = b.state();
        a.set_state(&sb).unwrap();
        assert_eq!(a.state(), sb);
        // Wrong entry count.
        assert!(a.set_state(&sb[1..]).is_err());

        let dcfg = DiscriminatorConfig {
            extent: 16,
            channels: vec![2, 2, 2],
        };
        let mut da = Discriminator::<f64>::new(&dcfg, 13).unwrap();
        let db = Discriminator::<f64>::new(&dcfg, 15).unwrap();
        da.set_state(&db.state()).unwrap();
        assert_eq!(da.state(), db.state());
    }

    #[test]
    fn running_stats_blend_batch_statistics() {
        let mut gen = Generator::<f64>::new(&tiny_gen_config(), 17).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.constant(unit_batch(2, 16, 16, 61)).unwrap();
        let outs = gen.forward(&mut g, x, Mode::Train, false).unwrap();
        let first = outs.stats[0].clone();
        gen.absorb_batch_stats(&outs.stats).unwrap();
        let bn = &gen.bns()[0];
        for (c, rm) in bn.running_mean.iter().enumerate() {
            let expect = 0.9 * 0.0 + 0.1 * first.mean[c];
            assert!((rm - expect).abs() < 1e-12);
        }
        for (c, rv) in bn.running_var.iter().enumerate() {
            let expect = 0.9 * 1.0 + 0.1 * first.var[c];
            assert!((rv - expect).abs() < 1e-12);
        }
        // Wrong count is rejected.
        assert!(gen.absorb_batch_stats(&outs.stats[1..]).is_err());
    }

    // -----------------------------------------------------------------
    // Independent forward oracle: re-evaluates the tiny generator and
    // discriminator with plain nested loops from the published layer
    // recipe, sharing nothing with the graph implementation but the
    // parameter values.
    // -----------------------------------------------------------------

    type Arr = (Vec<usize>, Vec<f64>); // (shape [C,H,W] or [B,C,H,W] flattened per image, data)

    fn o_conv(x: &Arr, w: &[f64], ws: &[usize], b: &[f64], stride: usize, pad: usize) -> Arr {
        let (ci, h, wi) = (x.0[0], x.0[1], x.0[2]);
        let (co, kc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(kc, ci);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wi + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; co * oh * ow];
        for oc in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wi {
                                    acc += w[((oc * ci + ic) * kh + ky) * kw + kx]
                                        * x.1[(ic * h + iy as usize) * wi + ix as usize];
                                }
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        (vec![co, oh, ow], out)
    }

    fn o_bn_eval(x: &Arr, gamma: &[f64], beta: &[f64], rm: &[f64], rv: &[f64]) -> Arr {
        let (c, h, w) = (x.0[0], x.0[1], x.0[2]);
        let mut out = x.1.clone();
        for ci in 0..c {
            let inv = 1.0 / (rv[ci] + BN_EPS).sqrt();
            for v in out[ci * h * w..(ci + 1) * h * w].iter_mut() {
                *v = gamma[ci] * (*v - rm[ci]) * inv + beta[ci];
            }
        }
        (x.0.clone(), out)
    }

    fn o_lrelu(x: &Arr, slope: f64) -> Arr {
        (
            x.0.clone(),
            x.1.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect(),
        )
    }

    fn o_sigmoid(x: &Arr) -> Arr {
        (
            x.0.clone(),
            x.1.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
        )
    }

    fn o_up2(x: &Arr) -> Arr {
        let (c, h, w) = (x.0[0], x.0[1], x.0[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let axis = |n: usize, d: usize| -> (usize, usize, f64) {
            let s = ((d as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        };
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                let (y0, y1, fy) = axis(h, oy);
                for ox in 0..ow {
                    let (x0, x1, fx) = axis(w, ox);
                    let g = |yy: usize, xx: usize| x.1[(ci * h + yy) * w + xx];
                    let top = g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx;
                    let bot = g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx;
                    out[(ci * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        (vec![c, oh, ow], out)
    }

    fn o_cat(a: &Arr, b: &Arr) -> Arr {
        assert_eq!(&a.0[1..], &b.0[1..]);
        let mut data = a.1.clone();
        data.extend_from_slice(&b.1);
        (vec![a.0[0] + b.0[0], a.0[1], a.0[2]], data)
    }

    struct ParamMap(HashMap<String, (Vec<usize>, Vec<f64>)>);
    impl ParamMap {
        fn get(&self, name: &str) -> &(Vec<usize>, Vec<f64>) {
            self.0.get(name).unwrap_or_else(|| panic!("missing {name}"))
        }
        fn conv(&self, base: &str, x: &Arr, stride: usize, pad: usize) -> Arr {
            let (ws, w) = self.get(&format!("{base}.w"));
            let (_, b) = self.get(&format!("{base}.b"));
            o_conv(x, w, ws, b, stride, pad)
        }
        fn bn(&self, base: &str, x: &Arr) -> Arr {
            let (_, g) = self.get(&format!("{base}.g"));
            let (_, b) = self.get(&format!("{base}.b"));
            let (_, rm) = self.get(&format!("{base}.rm"));
            let (_, rv) = self.get(&format!("{base}.rv"));
            o_bn_eval(x, g, b, rm, rv)
        }
    }

    /// Seeds every running statistic with nontrivial values so eval-mode
    /// normalization is a real transform, not an identity.
    fn perturb_runnings(state: &mut [(String, Vec<usize>, Vec<f64>)], seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for (name, _, data) in state.iter_mut() {
            if name.ends_with(".rm") {
                for v in data.iter_mut() {
                    *v = r.gen_range(-0.3..0.3);
                }
            } else if name.ends_with(".rv") {
                for v in data.iter_mut() {
                    *v = r.gen_range(0.5..1.5);
                }
            }
        }
    }

    #[test]
    fn tiny_generator_matches_loop_oracle() {
        let cfg = tiny_gen_config();
        let mut gen = Generator::<f64>::new(&cfg, 23).unwrap();
        let mut st = gen.state();
        perturb_runnings(&mut st, 24);
        gen.set_state(&st).unwrap();
        let pm = ParamMap(st.into_iter().map(|(n, s, d)| (n, (s, d))).collect());

        let xt = unit_batch(1, 16, 16, 25);
        let mut g = Graph::<f64>::new();
        let x = g.constant(xt.clone()).unwrap();
        let outs = gen.forward(&mut g, x, Mode::Eval, false).unwrap();

        // --- independent re-evaluation -------------------------------
        let mut cur: Arr = (vec![1, 16, 16], xt.data().to_vec());
        let mut feats: Vec<Arr> = Vec::new();
        for i in 1..=4 {
            cur = pm.conv(&format!("g.enc{i}"), &cur, 2, 1);
            if i > 1 {
                cur = pm.bn(&format!("g.enc{i}.bn"), &cur);
            }
            cur = o_lrelu(&cur, LEAKY_SLOPE);
            feats.push(cur.clone());
        }
        let mut douts: Vec<Arr> = Vec::new();
        let mut cur = feats[3].clone();
        for j in 1..=4 {
            let up = o_up2(&cur);
            let fused = if j < 4 { o_cat(&up, &feats[3 - j]) } else { up };
            let conv = pm.conv(&format!("g.dec{j}"), &fused, 1, 1);
            let normed = pm.bn(&format!("g.dec{j}.bn"), &conv);
            cur = o_lrelu(&normed, 0.0); // plain ReLU
            douts.push(cur.clone());
        }
        let mut prev = douts[0].clone();
        let mut oracle_outs = Vec::new();
        for m in 1..=3 {
            let joined = o_cat(&o_up2(&prev), &douts[m]);
            let h = o_lrelu(&pm.conv(&format!("g.ref{m}.m1"), &joined, 1, 1), LEAKY_SLOPE);
            let main = pm.conv(&format!("g.ref{m}.m2"), &h, 1, 1);
            let sc = pm.conv(&format!("g.ref{m}.sc"), &joined, 1, 0);
            let sum: Vec<f64> = main.1.iter().zip(&sc.1).map(|(a, b)| a + b).collect();
            let out = o_sigmoid(&(main.0.clone(), sum));
            oracle_outs.push(out.clone());
            prev = out;
        }

        for (var, oracle) in [outs.g1, outs.g2, outs.g3].into_iter().zip(&oracle_outs) {
            let got = g.value(var).data();
            assert_eq!(got.len(), oracle.1.len());
            let max = got
                .iter()
                .zip(&oracle.1)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max < 1e-5, "max deviation {max}");
        }
    }

    #[test]
    fn tiny_discriminator_matches_loop_oracle() {
        let cfg = DiscriminatorConfig {
            extent: 16,
            channels: vec![2, 2, 2],
        };
        let mut d = Discriminator::<f64>::new(&cfg, 33).unwrap();
        let mut st = d.state();
        perturb_runnings(&mut st, 34);
        d.set_state(&st).unwrap();
        let pm = ParamMap(st.into_iter().map(|(n, s, d)| (n, (s, d))).collect());

        let cand_t = unit_batch(1, 16, 16, 35);
        let spk_t = unit_batch(1, 16, 16, 36);
        let mut g = Graph::<f64>::new();
        let cand = g.constant(cand_t.clone()).unwrap();
        let spk = g.constant(spk_t.clone()).unwrap();
        let (logits, _) = d.forward(&mut g, cand, spk, Mode::Eval, false).unwrap();

        let mut cur = o_cat(
            &(vec![1, 16, 16], cand_t.data().to_vec()),
            &(vec![1, 16, 16], spk_t.data().to_vec()),
        );
        for i in 1..=3 {
            cur = pm.conv(&format!("d.conv{i}"), &cur, 2, 1);
            if i > 1 {
                cur = pm.bn(&format!("d.conv{i}.bn"), &cur);
            }
            cur = o_lrelu(&cur, LEAKY_SLOPE);
        }
        let oracle = pm.conv("d.logit", &cur, 1, 1);

        assert_eq!(g.value(logits).shape(), &[1, 1, 2, 2]);
        let got = g.value(logits).data();
        let max = got
            .iter()
            .zip(&oracle.1)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-5, "max deviation {max}");
    }
}
