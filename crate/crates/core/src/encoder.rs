//! Bidirectional sequential encoder with a convolutional classification head.
//!
//! The observation sequence is run through one shared recurrent cell twice,
//! once in sequential and once in reversed order, each starting from zero
//! states. The two final memories (`c` for LSTMs, `h` otherwise) are
//! concatenated into a `[h, w, 2r]` representation which the head maps to
//! per-pixel class probabilities:
//!
//! ```text
//! rep -> conv(k_class, 2r -> 2r) -> batch norm -> (leaky) ReLU -> conv(1x1, 2r -> n) -> softmax
//! ```
//!
//! Masked (padded) frames are skipped: the state is carried through unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{self, CellConfig, CellKind, CellParams, CellState, Gates, StepTape};
use crate::error::{Error, Result};
use crate::seeds::{derive_seed, stream};
use crate::tensor::{
    batch_norm_backward, batch_norm_infer, batch_norm_train, concat_channels, conv2d, conv2d_accumulate_backward,
    softmax_channels, softmax_channels_backward, split_channels, Activation, BatchNormCache, Mode, Parameter,
    RunningStats, Tensor, LEAKY_RELU_ALPHA,
};

/// Label of pixels excluded from the loss and from every metric.
pub const IGNORE: i16 = -1;
/// Constant written into padded frames.
pub const PAD_VALUE: f64 = 0.0;
/// Lower clamp applied to probabilities inside the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub cell: CellConfig,
    pub n_classes: usize,
    pub k_class: usize,
    pub activation: Activation,
}

impl EncoderConfig {
    pub fn new(cell: CellConfig, n_classes: usize, k_class: usize) -> Self {
        EncoderConfig { cell, n_classes, k_class, activation: Activation::LeakyRelu(LEAKY_RELU_ALPHA) }
    }

    pub fn validate(&self) -> Result<()> {
        self.cell.validate()?;
        if self.n_classes < 2 {
            return Err(Error::Config(format!("n_classes must be >= 2, got {}", self.n_classes)));
        }
        if self.k_class % 2 == 0 {
            return Err(Error::Config(format!("k_class must be odd, got {}", self.k_class)));
        }
        match self.activation {
            Activation::Relu | Activation::LeakyRelu(_) => Ok(()),
            other => Err(Error::Config(format!("head activation must be relu or leaky_relu, got {other:?}"))),
        }
    }

    /// Depth of the sequence representation and of the hidden head layer.
    pub fn representation_depth(&self) -> usize {
        2 * self.cell.r
    }
}

/// Per-pixel ground truth for one tile; [`IGNORE`] marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<i16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<i16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("LabelMap", height * width, labels.len()));
        }
        Ok(LabelMap { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: i16) -> Self {
        LabelMap { height, width, labels: vec![label; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> i16 {
        self.labels[y * self.width + x]
    }

    pub fn check_classes(&self, n_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l != IGNORE && (l < 0 || l as usize >= n_classes)) {
            Some(&l) => Err(Error::LabelOutOfRange { label: l as i64, n_classes }),
            None => Ok(()),
        }
    }
}

/// One tile's observation sequence `x[T, h, w, d]` with its validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub x: Tensor,
    /// `true` marks a real observation.
    pub mask: Vec<bool>,
    pub labels: LabelMap,
}

impl SequenceSample {
    /// Validates shapes and overwrites masked frames with [`PAD_VALUE`].
    pub fn new(mut x: Tensor, mask: Vec<bool>, labels: LabelMap) -> Result<Self> {
        const OP: &str = "SequenceSample";
        let [t, h, w, _] = x.shape()[..] else {
            return Err(Error::shape(OP, "x [T, h, w, d]", format!("{:?}", x.shape())));
        };
        if mask.len() != t {
            return Err(Error::shape(OP, format!("mask of length {t}"), mask.len()));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::AllPadded);
        }
        if (labels.height, labels.width) != (h, w) {
            return Err(Error::shape(OP, format!("labels {h}x{w}"), format!("{}x{}", labels.height, labels.width)));
        }
        let frame = x.len() / t;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| !m) {
            x.data_mut()[i * frame..(i + 1) * frame].fill(PAD_VALUE);
        }
        Ok(SequenceSample { x, mask, labels })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// `(T, h, w, d)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.x.shape();
        (s[0], s[1], s[2], s[3])
    }

    /// Indices of unmasked frames in sequential order.
    pub fn observed(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    pub fn frame(&self, t: usize) -> Tensor {
        self.x.slice_outer(t)
    }

    /// Keep only the listed frames, in the given order.
    pub fn select(&self, frames: &[usize]) -> Result<Self> {
        let items: Vec<Tensor> = frames.iter().map(|&t| self.frame(t)).collect();
        let mask = frames.iter().map(|&t| self.mask[t]).collect();
        SequenceSample::new(Tensor::stack(&items)?, mask, self.labels.clone())
    }

    /// The sequence in reversed temporal order.
    pub fn reversed(&self) -> Self {
        let frames: Vec<usize> = (0..self.len()).rev().collect();
        self.select(&frames).expect("reversal keeps the sample valid")
    }

    /// Insert a padded frame before position `at` (`at == len` appends).
    pub fn with_padding_at(&self, at: usize) -> Result<Self> {
        let (_, h, w, d) = self.dims();
        let mut items: Vec<Tensor> = (0..self.len()).map(|t| self.frame(t)).collect();
        let mut mask = self.mask.clone();
        items.insert(at, Tensor::full(&[h, w, d], PAD_VALUE));
        mask.insert(at, false);
        SequenceSample::new(Tensor::stack(&items)?, mask, self.labels.clone())
    }
}

/// Concatenated final memories of both passes.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRepresentation {
    /// `[h, w, 2r]`: sequential pass first, reversed pass second.
    pub c: Tensor,
    pub forward: CellState,
    pub reverse: CellState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub conv: Parameter,
    pub gamma: Parameter,
    pub beta: Parameter,
    pub proj: Parameter,
    pub proj_bias: Parameter,
}

impl HeadParams {
    pub fn init(config: &EncoderConfig, seed: u64) -> Self {
        let (k, depth, n) = (config.k_class, config.representation_depth(), config.n_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |shape: &[usize], fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut t = Tensor::zeros(shape);
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound));
            t
        };
        let conv = glorot(&[k, k, depth, depth], k * k * depth, depth);
        let proj = glorot(&[1, 1, depth, n], depth, n);
        HeadParams {
            conv: Parameter::new("head.conv.kernel", conv),
            gamma: Parameter::new("head.bn.gamma", Tensor::full(&[depth], 1.0)),
            beta: Parameter::new("head.bn.beta", Tensor::zeros(&[depth])),
            proj: Parameter::new("head.proj.kernel", proj),
            proj_bias: Parameter::new("head.proj.bias", Tensor::zeros(&[n])),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.conv, &self.gamma, &self.beta, &self.proj, &self.proj_bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.conv, &mut self.gamma, &mut self.beta, &mut self.proj, &mut self.proj_bias]
    }
}

/// Model parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub cell: CellParams,
    pub head: HeadParams,
    pub running: RunningStats,
}

/// Gradients aligned with [`Encoder::parameters`], plus the input gradient.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    /// `[T, h, w, d]`; exactly zero on padded frames.
    pub input: Tensor,
}

struct DirectionTape {
    frames: Vec<usize>,
    steps: Vec<StepTape>,
}

struct HeadTape {
    rep: Tensor,
    bn: BatchNormCache,
    bn_out: Tensor,
    act_out: Tensor,
}

/// Values saved by a train-mode forward pass.
pub struct Tape {
    fwd: DirectionTape,
    rev: DirectionTape,
    head: HeadTape,
    input_shape: Vec<usize>,
}

/// Output of [`Encoder::forward`].
pub struct ForwardPass {
    pub y_hat: Tensor,
    pub loss: f64,
    pub mode: Mode,
    labels: LabelMap,
    tape: Option<Tape>,
}

impl ForwardPass {
    /// Tile statistics to fold into the running averages (train mode only).
    pub fn batch_stats(&self) -> Option<&BatchNormCache> {
        self.tape.as_ref().map(|t| &t.head.bn)
    }
}

/// Per-step gate maps of selected cells from the sequential pass.
#[derive(Clone, Debug)]
pub struct ActivationTrace {
    pub kind: CellKind,
    pub cells: Vec<usize>,
    pub steps: Vec<TraceStep>,
}

#[derive(Clone, Debug)]
pub struct TraceStep {
    /// Index of the frame in the (padded) input sequence.
    pub frame: usize,
    /// One entry per requested cell, in request order.
    pub cells: Vec<CellMaps>,
}

/// Named `[h, w]` maps of one cell at one step: `i, j, f, o, c` for LSTMs,
/// `z, s, h` for GRUs, `h` for plain RNNs.
#[derive(Clone, Debug)]
pub struct CellMaps {
    pub cell: usize,
    pub maps: Vec<(&'static str, Tensor)>,
}

impl CellMaps {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.maps.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }
}

fn channel(t: &Tensor, ch: usize) -> Tensor {
    let (h, w, c) = t.dims3("channel").expect("spatial");
    let data = t.data().chunks_exact(c).map(|row| row[ch]).collect();
    Tensor::from_vec(&[h, w], data).expect("map shape")
}

/// Mean cross-entropy over counted pixels; `log` clamped at [`LOG_CLAMP`].
pub fn cross_entropy(y_hat: &Tensor, labels: &LabelMap) -> Result<f64> {
    let losses = pixel_losses(y_hat, labels)?;
    let counted: Vec<f64> = losses.into_iter().flatten().collect();
    if counted.is_empty() {
        return Err(Error::AllIgnored);
    }
    Ok(counted.iter().sum::<f64>() / counted.len() as f64)
}

/// Per-pixel cross-entropy; `None` for ignored pixels.
pub fn pixel_losses(y_hat: &Tensor, labels: &LabelMap) -> Result<Vec<Option<f64>>> {
    let (h, w, n) = y_hat.dims3("cross_entropy")?;
    if (h, w) != (labels.height, labels.width) {
        return Err(Error::shape("cross_entropy", format!("labels {h}x{w}"), format!("{}x{}", labels.height, labels.width)));
    }
    labels.check_classes(n)?;
    Ok(y_hat
        .data()
        .chunks_exact(n)
        .zip(&labels.labels)
        .map(|(p, &l)| (l != IGNORE).then(|| -p[l as usize].max(LOG_CLAMP).ln()))
        .collect())
}

/// Gradient of [`cross_entropy`] with respect to the probabilities.
fn cross_entropy_grad(y_hat: &Tensor, labels: &LabelMap) -> Result<Tensor> {
    let n = y_hat.channels();
    let counted = labels.labels.iter().filter(|&&l| l != IGNORE).count();
    if counted == 0 {
        return Err(Error::AllIgnored);
    }
    let mut g = Tensor::zeros(y_hat.shape());
    for ((grow, p), &l) in g.data_mut().chunks_exact_mut(n).zip(y_hat.data().chunks_exact(n)).zip(&labels.labels) {
        if l == IGNORE {
            continue;
        }
        let py = p[l as usize];
        if py > LOG_CLAMP {
            grow[l as usize] = -1.0 / (py * counted as f64);
        }
    }
    Ok(g)
}

/// Per-pixel argmax (lowest index wins ties).
pub fn argmax_map(y_hat: &Tensor) -> Result<Vec<usize>> {
    let n = y_hat.channels();
    y_hat.dims3("argmax_map")?;
    Ok(y_hat
        .data()
        .chunks_exact(n)
        .map(|p| p.iter().enumerate().fold(0, |best, (i, &v)| if v > p[best] { i } else { best }))
        .collect())
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cell = CellParams::init(&config.cell, derive_seed(seed, stream::INIT, 0))?;
        let head = HeadParams::init(&config, derive_seed(seed, stream::INIT, 1));
        let running = RunningStats::new(config.representation_depth());
        Ok(Encoder { config, cell, head, running })
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.cell.params();
        v.extend(self.head.params());
        v
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.cell.params_mut();
        v.extend(self.head.params_mut());
        v
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value.len()).sum()
    }

    fn check_sample(&self, sample: &SequenceSample) -> Result<()> {
        let (_, _, _, d) = sample.dims();
        if d != self.config.cell.d {
            return Err(Error::shape("encode", format!("input depth {}", self.config.cell.d), d));
        }
        if sample.observed().is_empty() {
            return Err(Error::AllPadded);
        }
        Ok(())
    }

    fn run_direction(&self, sample: &SequenceSample, frames: Vec<usize>, keep: bool) -> Result<(CellState, DirectionTape)> {
        let (_, h, w, _) = sample.dims();
        let mut state = CellState::zeros(&self.config.cell, h, w);
        let mut steps = Vec::new();
        for &t in &frames {
            let (next, tape) = cells::step(&sample.frame(t), &state, &self.cell, &self.config.cell)?;
            state = next;
            if keep {
                steps.push(tape);
            }
        }
        Ok((state, DirectionTape { frames, steps }))
    }

    fn encode_inner(&self, sample: &SequenceSample, keep: bool) -> Result<(SequenceRepresentation, DirectionTape, DirectionTape)> {
        self.check_sample(sample)?;
        let observed = sample.observed();
        let (fwd_state, fwd) = self.run_direction(sample, observed.clone(), keep)?;
        let (rev_state, rev) = self.run_direction(sample, observed.into_iter().rev().collect(), keep)?;
        let c = concat_channels(fwd_state.memory(), rev_state.memory())?;
        c.ensure_finite("encode")?;
        Ok((SequenceRepresentation { c, forward: fwd_state, reverse: rev_state }, fwd, rev))
    }

    /// Bidirectional encoding into the `[h, w, 2r]` representation.
    pub fn encode(&self, sample: &SequenceSample) -> Result<SequenceRepresentation> {
        self.encode_inner(sample, false).map(|(rep, _, _)| rep)
    }

    fn head_forward(&self, rep: &Tensor, mode: Mode) -> Result<(Tensor, Option<HeadTape>)> {
        let (_, _, depth) = rep.dims3("classify")?;
        if depth != self.config.representation_depth() {
            return Err(Error::shape("classify", format!("depth {}", self.config.representation_depth()), depth));
        }
        let conv_out = conv2d(rep, &self.head.conv.value, None)?;
        let (bn_out, cache) = match mode {
            Mode::Train => {
                let (y, c) = batch_norm_train(&conv_out, &self.head.gamma.value, &self.head.beta.value)?;
                (y, Some(c))
            }
            Mode::Infer => (batch_norm_infer(&conv_out, &self.head.gamma.value, &self.head.beta.value, &self.running)?, None),
        };
        let act = self.config.activation;
        let act_out = act.forward(&bn_out);
        let keep_bn = cache.is_some().then(|| bn_out.clone());
        let logits = conv2d(&act_out, &self.head.proj.value, Some(&self.head.proj_bias.value))?;
        let y_hat = softmax_channels(&logits)?;
        let tape = cache.zip(keep_bn).map(|(bn, bn_out)| HeadTape { rep: rep.clone(), bn, bn_out, act_out });
        Ok((y_hat, tape))
    }

    /// Per-pixel class distribution `[h, w, n]` for a representation.
    pub fn classify(&self, rep: &Tensor, mode: Mode) -> Result<Tensor> {
        self.head_forward(rep, mode).map(|(y, _)| y)
    }

    /// Class probabilities without a loss (labels are not consulted).
    pub fn predict(&self, sample: &SequenceSample, mode: Mode) -> Result<Tensor> {
        let rep = self.encode(sample)?;
        self.classify(&rep.c, mode)
    }

    /// Encode, classify and score one sample. Train mode keeps a tape for
    /// [`Encoder::backward`] but does not touch the running statistics.
    pub fn forward(&self, sample: &SequenceSample, mode: Mode) -> Result<ForwardPass> {
        sample.labels.check_classes(self.config.n_classes)?;
        let keep = mode == Mode::Train;
        let (rep, fwd, rev) = self.encode_inner(sample, keep)?;
        let (y_hat, head) = self.head_forward(&rep.c, mode)?;
        let loss = cross_entropy(&y_hat, &sample.labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "forward" });
        }
        let tape = head.map(|head| Tape { fwd, rev, head, input_shape: sample.x.shape().to_vec() });
        Ok(ForwardPass { y_hat, loss, mode, labels: sample.labels.clone(), tape })
    }

    /// Fold the tile statistics of a train-mode pass into the running averages.
    pub fn commit_batch_stats(&mut self, pass: &ForwardPass) {
        if let Some(stats) = pass.batch_stats() {
            self.running.update(stats);
        }
    }

    /// Backpropagation through the head and through time in both directions.
    pub fn backward(&self, pass: &ForwardPass) -> Result<Gradients> {
        let tape = pass.tape.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let r = self.config.cell.r;
        let n_cell = self.cell.params().len();
        let mut grads: Vec<Tensor> = self.parameters().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let (cell_grads, head_grads) = grads.split_at_mut(n_cell);

        // head
        let probs_grad = cross_entropy_grad(&pass.y_hat, &pass.labels)?;
        let dlogits = softmax_channels_backward(&pass.y_hat, &probs_grad)?;
        let h = &tape.head;
        let mut dact = Tensor::zeros(h.act_out.shape());
        {
            let (a, b) = head_grads.split_at_mut(4);
            conv2d_accumulate_backward(&h.act_out, &self.head.proj.value, &dlogits, Some(&mut dact), &mut a[3], Some(&mut b[0]))?;
        }
        let dbn = self.config.activation.backward(&h.bn_out, &h.act_out, &dact)?;
        let (dconv, dgamma, dbeta) = batch_norm_backward(&h.bn, &self.head.gamma.value, &dbn)?;
        head_grads[1].add_assign(&dgamma)?;
        head_grads[2].add_assign(&dbeta)?;
        let mut drep = Tensor::zeros(h.rep.shape());
        conv2d_accumulate_backward(&h.rep, &self.head.conv.value, &dconv, Some(&mut drep), &mut head_grads[0], None)?;

        // recurrence
        let (d_fwd, d_rev) = split_channels(&drep, r)?;
        let mut input = Tensor::zeros(&tape.input_shape);
        let frame_len = input.len() / tape.input_shape[0];
        for (dir, d_final) in [(&tape.fwd, d_fwd), (&tape.rev, d_rev)] {
            let lstm = self.config.cell.kind.has_cell_state();
            let (mut dh, mut dc) = if lstm {
                (Tensor::zeros(d_final.shape()), Some(d_final))
            } else {
                (d_final, None)
            };
            for (step, &t) in dir.steps.iter().zip(&dir.frames).rev() {
                let g = cells::step_backward(step, &self.cell, &dh, dc.as_ref(), cell_grads)?;
                let dst = &mut input.data_mut()[t * frame_len..(t + 1) * frame_len];
                dst.iter_mut().zip(g.input.data()).for_each(|(a, b)| *a += b);
                dh = g.h_prev;
                dc = g.c_prev;
            }
        }
        for g in grads.iter() {
            g.ensure_finite("backward")?;
        }
        Ok(Gradients { params: grads, input })
    }

    /// Gate and state maps of the requested cells at every unmasked step of
    /// the sequential pass.
    pub fn activations_trace(&self, sample: &SequenceSample, cells_idx: &[usize]) -> Result<ActivationTrace> {
        let r = self.config.cell.r;
        if let Some(&bad) = cells_idx.iter().find(|&&i| i >= r) {
            return Err(Error::invalid("activations_trace", format!("cell index {bad} out of range for r = {r}")));
        }
        self.check_sample(sample)?;
        let (_, h, w, _) = sample.dims();
        let mut state = CellState::zeros(&self.config.cell, h, w);
        let mut steps = Vec::new();
        for t in sample.observed() {
            let (next, tape) = cells::step(&sample.frame(t), &state, &self.cell, &self.config.cell)?;
            state = next;
            let gates = tape.gates();
            let cells = cells_idx
                .iter()
                .map(|&ch| {
                    let mut maps: Vec<(&'static str, Tensor)> = match &gates {
                        Gates::Lstm { i, j, f, o } => {
                            vec![("i", channel(i, ch)), ("j", channel(j, ch)), ("f", channel(f, ch)), ("o", channel(o, ch))]
                        }
                        Gates::Gru { z, s } => vec![("z", channel(z, ch)), ("s", channel(s, ch))],
                        Gates::Rnn => vec![],
                    };
                    match &state.c {
                        Some(c) => maps.push(("c", channel(c, ch))),
                        None => maps.push(("h", channel(&state.h, ch))),
                    }
                    CellMaps { cell: ch, maps }
                })
                .collect();
            steps.push(TraceStep { frame: t, cells });
        }
        Ok(ActivationTrace { kind: self.config.cell.kind, cells: cells_idx.to_vec(), steps })
    }

    /// Round every parameter and running statistic to `f32`, the stored precision.
    pub fn round_to_storage(&mut self) {
        for p in self.parameters_mut() {
            p.value.round_to_f32();
        }
        self.running.mean.round_to_f32();
        self.running.var.round_to_f32();
    }
}
