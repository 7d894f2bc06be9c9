//! One-step transitions for RNN, LSTM and GRU cells.
//!
//! All cells operate on the concatenated input `[x_t, h_{t-1}]` and come in
//! a dense arrangement (vectors, equivalent to a 1x1 kernel) and a
//! convolutional arrangement (`[h, w, c]` tiles, `k_rnn x k_rnn` kernels).
//! The dense cell is literally the convolutional one with `k = 1` evaluated
//! on a 1x1 tile, so the two agree bit for bit.
//!
//! Gate weights are stored fused: one kernel whose output channels are the
//! gate blocks in the order `i, j, f, o` (LSTM) or `z, s` (GRU), plus a
//! separate candidate kernel for the GRU.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{concat_channels, conv2d, conv2d_accumulate_backward, sigmoid, split_channels, Parameter, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Rnn,
    Lstm,
    Gru,
}

impl CellKind {
    /// Number of weight blocks of shape `k x k x (r+d) x r`.
    pub fn gate_multiplicity(self) -> usize {
        match self {
            CellKind::Rnn => 1,
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }

    pub fn has_cell_state(self) -> bool {
        self == CellKind::Lstm
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" => Ok(CellKind::Rnn),
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(Error::Config(format!("unknown cell kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CellKind::Rnn => "rnn",
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    Dense,
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub kind: CellKind,
    pub arrangement: Arrangement,
    /// Number of recurrent cells.
    pub r: usize,
    /// Input depth.
    pub d: usize,
    /// Recurrent kernel extent; ignored (treated as 1) for dense cells.
    pub k_rnn: usize,
    /// Initial value of the LSTM forget-gate bias.
    pub forget_bias: f64,
}

pub const DEFAULT_FORGET_BIAS: f64 = 1.0;

impl CellConfig {
    pub fn conv(kind: CellKind, r: usize, d: usize, k_rnn: usize) -> Self {
        CellConfig { kind, arrangement: Arrangement::Conv, r, d, k_rnn, forget_bias: DEFAULT_FORGET_BIAS }
    }

    pub fn dense(kind: CellKind, r: usize, d: usize) -> Self {
        CellConfig { kind, arrangement: Arrangement::Dense, r, d, k_rnn: 1, forget_bias: DEFAULT_FORGET_BIAS }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.d == 0 {
            return Err(Error::Config(format!("r and d must be >= 1 (r={}, d={})", self.r, self.d)));
        }
        if self.arrangement == Arrangement::Conv && self.k_rnn % 2 == 0 {
            return Err(Error::Config(format!("k_rnn must be odd, got {}", self.k_rnn)));
        }
        if !self.forget_bias.is_finite() {
            return Err(Error::Config("forget_bias must be finite".into()));
        }
        Ok(())
    }

    /// Effective kernel extent.
    pub fn kernel(&self) -> usize {
        match self.arrangement {
            Arrangement::Dense => 1,
            Arrangement::Conv => self.k_rnn,
        }
    }

    fn gate_channels(&self) -> usize {
        match self.kind {
            CellKind::Rnn => self.r,
            CellKind::Gru => 2 * self.r,
            CellKind::Lstm => 4 * self.r,
        }
    }
}

/// `G * (k^2 (r+d) r + r)` with `G` = 1, 3, 4 for RNN, GRU, LSTM.
pub fn param_count(config: &CellConfig) -> usize {
    let k = config.kernel();
    let (r, d) = (config.r, config.d);
    config.kind.gate_multiplicity() * (k * k * (r + d) * r + r)
}

/// Recurrent output `h` and, for LSTMs, the cell state `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub h: Tensor,
    pub c: Option<Tensor>,
}

impl CellState {
    /// Zero state for a `[height, width, r]` tile.
    pub fn zeros(config: &CellConfig, height: usize, width: usize) -> Self {
        let h = Tensor::zeros(&[height, width, config.r]);
        let c = config.kind.has_cell_state().then(|| h.clone());
        CellState { h, c }
    }

    /// Zero state for a dense cell: vectors of length `r`.
    pub fn zeros_dense(config: &CellConfig) -> Self {
        let h = Tensor::zeros(&[config.r]);
        let c = config.kind.has_cell_state().then(|| h.clone());
        CellState { h, c }
    }

    /// The tensor a sequence representation is built from: `c` when present, else `h`.
    pub fn memory(&self) -> &Tensor {
        self.c.as_ref().unwrap_or(&self.h)
    }
}

/// Gate activations of one step.
#[derive(Clone, Debug, PartialEq)]
pub enum Gates {
    Rnn,
    Lstm { i: Tensor, j: Tensor, f: Tensor, o: Tensor },
    Gru { z: Tensor, s: Tensor },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellParams {
    pub kind: CellKind,
    pub kernel: Parameter,
    pub bias: Parameter,
    /// GRU candidate kernel and bias.
    pub candidate: Option<(Parameter, Parameter)>,
}

impl CellParams {
    pub fn zeros(config: &CellConfig) -> Self {
        let k = config.kernel();
        let depth = config.r + config.d;
        let gates = config.gate_channels();
        let candidate = (config.kind == CellKind::Gru).then(|| {
            (
                Parameter::new("cell.candidate.kernel", Tensor::zeros(&[k, k, depth, config.r])),
                Parameter::new("cell.candidate.bias", Tensor::zeros(&[config.r])),
            )
        });
        CellParams {
            kind: config.kind,
            kernel: Parameter::new("cell.gates.kernel", Tensor::zeros(&[k, k, depth, gates])),
            bias: Parameter::new("cell.gates.bias", Tensor::zeros(&[gates])),
            candidate,
        }
    }

    /// Glorot-uniform weights (fan over `k*k*(r+d)` inputs and `r` outputs per
    /// gate), zero biases except the LSTM forget block, which starts at
    /// `forget_bias`.
    pub fn init(config: &CellConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = CellParams::zeros(config);
        let k = config.kernel();
        let fan_in = (k * k * (config.r + config.d)) as f64;
        let bound = (6.0 / (fan_in + config.r as f64)).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in p.kernel.value.data_mut() {
            *v = rng.gen_range(-bound..=bound);
        }
        if let Some((ck, _)) = p.candidate.as_mut() {
            for v in ck.value.data_mut() {
                *v = rng.gen_range(-bound..=bound);
            }
        }
        if config.kind == CellKind::Lstm {
            let r = config.r;
            p.bias.value.data_mut()[2 * r..3 * r].fill(config.forget_bias);
        }
        Ok(p)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.kernel, &self.bias];
        if let Some((k, b)) = &self.candidate {
            v.push(k);
            v.push(b);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![&mut self.kernel, &mut self.bias];
        if let Some((k, b)) = &mut self.candidate {
            v.push(k);
            v.push(b);
        }
        v
    }

    /// Zero tensors shaped like each parameter, in [`Self::params`] order.
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect()
    }

    pub fn count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    fn check(&self, config: &CellConfig) -> Result<()> {
        let want = CellParams::zeros(config);
        if self.kind != config.kind {
            return Err(Error::Config(format!("parameters are for {} cells, config is {}", self.kind, config.kind)));
        }
        for (a, b) in self.params().iter().zip(want.params()) {
            if a.value.shape() != b.value.shape() {
                return Err(Error::shape("cell", format!("{} {:?}", b.name, b.value.shape()), format!("{:?}", a.value.shape())));
            }
        }
        Ok(())
    }
}

/// Everything the backward pass of one step needs.
#[derive(Clone, Debug)]
pub struct StepTape {
    kind: CellKind,
    r: usize,
    d: usize,
    xh: Tensor,
    /// Post-activation gate blocks (`h` itself for a plain RNN).
    act: Tensor,
    h_prev: Tensor,
    c_prev: Option<Tensor>,
    c: Option<Tensor>,
    /// GRU: `[x, s * h_prev]` and the candidate `tanh(...)`.
    cand_in: Option<Tensor>,
    cand: Option<Tensor>,
}

fn block(t: &Tensor, r: usize, b: usize) -> Tensor {
    let g = t.channels();
    let (h, w, _) = t.dims3("gate block").expect("spatial tape");
    let data = t.data().chunks_exact(g).flat_map(|row| row[b * r..(b + 1) * r].iter().copied()).collect();
    Tensor::from_vec(&[h, w, r], data).expect("block shape")
}

impl StepTape {
    /// Gate activations, each `[h, w, r]`.
    pub fn gates(&self) -> Gates {
        match self.kind {
            CellKind::Rnn => Gates::Rnn,
            CellKind::Lstm => Gates::Lstm {
                i: block(&self.act, self.r, 0),
                j: block(&self.act, self.r, 1),
                f: block(&self.act, self.r, 2),
                o: block(&self.act, self.r, 3),
            },
            CellKind::Gru => Gates::Gru { z: block(&self.act, self.r, 0), s: block(&self.act, self.r, 1) },
        }
    }
}

fn check_state(config: &CellConfig, x: &Tensor, state: &CellState) -> Result<(usize, usize)> {
    const OP: &str = "cell_step";
    let (h, w, d) = x.dims3(OP)?;
    if d != config.d {
        return Err(Error::shape(OP, format!("input depth {}", config.d), d));
    }
    if state.h.shape() != [h, w, config.r] {
        return Err(Error::shape(OP, format!("h [{h}, {w}, {}]", config.r), format!("{:?}", state.h.shape())));
    }
    match (&state.c, config.kind.has_cell_state()) {
        (None, true) => return Err(Error::invalid(OP, "LSTM state is missing its cell state c")),
        (Some(_), false) => return Err(Error::invalid(OP, format!("{} state must not carry a cell state", config.kind))),
        (Some(c), true) if c.shape() != state.h.shape() => {
            return Err(Error::shape(OP, format!("{:?}", state.h.shape()), format!("{:?}", c.shape())))
        }
        _ => {}
    }
    Ok((h, w))
}

/// Advance one step on a `[h, w, d]` input (a dense cell is applied pixel-wise).
pub fn step(x: &Tensor, state: &CellState, params: &CellParams, config: &CellConfig) -> Result<(CellState, StepTape)> {
    config.validate()?;
    params.check(config)?;
    let (hh, ww) = check_state(config, x, state)?;
    let r = config.r;
    let xh = concat_channels(x, &state.h)?;
    let mut act = conv2d(&xh, &params.kernel.value, Some(&params.bias.value))?;
    let g = act.channels();
    let mut tape = StepTape {
        kind: config.kind,
        r,
        d: config.d,
        xh,
        act: Tensor::zeros(&[1]),
        h_prev: state.h.clone(),
        c_prev: state.c.clone(),
        c: None,
        cand_in: None,
        cand: None,
    };
    let next = match config.kind {
        CellKind::Rnn => {
            act.data_mut().iter_mut().for_each(|v| *v = v.tanh());
            CellState { h: act.clone(), c: None }
        }
        CellKind::Lstm => {
            let c_prev = state.c.as_ref().expect("checked");
            let mut c = Tensor::zeros(&[hh, ww, r]);
            let mut h = Tensor::zeros(&[hh, ww, r]);
            for (p, row) in act.data_mut().chunks_exact_mut(g).enumerate() {
                for ch in 0..r {
                    let i = sigmoid(row[ch]);
                    let j = row[r + ch].tanh();
                    let f = sigmoid(row[2 * r + ch]);
                    let o = sigmoid(row[3 * r + ch]);
                    row[ch] = i;
                    row[r + ch] = j;
                    row[2 * r + ch] = f;
                    row[3 * r + ch] = o;
                    let idx = p * r + ch;
                    let cv = f * c_prev.data()[idx] + i * j;
                    c.data_mut()[idx] = cv;
                    h.data_mut()[idx] = o * cv.tanh();
                }
            }
            tape.c = Some(c.clone());
            CellState { h, c: Some(c) }
        }
        CellKind::Gru => {
            act.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
            let mut sh = state.h.clone();
            for (p, row) in act.data().chunks_exact(g).enumerate() {
                for ch in 0..r {
                    sh.data_mut()[p * r + ch] *= row[r + ch];
                }
            }
            let cand_in = concat_channels(x, &sh)?;
            let (ck, cb) = params.candidate.as_ref().expect("checked");
            let mut cand = conv2d(&cand_in, &ck.value, Some(&cb.value))?;
            cand.data_mut().iter_mut().for_each(|v| *v = v.tanh());
            let mut h = Tensor::zeros(&[hh, ww, r]);
            for (p, row) in act.data().chunks_exact(g).enumerate() {
                for ch in 0..r {
                    let idx = p * r + ch;
                    let z = row[ch];
                    h.data_mut()[idx] = (1.0 - z) * state.h.data()[idx] + z * cand.data()[idx];
                }
            }
            tape.cand_in = Some(cand_in);
            tape.cand = Some(cand);
            CellState { h, c: None }
        }
    };
    tape.act = act;
    Ok((next, tape))
}

/// Gradients flowing out of one step.
#[derive(Clone, Debug)]
pub struct StepGrads {
    pub input: Tensor,
    pub h_prev: Tensor,
    pub c_prev: Option<Tensor>,
}

/// Backward through one step. Parameter gradients are accumulated into
/// `param_grads` (ordered as [`CellParams::params`]).
pub fn step_backward(
    tape: &StepTape,
    params: &CellParams,
    grad_h: &Tensor,
    grad_c: Option<&Tensor>,
    param_grads: &mut [Tensor],
) -> Result<StepGrads> {
    const OP: &str = "cell_backward";
    let r = tape.r;
    if grad_h.shape() != tape.h_prev.shape() {
        return Err(Error::shape(OP, format!("{:?}", tape.h_prev.shape()), format!("{:?}", grad_h.shape())));
    }
    if param_grads.len() != params.params().len() {
        return Err(Error::shape(OP, params.params().len(), param_grads.len()));
    }
    let g = tape.act.channels();
    let mut dpre = Tensor::zeros(tape.act.shape());
    let mut dh_prev = Tensor::zeros(tape.h_prev.shape());
    let mut dc_prev = None;
    let mut dx_extra = None;

    match tape.kind {
        CellKind::Rnn => {
            for ((d, a), gh) in dpre.data_mut().iter_mut().zip(tape.act.data()).zip(grad_h.data()) {
                *d = gh * (1.0 - a * a);
            }
        }
        CellKind::Lstm => {
            let c = tape.c.as_ref().expect("lstm tape");
            let c_prev = tape.c_prev.as_ref().expect("lstm tape");
            let mut dcp = Tensor::zeros(c.shape());
            for (p, (drow, arow)) in dpre.data_mut().chunks_exact_mut(g).zip(tape.act.data().chunks_exact(g)).enumerate() {
                for ch in 0..r {
                    let idx = p * r + ch;
                    let (i, j, f, o) = (arow[ch], arow[r + ch], arow[2 * r + ch], arow[3 * r + ch]);
                    let tc = c.data()[idx].tanh();
                    let dh = grad_h.data()[idx];
                    let dc = grad_c.map_or(0.0, |t| t.data()[idx]) + dh * o * (1.0 - tc * tc);
                    drow[ch] = dc * j * i * (1.0 - i);
                    drow[r + ch] = dc * i * (1.0 - j * j);
                    drow[2 * r + ch] = dc * c_prev.data()[idx] * f * (1.0 - f);
                    drow[3 * r + ch] = dh * tc * o * (1.0 - o);
                    dcp.data_mut()[idx] = dc * f;
                }
            }
            dc_prev = Some(dcp);
        }
        CellKind::Gru => {
            let cand = tape.cand.as_ref().expect("gru tape");
            let cand_in = tape.cand_in.as_ref().expect("gru tape");
            let (ck, _) = params.candidate.as_ref().ok_or_else(|| Error::invalid(OP, "GRU parameters lack a candidate kernel"))?;
            // candidate branch
            let mut dcand_pre = Tensor::zeros(cand.shape());
            for (p, arow) in tape.act.data().chunks_exact(g).enumerate() {
                for ch in 0..r {
                    let idx = p * r + ch;
                    let z = arow[ch];
                    let cv = cand.data()[idx];
                    let dh = grad_h.data()[idx];
                    dcand_pre.data_mut()[idx] = dh * z * (1.0 - cv * cv);
                    dh_prev.data_mut()[idx] = dh * (1.0 - z);
                }
            }
            let mut dcand_in = Tensor::zeros(cand_in.shape());
            let (gk, rest) = param_grads[2..].split_at_mut(1);
            conv2d_accumulate_backward(cand_in, &ck.value, &dcand_pre, Some(&mut dcand_in), &mut gk[0], Some(&mut rest[0]))?;
            let (dx1, dsh) = split_channels(&dcand_in, tape.d)?;
            for (p, (drow, arow)) in dpre.data_mut().chunks_exact_mut(g).zip(tape.act.data().chunks_exact(g)).enumerate() {
                for ch in 0..r {
                    let idx = p * r + ch;
                    let (z, s) = (arow[ch], arow[r + ch]);
                    let hp = tape.h_prev.data()[idx];
                    let dh = grad_h.data()[idx];
                    let dz = dh * (cand.data()[idx] - hp);
                    let ds = dsh.data()[idx] * hp;
                    drow[ch] = dz * z * (1.0 - z);
                    drow[r + ch] = ds * s * (1.0 - s);
                    dh_prev.data_mut()[idx] += dsh.data()[idx] * s;
                }
            }
            dx_extra = Some(dx1);
        }
    }

    let mut dxh = Tensor::zeros(tape.xh.shape());
    let (gk, gb) = param_grads.split_at_mut(1);
    conv2d_accumulate_backward(&tape.xh, &params.kernel.value, &dpre, Some(&mut dxh), &mut gk[0], Some(&mut gb[0]))?;
    let (mut dx, dh_direct) = split_channels(&dxh, tape.d)?;
    dh_prev.add_assign(&dh_direct)?;
    if let Some(extra) = dx_extra {
        dx.add_assign(&extra)?;
    }
    Ok(StepGrads { input: dx, h_prev: dh_prev, c_prev: dc_prev })
}

fn as_tile(t: &Tensor) -> Result<Tensor> {
    match t.rank() {
        1 => t.clone().reshape(&[1, 1, t.len()]),
        3 => Ok(t.clone()),
        _ => Err(Error::shape("cell_step", "[n] or [h, w, n]", format!("{:?}", t.shape()))),
    }
}

/// Dense cells accept vectors; everything runs on `[h, w, c]` internally.
fn run_public(
    kind: CellKind,
    x: &Tensor,
    state: &CellState,
    params: &CellParams,
    config: &CellConfig,
) -> Result<(CellState, Gates)> {
    if config.kind != kind {
        return Err(Error::Config(format!("{kind} step called with a {} config", config.kind)));
    }
    let vector = x.rank() == 1;
    let x3 = as_tile(x)?;
    let s3 = CellState { h: as_tile(&state.h)?, c: state.c.as_ref().map(as_tile).transpose()? };
    let (next, tape) = step(&x3, &s3, params, config)?;
    let gates = tape.gates();
    if !vector {
        return Ok((next, gates));
    }
    let flat = |t: Tensor| {
        let n = t.len();
        t.reshape(&[n])
    };
    let next = CellState { h: flat(next.h)?, c: next.c.map(flat).transpose()? };
    let gates = match gates {
        Gates::Rnn => Gates::Rnn,
        Gates::Lstm { i, j, f, o } => Gates::Lstm { i: flat(i)?, j: flat(j)?, f: flat(f)?, o: flat(o)? },
        Gates::Gru { z, s } => Gates::Gru { z: flat(z)?, s: flat(s)? },
    };
    Ok((next, gates))
}

/// `h_t = tanh(W * [x_t, h_{t-1}] + b)`.
pub fn rnn_step(x: &Tensor, state: &CellState, params: &CellParams, config: &CellConfig) -> Result<CellState> {
    run_public(CellKind::Rnn, x, state, params, config).map(|(s, _)| s)
}

/// `c_t = f * c_{t-1} + i * j`, `h_t = o * tanh(c_t)`.
pub fn lstm_step(x: &Tensor, state: &CellState, params: &CellParams, config: &CellConfig) -> Result<(CellState, Gates)> {
    run_public(CellKind::Lstm, x, state, params, config)
}

/// `h_t = (1 - z) * h_{t-1} + z * tanh(W_h * [x_t, s * h_{t-1}])`.
pub fn gru_step(x: &Tensor, state: &CellState, params: &CellParams, config: &CellConfig) -> Result<(CellState, Gates)> {
    run_public(CellKind::Gru, x, state, params, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::relative_error;

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    fn filled(config: &CellConfig, w: f64, b: f64) -> CellParams {
        let mut p = CellParams::zeros(config);
        for q in p.params_mut() {
            let v = if q.name.ends_with("kernel") { w } else { b };
            q.value.fill(v);
        }
        p
    }

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec())
    }

    #[test]
    fn rnn_examples() {
        let cfg = CellConfig::dense(CellKind::Rnn, 1, 1);
        let zero = filled(&cfg, 0.0, 0.0);
        let s = CellState { h: v(&[0.3]), c: None };
        assert_eq!(rnn_step(&v(&[0.8]), &s, &zero, &cfg).unwrap().h.data(), &[0.0]);

        let biased = filled(&cfg, 0.7, 0.4);
        let out = rnn_step(&v(&[0.0]), &CellState::zeros_dense(&cfg), &biased, &cfg).unwrap();
        assert_eq!(out.h.data(), &[0.4f64.tanh()]);

        let ones = filled(&cfg, 1.0, 0.0);
        let out = rnn_step(&v(&[0.5]), &CellState { h: v(&[0.25]), c: None }, &ones, &cfg).unwrap();
        assert!((out.h.data()[0] - 0.75f64.tanh()).abs() < 1e-15);
        assert!((out.h.data()[0] - 0.6351).abs() < 1e-4);
    }

    #[test]
    fn lstm_zero_weights_halve_the_memory() {
        let mut cfg = CellConfig::dense(CellKind::Lstm, 3, 2);
        cfg.forget_bias = 0.0;
        let p = filled(&cfg, 0.0, 0.0);
        let c_prev = v(&[0.8, -1.2, 3.0]);
        let s = CellState { h: v(&[0.1, 0.2, 0.3]), c: Some(c_prev.clone()) };
        let (next, gates) = lstm_step(&v(&[1.0, -1.0]), &s, &p, &cfg).unwrap();
        let Gates::Lstm { i, j, f, o } = gates else { panic!("lstm gates") };
        assert!(i.data().iter().chain(f.data()).chain(o.data()).all(|&g| g == 0.5));
        assert!(j.data().iter().all(|&g| g == 0.0));
        for k in 0..3 {
            let c = 0.5 * c_prev.data()[k];
            assert_eq!(next.c.as_ref().unwrap().data()[k], c);
            assert_eq!(next.h.data()[k], 0.5 * c.tanh());
        }
    }

    #[test]
    fn lstm_zero_memory_and_modulation() {
        let cfg = CellConfig::dense(CellKind::Lstm, 2, 2);
        let p = filled(&cfg, 0.0, 0.0);
        let (next, _) = lstm_step(&v(&[0.5, 0.5]), &CellState::zeros_dense(&cfg), &p, &cfg).unwrap();
        assert!(next.c.unwrap().data().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn lstm_direct_evaluation() {
        let cfg = CellConfig::dense(CellKind::Lstm, 1, 1);
        let mut p = filled(&cfg, 1.0, 0.0);
        p.bias.value.data_mut()[2] = 1.0; // forget bias
        let (next, _) = lstm_step(&v(&[1.0]), &CellState::zeros_dense(&cfg), &p, &cfg).unwrap();
        let c = sig(1.0) * 1f64.tanh();
        let c_got = next.c.unwrap().data()[0];
        assert!((c_got - c).abs() < 1e-15);
        // sigma(1) * tanh(1) = 0.556770 (evaluated independently)
        assert!((c_got - 0.556770).abs() < 1e-6);
        let h = sig(1.0) * c.tanh();
        assert!((next.h.data()[0] - h).abs() < 1e-15);
        assert!((next.h.data()[0] - 0.369606).abs() < 1e-6);
    }

    #[test]
    fn gru_examples() {
        let cfg = CellConfig::dense(CellKind::Gru, 2, 1);
        let zero = filled(&cfg, 0.0, 0.0);
        let s = CellState { h: v(&[0.6, -0.4]), c: None };
        let (next, gates) = gru_step(&v(&[2.0]), &s, &zero, &cfg).unwrap();
        assert_eq!(next.h.data(), &[0.3, -0.2]);
        let Gates::Gru { z, s: reset } = gates else { panic!("gru gates") };
        assert!(z.data().iter().chain(reset.data()).all(|&g| g == 0.5));

        let (next, _) = gru_step(&v(&[2.0]), &CellState::zeros_dense(&cfg), &zero, &cfg).unwrap();
        assert_eq!(next.h.data(), &[0.0, 0.0]);

        let cfg1 = CellConfig::dense(CellKind::Gru, 1, 1);
        let ones = filled(&cfg1, 1.0, 0.0);
        let (next, _) = gru_step(&v(&[1.0]), &CellState::zeros_dense(&cfg1), &ones, &cfg1).unwrap();
        let want = sig(1.0) * 1f64.tanh();
        assert!((next.h.data()[0] - want).abs() < 1e-15);
        assert!((next.h.data()[0] - 0.556770).abs() < 1e-6);
    }

    #[test]
    fn state_validation() {
        let lstm = CellConfig::dense(CellKind::Lstm, 1, 1);
        let p = filled(&lstm, 0.0, 0.0);
        let no_c = CellState { h: v(&[0.0]), c: None };
        assert!(lstm_step(&v(&[1.0]), &no_c, &p, &lstm).is_err());

        let gru = CellConfig::dense(CellKind::Gru, 1, 1);
        let p = filled(&gru, 0.0, 0.0);
        let with_c = CellState { h: v(&[0.0]), c: Some(v(&[0.0])) };
        assert!(gru_step(&v(&[1.0]), &with_c, &p, &gru).is_err());
        assert!(gru_step(&v(&[1.0, 2.0]), &CellState::zeros_dense(&gru), &p, &gru).is_err());
    }

    #[test]
    fn init_is_seeded_bounded_and_sets_forget_bias() {
        let cfg = CellConfig::conv(CellKind::Lstm, 8, 3, 3);
        let a = CellParams::init(&cfg, 11).unwrap();
        let b = CellParams::init(&cfg, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, CellParams::init(&cfg, 12).unwrap());
        let bound = (6.0 / (9.0 * 11.0 + 8.0f64)).sqrt();
        assert!(a.kernel.value.data().iter().all(|w| w.abs() <= bound));
        let bias = a.bias.value.data();
        assert!(bias[16..24].iter().all(|&b| b == 1.0));
        assert!(bias[..16].iter().chain(&bias[24..]).all(|&b| b == 0.0));
    }

    #[test]
    fn param_count_examples() {
        let lstm = CellConfig::conv(CellKind::Lstm, 8, 3, 3);
        let gru = CellConfig::conv(CellKind::Gru, 8, 3, 3);
        assert_eq!(param_count(&lstm), 3200);
        assert_eq!(param_count(&gru), 2400);
        assert_eq!(CellParams::zeros(&lstm).count(), 3200);
        assert_eq!(CellParams::zeros(&gru).count(), 2400);
        let rnn = CellConfig::dense(CellKind::Rnn, 1, 1);
        assert_eq!(param_count(&rnn), 3);
        assert_eq!(CellParams::zeros(&rnn).count(), 3);
    }

    #[test]
    fn long_term_memory_pathway() {
        let cfg = CellConfig::conv(CellKind::Lstm, 2, 3, 3);
        let mut p = CellParams::init(&cfg, 5).unwrap();
        let r = cfg.r;
        // input block and forget block weights off, saturating biases
        let g = 4 * r;
        for (idx, w) in p.kernel.value.data_mut().iter_mut().enumerate() {
            let out = idx % g;
            if out < r || (2 * r..3 * r).contains(&out) {
                *w = 0.0;
            }
        }
        p.bias.value.data_mut()[..r].fill(-800.0);
        p.bias.value.data_mut()[2 * r..3 * r].fill(40.0);
        let c0 = Tensor::from_vec(&[2, 2, 2], vec![0.3, -0.7, 1.1, 0.2, -2.0, 0.9, 0.05, 4.0]).unwrap();
        let mut state = CellState { h: Tensor::zeros(&[2, 2, 2]), c: Some(c0.clone()) };
        for t in 0..25 {
            let x = Tensor::full(&[2, 2, 3], (t as f64 * 0.7).sin());
            state = step(&x, &state, &p, &cfg).unwrap().0;
        }
        assert_eq!(state.c.unwrap(), c0);
    }

    #[test]
    fn conv_k1_on_single_pixel_matches_dense() {
        for kind in [CellKind::Rnn, CellKind::Lstm, CellKind::Gru] {
            let dense = CellConfig::dense(kind, 3, 2);
            let conv = CellConfig::conv(kind, 3, 2, 1);
            let p = CellParams::init(&dense, 3).unwrap();
            let x = v(&[0.4, -1.3]);
            let mut sd = CellState::zeros_dense(&dense);
            sd.h = v(&[0.1, -0.2, 0.5]);
            if let Some(c) = sd.c.as_mut() {
                *c = v(&[0.9, 0.0, -0.4]);
            }
            let sc = CellState {
                h: sd.h.clone().reshape(&[1, 1, 3]).unwrap(),
                c: sd.c.clone().map(|c| c.reshape(&[1, 1, 3]).unwrap()),
            };
            let (nd, _) = run_public(kind, &x, &sd, &p, &dense).unwrap();
            let (nc, _) = run_public(kind, &x.clone().reshape(&[1, 1, 2]).unwrap(), &sc, &p, &conv).unwrap();
            assert_eq!(nd.h.data(), nc.h.data(), "{kind}");
            assert_eq!(nd.c.map(Tensor::into_data), nc.c.map(Tensor::into_data));
        }
    }

    /// Scalar loss `<a, h_t> + <b, c_t>` after one step; gradients through
    /// parameters, input and previous state against central differences.
    fn one_step_check(kind: CellKind) {
        let cfg = CellConfig::conv(kind, 3, 2, 3);
        let params = CellParams::init(&cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut rand_t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let x = rand_t(&[4, 3, 2]);
        let h0 = rand_t(&[4, 3, 3]);
        let c0 = kind.has_cell_state().then(|| rand_t(&[4, 3, 3]));
        let a = rand_t(&[4, 3, 3]);
        let b = rand_t(&[4, 3, 3]);
        let dot = |p: &Tensor, q: &Tensor| p.data().iter().zip(q.data()).map(|(u, v)| u * v).sum::<f64>();
        let loss = |x: &Tensor, h0: &Tensor, c0: &Option<Tensor>, p: &CellParams| -> f64 {
            let (s, _) = step(x, &CellState { h: h0.clone(), c: c0.clone() }, p, &cfg).unwrap();
            dot(&s.h, &a) + s.c.as_ref().map_or(0.0, |c| dot(c, &b))
        };

        let (_, tape) = step(&x, &CellState { h: h0.clone(), c: c0.clone() }, &params, &cfg).unwrap();
        let mut pg = params.zero_grads();
        let grads = step_backward(&tape, &params, &a, c0.as_ref().map(|_| &b), &mut pg).unwrap();

        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        let mut probe = |analytic: f64, up: f64, down: f64| {
            worst = worst.max(relative_error(analytic, (up - down) / (2.0 * eps)));
        };
        for i in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            probe(grads.input.data()[i], loss(&p, &h0, &c0, &params), loss(&m, &h0, &c0, &params));
        }
        for i in 0..h0.len() {
            let (mut p, mut m) = (h0.clone(), h0.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            probe(grads.h_prev.data()[i], loss(&x, &p, &c0, &params), loss(&x, &m, &c0, &params));
        }
        if let Some(c) = &c0 {
            for i in 0..c.len() {
                let (mut p, mut m) = (c.clone(), c.clone());
                p.data_mut()[i] += eps;
                m.data_mut()[i] -= eps;
                probe(grads.c_prev.as_ref().unwrap().data()[i], loss(&x, &h0, &Some(p), &params), loss(&x, &h0, &Some(m), &params));
            }
        }
        for (pi, g) in pg.iter().enumerate() {
            for i in (0..g.len()).step_by(7) {
                let (mut p, mut m) = (params.clone(), params.clone());
                p.params_mut()[pi].value.data_mut()[i] += eps;
                m.params_mut()[pi].value.data_mut()[i] -= eps;
                probe(g.data()[i], loss(&x, &h0, &c0, &p), loss(&x, &h0, &c0, &m));
            }
        }
        assert!(worst < 1e-5, "{kind}: max relative error {worst}");
    }

    #[test]
    fn lstm_one_step_gradients() {
        one_step_check(CellKind::Lstm);
    }

    #[test]
    fn gru_one_step_gradients() {
        one_step_check(CellKind::Gru);
    }

    #[test]
    fn rnn_one_step_gradients() {
        one_step_check(CellKind::Rnn);
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn gate_ranges(seed in 0u64..1000, scale in 0.1f64..4.0, kind_gru in any::<bool>()) {
                let kind = if kind_gru { CellKind::Gru } else { CellKind::Lstm };
                let cfg = CellConfig::conv(kind, 2, 2, 3);
                let p = CellParams::init(&cfg, seed).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = Tensor::from_vec(&[3, 3, 2], (0..18).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap();
                let mut s = CellState::zeros(&cfg, 3, 3);
                s.h = Tensor::from_vec(&[3, 3, 2], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
                let (_, tape) = step(&x, &s, &p, &cfg).unwrap();
                let open = |t: &Tensor, lo: f64| t.data().iter().all(|&v| v > lo && v < 1.0);
                match tape.gates() {
                    Gates::Lstm { i, j, f, o } => {
                        prop_assert!(open(&i, 0.0) && open(&f, 0.0) && open(&o, 0.0));
                        prop_assert!(open(&j, -1.0));
                    }
                    Gates::Gru { z, s } => {
                        prop_assert!(open(&z, 0.0) && open(&s, 0.0));
                        prop_assert!(open(tape.cand.as_ref().unwrap(), -1.0));
                    }
                    Gates::Rnn => unreachable!(),
                }
            }

            #[test]
            fn gru_to_lstm_ratio(r in 1usize..64, d in 1usize..32, k in prop::sample::select(vec![1usize, 3, 5, 7])) {
                let gru = param_count(&CellConfig::conv(CellKind::Gru, r, d, k));
                let lstm = param_count(&CellConfig::conv(CellKind::Lstm, r, d, k));
                prop_assert_eq!(4 * gru, 3 * lstm);
            }
        }
    }
}
