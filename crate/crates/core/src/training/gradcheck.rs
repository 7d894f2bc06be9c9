//! Finite-difference check of every parameterized op of the full model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{CellConfig, CellKind};
use crate::encoder::{Encoder, EncoderConfig, LabelMap, SequenceSample};
use crate::error::{Error, Result};
use crate::seeds::{rng, stream, stream_seed};
use crate::tensor::{GradCheck, Mode, Tensor};

/// Name of the entry that checks the gradient with respect to the input sequence.
pub const END_TO_END: &str = "end_to_end";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub height: usize,
    pub width: usize,
    pub t: usize,
    pub d: usize,
    pub r: usize,
    pub n_classes: usize,
    pub k_rnn: usize,
    pub k_class: usize,
    pub cells: Vec<CellKind>,
    pub seed: u64,
    pub eps: f64,
    /// Coordinates probed per op.
    pub probes: usize,
    pub tolerance: f64,
    /// Debug: corrupt the analytic gradient of this op.
    pub inject: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            height: 8,
            width: 8,
            t: 4,
            d: 3,
            r: 4,
            n_classes: 2,
            k_rnn: 3,
            k_class: 3,
            cells: vec![CellKind::Gru, CellKind::Lstm],
            seed: 0,
            eps: 1e-5,
            probes: 256,
            tolerance: 1e-4,
            inject: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub cell: CellKind,
    pub op: String,
    pub max_relative_error: f64,
    pub probed: usize,
    pub pass: bool,
}

/// The op a parameter belongs to: its name without the last component.
pub fn op_of(param: &str) -> &str {
    param.rsplit_once('.').map_or(param, |(op, _)| op)
}

fn toy_sample(cfg: &GradCheckConfig, seed: u64) -> Result<SequenceSample> {
    let mut rng = rng(seed);
    let (t, h, w, d) = (cfg.t + 1, cfg.height, cfg.width, cfg.d);
    let x = Tensor::from_vec(&[t, h, w, d], (0..t * h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let labels = (0..h * w).map(|_| rng.gen_range(0..cfg.n_classes as i16)).collect();
    // one padded frame exercises the skip path
    let mut mask = vec![true; t];
    mask[t / 2] = false;
    SequenceSample::new(x, mask, LabelMap::new(h, w, labels)?)
}

/// Check every op of each requested cell type; entries are ordered by cell,
/// then by op in parameter order, then the end-to-end input check.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<Vec<GradCheckEntry>> {
    if cfg.cells.is_empty() || cfg.t == 0 || cfg.probes == 0 {
        return Err(Error::Config("gradcheck needs at least one cell type, one step and one probe".into()));
    }
    let mut entries = Vec::new();
    let mut injected = cfg.inject.is_none();
    for (ci, &kind) in cfg.cells.iter().enumerate() {
        let cell = CellConfig::conv(kind, cfg.r, cfg.d, cfg.k_rnn);
        let model = EncoderConfig::new(cell, cfg.n_classes, cfg.k_class);
        let seed = stream_seed(cfg.seed, stream::INIT, 0, ci as u64);
        let enc = Encoder::new(model, seed)?;
        let sample = toy_sample(cfg, seed ^ 1)?;
        let pass = enc.forward(&sample, Mode::Train)?;
        let mut grads = enc.backward(&pass)?;

        let names: Vec<String> = enc.parameters().iter().map(|p| p.name.clone()).collect();
        let mut ops: Vec<&str> = Vec::new();
        for n in &names {
            if !ops.contains(&op_of(n)) {
                ops.push(op_of(n));
            }
        }
        let corrupt = |op: &str, g: &mut Tensor| {
            if cfg.inject.as_deref() == Some(op) {
                g.data_mut().iter_mut().for_each(|v| *v = 1.5 * *v + 1e-3);
            }
        };
        for (name, g) in names.iter().zip(grads.params.iter_mut()) {
            if cfg.inject.as_deref() == Some(op_of(name)) {
                injected = true;
            }
            corrupt(op_of(name), g);
        }
        if cfg.inject.as_deref() == Some(END_TO_END) {
            injected = true;
        }
        corrupt(END_TO_END, &mut grads.input);

        let gc = GradCheck { eps: cfg.eps, probes: cfg.probes, seed: cfg.seed };
        for op in &ops {
            let idx: Vec<usize> = (0..names.len()).filter(|&i| op_of(&names[i]) == *op).collect();
            let values: Vec<f64> = idx.iter().flat_map(|&i| enc.parameters()[i].value.data().to_vec()).collect();
            let analytic: Vec<f64> = idx.iter().flat_map(|&i| grads.params[i].data().to_vec()).collect();
            let mut probe = enc.clone();
            let report = gc.run(&values, &analytic, |v| {
                let mut at = 0;
                let mut params = probe.parameters_mut();
                for &i in &idx {
                    let p = &mut params[i].value;
                    let n = p.len();
                    p.data_mut().copy_from_slice(&v[at..at + n]);
                    at += n;
                }
                probe.forward(&sample, Mode::Train).map(|p| p.loss)
            })?;
            entries.push(entry(kind, op, report.max_relative_error, report.probed, cfg.tolerance));
        }
        let report = gc.run(sample.x.data(), grads.input.data(), |v| {
            let x = Tensor::from_vec(sample.x.shape(), v.to_vec())?;
            let s = SequenceSample { x, mask: sample.mask.clone(), labels: sample.labels.clone() };
            enc.forward(&s, Mode::Train).map(|p| p.loss)
        })?;
        entries.push(entry(kind, END_TO_END, report.max_relative_error, report.probed, cfg.tolerance));
    }
    if !injected {
        return Err(Error::Config(format!("unknown op {:?} for gradient injection", cfg.inject.as_deref().unwrap_or(""))));
    }
    Ok(entries)
}

fn entry(cell: CellKind, op: &str, err: f64, probed: usize, tol: f64) -> GradCheckEntry {
    GradCheckEntry { cell, op: op.to_string(), max_relative_error: err, probed, pass: err < tol }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_toy_config_passes() {
        let entries = run_gradcheck(&GradCheckConfig { probes: 64, ..Default::default() }).unwrap();
        assert!(entries.iter().all(|e| e.pass), "{entries:?}");
        let gru: Vec<&str> = entries.iter().filter(|e| e.cell == CellKind::Gru).map(|e| e.op.as_str()).collect();
        assert_eq!(gru, ["cell.gates", "cell.candidate", "head.conv", "head.bn", "head.proj", END_TO_END]);
        let lstm = entries.iter().filter(|e| e.cell == CellKind::Lstm).count();
        assert_eq!(lstm, 5);
    }

    #[test]
    fn injected_error_is_named() {
        let cfg = GradCheckConfig { probes: 32, cells: vec![CellKind::Lstm], inject: Some("head.bn".into()), ..Default::default() };
        let entries = run_gradcheck(&cfg).unwrap();
        let failed: Vec<&str> = entries.iter().filter(|e| !e.pass).map(|e| e.op.as_str()).collect();
        assert_eq!(failed, ["head.bn"]);
        let bad = GradCheckConfig { inject: Some("nope".into()), ..cfg };
        assert!(matches!(run_gradcheck(&bad), Err(Error::Config(_))));
    }
}
