//! Checkpoint files.
//!
//! ```text
//! "MTCK" | u32 version | u32 length + UTF-8 JSON header
//! records: u16 name length | name | u8 rank | u32 extents | f32 payload
//! ```
//!
//! All integers and floats are little-endian. The JSON header holds the
//! model configuration, counters, a metric snapshot and the record count.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{Optimizer, OptimizerConfig};
use super::TrainConfig;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MTCK";
pub const VERSION: u32 = 1;
const RUNNING_MEAN: &str = "head.bn.running_mean";
const RUNNING_VAR: &str = "head.bn.running_var";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: Encoder,
    pub optimizer: Option<Optimizer>,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub epoch: u64,
    pub metrics: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    encoder: EncoderConfig,
    train: Option<TrainConfig>,
    optimizer: Option<OptimizerHeader>,
    step: u64,
    epoch: u64,
    metrics: serde_json::Value,
    records: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: OptimizerConfig,
    t: u64,
}

impl Checkpoint {
    fn records(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            self.encoder.parameters().into_iter().map(|p| (p.name.clone(), &p.value)).collect();
        out.push((RUNNING_MEAN.into(), &self.encoder.running.mean));
        out.push((RUNNING_VAR.into(), &self.encoder.running.var));
        if let Some(opt) = &self.optimizer {
            for (p, (m, v)) in self.encoder.parameters().iter().zip(opt.m.iter().zip(&opt.v)) {
                out.push((format!("adam.m.{}", p.name), m));
                out.push((format!("adam.v.{}", p.name), v));
            }
        }
        out
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let records = ck.records();
    let header = Header {
        version: VERSION,
        encoder: ck.encoder.config.clone(),
        train: ck.train.clone(),
        optimizer: ck.optimizer.as_ref().map(|o| OptimizerHeader { config: o.config, t: o.t }),
        step: ck.step,
        epoch: ck.epoch,
        metrics: ck.metrics.clone(),
        records: records.len(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for (name, t) in records {
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[t.rank() as u8])?;
        for &e in t.shape() {
            out.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Truncated("checkpoint"))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Load a checkpoint; with `expect`, a differing model configuration is a
/// [`Error::Config`].
pub fn load_checkpoint(path: &Path, expect: Option<&EncoderConfig>) -> Result<Checkpoint> {
    let buf = fs::read(path)?;
    let mut c = Cursor { buf: &buf, at: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = c.u32()? as usize;
    let header: Header = serde_json::from_slice(c.take(len)?)?;
    if let Some(want) = expect {
        if *want != header.encoder {
            return Err(Error::Config(format!(
                "checkpoint model config does not match: stored {:?}, requested {:?}",
                header.encoder, want
            )));
        }
    }
    let mut tensors = std::collections::HashMap::new();
    for _ in 0..header.records {
        let n = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(c.take(n)?.to_vec()).map_err(|e| Error::Format(format!("record name: {e}")))?;
        let rank = c.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| c.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data = c
            .take(count.checked_mul(4).ok_or(Error::Truncated("checkpoint"))?)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| Error::Format(format!("record {name}: {e}")))?;
        tensors.insert(name, t);
    }
    if c.at != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last record", buf.len() - c.at)));
    }

    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = tensors.remove(name).ok_or_else(|| Error::Format(format!("missing record {name}")))?;
        if t.shape() != shape {
            return Err(Error::Format(format!("record {name} has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };
    let mut encoder = Encoder::new(header.encoder.clone(), 0).map_err(|e| Error::Config(format!("stored config: {e}")))?;
    let depth = header.encoder.representation_depth();
    for p in encoder.parameters_mut() {
        p.value = take(&p.name, &p.value.shape().to_vec())?;
    }
    encoder.running.mean = take(RUNNING_MEAN, &[depth])?;
    encoder.running.var = take(RUNNING_VAR, &[depth])?;
    let optimizer = match header.optimizer {
        None => None,
        Some(h) => {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for p in encoder.parameters() {
                m.push(take(&format!("adam.m.{}", p.name), p.value.shape())?);
                v.push(take(&format!("adam.v.{}", p.name), p.value.shape())?);
            }
            Some(Optimizer { config: h.config, t: h.t, m, v })
        }
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected record {extra}")));
    }
    Ok(Checkpoint { encoder, optimizer, train: header.train, step: header.step, epoch: header.epoch, metrics: header.metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{CellConfig, CellKind};
    use crate::encoder::{LabelMap, SequenceSample};
    use crate::tensor::Mode;

    fn checkpoint() -> Checkpoint {
        let cfg = EncoderConfig::new(CellConfig::conv(CellKind::Lstm, 3, 2, 3), 3, 3);
        let mut encoder = Encoder::new(cfg, 5).unwrap();
        encoder.running.mean.fill(0.125);
        encoder.round_to_storage();
        let params = encoder.parameters();
        let mut optimizer = Optimizer::new(OptimizerConfig::default(), &params).unwrap();
        optimizer.t = 7;
        optimizer.m[0].fill(0.5);
        Checkpoint { encoder, optimizer: Some(optimizer), train: None, step: 12, epoch: 3, metrics: serde_json::json!({"loss": 0.25}) }
    }

    #[test]
    fn round_trip_preserves_forward() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ck");
        let ck = checkpoint();
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path, Some(&ck.encoder.config)).unwrap();
        assert_eq!(back, ck);

        let x = Tensor::from_vec(&[2, 4, 4, 2], (0..64).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let labels = LabelMap::new(4, 4, (0..16).map(|i| (i % 3) as i16).collect()).unwrap();
        let s = SequenceSample::new(x, vec![true, true], labels).unwrap();
        for mode in [Mode::Train, Mode::Infer] {
            let a = ck.encoder.forward(&s, mode).unwrap();
            let b = back.encoder.forward(&s, mode).unwrap();
            assert_eq!(a.y_hat, b.y_hat);
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
        assert_eq!(&std::fs::read(&path).unwrap()[..4], b"MTCK");
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ck");
        save_checkpoint(&checkpoint(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3, 10, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            assert!(load_checkpoint(&path, None).is_err());
        }
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(Error::Truncated(_))));
    }

    #[test]
    fn wrong_config_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ck");
        let ck = checkpoint();
        save_checkpoint(&ck, &path).unwrap();
        let other = EncoderConfig { n_classes: 4, ..ck.encoder.config.clone() };
        assert!(matches!(load_checkpoint(&path, Some(&other)), Err(Error::Config(_))));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 2;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(Error::Format(_))));
    }
}
