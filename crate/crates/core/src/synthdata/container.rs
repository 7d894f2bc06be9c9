//! Binary dataset container.
//!
//! Little-endian layout:
//!
//! ```text
//! "MTSE" | u32 version | u32 T, h, w, d, n_classes, n_samples
//! per sample: u8 split | T x u8 mask | T*h*w*d x f32 | h*w x i16 labels
//! UTF-8 JSON metadata up to end of file
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{LabelMap, SequenceSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MTSE";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train = 0,
    Validation = 1,
    Test = 2,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    fn from_tag(tag: u8) -> Result<Split> {
        Split::ALL.get(tag as usize).copied().ok_or_else(|| Error::Format(format!("unknown split tag {tag}")))
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (train, validation, test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSample {
    pub split: Split,
    pub sample: SequenceSample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub t: usize,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub n_classes: usize,
    pub samples: Vec<DatasetSample>,
    pub metadata: serde_json::Value,
}

impl Dataset {
    /// Checks that every sample matches the header dimensions.
    pub fn new(
        t: usize,
        height: usize,
        width: usize,
        depth: usize,
        n_classes: usize,
        samples: Vec<DatasetSample>,
        metadata: serde_json::Value,
    ) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.sample.dims() != (t, height, width, depth) {
                return Err(Error::Format(format!(
                    "sample {i} has dims {:?}, header says {:?}",
                    s.sample.dims(),
                    (t, height, width, depth)
                )));
            }
            s.sample.labels.check_classes(n_classes)?;
        }
        Ok(Dataset { t, height, width, depth, n_classes, samples, metadata })
    }

    pub fn split(&self, split: Split) -> Vec<&SequenceSample> {
        self.samples.iter().filter(|s| s.split == split).map(|s| &s.sample).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(MAGIC)?;
    let header = [VERSION as usize, dataset.t, dataset.height, dataset.width, dataset.depth, dataset.n_classes, dataset.len()];
    for v in header {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("header value {v} exceeds u32")))?;
        out.write_all(&v.to_le_bytes())?;
    }
    for s in &dataset.samples {
        out.write_all(&[s.split as u8])?;
        let mask: Vec<u8> = s.sample.mask.iter().map(|&m| m as u8).collect();
        out.write_all(&mask)?;
        for &v in s.sample.x.data() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        for &l in &s.sample.labels.labels {
            out.write_all(&l.to_le_bytes())?;
        }
    }
    out.write_all(serde_json::to_string(&dataset.metadata)?.as_bytes())?;
    out.flush()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Truncated(what))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format(format!("{} is not a dataset file (bad magic)", path.display())));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32("header")?;
    }
    let [t, h, w, d, n_classes, n] = dims;
    if t == 0 || h == 0 || w == 0 || d == 0 {
        return Err(Error::Format(format!("degenerate header dims {:?}", [t, h, w, d])));
    }
    let frame = t * h * w * d;
    let mut samples = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let split = Split::from_tag(r.take(1, "split tag")?[0])?;
        let mask = r
            .take(t, "mask")?
            .iter()
            .map(|&m| match m {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Format(format!("mask byte {other}"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        let x: Vec<f64> = r
            .take(frame * 4, "tensor block")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let labels: Vec<i16> =
            r.take(h * w * 2, "label map")?.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect();
        let x = Tensor::from_vec(&[t, h, w, d], x)?;
        let sample = SequenceSample::new(x, mask, LabelMap::new(h, w, labels)?)
            .map_err(|e| Error::Format(format!("invalid sample: {e}")))?;
        samples.push(DatasetSample { split, sample });
    }
    let text = std::str::from_utf8(&buf[r.at..]).map_err(|e| Error::Format(format!("metadata is not UTF-8: {e}")))?;
    let metadata = if text.is_empty() { serde_json::Value::Null } else { serde_json::from_str(text)? };
    Dataset::new(t, h, w, d, n_classes, samples, metadata)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, SceneSpec};

    fn small() -> Dataset {
        let spec = SceneSpec { tile: 8, min_field: 3, t: 5, min_obs: Some(3), ..Default::default() };
        generate_dataset(&spec, 12, [4, 1, 1]).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mtse");
        let ds = small();
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            assert!(a.sample.x.data().iter().zip(b.sample.x.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"MTSE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn corrupt_files_are_typed_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mtse");
        write_dataset(&small(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format(_))));

        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Truncated(_))));
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let mut ds = small();
        ds.samples[0].sample = ds.samples[0].sample.select(&[0, 1, 2]).unwrap();
        let r = Dataset::new(ds.t, ds.height, ds.width, ds.depth, ds.n_classes, ds.samples, ds.metadata);
        assert!(matches!(r, Err(Error::Format(_))));
    }
}
