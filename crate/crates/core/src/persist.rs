//! On-disk formats: binary checkpoints and sample files, JSON side files and
//! CSV reports.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "STKCNNCK" | version u32 | meta_len u64 | meta JSON
//! tensor_count u32 | per tensor: name_len u32, name, ndim u32, dims u64..., values f64...
//! has_optimizer u8 | [step u64 | first moments... | second moments...]
//! ```
//!
//! Moment tensors follow the parameter order and sizes, so they carry no
//! names of their own.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Sample, SampleSet};
use crate::nn::{FeatureMap, Model, ModelConfig, ModelError, Params};
use crate::optim::{AdamState, HyperParams};
use crate::train::Evaluation;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STKCNNCK";
pub const SAMPLES_MAGIC: &[u8; 8] = b"STKCNNDS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("not a {expected} file (bad magic bytes)")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    hyper: HyperParams,
    best_epoch: usize,
}

/// Model parameters plus what is needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub hyper: HyperParams,
    pub best_epoch: usize,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, PersistError> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        let meta = serde_json::to_vec(&CheckpointMeta {
            model: self.model.config().clone(),
            hyper: self.hyper,
            best_epoch: self.best_epoch,
        })?;
        put_u64(&mut out, meta.len() as u64);
        out.extend_from_slice(&meta);

        let names = self.model.param_names();
        let dims = self.model.param_dims();
        let tensors = self.model.tensors();
        put_u32(&mut out, tensors.len() as u32);
        for ((name, dims), values) in names.iter().zip(&dims).zip(&tensors) {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, dims.len() as u32);
            for &d in dims {
                put_u64(&mut out, d as u64);
            }
            put_f64s(&mut out, values);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                let sizes = self.model.shapes();
                let ok = |v: &Vec<Vec<f64>>| v.iter().map(Vec::len).eq(sizes.iter().copied());
                if !ok(&opt.m) || !ok(&opt.s) {
                    return Err(PersistError::Corrupt(
                        "optimizer state does not match the model's parameters".into(),
                    ));
                }
                out.push(1);
                put_u64(&mut out, opt.step);
                for t in opt.m.iter().chain(&opt.s) {
                    put_f64s(&mut out, t);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PersistError> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(PersistError::BadMagic {
                expected: "checkpoint",
            });
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(PersistError::UnsupportedVersion(version));
        }
        let meta_len = r.len_u64()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let mut model = Model::zeros(meta.model)?;
        let names = model.param_names();
        let dims = model.param_dims();

        let count = r.u32()? as usize;
        if count != names.len() {
            return Err(PersistError::Corrupt(format!(
                "{count} tensors stored, model has {}",
                names.len()
            )));
        }
        for (t, (name, want_dims)) in names.iter().zip(&dims).enumerate() {
            let name_len = r.u32()? as usize;
            let stored = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| PersistError::Corrupt("tensor name is not UTF-8".into()))?;
            if stored != name {
                return Err(PersistError::Corrupt(format!(
                    "expected tensor {name}, found {stored}"
                )));
            }
            let ndim = r.u32()? as usize;
            let got_dims = (0..ndim).map(|_| r.len_u64()).collect::<Result<Vec<_>, _>>()?;
            if &got_dims != want_dims {
                return Err(PersistError::Corrupt(format!(
                    "{name}: stored shape {got_dims:?}, model expects {want_dims:?}"
                )));
            }
            r.f64s_into(model.tensors_mut()[t])?;
        }

        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let sizes = model.shapes();
                let mut read_all = || -> Result<Vec<Vec<f64>>, PersistError> {
                    sizes
                        .iter()
                        .map(|&n| {
                            let mut v = vec![0.0; n];
                            r.f64s_into(&mut v)?;
                            Ok(v)
                        })
                        .collect()
                };
                let m = read_all()?;
                let s = read_all()?;
                Some(AdamState { m, s, step })
            }
            flag => return Err(PersistError::Corrupt(format!("bad optimizer flag {flag}"))),
        };
        if !r.is_empty() {
            return Err(PersistError::Corrupt("trailing bytes".into()));
        }
        Ok(Checkpoint {
            model,
            hyper: meta.hyper,
            best_epoch: meta.best_epoch,
            optimizer,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), PersistError> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()?).map_err(io_err(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, PersistError> {
    let path = path.as_ref();
    Checkpoint::from_bytes(&fs::read(path).map_err(io_err(path))?)
}

/// `"STKCNNDS" | version u32 | channels u32 | window_len u32 | count u64`
/// followed by `label u8, values f64 x channels*window_len` per sample.
pub fn samples_to_bytes(set: &SampleSet) -> Vec<u8> {
    let channels = set.channels();
    let mut out = Vec::with_capacity(28 + set.len() * (1 + 8 * channels * set.window_len));
    out.extend_from_slice(SAMPLES_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, channels as u32);
    put_u32(&mut out, set.window_len as u32);
    put_u64(&mut out, set.len() as u64);
    for s in &set.samples {
        out.push(s.label);
        put_f64s(&mut out, s.window.as_slice());
    }
    out
}

pub fn samples_from_bytes(bytes: &[u8]) -> Result<SampleSet, PersistError> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != SAMPLES_MAGIC {
        return Err(PersistError::BadMagic {
            expected: "sample set",
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(PersistError::UnsupportedVersion(version));
    }
    let channels = r.u32()? as usize;
    let window_len = r.u32()? as usize;
    let count = r.len_u64()?;
    let per = channels * window_len;
    if count > 0 && per == 0 {
        return Err(PersistError::Corrupt("zero-sized windows".into()));
    }
    let mut samples = Vec::with_capacity(count.min(r.remaining() / (1 + 8 * per.max(1))));
    for _ in 0..count {
        let label = r.u8()?;
        if label > 1 {
            return Err(PersistError::Corrupt(format!("label {label}")));
        }
        let mut values = vec![0.0; per];
        r.f64s_into(&mut values)?;
        samples.push(Sample {
            window: FeatureMap::from_vec(channels, window_len, values)?,
            label,
        });
    }
    if !r.is_empty() {
        return Err(PersistError::Corrupt("trailing bytes".into()));
    }
    Ok(SampleSet {
        samples,
        window_len,
    })
}

pub fn save_samples(path: impl AsRef<Path>, set: &SampleSet) -> Result<(), PersistError> {
    let path = path.as_ref();
    fs::write(path, samples_to_bytes(set)).map_err(io_err(path))
}

pub fn load_samples(path: impl AsRef<Path>) -> Result<SampleSet, PersistError> {
    let path = path.as_ref();
    samples_from_bytes(&fs::read(path).map_err(io_err(path))?)
}

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<(), PersistError> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T, PersistError> {
    let path = path.as_ref();
    let mut text = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_text(path: impl AsRef<Path>, text: &str) -> Result<(), PersistError> {
    let path = path.as_ref();
    fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(io_err(path))
}

pub const METRICS_HEADER: &str = "dataset,tp,fp,tn,fn,accuracy,precision,recall,f1";

/// One CSV row per named evaluation.
pub fn metrics_csv(rows: &[(&str, &Evaluation)]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for (name, e) in rows {
        let (c, m) = (&e.confusion, &e.metrics);
        out.push_str(&format!(
            "{name},{},{},{},{},{},{},{},{}\n",
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
            m.accuracy.value,
            m.precision.value,
            m.recall.value,
            m.f1.value
        ));
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    fn remaining(&self) -> usize {
        self.buf.len()
    }

    fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], PersistError> {
        if n > self.buf.len() {
            return Err(PersistError::Corrupt("unexpected end of file".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, PersistError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, PersistError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PersistError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len_u64(&mut self) -> Result<usize, PersistError> {
        usize::try_from(self.u64()?).map_err(|_| PersistError::Corrupt("length overflow".into()))
    }

    fn f64s_into(&mut self, dst: &mut [f64]) -> Result<(), PersistError> {
        let bytes = self.take(dst.len() * 8)?;
        for (d, chunk) in dst.iter_mut().zip(bytes.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_model;

    fn checkpoint(with_opt: bool) -> Checkpoint {
        let model = init_model(ModelConfig::reduced().with_dropout(0.25), 3).unwrap();
        let optimizer = with_opt.then(|| {
            let mut st = AdamState::new(&model);
            st.step = 7;
            for (i, t) in st.m.iter_mut().chain(st.s.iter_mut()).enumerate() {
                t.iter_mut().enumerate().for_each(|(j, v)| *v = (i * 31 + j) as f64 * 1e-3);
            }
            st
        });
        Checkpoint {
            model,
            hyper: HyperParams::default(),
            best_epoch: 4,
            optimizer,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        for with_opt in [false, true] {
            let ck = checkpoint(with_opt);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn checkpoint_rejects_damage() {
        let bytes = checkpoint(true).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(PersistError::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(PersistError::UnsupportedVersion(9))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(PersistError::Corrupt(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn sample_file_round_trip() {
        let set = SampleSet {
            samples: (0..5)
                .map(|i| Sample {
                    window: FeatureMap::from_vec(4, 3, (0..12).map(|v| (v * i) as f64 / 7.0).collect())
                        .unwrap(),
                    label: (i % 2) as u8,
                })
                .collect(),
            window_len: 3,
        };
        let bytes = samples_to_bytes(&set);
        assert_eq!(samples_from_bytes(&bytes).unwrap(), set);
        assert!(samples_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(matches!(
            samples_from_bytes(&checkpoint(false).to_bytes().unwrap()),
            Err(PersistError::BadMagic { .. })
        ));
    }

    #[test]
    fn metrics_csv_layout() {
        use crate::metrics::ConfusionMatrix;
        let confusion = ConfusionMatrix {
            tp: 3,
            fp: 1,
            tn: 2,
            fn_: 0,
        };
        let e = Evaluation {
            confusion,
            metrics: confusion.metrics(),
            loss: 0.3,
        };
        let csv = metrics_csv(&[("test", &e)]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        assert!(lines.next().unwrap().starts_with("test,3,1,2,0,0.8333"));
    }
}
