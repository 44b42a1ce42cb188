//! Versioned binary checkpoints: a TOML header, tensors in declaration order,
//! optimizer moments, loss history and a trailing CRC32.

use super::loss::{LossReport, TrainingConfig};
use super::matrix::Matrix;
use super::model::{Arch, FlowModel};
use super::train::{AdamState, HistoryRow};
use super::NeuralError;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"QFLOWCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error(transparent)]
    Model(#[from] NeuralError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: Arch,
    pub training: TrainingConfig,
    /// Optimizer steps completed.
    pub step: usize,
    pub params: Vec<Matrix>,
    pub adam: Option<AdamState>,
    pub history: Vec<HistoryRow>,
    /// Free text from whoever wrote the file, kept verbatim.
    pub provenance: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    producer: String,
    #[serde(default)]
    provenance: String,
    arch: Arch,
    training: TrainingConfig,
    step: usize,
    tensors: usize,
    has_optimizer: bool,
    history: usize,
}

impl Checkpoint {
    /// A model without optimizer state or history.
    pub fn from_model(model: &FlowModel, training: &TrainingConfig) -> Self {
        Self {
            arch: model.arch().clone(),
            training: training.clone(),
            step: 0,
            params: model.params().to_vec(),
            adam: None,
            history: Vec::new(),
            provenance: String::new(),
        }
    }

    pub fn model(&self) -> Result<FlowModel, NeuralError> {
        FlowModel::from_parts(self.arch.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            producer: format!("qflow {}", env!("CARGO_PKG_VERSION")),
            provenance: self.provenance.clone(),
            arch: self.arch.clone(),
            training: self.training.clone(),
            step: self.step,
            tensors: self.params.len(),
            has_optimizer: self.adam.is_some(),
            history: self.history.len(),
        };
        let text = toml::to_string(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for p in &self.params {
            put_matrix(&mut out, p);
        }
        if let Some(a) = &self.adam {
            out.extend_from_slice(&a.t.to_le_bytes());
            for m in a.m.iter().chain(&a.v) {
                put_matrix(&mut out, m);
            }
        }
        for h in &self.history {
            out.extend_from_slice(&(h.step as u64).to_le_bytes());
            out.extend_from_slice(&h.lr.to_le_bytes());
            for v in h.loss.components().iter().chain([&h.loss.total]) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let hlen = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(hlen)?).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let header: Header = toml::from_str(text).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let params = (0..header.tensors).map(|_| r.matrix()).collect::<Result<Vec<_>, _>>()?;
        let adam = if header.has_optimizer {
            let t = r.u64()?;
            let m = (0..header.tensors).map(|_| r.matrix()).collect::<Result<Vec<_>, _>>()?;
            let v = (0..header.tensors).map(|_| r.matrix()).collect::<Result<Vec<_>, _>>()?;
            Some(AdamState { t, m, v })
        } else {
            None
        };
        let mut history = Vec::with_capacity(header.history);
        for _ in 0..header.history {
            let step = r.u64()? as usize;
            let lr = r.f64()?;
            let mut v = [0.0; 6];
            for x in v.iter_mut() {
                *x = r.f64()?;
            }
            history.push(HistoryRow {
                step,
                lr,
                loss: LossReport {
                    nll: v[0],
                    dist: v[1],
                    grad: v[2],
                    eik: v[3],
                    ten: v[4],
                    total: v[5],
                },
            });
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Format("trailing bytes".into()));
        }
        // Validates shapes against the architecture.
        FlowModel::from_parts(header.arch.clone(), params.clone())?;
        Ok(Self {
            arch: header.arch,
            training: header.training,
            step: header.step,
            params,
            adam,
            history,
            provenance: header.provenance,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Format("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self) -> Result<Matrix, CheckpointError> {
        let r = self.u32()? as usize;
        let c = self.u32()? as usize;
        let n = r.checked_mul(c).ok_or_else(|| CheckpointError::Format("tensor size".into()))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Format("tensor size".into()))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        Ok(Matrix::from_vec(r, c, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let m = FlowModel::new(
            Arch {
                trunk_width: 8,
                dyn_width: 8,
                ..Arch::default()
            },
            3,
        )
        .unwrap();
        let mut c = Checkpoint::from_model(&m, &TrainingConfig::default());
        c.step = 2;
        c.provenance = "seed = 3\nnote = \"round trip\"".into();
        c.adam = Some(AdamState {
            t: 2,
            m: m.params().iter().map(|p| p.map(|v| v * 0.5)).collect(),
            v: m.params().iter().map(|p| p.map(|v| v * v)).collect(),
        });
        c.history = vec![
            HistoryRow {
                step: 0,
                lr: 1e-3,
                loss: LossReport {
                    nll: 1.0,
                    dist: 2.0,
                    grad: 0.5,
                    eik: 0.25,
                    ten: 0.125,
                    total: 3.5,
                },
            },
            HistoryRow {
                step: 1,
                lr: 1e-3,
                loss: LossReport::default(),
            },
        ];
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = sample().to_bytes();
        let k = bytes.len() / 2;
        bytes[k] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Checksum)));
        assert!(matches!(
            Checkpoint::from_bytes(b"NOTACKPT00000000000000"),
            Err(CheckpointError::Format(_))
        ));
    }
}
