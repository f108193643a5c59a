//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "GVAE"            magic
//! u32               format version (1)
//! u32 + bytes       dataset name, UTF-8
//! u32               n_categories
//! u32 × n           dataset label of each category index
//! u64               base seed
//! u32               tensor count (11), then per tensor in TENSOR_NAMES order:
//!   u32 rows, u32 cols, rows·cols × f64
//! u8                optimizer (0 = sgd, 1 = adam)
//! u64               optimizer step
//! adam only: first moments then second moments, same layout as the tensors
//! ```

use std::fs;
use std::path::Path;

use gvae_core::model::TENSOR_NAMES;
use gvae_core::optim::{OptimizerKind, OptimizerState};
use gvae_core::{CvaeParams, Tensor2};

use crate::error::CliError;

pub const MAGIC: &[u8; 4] = b"GVAE";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dataset: String,
    pub labels: Vec<usize>,
    pub seed: u64,
    pub params: CvaeParams,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn n_categories(&self) -> usize {
        self.params.n_categories()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        put_u32(&mut w, self.dataset.len() as u32);
        w.extend_from_slice(self.dataset.as_bytes());
        put_u32(&mut w, self.labels.len() as u32);
        for &l in &self.labels {
            put_u32(&mut w, l as u32);
        }
        w.extend_from_slice(&self.seed.to_le_bytes());
        let tensors = self.params.tensors();
        put_u32(&mut w, tensors.len() as u32);
        for t in tensors {
            put_tensor(&mut w, t);
        }
        w.push(match self.optimizer.kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => 1,
        });
        w.extend_from_slice(&self.optimizer.step.to_le_bytes());
        for t in self.optimizer.first.iter().chain(&self.optimizer.second) {
            put_tensor(&mut w, t);
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.error("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CliError::Checkpoint(format!(
                "unsupported checkpoint version {version}, this build reads version {VERSION}"
            )));
        }
        let name_len = r.u32()? as usize;
        let dataset = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.error("dataset name is not UTF-8"))?;
        let n = r.u32()? as usize;
        let labels = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        if count != TENSOR_NAMES.len() {
            return Err(r.error(&format!("expected {} tensors, found {count}", TENSOR_NAMES.len())));
        }
        let tensors = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>, _>>()?;
        let params = CvaeParams::from_tensors(tensors).map_err(|e| CliError::Checkpoint(e.to_string()))?;
        if params.n_categories() != n {
            return Err(r.error(&format!("{n} labels but the private block has {} columns", params.n_categories())));
        }
        let kind = match r.u8()? {
            0 => OptimizerKind::Sgd,
            1 => OptimizerKind::Adam,
            other => return Err(r.error(&format!("unknown optimizer tag {other}"))),
        };
        let step = r.u64()?;
        let mut optimizer = OptimizerState::for_cvae(kind, &params);
        optimizer.step = step;
        if kind == OptimizerKind::Adam {
            for slot in optimizer.first.iter_mut().chain(optimizer.second.iter_mut()) {
                let t = r.tensor()?;
                if t.shape() != slot.shape() {
                    return Err(r.error("optimizer moment shape does not match its parameter"));
                }
                *slot = t;
            }
        }
        if r.pos != bytes.len() {
            return Err(r.error("trailing bytes"));
        }
        Ok(Checkpoint { dataset, labels, seed, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            CliError::Checkpoint(msg) => CliError::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(w: &mut Vec<u8>, t: &Tensor2) {
    put_u32(w, t.rows() as u32);
    put_u32(w, t.cols() as u32);
    for v in t.data() {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, msg: &str) -> CliError {
        CliError::Checkpoint(format!("{msg} (byte {})", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CliError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor2, CliError> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| self.error("tensor size overflows"))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.error("tensor size overflows"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor2::from_vec(rows, cols, data).map_err(|e| CliError::Checkpoint(e.to_string()))
    }
}
