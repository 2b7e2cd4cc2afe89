//! Binary tensor files, quantized operand files and plan JSON.
//!
//! Everything is little-endian. Layouts:
//!
//! ```text
//! TensorFile  "MXTF" | version u16 | dtype u8 (0 = f32) | rank u8 | rank x u64 dims | payload
//! QuantFile   "MXQT" | version u16 | role u8 (0 = activation, 1 = weight)
//!             | layer_id: u32 len + UTF-8 | plan: u32 len + JSON
//!             | 3 parts (FP4, FP6, FP8), each:
//!                 format u8 | rows u64 | cols u64 | per block: scale u8 + 32 code bytes
//! ```
//!
//! Weight parts are stored transposed (`out_features x K-segment`) so that
//! every block runs along the contraction dimension.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calib::{CalibStats, ChannelPlan};
use crate::error::{Error, Result};
use crate::gemm::{MixedActivation, QuantizedLinear};
use crate::mx::{E8M0Scale, ElementCode, MxBlock, MxFormat, MxTensor, BLOCK_SIZE};
use crate::scalar::Real;
use crate::tensor::DenseTensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"MXTF";
pub const QUANT_MAGIC: &[u8; 4] = b"MXQT";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

/// Raw contents of a tensor file: any rank, `f32` payload.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn from_tensor(t: &DenseTensor<f32>) -> Self {
        TensorFile {
            dims: vec![t.rows() as u64, t.cols() as u64],
            data: t.as_slice().to_vec(),
        }
    }

    /// Rank-2 files map directly; rank 1 becomes a single row.
    pub fn into_tensor(self) -> Result<DenseTensor<f32>> {
        let (rows, cols) = match self.dims[..] {
            [n] => (1, n as usize),
            [r, c] => (r as usize, c as usize),
            _ => {
                return Err(Error::shape(format!(
                    "expected a rank-1 or rank-2 tensor, got dims {:?}",
                    self.dims
                )))
            }
        };
        DenseTensor::new(rows, cols, self.data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "tensor file");
        r.magic(TENSOR_MAGIC)?;
        r.version()?;
        let at = r.offset;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(r.error_at(at, format!("unsupported dtype code {dtype}")));
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let at = r.offset;
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining() as u64))
            .ok_or_else(|| {
                r.error_at(at, format!("dims {dims:?} need more payload than the {} bytes left", r.remaining()))
            })?;
        let payload = r.take(count as usize * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        r.finish()?;
        Ok(TensorFile { dims, data })
    }
}

/// What a quantized file holds.
#[derive(Clone, Debug, PartialEq)]
pub enum QuantPayload {
    Activation(MixedActivation),
    Weight(QuantizedLinear),
}

/// A quantized activation or weight together with the plan it was built for.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantFile {
    pub plan: ChannelPlan,
    pub payload: QuantPayload,
}

impl QuantFile {
    pub fn activation(plan: ChannelPlan, a: MixedActivation) -> Self {
        QuantFile {
            plan,
            payload: QuantPayload::Activation(a),
        }
    }

    pub fn weight(lin: QuantizedLinear) -> Self {
        QuantFile {
            plan: lin.plan().clone(),
            payload: QuantPayload::Weight(lin),
        }
    }

    fn parts(&self) -> &[MxTensor; 3] {
        match &self.payload {
            QuantPayload::Activation(a) => a.parts(),
            QuantPayload::Weight(w) => w.parts(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(QUANT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(match self.payload {
            QuantPayload::Activation(_) => 0,
            QuantPayload::Weight(_) => 1,
        });
        let id = self.plan.layer_id.as_bytes();
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id);
        let plan = serde_json::to_vec(&self.plan)?;
        out.extend_from_slice(&(plan.len() as u32).to_le_bytes());
        out.extend_from_slice(&plan);
        for part in self.parts() {
            out.push(part.format().file_code());
            out.extend_from_slice(&(part.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(part.cols() as u64).to_le_bytes());
            for b in part.blocks() {
                out.push(b.scale.to_byte());
                out.extend(b.codes.iter().map(|c| c.bits()));
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "quantized file");
        r.magic(QUANT_MAGIC)?;
        r.version()?;
        let at = r.offset;
        let role = r.u8()?;
        if role > 1 {
            return Err(r.error_at(at, format!("unknown role {role}")));
        }
        let at = r.offset;
        let id_len = r.u32()? as usize;
        let layer_id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| r.error_at(at, "layer id is not UTF-8".into()))?;
        let at = r.offset;
        let plan_len = r.u32()? as usize;
        let plan: ChannelPlan = serde_json::from_slice(r.take(plan_len)?)
            .map_err(|e| r.error_at(at + 4, format!("embedded plan: {e}")))?;
        if plan.layer_id != layer_id {
            return Err(r.error_at(at, format!("plan is for {}, header says {layer_id}", plan.layer_id)));
        }
        plan.validate()?;

        let mut parts = Vec::with_capacity(3);
        for _ in 0..3 {
            let at = r.offset;
            let fmt = MxFormat::from_file_code(r.u8()?)?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            if !cols.is_multiple_of(BLOCK_SIZE) {
                return Err(r.error_at(at, format!("{cols} columns is not a multiple of {BLOCK_SIZE}")));
            }
            let n_blocks = rows
                .checked_mul(cols / BLOCK_SIZE)
                .filter(|n| n.checked_mul(BLOCK_SIZE + 1).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| r.error_at(at, format!("{rows}x{cols} part overruns the file")))?;
            let mut blocks = Vec::with_capacity(n_blocks);
            for _ in 0..n_blocks {
                let scale = E8M0Scale::from_byte(r.u8()?)?;
                let at = r.offset;
                let raw = r.take(BLOCK_SIZE)?;
                let mut codes = [ElementCode(0); BLOCK_SIZE];
                for (i, (slot, &b)) in codes.iter_mut().zip(raw).enumerate() {
                    *slot = ElementCode(b);
                    if !slot.is_valid(fmt) {
                        return Err(r.error_at(at + i, format!("code {b:#04x} does not fit {fmt}")));
                    }
                }
                blocks.push(MxBlock { scale, codes });
            }
            parts.push(MxTensor::from_blocks(fmt, rows, cols, 0, blocks)?);
        }
        r.finish()?;
        let parts: [MxTensor; 3] = parts.try_into().expect("three parts");
        let payload = if role == 0 {
            for (p, part) in crate::error_model::Precision::ALL.iter().zip(&parts) {
                if part.cols() != plan.count(*p) {
                    return Err(Error::PlanMismatch(format!(
                        "{} activation part has {} channels, plan says {}",
                        p.label(),
                        part.cols(),
                        plan.count(*p)
                    )));
                }
            }
            QuantPayload::Activation(MixedActivation::from_parts(layer_id, parts)?)
        } else {
            QuantPayload::Weight(QuantizedLinear::from_parts(plan.clone(), parts)?)
        };
        Ok(QuantFile { plan, payload })
    }
}

/// Plan JSON as written by calibration: the plan plus the statistics it was
/// built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    #[serde(flatten)]
    pub plan: ChannelPlan,
    #[serde(default)]
    pub num_samples: usize,
    #[serde(default)]
    pub channel_abs_mean: Vec<f64>,
    #[serde(default)]
    pub channel_abs_max: Vec<f64>,
}

impl PlanFile {
    pub fn new<T: Real>(plan: ChannelPlan, stats: &CalibStats<T>) -> Self {
        let f = |v: &T| v.to_f64().expect("finite statistic");
        PlanFile {
            plan,
            num_samples: stats.num_samples(),
            channel_abs_mean: stats.channel_abs_mean().iter().map(f).collect(),
            channel_abs_max: stats.channel_abs_max().iter().map(f).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let pf: PlanFile = serde_json::from_str(s)?;
        pf.plan.validate()?;
        Ok(pf)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Reader {
            bytes,
            offset: 0,
            what,
        }
    }

    fn error_at(&self, offset: usize, reason: String) -> Error {
        Error::Malformed {
            what: self.what,
            offset,
            reason,
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.offset
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.error_at(
                self.offset,
                format!("need {n} bytes, only {} left", self.remaining()),
            ));
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(self.error_at(0, format!("bad magic {got:?}, expected {magic:?}")));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let at = self.offset;
        let v = self.u16()?;
        if v != FORMAT_VERSION {
            return Err(self.error_at(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.error_at(self.offset, format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Write via a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<DenseTensor<f32>> {
    TensorFile::from_bytes(&read_bytes(path)?)?.into_tensor()
}

pub fn write_tensor(path: &Path, t: &DenseTensor<f32>) -> Result<()> {
    write_atomic(path, &TensorFile::from_tensor(t).to_bytes())
}

pub fn read_quant(path: &Path) -> Result<QuantFile> {
    QuantFile::from_bytes(&read_bytes(path)?)
}

pub fn write_quant(path: &Path, q: &QuantFile) -> Result<()> {
    write_atomic(path, &q.to_bytes()?)
}

pub fn read_plan(path: &Path) -> Result<PlanFile> {
    let text = String::from_utf8(read_bytes(path)?)
        .map_err(|e| Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?;
    PlanFile::from_json(&text)
}

pub fn write_plan(path: &Path, plan: &PlanFile) -> Result<()> {
    write_atomic(path, plan.to_json()?.as_bytes())
}
