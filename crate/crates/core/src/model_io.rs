//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LEMF"  u16 version
//! u32 len, header JSON (config, stage, input dims, training manifest)
//! u32 block count, then per block:
//!     u16 len, name   u32 rows   u32 cols   rows*cols f64
//! u32 len, importance reports JSON
//! ```
//!
//! Parameters are stored as raw `f64` bits, so save, load and save again
//! produces identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LemofError, Result};
use crate::numeric::{Matrix2D, ParamTape};
use crate::pipeline::{PipelineModel, Stage, TrainConfig, TrainingManifest};
use crate::shapley::ShapleyReport;

pub const MODEL_MAGIC: &[u8; 4] = b"LEMF";
pub const MODEL_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    stage: Stage,
    input_dims: [usize; 2],
    manifest: TrainingManifest,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Reports {
    m1_ecg: Option<ShapleyReport>,
    m2_ehr: Option<ShapleyReport>,
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| LemofError::Format(format!("{what} {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_blob(out: &mut Vec<u8>, bytes: &[u8], what: &str) -> Result<()> {
    put_u32(out, bytes.len(), what)?;
    out.extend_from_slice(bytes);
    Ok(())
}

pub fn model_to_bytes(model: &PipelineModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let header = Header {
        config: *model.config(),
        stage: model.stage(),
        input_dims: model.input_dims(),
        manifest: model.manifest().clone(),
    };
    put_blob(&mut out, &serde_json::to_vec(&header)?, "header length")?;

    let tape = model.parameter_tape();
    put_u32(&mut out, tape.len(), "block count")?;
    for slot in tape.slots() {
        let name = slot.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| LemofError::Format(format!("parameter name {} is too long", slot.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        put_u32(&mut out, slot.value.rows(), "rows")?;
        put_u32(&mut out, slot.value.cols(), "cols")?;
        for v in slot.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    let reports = Reports {
        m1_ecg: model.report(crate::modality::ModalityId::M1Ecg).cloned(),
        m2_ehr: model.report(crate::modality::ModalityId::M2Ehr).cloned(),
    };
    put_blob(&mut out, &serde_json::to_vec(&reports)?, "reports length")?;
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                LemofError::Format(format!(
                    "model file truncated reading {what} at byte {} (needs {n}, {} left)",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn blob(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u32(what)?;
        self.take(n, what)
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<PipelineModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MODEL_MAGIC {
        return Err(LemofError::Format("not a model file (bad magic)".into()));
    }
    let version = r.u16("version")?;
    if version != MODEL_VERSION {
        return Err(LemofError::Format(format!(
            "unsupported model version {version}, expected {MODEL_VERSION}"
        )));
    }
    let header: Header = serde_json::from_slice(r.blob("header")?)
        .map_err(|e| LemofError::Format(format!("model header: {e}")))?;

    let count = r.u32("block count")?;
    let mut tape = ParamTape::new();
    for i in 0..count {
        let len = r.u16("block name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "block name")?)
            .map_err(|_| LemofError::Format(format!("block {i} name is not UTF-8")))?
            .to_string();
        let rows = r.u32("rows")?;
        let cols = r.u32("cols")?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| {
                LemofError::Format(format!(
                    "block {name} has an impossible shape {rows}x{cols}"
                ))
            })?;
        let data = r
            .take(n, &name)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tape.push(name, Matrix2D::from_vec(rows, cols, data)?)
            .map_err(|e| LemofError::Format(format!("block {i}: {e}")))?;
    }

    let reports: Reports = serde_json::from_slice(r.blob("reports")?)
        .map_err(|e| LemofError::Format(format!("model reports: {e}")))?;
    if r.pos != bytes.len() {
        return Err(LemofError::Format(format!(
            "{} trailing bytes after the model",
            bytes.len() - r.pos
        )));
    }
    PipelineModel::restore(
        header.config,
        header.stage,
        header.input_dims,
        [reports.m1_ecg, reports.m2_ehr],
        header.manifest,
        &tape,
    )
}

pub fn save_model(model: &PipelineModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<PipelineModel> {
    model_from_bytes(&std::fs::read(path)?)
}
