//! Single-file checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "MVDC" version scale_denominator input_height input_width width_divisor
//! hidden_units retained_layers param_count
//! { name_len name_bytes ndim dims... f32_data... } * param_count
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ModelConfig, ModelError, ModelParams};
use crate::data::Scale;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVDC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let cfg = params.config();
    let mut out = Vec::with_capacity(64 + 4 * params.count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let header = [
        CHECKPOINT_VERSION,
        cfg.scale.denominator() as u32,
        cfg.input_height as u32,
        cfg.input_width as u32,
        cfg.width_divisor as u32,
        cfg.hidden_units as u32,
        params.plan().retained as u32,
        params.names().len() as u32,
    ];
    for v in header {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (name, t) in params.names().iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let io = |e: std::io::Error| ModelError::Checkpoint {
        path: path.display().to_string(),
        field: "file",
        detail: e.to_string(),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&out).map_err(io)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl Reader<'_> {
    fn err(&self, field: &'static str, detail: impl Into<String>) -> ModelError {
        ModelError::Checkpoint { path: self.path.clone(), field, detail: detail.into() }
    }

    fn take(&mut self, n: usize, field: &'static str) -> Result<&[u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(field, format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, ModelError> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let bytes = fs::read(path).map_err(|e| ModelError::Checkpoint {
        path: path.display().to_string(),
        field: "file",
        detail: e.to_string(),
    })?;
    let mut r = Reader { bytes: &bytes, pos: 0, path: path.display().to_string() };
    let magic = r.take(4, "magic")?.to_vec();
    if magic != CHECKPOINT_MAGIC {
        return Err(r.err("magic", format!("expected {CHECKPOINT_MAGIC:?}, found {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err("version", format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let denom = r.u32("scale")?;
    let scale = Scale::from_denominator(denom as usize)
        .ok_or_else(|| r.err("scale", format!("invalid scale denominator {denom}")))?;
    let config = ModelConfig {
        scale,
        input_height: r.u32("input_height")? as usize,
        input_width: r.u32("input_width")? as usize,
        width_divisor: r.u32("width_divisor")? as usize,
        hidden_units: r.u32("hidden_units")? as usize,
    };
    let retained = r.u32("retained_layers")? as usize;
    let plan = config.plan().map_err(|e| r.err("input_height", e.to_string()))?;
    if plan.retained != retained {
        return Err(r.err(
            "retained_layers",
            format!("file records {retained} layers, architecture implies {}", plan.retained),
        ));
    }
    let count = r.u32("param_count")? as usize;
    let mut names = Vec::with_capacity(count.min(1024));
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32("param_name")? as usize;
        let name = String::from_utf8(r.take(len, "param_name")?.to_vec())
            .map_err(|_| r.err("param_name", "not UTF-8"))?;
        let ndim = r.u32("param_shape")? as usize;
        if ndim > 8 {
            return Err(r.err("param_shape", format!("{name}: {ndim} dimensions")));
        }
        let shape = (0..ndim).map(|_| r.u32("param_shape").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.saturating_mul(4), "param_data")?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(shape, data).map_err(|e| r.err("param_shape", format!("{name}: {e}")))?;
        names.push(name);
        tensors.push(t);
    }
    if r.pos != bytes.len() {
        return Err(r.err("param_data", format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    ModelParams::from_parts(config, names, tensors).map_err(|e| r.err("param_table", e.to_string()))
}
