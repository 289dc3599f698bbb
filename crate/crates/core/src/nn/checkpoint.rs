//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! b"GGPCKPT1"
//! u32 manifest_len, manifest_len bytes of JSON manifest
//! u32 param_count
//! per parameter:
//!   u32 name_len, name (UTF-8)
//!   u32 rank, rank × u64 dims
//!   numel × f64 values
//! ```
//!
//! The manifest holds the architecture hyperparameters under `"model"`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::Tensor;

use super::{ModelConfig, MultiModalModel};

const MAGIC: &[u8; 8] = b"GGPCKPT1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f64>,
}

/// Which parameters a fine-tuning model took from a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Present in the model but not the checkpoint; kept at fresh initialization.
    pub fresh: Vec<String>,
}

/// Writes to a temporary sibling and renames, so an existing file is only
/// replaced by a complete checkpoint.
pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ParamStore<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + params.num_elements() * 8);
    buf.extend_from_slice(MAGIC);
    let manifest = serde_json::to_vec(&Manifest {
        format_version: 1,
        model: config.clone(),
    })?;
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    buf.extend_from_slice(&manifest);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let mlen = c.u32()? as usize;
    let manifest: Manifest = serde_json::from_slice(c.take(mlen)?)?;
    if manifest.format_version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            manifest.format_version
        )));
    }
    let count = c.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("bad shape".into()))?)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if !c.bytes.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
    }
    Ok(Checkpoint {
        config: manifest.model,
        params,
    })
}

impl MultiModalModel {
    /// Copies checkpoint parameters into this model by name.
    ///
    /// Fails, listing every offender, if the architectures differ, a
    /// checkpoint parameter is unknown or mis-shaped, or a non-decoder model
    /// parameter is missing from the checkpoint. Decoder parameters absent
    /// from the checkpoint keep their fresh values and are reported.
    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<LoadReport> {
        if ckpt.config != self.config {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint {:?} vs model {:?}",
                ckpt.config, self.config
            )));
        }
        let mut offenders = Vec::new();
        for (name, t) in ckpt.params.iter() {
            match self.params.get(name) {
                Ok(own) if own.shape() == t.shape() => {}
                Ok(own) => offenders.push(format!("{name}: shape {:?} vs {:?}", t.shape(), own.shape())),
                Err(_) => offenders.push(format!("{name}: not in model")),
            }
        }
        let mut report = LoadReport::default();
        for name in self.params.names() {
            if ckpt.params.contains(name) {
                report.loaded.push(name.to_string());
            } else if name.starts_with("decoder.") {
                report.fresh.push(name.to_string());
            } else {
                offenders.push(format!("{name}: missing from checkpoint"));
            }
        }
        if !offenders.is_empty() {
            return Err(Error::Checkpoint(format!(
                "mismatched parameters: {}",
                offenders.join("; ")
            )));
        }
        for (name, t) in ckpt.params.iter() {
            self.params.get_mut(name)?.data_mut().copy_from_slice(t.data());
        }
        Ok(report)
    }
}
