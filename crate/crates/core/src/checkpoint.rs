//! Plain-text parameter checkpoints.
//!
//! ```text
//! iaflow-ckpt v1
//! enc.0.v<TAB>6,8<TAB>hex of little-endian f64 values
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const HEADER: &str = "iaflow-ckpt v1";

pub fn to_string(store: &ParamStore) -> String {
    let mut out = format!("{HEADER}\n");
    for e in store.entries() {
        let dims: Vec<String> = e.value.shape().iter().map(|d| d.to_string()).collect();
        let _ = write!(out, "{}\t{}\t", e.name, dims.join(","));
        for v in e.value.data() {
            for b in v.to_le_bytes() {
                let _ = write!(out, "{b:02x}");
            }
        }
        out.push('\n');
    }
    out
}

fn parse_record(line: &str, ln: usize) -> Result<(String, Tensor)> {
    let mut parts = line.split('\t');
    let (Some(name), Some(dims), Some(hex), None) =
        (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(Error::Format(format!(
            "checkpoint line {ln}: expected three tab-separated fields"
        )));
    };
    let shape: Vec<usize> = if dims.is_empty() {
        Vec::new()
    } else {
        dims.split(',')
            .map(|d| {
                d.parse().map_err(|_| {
                    Error::Format(format!("checkpoint line {ln}: bad dimension `{d}`"))
                })
            })
            .collect::<Result<_>>()?
    };
    if hex.len() % 16 != 0 || !hex.is_ascii() {
        return Err(Error::Format(format!(
            "checkpoint line {ln}: value field is not whole 8-byte words"
        )));
    }
    let values = (0..hex.len() / 16)
        .map(|k| {
            let mut bytes = [0u8; 8];
            for (i, b) in bytes.iter_mut().enumerate() {
                let at = 16 * k + 2 * i;
                *b = u8::from_str_radix(&hex[at..at + 2], 16).map_err(|_| {
                    Error::Format(format!("checkpoint line {ln}: bad hex at column {at}"))
                })?;
            }
            Ok(f64::from_le_bytes(bytes))
        })
        .collect::<Result<Vec<f64>>>()?;
    let t = Tensor::new(shape, values)
        .map_err(|e| Error::Format(format!("checkpoint line {ln}: {e}")))?;
    Ok((name.to_string(), t))
}

/// Overwrites every parameter of `store` from checkpoint text. Names and
/// shapes must match exactly.
pub fn load_from_str(text: &str, store: &mut ParamStore) -> Result<()> {
    let mut lines = text.lines();
    match lines.next() {
        Some(HEADER) => {}
        other => {
            return Err(Error::Format(format!(
                "checkpoint header `{}` is not `{HEADER}`",
                other.unwrap_or("")
            )))
        }
    }
    let mut seen = vec![false; store.len()];
    for (i, line) in lines.enumerate() {
        let (name, value) = parse_record(line, i + 2)?;
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint has unknown parameter `{name}`")))?;
        if store.value(id).shape() != value.shape() {
            return Err(Error::Format(format!(
                "parameter `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                value.shape(),
                store.value(id).shape()
            )));
        }
        seen[id.index()] = true;
        store.set(id, value)?;
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        return Err(Error::Format(format!(
            "checkpoint is missing parameter `{}`",
            store.entries()[k].name
        )));
    }
    Ok(())
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    std::fs::write(path, to_string(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, store: &mut ParamStore) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_from_str(&text, store)
}
