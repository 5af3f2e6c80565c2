//! Raw float32 volumes with a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::Volume;
use crate::error::{Error, Result};

/// `frame.vol` -> `frame.vol.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub(super) fn write(v: &Volume, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for s in &v.data {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = json!({
        "dims": v.dims,
        "spacing": v.spacing,
        "origin": v.origin,
    });
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
}

pub(super) fn read(path: &Path) -> Result<Volume> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header: Value = serde_json::from_str(&text)
        .map_err(|e| Error::format("sidecar", format!("{}: {e}", side.display())))?;

    let dims = usize_triple(&header, "dims")?;
    let spacing = match header.get("spacing") {
        Some(_) => f64_triple(&header, "spacing")?,
        None => return Err(Error::format("spacing", "missing")),
    };
    let origin = match header.get("origin") {
        Some(_) => f64_triple(&header, "origin")?,
        None => [0.0; 3],
    };

    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = dims[0] * dims[1] * dims[2];
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::SizeMismatch(format!(
            "sidecar dims {:?} need {} float32 samples but {} holds {} bytes",
            dims,
            expected,
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(dims, spacing, origin, data)
}

fn triple<'a>(header: &'a Value, field: &str) -> Result<&'a Vec<Value>> {
    let arr = header
        .get(field)
        .ok_or_else(|| Error::format(field, "missing"))?
        .as_array()
        .ok_or_else(|| Error::format(field, "expected an array of three numbers"))?;
    if arr.len() != 3 {
        return Err(Error::format(
            field,
            format!("expected three entries, got {}", arr.len()),
        ));
    }
    Ok(arr)
}

pub(crate) fn usize_triple(header: &Value, field: &str) -> Result<[usize; 3]> {
    let arr = triple(header, field)?;
    let mut out = [0usize; 3];
    for (o, v) in out.iter_mut().zip(arr) {
        *o = v
            .as_u64()
            .ok_or_else(|| Error::format(field, format!("`{v}` is not a non-negative integer")))?
            as usize;
    }
    Ok(out)
}

pub(crate) fn f64_triple(header: &Value, field: &str) -> Result<[f64; 3]> {
    let arr = triple(header, field)?;
    let mut out = [0.0; 3];
    for (o, v) in out.iter_mut().zip(arr) {
        *o = v
            .as_f64()
            .ok_or_else(|| Error::format(field, format!("`{v}` is not a number")))?;
    }
    Ok(out)
}
