//! Dense displacement fields sampled on a voxel grid.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::MotionModel;
use crate::error::{Error, Result};
use crate::parallel::{chunk_ranges, WorkerPool};
use crate::volume::{voxel_size_normalized, voxel_to_normalized};

const CHUNK: usize = 4096;

/// Per-voxel displacement `phi_{t0 -> t1}(x) - x` in voxel units, components
/// interleaved (`[dx, dy, dz]` per voxel, x fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub dims: [usize; 3],
    pub t0: f64,
    pub t1: f64,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    components: usize,
    units: String,
    t0: f64,
    t1: f64,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl DisplacementField {
    pub fn voxel(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        let i = 3 * (x + self.dims[0] * (y + self.dims[1] * z));
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Euclidean displacement length per voxel.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|d| d.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt())
            .collect()
    }

    /// Writes little-endian f32 triples plus a JSON sidecar at `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let meta = Sidecar {
            dims: self.dims,
            components: 3,
            units: "voxels".into(),
            t0: self.t0,
            t1: self.t1,
        };
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(side, e))
    }

    pub fn load(path: &Path) -> Result<DisplacementField> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::format("sidecar", e.to_string()))?;
        if meta.components != 3 {
            return Err(Error::format("components", format!("expected 3, got {}", meta.components)));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let expected = 12 * meta.dims.iter().product::<usize>();
        if bytes.len() != expected {
            return Err(Error::SizeMismatch(format!(
                "{} holds {} bytes, sidecar dims {:?} need {expected}",
                path.display(),
                bytes.len(),
                meta.dims
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(DisplacementField {
            dims: meta.dims,
            t0: meta.t0,
            t1: meta.t1,
            data,
        })
    }
}

/// Samples `phi_{t0 -> t1}(x) - x` at every voxel centre of a `dims` grid.
pub fn dense_displacement(
    model: &MotionModel,
    dims: [usize; 3],
    t0: f64,
    t1: f64,
    pool: &WorkerPool,
) -> Result<DisplacementField> {
    let n: usize = dims.iter().product();
    let voxel = voxel_size_normalized(dims);
    let chunks = chunk_ranges(n, CHUNK);
    let parts = pool.map(&chunks, |r| -> Result<Vec<f32>> {
        let mut x = Array2::zeros((r.len(), 3));
        for (row, i) in r.clone().enumerate() {
            let (ix, rest) = (i % dims[0], i / dims[0]);
            let u = voxel_to_normalized(ix, rest % dims[1], rest / dims[1], dims);
            for a in 0..3 {
                x[[row, a]] = u.0[a];
            }
        }
        let d = model.displacement(x.view(), t0, t1)?;
        Ok(d.rows()
            .into_iter()
            .flat_map(|row| (0..3).map(move |a| (row[a] / voxel[a]) as f32))
            .collect())
    });
    let mut data = Vec::with_capacity(3 * n);
    for p in parts {
        data.extend(p?);
    }
    Ok(DisplacementField { dims, t0, t1, data })
}
