//! Scalar 3D volumes, grid/normalized coordinate conventions and on-disk formats.
//!
//! Voxel data is stored x-fastest: the sample at grid index `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`. Continuous positions handed to networks and samplers
//! are expressed in normalized coordinates, where grid index `z_i` maps to
//! `2 * z_i / (n_i - 1) - 1`, so the corner voxels sit at `±1`.

mod nifti;
mod raw;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use raw::sidecar_path;

/// A position in normalized coordinates, each axis spanning `[-1, 1]` over the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedCoord(pub [f64; 3]);

impl NormalizedCoord {
    pub const ORIGIN: NormalizedCoord = NormalizedCoord([0.0; 3]);

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }
}

/// Maps a (possibly fractional) grid index to normalized coordinates.
pub fn grid_to_normalized(z: [f64; 3], dims: [usize; 3]) -> NormalizedCoord {
    let mut u = [0.0; 3];
    for i in 0..3 {
        u[i] = 2.0 * z[i] / (dims[i] - 1) as f64 - 1.0;
    }
    NormalizedCoord(u)
}

/// Inverse of [`grid_to_normalized`].
pub fn normalized_to_grid(u: NormalizedCoord, dims: [usize; 3]) -> [f64; 3] {
    let mut z = [0.0; 3];
    for i in 0..3 {
        z[i] = (u.0[i] + 1.0) * 0.5 * (dims[i] - 1) as f64;
    }
    z
}

/// Normalized coordinate of an integer voxel index.
pub fn voxel_to_normalized(x: usize, y: usize, z: usize, dims: [usize; 3]) -> NormalizedCoord {
    grid_to_normalized([x as f64, y as f64, z as f64], dims)
}

/// Size of one voxel along each axis, in normalized units.
pub fn voxel_size_normalized(dims: [usize; 3]) -> [f64; 3] {
    [
        2.0 / (dims[0] - 1) as f64,
        2.0 / (dims[1] - 1) as f64,
        2.0 / (dims[2] - 1) as f64,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeFormat {
    /// Header-less little-endian float32 samples plus a `<file>.json` sidecar.
    Raw,
    /// Single-file uncompressed NIfTI-1 (`.nii`), read-only.
    Nifti1,
}

impl VolumeFormat {
    pub fn from_path(path: &Path) -> VolumeFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("nii") => VolumeFormat::Nifti1,
            _ => VolumeFormat::Raw,
        }
    }
}

/// A 3D scalar grid with physical spacing (mm per voxel) and origin (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        validate_geometry(dims, spacing)?;
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::SizeMismatch(format!(
                "dims {:?} need {} samples, got {}",
                dims,
                expected,
                data.len()
            )));
        }
        if !origin.iter().all(|o| o.is_finite()) {
            return Err(Error::Validation(format!("origin {origin:?} is not finite")));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite sample {} at linear index {i}",
                data[i]
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            origin,
            data,
        })
    }

    /// Unit spacing, zero origin.
    pub fn from_data(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        Volume::new(dims, [1.0; 3], [0.0; 3], data)
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume::from_data(dims, data)
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Result<Self> {
        Volume::from_data(dims, vec![value; dims[0] * dims[1] * dims[2]])
    }

    /// Copy of `self`'s geometry with new samples.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Volume::new(self.dims, self.spacing, self.origin, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Grid index triple of a linear index.
    pub fn unravel(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Volume> {
        let path = path.as_ref();
        load_volume(path, VolumeFormat::from_path(path))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_volume(self, path, VolumeFormat::from_path(path))
    }
}

fn validate_geometry(dims: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    if dims.iter().any(|&n| n < 2) {
        return Err(Error::Validation(format!(
            "every dimension must be at least 2, got {dims:?}"
        )));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Validation(format!(
            "spacing must be positive and finite, got {spacing:?}"
        )));
    }
    Ok(())
}

pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<Volume> {
    match format {
        VolumeFormat::Raw => raw::read(path),
        VolumeFormat::Nifti1 => nifti::read(path),
    }
}

pub fn save_volume(v: &Volume, path: &Path, format: VolumeFormat) -> Result<()> {
    validate_geometry(v.dims, v.spacing)?;
    match format {
        VolumeFormat::Raw => raw::write(v, path),
        VolumeFormat::Nifti1 => Err(Error::Unsupported(
            "NIfTI volumes are read-only; save as raw".into(),
        )),
    }
}

/// Jointly min-max normalizes a frame pair to `[0, 1]`.
///
/// Returns the two mapped volumes and the original `(lo, hi)` range so results
/// can be mapped back with [`denormalize_intensity`].
pub fn normalize_intensity(v0: &Volume, v1: &Volume) -> Result<(Volume, Volume, (f64, f64))> {
    let (lo0, hi0) = v0.min_max();
    let (lo1, hi1) = v1.min_max();
    let lo = lo0.min(lo1) as f64;
    let hi = hi0.max(hi1) as f64;
    if hi <= lo {
        return Err(Error::Degenerate(format!(
            "frame pair is jointly constant (value {lo})"
        )));
    }
    let span = hi - lo;
    let map = |v: &Volume| -> Result<Volume> {
        v.with_data(
            v.data
                .iter()
                .map(|&s| ((s as f64 - lo) / span) as f32)
                .collect(),
        )
    };
    Ok((map(v0)?, map(v1)?, (lo, hi)))
}

pub fn denormalize_intensity(v: &Volume, range: (f64, f64)) -> Result<Volume> {
    let (lo, hi) = range;
    v.with_data(
        v.data
            .iter()
            .map(|&s| (s as f64 * (hi - lo) + lo) as f32)
            .collect(),
    )
}
