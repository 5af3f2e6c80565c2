//! Control-point vector fields with first-order B-spline (trilinear) interpolation.

use crate::error::{Error, Result};
use crate::sampler::Stencil;
use crate::volume::{voxel_size_normalized, voxel_to_normalized, NormalizedCoord};

/// One or more vector grids over the normalized domain. Parameters are stored
/// in voxel units of the grid's target volume and multiplied by `scale`
/// (voxel size in normalized units) on evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    dims: [usize; 3],
    scale: [f64; 3],
    /// Each frame holds `3 * nodes` values, components interleaved per node.
    frames: Vec<Vec<f64>>,
}

impl GridField {
    pub fn zeros(dims: [usize; 3], n_frames: usize, scale: [f64; 3]) -> Result<GridField> {
        if dims.iter().any(|&n| n < 2) {
            return Err(Error::Config(format!("grid dims must be >= 2, got {dims:?}")));
        }
        if n_frames == 0 {
            return Err(Error::Config("grid field needs at least one frame".into()));
        }
        if !scale.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Config(format!("grid scale must be positive, got {scale:?}")));
        }
        let nodes = dims.iter().product::<usize>();
        Ok(GridField {
            dims,
            scale,
            frames: vec![vec![0.0; 3 * nodes]; n_frames],
        })
    }

    /// Grid over a volume of `volume_dims` with control points every `factor` voxels.
    pub fn for_volume(volume_dims: [usize; 3], factor: usize, n_frames: usize) -> Result<GridField> {
        if factor == 0 {
            return Err(Error::Config("grid factor must be positive".into()));
        }
        let dims = volume_dims.map(|n| ((n - 1).div_ceil(factor) + 1).max(2));
        GridField::zeros(dims, n_frames, voxel_size_normalized(volume_dims))
    }

    /// Fills every node with `f(frame, node position)`, given in normalized units.
    pub fn fill(&mut self, f: impl Fn(usize, NormalizedCoord) -> [f64; 3]) {
        let dims = self.dims;
        for (fi, frame) in self.frames.iter_mut().enumerate() {
            let mut i = 0;
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let v = f(fi, voxel_to_normalized(x, y, z, dims));
                        for c in 0..3 {
                            frame[3 * i + c] = v[c] / self.scale[c];
                        }
                        i += 1;
                    }
                }
            }
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn scale(&self) -> [f64; 3] {
        self.scale
    }

    /// Frame used at time `t`: frame `k` stands for `[k/F, (k+1)/F)`, the last
    /// frame also covers `t = 1`.
    pub fn frame_for_time(&self, t: f64) -> usize {
        let f = self.frames.len();
        if f == 1 {
            return 0;
        }
        ((t * f as f64 + 1e-9).floor().max(0.0) as usize).min(f - 1)
    }

    pub fn eval(&self, frame: usize, u: NormalizedCoord) -> [f64; 3] {
        let s = Stencil::new(self.dims, u);
        self.eval_stencil(frame, &s)
    }

    pub(crate) fn eval_stencil(&self, frame: usize, s: &Stencil) -> [f64; 3] {
        let data = &self.frames[frame];
        let mut v = [0.0; 3];
        for k in 0..8 {
            let n = 3 * s.index[k];
            for c in 0..3 {
                v[c] += s.weight[k] * data[n + c];
            }
        }
        for c in 0..3 {
            v[c] *= self.scale[c];
        }
        v
    }

    /// `J^T cot` where `J[c][i] = d v_c / d u_i`.
    pub(crate) fn jacobian_t_dot(&self, frame: usize, s: &Stencil, cot: [f64; 3]) -> [f64; 3] {
        let data = &self.frames[frame];
        let mut out = [0.0; 3];
        for k in 0..8 {
            let n = 3 * s.index[k];
            let mut proj = 0.0;
            for c in 0..3 {
                proj += cot[c] * self.scale[c] * data[n + c];
            }
            for i in 0..3 {
                out[i] += s.dweight[k][i] * proj;
            }
        }
        out
    }

    /// Adds `d<cot, v>/d params` into a flat gradient buffer.
    pub(crate) fn accumulate(&self, frame: usize, s: &Stencil, cot: [f64; 3], grads: &mut [f64]) {
        let offset = frame * self.frames[0].len();
        for k in 0..8 {
            let n = offset + 3 * s.index[k];
            for c in 0..3 {
                grads[n + c] += s.weight[k] * self.scale[c] * cot[c];
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        self.frames.concat()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(self.param_count(), flat.len()));
        }
        let per_frame = flat.len() / self.frames.len();
        for (frame, chunk) in self.frames.iter_mut().zip(flat.chunks(per_frame)) {
            frame.copy_from_slice(chunk);
        }
        Ok(())
    }

    pub fn apply_update(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.param_count() {
            return Err(Error::shape(self.param_count(), delta.len()));
        }
        for (p, d) in self.frames.iter_mut().flatten().zip(delta) {
            *p += d;
        }
        Ok(())
    }
}
