//! Trilinear sampling at normalized coordinates, with analytic gradients, and
//! backward warping of whole volumes.
//!
//! Out-of-range coordinates are clamped to the border voxels. Inside the domain
//! the gradient is the exact derivative of the trilinear interpolant; at a cell
//! face it is taken from the cell on the lower side.

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::volume::{voxel_to_normalized, NormalizedCoord, Volume};

/// Grid positions closer than this (in voxels) to a node are treated as on it.
const NODE_SNAP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleResult {
    pub value: f64,
    /// d value / d u, in normalized-coordinate units.
    pub grad: [f64; 3],
}

#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: usize,
    w: [f64; 2],
    dw: [f64; 2],
}

fn axis(u: f64, n: usize) -> Axis {
    let last = (n - 1) as f64;
    let mut g = (u + 1.0) * 0.5 * last;
    let r = g.round();
    if (g - r).abs() < NODE_SNAP {
        g = r;
    }
    let scale = 0.5 * last;
    if g < 0.0 {
        return Axis { lo: 0, w: [1.0, 0.0], dw: [0.0, 0.0] };
    }
    if g > last {
        return Axis { lo: n - 2, w: [0.0, 1.0], dw: [0.0, 0.0] };
    }
    let lo = (g.ceil() as usize).saturating_sub(1).min(n - 2);
    let f = g - lo as f64;
    Axis {
        lo,
        w: [1.0 - f, f],
        dw: [-scale, scale],
    }
}

/// The eight interpolation nodes of a position together with their weights and
/// weight derivatives (normalized units). Shared by volume and vector-grid sampling.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub index: [usize; 8],
    pub weight: [f64; 8],
    pub dweight: [[f64; 3]; 8],
}

impl Stencil {
    pub fn new(dims: [usize; 3], u: NormalizedCoord) -> Stencil {
        let ax = axis(u.0[0], dims[0]);
        let ay = axis(u.0[1], dims[1]);
        let az = axis(u.0[2], dims[2]);
        let mut s = Stencil {
            index: [0; 8],
            weight: [0.0; 8],
            dweight: [[0.0; 3]; 8],
        };
        let mut k = 0;
        for c in 0..2 {
            for b in 0..2 {
                for a in 0..2 {
                    s.index[k] = (ax.lo + a) + dims[0] * ((ay.lo + b) + dims[1] * (az.lo + c));
                    s.weight[k] = ax.w[a] * ay.w[b] * az.w[c];
                    s.dweight[k] = [
                        ax.dw[a] * ay.w[b] * az.w[c],
                        ax.w[a] * ay.dw[b] * az.w[c],
                        ax.w[a] * ay.w[b] * az.dw[c],
                    ];
                    k += 1;
                }
            }
        }
        s
    }

    #[inline]
    pub fn apply(&self, data: &[f32]) -> f64 {
        self.index
            .iter()
            .zip(&self.weight)
            .map(|(&i, &w)| w * data[i] as f64)
            .sum()
    }

    #[inline]
    pub fn apply_with_grad(&self, data: &[f32]) -> SampleResult {
        let mut value = 0.0;
        let mut grad = [0.0; 3];
        for k in 0..8 {
            let d = data[self.index[k]] as f64;
            value += self.weight[k] * d;
            for (g, dw) in grad.iter_mut().zip(&self.dweight[k]) {
                *g += dw * d;
            }
        }
        SampleResult { value, grad }
    }
}

/// Trilinear sample of `v` at `u`, border-clamped.
pub fn sample(v: &Volume, u: NormalizedCoord) -> f64 {
    Stencil::new(v.dims(), u).apply(v.data())
}

pub fn sample_with_grad(v: &Volume, u: NormalizedCoord) -> SampleResult {
    Stencil::new(v.dims(), u).apply_with_grad(v.data())
}

/// Samples `v` at every row of an `(n, 3)` coordinate array.
pub fn sample_rows(v: &Volume, coords: ArrayView2<f64>) -> Vec<f64> {
    coords
        .rows()
        .into_iter()
        .map(|r| sample(v, NormalizedCoord([r[0], r[1], r[2]])))
        .collect()
}

/// Backward warp: `out(z) = v(map(u(z)))` for every voxel `z` of `out_dims`.
pub fn warp_backward(
    v: &Volume,
    map: impl Fn(NormalizedCoord) -> NormalizedCoord,
    out_dims: [usize; 3],
) -> Result<Volume> {
    let mut data = Vec::with_capacity(out_dims.iter().product());
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let m = map(voxel_to_normalized(x, y, z, out_dims));
                if !m.is_finite() {
                    return Err(Error::NonFiniteMap { x, y, z });
                }
                data.push(sample(v, m) as f32);
            }
        }
    }
    volume_like(v, out_dims, data)
}

/// A volume on `out_dims` covering the same physical extent as `v`.
pub(crate) fn volume_like(v: &Volume, out_dims: [usize; 3], data: Vec<f32>) -> Result<Volume> {
    let spacing = if out_dims == v.dims() {
        v.spacing()
    } else {
        let (s, d) = (v.spacing(), v.dims());
        [
            s[0] * (d[0] - 1) as f64 / (out_dims[0].max(2) - 1) as f64,
            s[1] * (d[1] - 1) as f64 / (out_dims[1].max(2) - 1) as f64,
            s[2] * (d[2] - 1) as f64 / (out_dims[2].max(2) - 1) as f64,
        ]
    };
    Volume::new(out_dims, spacing, v.origin(), data)
}
