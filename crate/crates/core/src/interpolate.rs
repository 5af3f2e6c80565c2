//! Frame synthesis by bidirectional backward warping.
//!
//! `I_t = w1 * I1(phi_{t->1}(x)) + w0 * I0(phi_{t->0}(x))`, evaluated at every
//! voxel of `I0`'s grid. One-way inference keeps only the `I1` branch.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Kinematics, MotionModel};
use crate::parallel::{chunk_ranges, WorkerPool};
use crate::sampler::{sample, volume_like};
use crate::volume::{voxel_to_normalized, NormalizedCoord, Volume};

const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeKind {
    #[default]
    Linear,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeStrategy {
    pub kind: MergeKind,
    /// Accepted for configuration compatibility; has no effect.
    pub beta: Option<f64>,
}

impl MergeStrategy {
    pub fn linear() -> MergeStrategy {
        MergeStrategy { kind: MergeKind::Linear, beta: None }
    }

    pub fn average() -> MergeStrategy {
        MergeStrategy { kind: MergeKind::Average, beta: None }
    }

    /// `(w0, w1)` at time `t`.
    pub fn weights(&self, t: f64) -> (f64, f64) {
        match self.kind {
            MergeKind::Linear => (1.0 - t, t),
            MergeKind::Average => (0.5, 0.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceDirection {
    OneWay,
    #[default]
    TwoWay,
}

fn check_pair(i0: &Volume, i1: &Volume) -> Result<()> {
    if i0.dims() != i1.dims() {
        return Err(Error::SizeMismatch(format!(
            "frame dims differ: {:?} vs {:?}",
            i0.dims(),
            i1.dims()
        )));
    }
    Ok(())
}

fn warped_branch(
    model: &MotionModel,
    x: &Array2<f64>,
    t: f64,
    target: f64,
    source: &Volume,
    first: usize,
    dims: [usize; 3],
) -> Result<Vec<f64>> {
    let m = model.map_points(x.view(), t, target)?;
    m.rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let u = NormalizedCoord([r[0], r[1], r[2]]);
            if !u.is_finite() {
                let v = first + i;
                return Err(Error::NonFiniteMap {
                    x: v % dims[0],
                    y: (v / dims[0]) % dims[1],
                    z: v / (dims[0] * dims[1]),
                });
            }
            Ok(sample(source, u))
        })
        .collect()
}

/// Synthesizes the frame at time `t` on `I0`'s grid.
pub fn interpolate_frame(
    model: &MotionModel,
    i0: &Volume,
    i1: &Volume,
    t: f64,
    merge: MergeStrategy,
    direction: InferenceDirection,
    pool: &WorkerPool,
) -> Result<Volume> {
    check_pair(i0, i1)?;
    let k = model.grid_index(t)?;
    let t = k as f64 / model.ode_steps() as f64;
    let (w0, w1) = match direction {
        InferenceDirection::TwoWay => merge.weights(t),
        InferenceDirection::OneWay => (0.0, 1.0),
    };
    let dims = i0.dims();
    let chunks = chunk_ranges(i0.len(), CHUNK);
    let parts = pool.map(&chunks, |r| -> Result<Vec<f32>> {
        let mut x = Array2::zeros((r.len(), 3));
        for (row, i) in r.clone().enumerate() {
            let u = voxel_to_normalized(i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1]), dims);
            for a in 0..3 {
                x[[row, a]] = u.0[a];
            }
        }
        let b1 = if w1 != 0.0 {
            warped_branch(model, &x, t, 1.0, i1, r.start, dims)?
        } else {
            vec![0.0; r.len()]
        };
        let b0 = if w0 != 0.0 {
            warped_branch(model, &x, t, 0.0, i0, r.start, dims)?
        } else {
            vec![0.0; r.len()]
        };
        Ok(b0.iter().zip(&b1).map(|(a, b)| (w0 * a + w1 * b) as f32).collect())
    });
    let mut data = Vec::with_capacity(i0.len());
    for p in parts {
        data.extend(p?);
    }
    volume_like(i0, dims, data)
}

/// Frames at `t = k / (n_frames + 1)` for `k = 1..=n_frames`, paired with their times.
pub fn interpolate_sequence(
    model: &MotionModel,
    i0: &Volume,
    i1: &Volume,
    n_frames: usize,
    merge: MergeStrategy,
    direction: InferenceDirection,
    pool: &WorkerPool,
) -> Result<Vec<(f64, Volume)>> {
    if n_frames == 0 {
        return Err(Error::Config("at least one intermediate frame is required".into()));
    }
    if !model.ode_steps().is_multiple_of(n_frames + 1) {
        return Err(Error::Config(format!(
            "T = {} does not put {} intermediate frames on the integration grid (needs a multiple of {})",
            model.ode_steps(),
            n_frames,
            n_frames + 1
        )));
    }
    (1..=n_frames)
        .map(|k| {
            let t = k as f64 / (n_frames + 1) as f64;
            interpolate_frame(model, i0, i1, t, merge, direction, pool).map(|v| (t, v))
        })
        .collect()
}

/// Interpolation with a displacement model, whose `phi_{t->1}` is approximated by
/// `(1 - t) * phi_{0->1}`.
pub fn temporal_discrete_interpolate(
    model: &MotionModel,
    i0: &Volume,
    i1: &Volume,
    t: f64,
    merge: MergeStrategy,
    direction: InferenceDirection,
    pool: &WorkerPool,
) -> Result<Volume> {
    if model.kinematics() != Kinematics::Displacement {
        return Err(Error::Mode(
            "temporal-discrete interpolation needs a displacement model".into(),
        ));
    }
    interpolate_frame(model, i0, i1, t, merge, direction, pool)
}

/// File name for the frame at `t = numerator / denominator`.
pub fn frame_file_name(numerator: usize, denominator: usize) -> String {
    format!("frame_t{numerator}_{denominator}.vol")
}

/// `|a - b|` per voxel.
pub fn abs_difference(a: &Volume, b: &Volume) -> Result<Volume> {
    check_pair(a, b)?;
    a.with_data(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{GridField, MotionField};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn([7, 6, 5], |_, _, _| rng.gen::<f32>()).unwrap()
    }

    fn constant_model(c: [f64; 3], kin: Kinematics, steps: usize) -> MotionModel {
        let mut g = GridField::zeros([3, 3, 3], 1, [1.0; 3]).unwrap();
        g.fill(|_, _| c);
        MotionModel::from_field(MotionField::Grid(g), kin, steps).unwrap()
    }

    #[test]
    fn merge_weights_sum_to_one() {
        for t in [0.0, 0.25, 0.5, 1.0] {
            for m in [MergeStrategy::linear(), MergeStrategy::average()] {
                let (a, b) = m.weights(t);
                assert_eq!(a + b, 1.0);
            }
        }
        assert_eq!(MergeStrategy::linear().weights(0.25), (0.75, 0.25));
    }

    #[test]
    fn endpoints_reproduce_inputs() {
        let (a, b) = (noise(1), noise(2));
        let m = constant_model([0.3, -0.2, 0.1], Kinematics::Velocity, 4);
        let pool = WorkerPool::serial();
        let f0 = interpolate_frame(&m, &a, &b, 0.0, MergeStrategy::linear(), InferenceDirection::TwoWay, &pool).unwrap();
        let f1 = interpolate_frame(&m, &a, &b, 1.0, MergeStrategy::linear(), InferenceDirection::TwoWay, &pool).unwrap();
        assert_eq!(f0.data(), a.data());
        assert_eq!(f1.data(), b.data());
    }

    #[test]
    fn identity_motion_cross_fades() {
        let (a, b) = (noise(3), noise(4));
        let m = constant_model([0.0; 3], Kinematics::Velocity, 4);
        let f = interpolate_frame(&m, &a, &b, 0.25, MergeStrategy::linear(), InferenceDirection::TwoWay, &WorkerPool::serial()).unwrap();
        for ((o, x), y) in f.data().iter().zip(a.data()).zip(b.data()) {
            assert_eq!(*o, (0.75 * *x as f64 + 0.25 * *y as f64) as f32);
        }
        let one = interpolate_frame(&m, &a, &b, 0.25, MergeStrategy::linear(), InferenceDirection::OneWay, &WorkerPool::serial()).unwrap();
        assert_eq!(one.data(), b.data());
    }

    #[test]
    fn half_shift_of_constant_displacement() {
        // two voxels over the full interval, one voxel at t = 0.5
        let dims = [9, 3, 3];
        let ramp = Volume::from_fn(dims, |x, _, _| x as f32).unwrap();
        let vx = 2.0 * 2.0 / 8.0;
        let m = constant_model([vx, 0.0, 0.0], Kinematics::Displacement, 2);
        let f = temporal_discrete_interpolate(&m, &ramp, &ramp, 0.5, MergeStrategy::linear(), InferenceDirection::OneWay, &WorkerPool::serial()).unwrap();
        for x in 0..7 {
            assert!((f.get(x, 1, 1) - (x + 1) as f32).abs() < 1e-5);
        }
        let v = constant_model([vx, 0.0, 0.0], Kinematics::Velocity, 2);
        assert!(matches!(
            temporal_discrete_interpolate(&v, &ramp, &ramp, 0.5, MergeStrategy::linear(), InferenceDirection::OneWay, &WorkerPool::serial()),
            Err(Error::Mode(_))
        ));
    }

    #[test]
    fn sequence_times_follow_the_grid() {
        let (a, b) = (noise(5), noise(6));
        let m = constant_model([0.0; 3], Kinematics::Velocity, 4);
        let seq = interpolate_sequence(&m, &a, &b, 3, MergeStrategy::linear(), InferenceDirection::TwoWay, &WorkerPool::serial()).unwrap();
        let times: Vec<f64> = seq.iter().map(|(t, _)| *t).collect();
        assert_eq!(times, vec![0.25, 0.5, 0.75]);
        assert!(interpolate_sequence(&m, &a, &b, 2, MergeStrategy::linear(), InferenceDirection::TwoWay, &WorkerPool::serial()).is_err());
        assert!(interpolate_sequence(&m, &a, &b, 0, MergeStrategy::linear(), InferenceDirection::TwoWay, &WorkerPool::serial()).is_err());
        let one = interpolate_sequence(&m, &a, &b, 1, MergeStrategy::linear(), InferenceDirection::TwoWay, &WorkerPool::serial()).unwrap();
        assert_eq!(one[0].0, 0.5);
    }

    #[test]
    fn merged_values_stay_between_branches() {
        let (a, b) = (noise(7), noise(8));
        let m = constant_model([0.2, 0.1, -0.1], Kinematics::Velocity, 2);
        let pool = WorkerPool::serial();
        let two = interpolate_frame(&m, &a, &b, 0.5, MergeStrategy::average(), InferenceDirection::TwoWay, &pool).unwrap();
        let fwd = interpolate_frame(&m, &a, &b, 0.5, MergeStrategy::average(), InferenceDirection::OneWay, &pool).unwrap();
        // I0 branch alone, with the I1 branch zeroed out
        let zero = Volume::filled(a.dims(), 0.0).unwrap();
        let bwd = interpolate_frame(&m, &a, &zero, 0.5, MergeStrategy::average(), InferenceDirection::TwoWay, &pool).unwrap();
        for i in 0..two.len() {
            let b0 = 2.0 * bwd.data()[i];
            let b1 = fwd.data()[i];
            let (lo, hi) = (b0.min(b1) - 1e-6, b0.max(b1) + 1e-6);
            assert!((lo..=hi).contains(&two.data()[i]));
        }
    }

    #[test]
    fn frame_names() {
        assert_eq!(frame_file_name(1, 4), "frame_t1_4.vol");
    }

    #[test]
    fn difference_volume() {
        let a = Volume::filled([2, 2, 2], 1.0).unwrap();
        let b = Volume::filled([2, 2, 2], 3.5).unwrap();
        assert!(abs_difference(&a, &b).unwrap().data().iter().all(|&v| v == 2.5));
    }
}
