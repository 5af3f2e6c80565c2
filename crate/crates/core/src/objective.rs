//! The registration objective: similarity of warped frames plus regularizers,
//! evaluated on random voxel minibatches.
//!
//! ```text
//! L = D(I0(x), I1(phi_{0->1}(x))) + D(I1(y), I0(phi_{1->0}(y)))
//!   + l1 * R1 + l2 * R2 + l3 * R3
//! ```
//!
//! `R2` is the mean of `|v|^2` over every (particle, Euler step) pair of both
//! trajectories, `R1` the mean squared displacement of all particles and `R3`
//! the squared parameter norm. The backward term is dropped for one-way runs
//! and for displacement models.
//!
//! Particles are processed in fixed-size chunks whose gradients are reduced in
//! chunk order, so results do not depend on the number of workers.

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Kinematics, ModelGrads, MotionModel};
use crate::parallel::{chunk_ranges, WorkerPool};
use crate::sampler::sample_with_grad;
use crate::volume::{voxel_to_normalized, NormalizedCoord, Volume};

const CHUNK: usize = 512;
const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Ssd,
    Ncc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub similarity: Similarity,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub two_way: bool,
    /// Particles per direction.
    pub batch_voxels: usize,
    /// Split `batch_voxels` between the two directions instead of using it for each.
    pub half_batch: bool,
    /// Use the same grid points for both directions.
    pub shared_batch: bool,
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            similarity: Similarity::Ssd,
            lambda1: 0.0,
            lambda2: 1e-4,
            lambda3: 0.0,
            two_way: true,
            batch_voxels: 10_000,
            half_batch: false,
            shared_batch: false,
            seed: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.batch_voxels == 0 {
            return Err(Error::Config("batch_voxels must be positive".into()));
        }
        Ok(())
    }
}

/// Objective components. Similarity and regularizer terms are unweighted;
/// `total` applies the lambdas.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub forward_similarity: f64,
    pub backward_similarity: f64,
    pub reg_velocity: f64,
    pub reg_field: f64,
    pub reg_params: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.forward_similarity,
            self.backward_similarity,
            self.reg_velocity,
            self.reg_field,
            self.reg_params,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Minibatch of grid points: flat voxel indices and their normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `(n, 3)`.
    pub coords: Array2<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `n` distinct grid points drawn uniformly, deterministic per `(seed, step)`.
pub fn sample_batch(dims: [usize; 3], n: usize, seed: u64, step: usize) -> Result<Batch> {
    sample_stream(dims, n, seed, 2 * step as u64)
}

fn sample_stream(dims: [usize; 3], n: usize, seed: u64, stream: u64) -> Result<Batch> {
    let total: usize = dims.iter().product();
    if n > total {
        return Err(Error::Config(format!(
            "batch of {n} exceeds the {total} voxels of the volume"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let indices = rand::seq::index::sample(&mut rng, total, n).into_vec();
    let mut coords = Array2::zeros((n, 3));
    for (row, &i) in indices.iter().enumerate() {
        let u = voxel_to_normalized(i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1]), dims);
        for a in 0..3 {
            coords[[row, a]] = u.0[a];
        }
    }
    Ok(Batch { indices, coords })
}

fn check_pair(pred: &[f64], reference: &[f64], min: usize) -> Result<()> {
    if pred.len() != reference.len() {
        return Err(Error::shape(reference.len(), pred.len()));
    }
    if pred.len() < min {
        return Err(Error::Validation(format!(
            "similarity needs at least {min} samples, got {}",
            pred.len()
        )));
    }
    Ok(())
}

/// Mean squared difference.
pub fn similarity_ssd(pred: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(pred, reference, 1)?;
    let sum: f64 = pred.iter().zip(reference).map(|(p, r)| (p - r).powi(2)).sum();
    Ok(sum / pred.len() as f64)
}

/// `1 - cov / (sigma_pred * sigma_ref)`, standard deviations floored at 1e-6.
pub fn similarity_ncc(pred: &[f64], reference: &[f64]) -> Result<f64> {
    Ok(ncc_with_grad(pred, reference)?.0)
}

/// NCC loss and its gradient with respect to `pred`.
pub fn ncc_with_grad(pred: &[f64], reference: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_pair(pred, reference, 2)?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mr = reference.iter().sum::<f64>() / n;
    let (mut cov, mut vp, mut vr) = (0.0, 0.0, 0.0);
    for (p, r) in pred.iter().zip(reference) {
        cov += (p - mp) * (r - mr);
        vp += (p - mp).powi(2);
        vr += (r - mr).powi(2);
    }
    cov /= n;
    let raw_sp = (vp / n).sqrt();
    let sp = raw_sp.max(SIGMA_FLOOR);
    let sr = (vr / n).sqrt().max(SIGMA_FLOOR);
    let rho = cov / (sp * sr);
    let floored = raw_sp < SIGMA_FLOOR;
    let grad = pred
        .iter()
        .zip(reference)
        .map(|(p, r)| {
            let dcov = (r - mr) / (n * sp * sr);
            let dsp = if floored { 0.0 } else { rho * (p - mp) / (n * sp * sp) };
            -(dcov - dsp)
        })
        .collect();
    Ok((1.0 - rho, grad))
}

/// One direction of the objective: particles start at `coords` at time `t0`,
/// the moving frame is sampled at their positions at `t1`.
struct Direction<'a> {
    coords: ArrayView2<'a, f64>,
    reference: Vec<f64>,
    moving: &'a Volume,
    t0: f64,
    t1: f64,
}

struct Weights {
    /// Per-particle coefficient of `|phi(x) - x|^2`.
    field: f64,
    /// Per-(particle, step) coefficient of `|v|^2`.
    velocity: f64,
}

/// Similarity share plus raw sums of squared displacements and velocities.
#[derive(Default)]
struct ChunkOut {
    similarity: f64,
    field: f64,
    velocity: f64,
}

fn row(a: &Array2<f64>, i: usize) -> NormalizedCoord {
    NormalizedCoord([a[[i, 0]], a[[i, 1]], a[[i, 2]]])
}

/// Runs one chunk forward and backward. With `pred_cot = None` the similarity
/// is the chunk's share of the batch SSD; otherwise `pred_cot` holds
/// `dD/dpred` for the chunk's particles.
fn chunk_pass(
    model: &MotionModel,
    dir: &Direction,
    range: std::ops::Range<usize>,
    n_total: usize,
    weights: &Weights,
    pred_cot: Option<&[f64]>,
) -> Result<(ChunkOut, ModelGrads)> {
    let x = dir.coords.slice(s![range.clone(), ..]);
    let mut grads = ModelGrads::zeros_like(model);
    let mut out = ChunkOut::default();

    let mut terminal_cot = |terminal: &Array2<f64>| {
        let mut cot = Array2::zeros(terminal.raw_dim());
        for i in 0..terminal.nrows() {
            let s = sample_with_grad(dir.moving, row(terminal, i));
            let c = match pred_cot {
                None => {
                    let d = s.value - dir.reference[range.start + i];
                    out.similarity += d * d / n_total as f64;
                    2.0 * d / n_total as f64
                }
                Some(c) => c[i],
            };
            for a in 0..3 {
                cot[[i, a]] = c * s.grad[a];
            }
            for a in 0..3 {
                let disp = terminal[[i, a]] - x[[i, a]];
                out.field += disp * disp;
                if weights.field > 0.0 {
                    cot[[i, a]] += 2.0 * weights.field * disp;
                }
            }
        }
        cot
    };

    match model.kinematics() {
        Kinematics::Velocity => {
            let traj = model.integrate(x, dir.t0, dir.t1)?;
            let cot = terminal_cot(traj.terminal());
            out.velocity = traj
                .velocities.iter().map(|v| v.iter().map(|c| c * c).sum::<f64>()).sum::<f64>();
            model.backprop_trajectory_into(&traj, cot.view(), weights.velocity, &mut grads)?;
        }
        Kinematics::Displacement => {
            let (g, tape) = model.base_displacement_taped(x)?;
            let span = dir.t1 - dir.t0;
            let terminal = &g * span + x;
            let cot = terminal_cot(&terminal) * span;
            model.backprop_displacement(x, &tape, cot.view(), &mut grads)?;
        }
    }
    Ok((out, grads))
}

fn predictions(model: &MotionModel, dir: &Direction, pool: &WorkerPool) -> Result<Vec<f64>> {
    let chunks = chunk_ranges(dir.coords.nrows(), CHUNK);
    let parts = pool.map(&chunks, |r| -> Result<Vec<f64>> {
        let x = dir.coords.slice(s![r.clone(), ..]);
        let terminal = model.map_points(x, dir.t0, dir.t1)?;
        Ok((0..terminal.nrows())
            .map(|i| crate::sampler::sample(dir.moving, row(&terminal, i)))
            .collect())
    });
    let mut out = Vec::with_capacity(dir.coords.nrows());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn run_direction(
    model: &MotionModel,
    dir: &Direction,
    cfg: &LossConfig,
    weights: &Weights,
    pool: &WorkerPool,
    grads: &mut ModelGrads,
) -> Result<ChunkOut> {
    let n = dir.coords.nrows();
    let mut total = ChunkOut::default();
    let pred_cot = match cfg.similarity {
        Similarity::Ssd => None,
        Similarity::Ncc => {
            let pred = predictions(model, dir, pool)?;
            let (loss, g) = ncc_with_grad(&pred, &dir.reference)?;
            total.similarity = loss;
            Some(g)
        }
    };
    let chunks = chunk_ranges(n, CHUNK);
    let parts = pool.map(&chunks, |r| {
        let cot = pred_cot.as_ref().map(|c| &c[r.clone()]);
        chunk_pass(model, dir, r.clone(), n, weights, cot)
    });
    for p in parts {
        let (out, g) = p?;
        total.similarity += out.similarity;
        total.field += out.field;
        total.velocity += out.velocity;
        grads.add_assign(&g);
    }
    Ok(total)
}

/// Evaluates the objective on the minibatch of `step` and its parameter gradient.
pub fn evaluate_loss(
    model: &MotionModel,
    i0: &Volume,
    i1: &Volume,
    cfg: &LossConfig,
    step: usize,
    pool: &WorkerPool,
) -> Result<(LossBreakdown, ModelGrads)> {
    cfg.validate()?;
    if i0.dims() != i1.dims() {
        return Err(Error::SizeMismatch(format!(
            "frame dims differ: {:?} vs {:?}",
            i0.dims(),
            i1.dims()
        )));
    }
    let dims = i0.dims();
    let two_way = cfg.two_way && model.kinematics() == Kinematics::Velocity;
    let n = if two_way && cfg.half_batch {
        (cfg.batch_voxels / 2).max(2)
    } else {
        cfg.batch_voxels
    };

    let fwd_batch = sample_stream(dims, n, cfg.seed, 2 * step as u64)?;
    let bwd_batch = if !two_way {
        None
    } else if cfg.shared_batch {
        Some(fwd_batch.clone())
    } else {
        Some(sample_stream(dims, n, cfg.seed, 2 * step as u64 + 1)?)
    };

    let steps_per_dir = match model.kinematics() {
        Kinematics::Velocity => model.ode_steps(),
        Kinematics::Displacement => 0,
    };
    let directions = if two_way { 2 } else { 1 };
    let particles = directions * n;
    let weights = Weights {
        field: cfg.lambda1 / particles as f64,
        velocity: if steps_per_dir == 0 {
            0.0
        } else {
            cfg.lambda2 / (particles * steps_per_dir) as f64
        },
    };

    let values = |v: &Volume, b: &Batch| b.indices.iter().map(|&i| v.data()[i] as f64).collect();
    let mut grads = ModelGrads::zeros_like(model);
    let fwd = Direction {
        coords: fwd_batch.coords.view(),
        reference: values(i0, &fwd_batch),
        moving: i1,
        t0: 0.0,
        t1: 1.0,
    };
    let f = run_direction(model, &fwd, cfg, &weights, pool, &mut grads)?;
    let b = match &bwd_batch {
        Some(batch) => {
            let bwd = Direction {
                coords: batch.coords.view(),
                reference: values(i1, batch),
                moving: i0,
                t0: 1.0,
                t1: 0.0,
            };
            run_direction(model, &bwd, cfg, &weights, pool, &mut grads)?
        }
        None => ChunkOut::default(),
    };

    let reg_params = if cfg.lambda3 > 0.0 {
        grads.add_scaled_params(model, 2.0 * cfg.lambda3);
        model.flatten_params().iter().map(|p| p * p).sum()
    } else {
        0.0
    };
    let reg_velocity = if steps_per_dir == 0 {
        0.0
    } else {
        (f.velocity + b.velocity) / (particles * steps_per_dir) as f64
    };
    let reg_field = (f.field + b.field) / particles as f64;
    let breakdown = LossBreakdown {
        total: f.similarity
            + b.similarity
            + cfg.lambda2 * reg_velocity
            + cfg.lambda1 * reg_field
            + cfg.lambda3 * reg_params,
        forward_similarity: f.similarity,
        backward_similarity: b.similarity,
        reg_velocity,
        reg_field,
        reg_params,
    };
    if !breakdown.is_finite() || !grads.is_finite() {
        return Err(Error::Diverged {
            step,
            message: format!("non-finite loss or gradient ({breakdown:?})"),
            report: None,
        });
    }
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{ModelSpec, NetworkSpec};

    #[test]
    fn ssd_hand_values() {
        assert_eq!(similarity_ssd(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(similarity_ssd(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(similarity_ssd(&[0.0, 2.0], &[0.0, 0.0]).unwrap(), 2.0);
        assert!(similarity_ssd(&[], &[]).is_err());
        assert!(similarity_ssd(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ncc_hand_values() {
        let r = [0.1, 0.5, 0.2, 0.9, 0.4];
        let affine: Vec<f64> = r.iter().map(|v| 3.0 * v + 1.0).collect();
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        assert!(similarity_ncc(&r, &r).unwrap().abs() < 1e-12);
        assert!(similarity_ncc(&affine, &r).unwrap().abs() < 1e-12);
        assert!((similarity_ncc(&neg, &r).unwrap() - 2.0).abs() < 1e-12);
        assert!(similarity_ncc(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ncc_gradient_matches_finite_differences() {
        let p = [0.3, -0.2, 0.8, 0.1, 0.55, -0.4];
        let r = [0.2, 0.1, 0.9, -0.3, 0.4, 0.0];
        let (_, g) = ncc_with_grad(&p, &r).unwrap();
        for i in 0..p.len() {
            let h = 1e-6;
            let (mut a, mut b) = (p, p);
            a[i] += h;
            b[i] -= h;
            let fd = (similarity_ncc(&a, &r).unwrap() - similarity_ncc(&b, &r).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn full_batch_is_a_permutation() {
        let b = sample_batch([3, 4, 5], 60, 7, 0).unwrap();
        let mut idx = b.indices.clone();
        idx.sort();
        assert_eq!(idx, (0..60).collect::<Vec<_>>());
        assert!(sample_batch([3, 4, 5], 61, 7, 0).is_err());
    }

    #[test]
    fn batches_are_deterministic_per_step() {
        let a = sample_batch([10, 10, 10], 50, 3, 4).unwrap();
        assert_eq!(a, sample_batch([10, 10, 10], 50, 3, 4).unwrap());
        assert_ne!(a.indices, sample_batch([10, 10, 10], 50, 3, 5).unwrap().indices);
        assert_ne!(a.indices, sample_batch([10, 10, 10], 50, 4, 4).unwrap().indices);
    }

    #[test]
    fn batch_coordinates_match_indices() {
        let dims = [4, 3, 5];
        let b = sample_batch(dims, 20, 1, 0).unwrap();
        for (row, &i) in b.indices.iter().enumerate() {
            let u = voxel_to_normalized(i % 4, (i / 4) % 3, i / 12, dims);
            assert_eq!([b.coords[[row, 0]], b.coords[[row, 1]], b.coords[[row, 2]]], u.0);
        }
    }

    #[test]
    fn sampled_points_are_uniform() {
        // per-axis mean of grid indices; uniform over 0..n-1 has mean (n-1)/2
        // and variance (n^2-1)/12
        let dims = [64, 64, 64];
        let mut sums = [0.0; 3];
        let mut count = 0usize;
        for step in 0..10 {
            let b = sample_batch(dims, 10_000, 11, step).unwrap();
            for &i in &b.indices {
                sums[0] += (i % 64) as f64;
                sums[1] += ((i / 64) % 64) as f64;
                sums[2] += (i / 4096) as f64;
            }
            count += b.len();
        }
        let sigma = ((64.0f64 * 64.0 - 1.0) / 12.0 / count as f64).sqrt();
        for s in sums {
            assert!((s / count as f64 - 31.5).abs() < 3.0 * sigma);
        }
    }

    fn small_model(seed: u64) -> MotionModel {
        let spec = ModelSpec {
            ode_steps: 2,
            network: NetworkSpec { width: 8, ..NetworkSpec::default() },
            ..ModelSpec::default()
        };
        MotionModel::new(&spec, [5, 5, 5], seed).unwrap()
    }

    fn noise(dims: [usize; 3], seed: u64) -> Volume {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, |_, _, _| rng.gen::<f32>()).unwrap()
    }

    #[test]
    fn identity_pair_with_zero_model_is_zero() {
        let mut m = small_model(1);
        m.set_params(&vec![0.0; m.param_count()]).unwrap();
        let v = noise([5, 5, 5], 2);
        let cfg = LossConfig { batch_voxels: 100, ..LossConfig::default() };
        let (l, g) = evaluate_loss(&m, &v, &v, &cfg, 0, &WorkerPool::serial()).unwrap();
        assert_eq!(l, LossBreakdown::default());
        assert!(g.flatten().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shared_batch_uses_the_same_points_both_ways() {
        let m = small_model(4);
        let v = noise([5, 5, 5], 5);
        let cfg = LossConfig { batch_voxels: 80, shared_batch: true, ..LossConfig::default() };
        let (l, _) = evaluate_loss(&m, &v, &v, &cfg, 3, &WorkerPool::serial()).unwrap();
        assert!(l.forward_similarity > 0.0);
        let pool = WorkerPool::serial();
        let b = sample_batch([5, 5, 5], 80, 0, 3).unwrap();
        let refv: Vec<f64> = b.indices.iter().map(|&i| v.data()[i] as f64).collect();
        let fwd = Direction { coords: b.coords.view(), reference: refv.clone(), moving: &v, t0: 0.0, t1: 1.0 };
        let bwd = Direction { coords: b.coords.view(), reference: refv, moving: &v, t0: 1.0, t1: 0.0 };
        let pf = predictions(&m, &fwd, &pool).unwrap();
        let pb = predictions(&m, &bwd, &pool).unwrap();
        assert!((similarity_ssd(&pf, &fwd.reference).unwrap() - l.forward_similarity).abs() < 1e-12);
        assert!((similarity_ssd(&pb, &bwd.reference).unwrap() - l.backward_similarity).abs() < 1e-12);
    }

    #[test]
    fn velocity_penalty_is_mean_square_speed() {
        let m = small_model(6);
        let v = noise([5, 5, 5], 7);
        let cfg = LossConfig { batch_voxels: 50, two_way: false, lambda2: 0.5, ..LossConfig::default() };
        let (l, _) = evaluate_loss(&m, &v, &v, &cfg, 0, &WorkerPool::serial()).unwrap();
        let b = sample_batch([5, 5, 5], 50, 0, 0).unwrap();
        let traj = m.integrate(b.coords.view(), 0.0, 1.0).unwrap();
        let r2: f64 = traj.velocities.iter().map(|v| v.iter().map(|c| c * c).sum::<f64>()).sum::<f64>() / 100.0;
        assert!((l.reg_velocity - r2).abs() < 1e-15 + 1e-12 * r2);
        assert!((l.total - l.forward_similarity - 0.5 * r2).abs() < 1e-12);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let m = small_model(8);
        let (a, b) = (noise([9, 9, 9], 1), noise([9, 9, 9], 2));
        let cfg = LossConfig { batch_voxels: 700, similarity: Similarity::Ncc, ..LossConfig::default() };
        let serial = evaluate_loss(&m, &a, &b, &cfg, 2, &WorkerPool::serial()).unwrap();
        let par = evaluate_loss(&m, &a, &b, &cfg, 2, &WorkerPool::new(3).unwrap()).unwrap();
        assert_eq!(serial.0, par.0);
        assert_eq!(serial.1, par.1);
    }

    #[test]
    fn mismatched_frames_are_rejected() {
        let m = small_model(1);
        let err = evaluate_loss(&m, &noise([5, 5, 5], 1), &noise([5, 5, 6], 1), &LossConfig::default(), 0, &WorkerPool::serial());
        assert!(matches!(err, Err(Error::SizeMismatch(_))));
    }
}
