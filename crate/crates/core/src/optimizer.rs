//! Adam with linear warmup and cosine decay, and the optimization loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{ModelSpec, MotionModel};
use crate::objective::{evaluate_loss, LossBreakdown, LossConfig};
use crate::parallel::WorkerPool;
use crate::volume::Volume;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub steps: usize,
    pub warmup_steps: usize,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seeds both the model initialization and the minibatch streams.
    pub seed: u64,
    pub workers: usize,
    pub loss: LossConfig,
    pub model: ModelSpec,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            steps: 3000,
            warmup_steps: 500,
            base_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            workers: 1,
            loss: LossConfig::default(),
            model: ModelSpec::default(),
        }
    }
}

impl SolveConfig {
    /// Short schedule for desk-scale runs: 200 steps with a proportionally
    /// shorter warmup, a smaller minibatch and a larger learning rate.
    pub fn fast() -> SolveConfig {
        SolveConfig {
            steps: 200,
            warmup_steps: 20,
            base_lr: 5e-4,
            loss: LossConfig {
                batch_voxels: 2048,
                ..LossConfig::default()
            },
            ..SolveConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.warmup_steps >= self.steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) must be below steps ({})",
                self.warmup_steps, self.steps
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        self.loss.validate()
    }
}

/// One optimization step in the report trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub schema_version: u32,
    pub steps: usize,
    pub wall_seconds: f64,
    pub trace: Vec<TraceEntry>,
    /// Set when the run aborted on a non-finite value or ended with a higher
    /// total loss than it started with.
    pub diverged: bool,
    /// SHA-256 of the final parameters (little-endian f64).
    pub param_checksum: String,
    pub param_count: usize,
}

impl SolveReport {
    pub fn final_loss(&self) -> Option<&LossBreakdown> {
        self.trace.last().map(|e| &e.loss)
    }
}

/// Learning rate at `step`: linear warmup to `base_lr`, then cosine decay.
pub fn lr_at(step: usize, cfg: &SolveConfig) -> Result<f64> {
    if step >= cfg.steps {
        return Err(Error::Config(format!("step {step} is outside 0..{}", cfg.steps)));
    }
    let (w, n) = (cfg.warmup_steps, cfg.steps);
    Ok(if step < w {
        cfg.base_lr * (step + 1) as f64 / w as f64
    } else {
        let phase = (step - w) as f64 / (n - w) as f64;
        cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
    })
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Completed updates.
    pub t: u32,
}

impl AdamState {
    pub fn new(n: usize) -> AdamState {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update; returns the parameter delta.
pub fn adam_step(
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<Vec<f64>> {
    if grads.len() != state.m.len() {
        return Err(Error::shape(state.m.len(), grads.len()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            step: state.t as usize,
            message: format!("non-finite gradient at parameter {i}"),
            report: None,
        });
    }
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    let mut delta = Vec::with_capacity(grads.len());
    for ((g, m), v) in grads.iter().zip(&mut state.m).zip(&mut state.v) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        delta.push(-lr * (*m / c1) / ((*v / c2).sqrt() + eps));
    }
    Ok(delta)
}

pub fn param_checksum(model: &MotionModel) -> String {
    let mut h = Sha256::new();
    for p in model.flatten_params() {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Fits a fresh model (built from `cfg.model`) to the frame pair.
pub fn solve(i0: &Volume, i1: &Volume, cfg: &SolveConfig) -> Result<(MotionModel, SolveReport)> {
    cfg.validate()?;
    let model = MotionModel::new(&cfg.model, i0.dims(), cfg.seed)?;
    solve_model(model, i0, i1, cfg)
}

/// Optimizes an existing model; `cfg.model` is ignored.
pub fn solve_model(
    mut model: MotionModel,
    i0: &Volume,
    i1: &Volume,
    cfg: &SolveConfig,
) -> Result<(MotionModel, SolveReport)> {
    cfg.validate()?;
    if !i0.same_grid(i1) {
        return Err(Error::SizeMismatch(format!(
            "frames differ: {:?} vs {:?}",
            i0.dims(),
            i1.dims()
        )));
    }
    let pool = WorkerPool::new(cfg.workers)?;
    let loss_cfg = LossConfig {
        seed: cfg.seed,
        ..cfg.loss.clone()
    };
    let start = Instant::now();
    let mut state = AdamState::new(model.param_count());
    let mut trace = Vec::with_capacity(cfg.steps);
    let report = |trace: Vec<TraceEntry>, model: &MotionModel, diverged: bool| SolveReport {
        schema_version: SCHEMA_VERSION,
        steps: trace.len(),
        wall_seconds: start.elapsed().as_secs_f64(),
        trace,
        diverged,
        param_checksum: param_checksum(model),
        param_count: model.param_count(),
    };

    for step in 0..cfg.steps {
        let lr = lr_at(step, cfg)?;
        let result = evaluate_loss(&model, i0, i1, &loss_cfg, step, &pool).and_then(|(loss, grads)| {
            let delta = adam_step(&grads.flatten(), &mut state, lr, cfg.beta1, cfg.beta2, cfg.eps)?;
            Ok((loss, delta))
        });
        let (loss, delta) = match result {
            Ok(r) => r,
            Err(Error::Diverged { message, .. }) => {
                log::error!("step {step}: {message}");
                return Err(Error::Diverged {
                    step,
                    message,
                    report: Some(Box::new(report(trace, &model, true))),
                });
            }
            Err(e) => return Err(e),
        };
        model.apply_update(&delta)?;
        trace.push(TraceEntry { step, lr, loss });
        if step % 50 == 0 || step + 1 == cfg.steps {
            log::info!(
                "step {step:>5}  lr {lr:.3e}  total {:.6e}  fwd {:.6e}  bwd {:.6e}",
                loss.total,
                loss.forward_similarity,
                loss.backward_similarity
            );
        }
    }
    let diverged = trace.last().unwrap().loss.total > trace[0].loss.total;
    if diverged {
        log::warn!("final total loss exceeds the initial one");
    }
    let report = report(trace, &model, diverged);
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::NetworkSpec;

    fn cfg(steps: usize, warmup: usize) -> SolveConfig {
        SolveConfig {
            steps,
            warmup_steps: warmup,
            ..SolveConfig::default()
        }
    }

    #[test]
    fn schedule_hand_values() {
        let c = SolveConfig::default();
        assert_eq!(lr_at(0, &c).unwrap(), 1e-4 / 500.0);
        assert_eq!(lr_at(499, &c).unwrap(), 1e-4);
        assert_eq!(lr_at(500, &c).unwrap(), 1e-4);
        let last = lr_at(2999, &c).unwrap();
        let expected = 1e-4 * 0.5 * (1.0 + (std::f64::consts::PI * 2499.0 / 2500.0).cos());
        assert!((last - expected).abs() < 1e-20);
        assert!(last < 1e-9);
        assert!(lr_at(3000, &c).is_err());
    }

    #[test]
    fn schedule_without_warmup_starts_at_base() {
        assert_eq!(lr_at(0, &cfg(10, 0)).unwrap(), 1e-4);
    }

    #[test]
    fn schedule_is_continuous_and_non_negative() {
        let c = cfg(300, 40);
        let lrs: Vec<f64> = (0..300).map(|s| lr_at(s, &c).unwrap()).collect();
        assert!(lrs.iter().all(|&l| l >= 0.0));
        for w in lrs.windows(2) {
            assert!((w[1] - w[0]).abs() <= 1e-4 / 40.0 + 1e-18);
        }
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(cfg(10, 10).validate().is_err());
        assert!(cfg(0, 0).validate().is_err());
        let mut c = cfg(10, 1);
        c.base_lr = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut s = AdamState::new(1);
        let d = adam_step(&[1.0], &mut s, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert!((d[0] + 0.1).abs() < 1e-8);
        let mut s = AdamState::new(1);
        let d = adam_step(&[-3e-3], &mut s, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert!((d[0] - 0.1).abs() < 1e-5);
    }

    #[test]
    fn adam_zero_gradient_only_decays_moments() {
        let mut s = AdamState::new(2);
        adam_step(&[1.0, -2.0], &mut s, 0.1, 0.9, 0.999, 1e-8).unwrap();
        let (m, v) = (s.m.clone(), s.v.clone());
        let d = adam_step(&[0.0, 0.0], &mut s, 0.0, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
        for i in 0..2 {
            assert_eq!(s.m[i], 0.9 * m[i]);
            assert_eq!(s.v[i], 0.999 * v[i]);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut s = AdamState::new(2);
        assert!(matches!(
            adam_step(&[1.0, f64::NAN], &mut s, 0.1, 0.9, 0.999, 1e-8),
            Err(Error::Diverged { .. })
        ));
        assert!(adam_step(&[1.0], &mut s, 0.1, 0.9, 0.999, 1e-8).is_err());
    }

    fn tiny_config() -> SolveConfig {
        let mut c = cfg(6, 2);
        c.model.network = NetworkSpec { width: 8, ..NetworkSpec::default() };
        c.loss.batch_voxels = 64;
        c.seed = 9;
        c
    }

    fn blob(shift: f64) -> Volume {
        Volume::from_fn([6, 6, 6], |x, y, z| {
            let d = (x as f64 - 2.5 - shift).powi(2) + (y as f64 - 2.5).powi(2) + (z as f64 - 2.5).powi(2);
            (-d / 4.0).exp() as f32
        })
        .unwrap()
    }

    #[test]
    fn solve_is_deterministic() {
        let (a, b) = (blob(0.0), blob(0.5));
        let (m1, r1) = solve(&a, &b, &tiny_config()).unwrap();
        let (m2, r2) = solve(&a, &b, &tiny_config()).unwrap();
        assert_eq!(r1.trace, r2.trace);
        assert_eq!(r1.param_checksum, r2.param_checksum);
        assert_eq!(m1, m2);
        assert_eq!(r1.steps, 6);
        assert_eq!(r1.trace.len(), 6);
        assert_eq!(r1.param_checksum.len(), 64);
    }

    #[test]
    fn report_serializes_flat_trace_entries() {
        let (a, b) = (blob(0.0), blob(0.5));
        let (_, r) = solve(&a, &b, &tiny_config()).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["schema_version"], 1);
        assert!(json["trace"][0]["total"].is_f64());
        assert!(json["trace"][0]["lr"].is_f64());
        assert!(json["wall_seconds"].is_f64());
        let back: SolveReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn mismatched_frames_are_rejected() {
        let a = blob(0.0);
        let b = Volume::filled([6, 6, 5], 0.0).unwrap();
        assert!(matches!(solve(&a, &b, &tiny_config()), Err(Error::SizeMismatch(_))));
    }
}
