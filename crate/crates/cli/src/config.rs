//! Run configuration: every numerical hyperparameter of a run lives in one
//! JSON document so that sweeps diff cleanly.

use std::fs;
use std::path::{Path, PathBuf};

use flowinterp::flow::{GridSpec, Kinematics, Mode, ModelSpec, NetworkSpec, Representation, TimePolicy};
use flowinterp::interpolate::{InferenceDirection, MergeKind, MergeStrategy};
use flowinterp::objective::{LossConfig, Similarity};
use flowinterp::optimizer::SolveConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// width 256, 3 sinusoidal layers, omega0 48, time input on.
    pub network: NetworkSpec,
    pub solve: SolveSection,
    pub model: ModelSection,
    pub merge: MergeSection,
    pub io: IoSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSection {
    /// 3000
    pub steps: usize,
    /// 500
    pub warmup_steps: usize,
    /// 1e-4
    pub base_lr: f64,
    /// 10000 particles per direction and step.
    pub batch_voxels: usize,
    /// 0
    pub lambda1: f64,
    /// 1e-4
    pub lambda2: f64,
    /// 0
    pub lambda3: f64,
    /// ssd
    pub similarity: Similarity,
    /// true
    pub two_way: bool,
    /// 0
    pub seed: u64,
}

impl Default for SolveSection {
    fn default() -> Self {
        let s = SolveConfig::default();
        SolveSection {
            steps: s.steps,
            warmup_steps: s.warmup_steps,
            base_lr: s.base_lr,
            batch_voxels: s.loss.batch_voxels,
            lambda1: s.loss.lambda1,
            lambda2: s.loss.lambda2,
            lambda3: s.loss.lambda3,
            similarity: s.loss.similarity,
            two_way: s.loss.two_way,
            seed: s.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// inr
    pub representation: Representation,
    /// velocity
    pub kinematics: Kinematics,
    /// Euler steps; defaults to the number of intermediate frames plus one
    /// (2 for registration).
    #[serde(rename = "T")]
    pub ode_steps: Option<usize>,
    /// snap
    pub time_policy: TimePolicy,
    /// factor 1, non-stationary.
    pub grid: GridSpec,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelSpec::default();
        ModelSection {
            representation: m.representation,
            kinematics: m.kinematics,
            ode_steps: None,
            time_policy: m.time_policy,
            grid: m.grid,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeSection {
    /// linear
    pub kind: MergeKind,
    /// Reserved; has no effect.
    pub beta: Option<f64>,
    /// two-way
    pub direction: InferenceDirection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    pub frame0: Option<PathBuf>,
    pub frame1: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Skip writing displacement fields.
    pub no_dvf: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<RunConfig, CliError> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn set_mode(&mut self, mode: Mode) {
        let (r, k) = mode.parts();
        self.model.representation = r;
        self.model.kinematics = k;
    }

    pub fn merge_strategy(&self) -> MergeStrategy {
        MergeStrategy { kind: self.merge.kind, beta: self.merge.beta }
    }

    /// Solver settings with `default_steps` used when the config leaves `T` open.
    pub fn solve_config(&self, default_steps: usize, workers: usize) -> Result<SolveConfig, CliError> {
        let s = &self.solve;
        let cfg = SolveConfig {
            steps: s.steps,
            warmup_steps: s.warmup_steps,
            base_lr: s.base_lr,
            seed: s.seed,
            workers,
            loss: LossConfig {
                similarity: s.similarity,
                lambda1: s.lambda1,
                lambda2: s.lambda2,
                lambda3: s.lambda3,
                two_way: s.two_way,
                batch_voxels: s.batch_voxels,
                seed: s.seed,
                ..LossConfig::default()
            },
            model: ModelSpec {
                representation: self.model.representation,
                kinematics: self.model.kinematics,
                ode_steps: self.model.ode_steps.unwrap_or(default_steps),
                time_policy: self.model.time_policy,
                network: self.network.clone(),
                grid: self.model.grid.clone(),
            },
            ..SolveConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
