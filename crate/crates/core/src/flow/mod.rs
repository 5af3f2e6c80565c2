//! Motion models and their kinematics.
//!
//! A [`MotionModel`] pairs a representation (Siren network or control-point
//! grid) with a kinematic interpretation (velocity or displacement), giving the
//! four continuity variants:
//!
//! | representation | kinematics   | continuity               |
//! |----------------|--------------|--------------------------|
//! | inr            | velocity     | spatial + temporal       |
//! | inr            | displacement | spatial only             |
//! | grid           | velocity     | temporal only            |
//! | grid           | displacement | neither (discrete)       |
//!
//! Velocity models are integrated with forward Euler on the `1/T` time grid;
//! integrating with `t1 < t0` walks the same grid backwards and yields the
//! reversed displacement. Displacement models scale their single `0 -> 1` field
//! linearly in time.

mod dvf;
mod grid;

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inr::{init_siren, ForwardTape, ParamGrads, SirenConfig, SirenNetwork};
use crate::sampler::Stencil;
use crate::volume::{voxel_size_normalized, NormalizedCoord};

pub use dvf::{dense_displacement, DisplacementField};
pub use grid::GridField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Inr,
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kinematics {
    Velocity,
    Displacement,
}

/// What to do with a requested time that is not a multiple of `1/T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimePolicy {
    /// Snap to the nearest grid node and log a warning.
    #[default]
    Snap,
    Strict,
}

/// Named (representation, kinematics) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Spatially and temporally continuous: Siren velocity field.
    Cpt,
    SpatialOnly,
    GridVelocity,
    Grid,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Cpt, Mode::SpatialOnly, Mode::GridVelocity, Mode::Grid];

    pub fn parts(self) -> (Representation, Kinematics) {
        match self {
            Mode::Cpt => (Representation::Inr, Kinematics::Velocity),
            Mode::SpatialOnly => (Representation::Inr, Kinematics::Displacement),
            Mode::GridVelocity => (Representation::Grid, Kinematics::Velocity),
            Mode::Grid => (Representation::Grid, Kinematics::Displacement),
        }
    }

    pub fn from_parts(r: Representation, k: Kinematics) -> Mode {
        match (r, k) {
            (Representation::Inr, Kinematics::Velocity) => Mode::Cpt,
            (Representation::Inr, Kinematics::Displacement) => Mode::SpatialOnly,
            (Representation::Grid, Kinematics::Velocity) => Mode::GridVelocity,
            (Representation::Grid, Kinematics::Displacement) => Mode::Grid,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Cpt => "cpt",
            Mode::SpatialOnly => "spatial-only",
            Mode::GridVelocity => "grid-velocity",
            Mode::Grid => "grid",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode `{s}` (expected cpt, spatial-only, grid-velocity or grid)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub width: usize,
    /// Sinusoidal layers; the linear head comes on top.
    pub hidden_layers: usize,
    pub omega0: f64,
    /// Velocity networks take `(x, t)` when set, `x` alone otherwise.
    pub time_dependent: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            width: 256,
            hidden_layers: 3,
            omega0: 48.0,
            time_dependent: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Control-point spacing in voxels.
    pub factor: usize,
    /// Velocity grids only: one grid for all times instead of one per Euler step.
    pub stationary: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            factor: 1,
            stationary: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub representation: Representation,
    pub kinematics: Kinematics,
    /// Euler steps over the unit interval.
    #[serde(rename = "T")]
    pub ode_steps: usize,
    pub time_policy: TimePolicy,
    pub network: NetworkSpec,
    pub grid: GridSpec,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            representation: Representation::Inr,
            kinematics: Kinematics::Velocity,
            ode_steps: 2,
            time_policy: TimePolicy::Snap,
            network: NetworkSpec::default(),
            grid: GridSpec::default(),
        }
    }
}

impl ModelSpec {
    pub fn for_mode(mode: Mode, ode_steps: usize) -> ModelSpec {
        let (representation, kinematics) = mode.parts();
        ModelSpec {
            representation,
            kinematics,
            ode_steps,
            ..ModelSpec::default()
        }
    }

    pub fn mode(&self) -> Mode {
        Mode::from_parts(self.representation, self.kinematics)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MotionField {
    Inr(SirenNetwork),
    Grid(GridField),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionModel {
    field: MotionField,
    kinematics: Kinematics,
    ode_steps: usize,
    time_policy: TimePolicy,
}

/// Per-step record of how a velocity was produced, kept for backpropagation.
#[derive(Debug, Clone)]
pub enum StepTape {
    Inr(ForwardTape),
    /// Grid velocities are recomputed from the cached positions.
    Grid { frame: usize },
}

/// Euler trajectory of a particle batch.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `t_k = t0 + k * step` for `k = 0..=K`.
    pub times: Vec<f64>,
    pub step: f64,
    /// `(batch, 3)` positions, `K + 1` entries.
    pub positions: Vec<Array2<f64>>,
    /// `(batch, 3)` velocities used for each of the `K` steps.
    pub velocities: Vec<Array2<f64>>,
    pub tapes: Vec<StepTape>,
}

impl Trajectory {
    pub fn start(&self) -> &Array2<f64> {
        &self.positions[0]
    }

    pub fn terminal(&self) -> &Array2<f64> {
        self.positions.last().unwrap()
    }

    pub fn n_steps(&self) -> usize {
        self.velocities.len()
    }
}

/// Gradients of a model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelGrads {
    Inr(ParamGrads),
    Grid(Vec<f64>),
}

impl ModelGrads {
    pub fn zeros_like(model: &MotionModel) -> ModelGrads {
        match &model.field {
            MotionField::Inr(net) => ModelGrads::Inr(ParamGrads::zeros_like(net)),
            MotionField::Grid(g) => ModelGrads::Grid(vec![0.0; g.param_count()]),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        match (self, other) {
            (ModelGrads::Inr(a), ModelGrads::Inr(b)) => a.add_assign(b),
            (ModelGrads::Grid(a), ModelGrads::Grid(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y)
            }
            _ => panic!("adding gradients of different model kinds"),
        }
    }

    /// Adds `coeff * params(model)`.
    pub fn add_scaled_params(&mut self, model: &MotionModel, coeff: f64) {
        match (self, &model.field) {
            (ModelGrads::Inr(g), MotionField::Inr(net)) => {
                for (i, l) in net.layers().iter().enumerate() {
                    g.weights[i].scaled_add(coeff, &l.weight);
                    g.biases[i].scaled_add(coeff, &l.bias);
                }
            }
            (ModelGrads::Grid(g), MotionField::Grid(_)) => {
                for (a, p) in g.iter_mut().zip(model.flatten_params()) {
                    *a += coeff * p;
                }
            }
            _ => panic!("gradient kind does not match the model"),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        match self {
            ModelGrads::Inr(g) => g.flatten(),
            ModelGrads::Grid(g) => g.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            ModelGrads::Inr(g) => g.is_finite(),
            ModelGrads::Grid(g) => g.iter().all(|v| v.is_finite()),
        }
    }
}

/// Result of [`MotionModel::backprop_trajectory`].
#[derive(Debug, Clone)]
pub struct TrajectoryGrads {
    pub params: ModelGrads,
    /// Cotangent of the start positions.
    pub start_cotangent: Array2<f64>,
    /// Total cotangent reaching each step's velocity, in forward step order.
    pub velocity_cotangents: Vec<Array2<f64>>,
}

impl MotionModel {
    /// Fresh model for a volume of `volume_dims`.
    pub fn new(spec: &ModelSpec, volume_dims: [usize; 3], seed: u64) -> Result<MotionModel> {
        if spec.ode_steps == 0 {
            return Err(Error::Config("T (ODE steps) must be positive".into()));
        }
        let field = match spec.representation {
            Representation::Inr => {
                let time_input =
                    spec.kinematics == Kinematics::Velocity && spec.network.time_dependent;
                MotionField::Inr(init_siren(&SirenConfig {
                    input_dim: if time_input { 4 } else { 3 },
                    hidden_width: spec.network.width,
                    n_layers: spec.network.hidden_layers + 1,
                    omega0: spec.network.omega0,
                    output_scale: voxel_size_normalized(volume_dims),
                    seed,
                })?)
            }
            Representation::Grid => {
                let frames = match spec.kinematics {
                    Kinematics::Velocity if !spec.grid.stationary => spec.ode_steps,
                    _ => 1,
                };
                MotionField::Grid(GridField::for_volume(volume_dims, spec.grid.factor, frames)?)
            }
        };
        MotionModel::from_field(field, spec.kinematics, spec.ode_steps)
            .map(|m| m.with_time_policy(spec.time_policy))
    }

    pub fn from_field(field: MotionField, kinematics: Kinematics, ode_steps: usize) -> Result<MotionModel> {
        if ode_steps == 0 {
            return Err(Error::Config("T (ODE steps) must be positive".into()));
        }
        match (&field, kinematics) {
            (MotionField::Inr(net), Kinematics::Displacement) if net.input_dim() != 3 => {
                return Err(Error::Config(
                    "displacement networks take 3 spatial inputs".into(),
                ))
            }
            (MotionField::Inr(net), _) if !(3..=4).contains(&net.input_dim()) => {
                return Err(Error::Config(format!(
                    "velocity networks take 3 or 4 inputs, got {}",
                    net.input_dim()
                )))
            }
            (MotionField::Grid(g), Kinematics::Velocity)
                if g.n_frames() != 1 && g.n_frames() != ode_steps =>
            {
                return Err(Error::Config(format!(
                    "velocity grid has {} frames; expected 1 or T = {ode_steps}",
                    g.n_frames()
                )))
            }
            _ => {}
        }
        Ok(MotionModel {
            field,
            kinematics,
            ode_steps,
            time_policy: TimePolicy::Snap,
        })
    }

    pub fn with_time_policy(mut self, policy: TimePolicy) -> MotionModel {
        self.time_policy = policy;
        self
    }

    pub fn field(&self) -> &MotionField {
        &self.field
    }

    pub fn kinematics(&self) -> Kinematics {
        self.kinematics
    }

    pub fn representation(&self) -> Representation {
        match self.field {
            MotionField::Inr(_) => Representation::Inr,
            MotionField::Grid(_) => Representation::Grid,
        }
    }

    pub fn mode(&self) -> Mode {
        Mode::from_parts(self.representation(), self.kinematics)
    }

    pub fn ode_steps(&self) -> usize {
        self.ode_steps
    }

    pub fn time_policy(&self) -> TimePolicy {
        self.time_policy
    }

    pub fn param_count(&self) -> usize {
        match &self.field {
            MotionField::Inr(n) => n.param_count(),
            MotionField::Grid(g) => g.param_count(),
        }
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        match &self.field {
            MotionField::Inr(n) => n.flatten_params(),
            MotionField::Grid(g) => g.flatten_params(),
        }
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        match &mut self.field {
            MotionField::Inr(n) => n.set_params(flat),
            MotionField::Grid(g) => g.set_params(flat),
        }
    }

    pub fn apply_update(&mut self, delta: &[f64]) -> Result<()> {
        match &mut self.field {
            MotionField::Inr(n) => n.apply_update(delta),
            MotionField::Grid(g) => g.apply_update(delta),
        }
    }

    /// Grid index `k` (time `k / T`) for a requested time, per the time policy.
    pub fn grid_index(&self, t: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("time {t} lies outside [0, 1]")));
        }
        let steps = self.ode_steps as f64;
        let k = (t * steps).round();
        if (t * steps - k).abs() > 1e-9 {
            match self.time_policy {
                TimePolicy::Strict => {
                    return Err(Error::OffGrid {
                        t,
                        steps: self.ode_steps,
                    })
                }
                TimePolicy::Snap => log::warn!(
                    "time {t} is off the 1/{} grid; snapping to {}",
                    self.ode_steps,
                    k / steps
                ),
            }
        }
        Ok(k as usize)
    }

    fn require(&self, kinematics: Kinematics, op: &str) -> Result<()> {
        if self.kinematics == kinematics {
            Ok(())
        } else {
            Err(Error::Mode(format!(
                "{op} needs a {kinematics:?} model, this one is {:?}",
                self.kinematics
            )))
        }
    }

    fn network_inputs(net: &SirenNetwork, x: ArrayView2<f64>, t: f64) -> Array2<f64> {
        if net.input_dim() == 3 {
            return x.to_owned();
        }
        let mut inp = Array2::from_elem((x.nrows(), 4), 2.0 * t - 1.0);
        inp.slice_mut(s![.., 0..3]).assign(&x);
        inp
    }

    /// Velocities of the particles `x` (`(batch, 3)`, normalized) at time `t`.
    pub fn velocity_at(&self, x: ArrayView2<f64>, t: f64) -> Result<(Array2<f64>, StepTape)> {
        self.require(Kinematics::Velocity, "velocity_at")?;
        check_points(&x)?;
        match &self.field {
            MotionField::Inr(net) => {
                let (v, tape) = net.forward(Self::network_inputs(net, x, t).view())?;
                Ok((v, StepTape::Inr(tape)))
            }
            MotionField::Grid(g) => {
                let frame = g.frame_for_time(t);
                Ok((grid_eval(g, frame, x), StepTape::Grid { frame }))
            }
        }
    }

    /// Like [`MotionModel::velocity_at`] without recording anything for backprop.
    pub fn velocity(&self, x: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        self.require(Kinematics::Velocity, "velocity")?;
        check_points(&x)?;
        match &self.field {
            MotionField::Inr(net) => net.evaluate(Self::network_inputs(net, x, t).view()),
            MotionField::Grid(g) => Ok(grid_eval(g, g.frame_for_time(t), x)),
        }
    }

    /// Forward-Euler trajectory of `x_start` from `t0` to `t1` on the `1/T` grid.
    /// `t1 < t0` integrates backwards in time.
    pub fn integrate(&self, x_start: ArrayView2<f64>, t0: f64, t1: f64) -> Result<Trajectory> {
        self.require(Kinematics::Velocity, "integrate")?;
        check_points(&x_start)?;
        let (k0, k1) = (self.grid_index(t0)?, self.grid_index(t1)?);
        let steps = self.ode_steps as f64;
        let dir: isize = if k1 >= k0 { 1 } else { -1 };
        let n = k0.abs_diff(k1);
        let step = dir as f64 / steps;

        let mut traj = Trajectory {
            times: vec![k0 as f64 / steps],
            step,
            positions: vec![x_start.to_owned()],
            velocities: Vec::with_capacity(n),
            tapes: Vec::with_capacity(n),
        };
        for j in 0..n {
            let t = (k0 as isize + dir * j as isize) as f64 / steps;
            let x = traj.positions.last().unwrap();
            let (v, tape) = self.velocity_at(x.view(), t)?;
            let mut next = x.clone();
            next.scaled_add(step, &v);
            traj.positions.push(next);
            traj.velocities.push(v);
            traj.tapes.push(tape);
            traj.times.push((k0 as isize + dir * (j as isize + 1)) as f64 / steps);
        }
        Ok(traj)
    }

    /// Terminal positions of [`MotionModel::integrate`] without keeping the trajectory.
    pub fn integrate_terminal(&self, x_start: ArrayView2<f64>, t0: f64, t1: f64) -> Result<Array2<f64>> {
        self.require(Kinematics::Velocity, "integrate")?;
        check_points(&x_start)?;
        let (k0, k1) = (self.grid_index(t0)?, self.grid_index(t1)?);
        let steps = self.ode_steps as f64;
        let dir: isize = if k1 >= k0 { 1 } else { -1 };
        let step = dir as f64 / steps;
        let mut x = x_start.to_owned();
        for j in 0..k0.abs_diff(k1) {
            let t = (k0 as isize + dir * j as isize) as f64 / steps;
            let v = self.velocity(x.view(), t)?;
            x.scaled_add(step, &v);
        }
        Ok(x)
    }

    /// The `0 -> 1` displacement field `g(x)` of a displacement model.
    pub fn base_displacement(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.require(Kinematics::Displacement, "base_displacement")?;
        check_points(&x)?;
        match &self.field {
            MotionField::Inr(net) => net.evaluate(x),
            MotionField::Grid(g) => Ok(grid_eval(g, 0, x)),
        }
    }

    /// `g(x)` with a tape for [`MotionModel::backprop_displacement`].
    pub fn base_displacement_taped(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, StepTape)> {
        self.require(Kinematics::Displacement, "base_displacement")?;
        check_points(&x)?;
        match &self.field {
            MotionField::Inr(net) => {
                let (g, tape) = net.forward(x)?;
                Ok((g, StepTape::Inr(tape)))
            }
            MotionField::Grid(g) => Ok((grid_eval(g, 0, x), StepTape::Grid { frame: 0 })),
        }
    }

    /// Displacement `phi_{t0 -> t1}(x) - x` of the particles `x`.
    ///
    /// Velocity models integrate; displacement models use the linear-in-time
    /// approximation `(t1 - t0) * g(x)`.
    pub fn displacement(&self, x: ArrayView2<f64>, t0: f64, t1: f64) -> Result<Array2<f64>> {
        match self.kinematics {
            Kinematics::Velocity => Ok(self.integrate_terminal(x, t0, t1)? - x),
            Kinematics::Displacement => {
                let (k0, k1) = (self.grid_index(t0)?, self.grid_index(t1)?);
                if k0 == k1 {
                    return Ok(Array2::zeros(x.raw_dim()));
                }
                let span = (k1 as f64 - k0 as f64) / self.ode_steps as f64;
                let g = self.base_displacement(x)?;
                Ok(if span == 1.0 { g } else { g * span })
            }
        }
    }

    /// Mapped positions `phi_{t0 -> t1}(x)`.
    pub fn map_points(&self, x: ArrayView2<f64>, t0: f64, t1: f64) -> Result<Array2<f64>> {
        match self.kinematics {
            Kinematics::Velocity => self.integrate_terminal(x, t0, t1),
            Kinematics::Displacement => Ok(self.displacement(x, t0, t1)? + x),
        }
    }

    /// Reverse pass through an unrolled Euler trajectory.
    ///
    /// `terminal_cotangent` is `dL/dx_K`. Each step's velocity additionally
    /// receives `2 * velocity_penalty * v_k`, the gradient of
    /// `velocity_penalty * sum_k ||v_k||^2`.
    pub fn backprop_trajectory(
        &self,
        traj: &Trajectory,
        terminal_cotangent: ArrayView2<f64>,
        velocity_penalty: f64,
    ) -> Result<TrajectoryGrads> {
        let mut params = ModelGrads::zeros_like(self);
        let (start_cotangent, velocity_cotangents) =
            self.backprop_trajectory_into(traj, terminal_cotangent, velocity_penalty, &mut params)?;
        Ok(TrajectoryGrads {
            params,
            start_cotangent,
            velocity_cotangents,
        })
    }

    pub(crate) fn backprop_trajectory_into(
        &self,
        traj: &Trajectory,
        terminal_cotangent: ArrayView2<f64>,
        velocity_penalty: f64,
        params: &mut ModelGrads,
    ) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
        let steps = traj.n_steps();
        if traj.tapes.len() != steps || traj.positions.len() != steps + 1 {
            return Err(Error::shape(
                format!("{steps} tapes and {} positions", steps + 1),
                format!("{} tapes and {} positions", traj.tapes.len(), traj.positions.len()),
            ));
        }
        if terminal_cotangent.dim() != traj.terminal().dim() {
            return Err(Error::shape(
                format!("{:?}", traj.terminal().dim()),
                format!("{:?}", terminal_cotangent.dim()),
            ));
        }
        let mut dx = terminal_cotangent.to_owned();
        let mut vel_cots = Vec::with_capacity(steps);
        for k in (0..steps).rev() {
            let mut cot_v = &dx * traj.step;
            if velocity_penalty != 0.0 {
                cot_v.scaled_add(2.0 * velocity_penalty, &traj.velocities[k]);
            }
            match (&self.field, &traj.tapes[k], &mut *params) {
                (MotionField::Inr(net), StepTape::Inr(tape), ModelGrads::Inr(g)) => {
                    let input_cot = net.backward_into(tape, cot_v.view(), g)?;
                    dx += &input_cot.slice(s![.., 0..3]);
                }
                (MotionField::Grid(grid), StepTape::Grid { frame }, ModelGrads::Grid(g)) => {
                    let pos = &traj.positions[k];
                    for (i, row) in pos.rows().into_iter().enumerate() {
                        let st = Stencil::new(grid.dims(), NormalizedCoord([row[0], row[1], row[2]]));
                        let c = [cot_v[[i, 0]], cot_v[[i, 1]], cot_v[[i, 2]]];
                        grid.accumulate(*frame, &st, c, g);
                        let jt = grid.jacobian_t_dot(*frame, &st, c);
                        for a in 0..3 {
                            dx[[i, a]] += jt[a];
                        }
                    }
                }
                _ => return Err(Error::Mode("trajectory tapes do not match the model".into())),
            }
            vel_cots.push(cot_v);
        }
        vel_cots.reverse();
        Ok((dx, vel_cots))
    }

    /// Accumulates `d<cot, g(x)>/d params` for a displacement model and returns
    /// `d<cot, g(x)>/dx`.
    pub fn backprop_displacement(
        &self,
        x: ArrayView2<f64>,
        tape: &StepTape,
        cotangent: ArrayView2<f64>,
        params: &mut ModelGrads,
    ) -> Result<Array2<f64>> {
        self.require(Kinematics::Displacement, "backprop_displacement")?;
        match (&self.field, tape, params) {
            (MotionField::Inr(net), StepTape::Inr(tape), ModelGrads::Inr(g)) => {
                net.backward_into(tape, cotangent, g)
            }
            (MotionField::Grid(grid), StepTape::Grid { frame }, ModelGrads::Grid(g)) => {
                let mut dx = Array2::zeros(x.raw_dim());
                for (i, row) in x.rows().into_iter().enumerate() {
                    let st = Stencil::new(grid.dims(), NormalizedCoord([row[0], row[1], row[2]]));
                    let c = [cotangent[[i, 0]], cotangent[[i, 1]], cotangent[[i, 2]]];
                    grid.accumulate(*frame, &st, c, g);
                    let jt = grid.jacobian_t_dot(*frame, &st, c);
                    for a in 0..3 {
                        dx[[i, a]] = jt[a];
                    }
                }
                Ok(dx)
            }
            _ => Err(Error::Mode("tape does not match the model".into())),
        }
    }
}

fn check_points(x: &ArrayView2<f64>) -> Result<()> {
    if x.ncols() != 3 {
        return Err(Error::shape("3 coordinate columns", x.ncols()));
    }
    Ok(())
}

fn grid_eval(g: &GridField, frame: usize, x: ArrayView2<f64>) -> Array2<f64> {
    let mut v = Array2::zeros((x.nrows(), 3));
    for (mut out, row) in v.axis_iter_mut(Axis(0)).zip(x.rows()) {
        let val = g.eval(frame, NormalizedCoord([row[0], row[1], row[2]]));
        out[0] = val[0];
        out[1] = val[1];
        out[2] = val[2];
    }
    v
}
