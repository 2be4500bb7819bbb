//! Closed-loop simulation: tractor, steering actuator and trailer chain
//! integrated with classical fixed-step RK4, the controller running either
//! at its own sampled rate or inside every integration stage.

use crate::controller::{
    error_rates, error_transform, lyapunov, lyapunov_rates, omega1, omega1_dot, omega2, state_from_error,
    ControlOutput, Controller, ControllerError, ControllerGains, ControllerOptions, TrackingError,
};
use crate::powertrain::{select_drive_actuation, BrakeParams, DriveInput, DriveMode, PowertrainError, PropulsionMap};
use crate::trailer::{
    chain_kinematics, quasi_static_hitch_force, AxleMotion, ChainState, ForceProfile, Sensor, SensorModel,
    TrailerError, TrailerParams,
};
use crate::trajectory::{ReferenceSample, Trajectory, TrajectoryError};
use crate::vehicle::{
    compute_coefficients, steering_rate, yaw_accel, yaw_rate, HitchForce, ModelError, TractorParams, TractorState,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const TRACTOR_DIM: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trailer(#[from] TrailerError),
    #[error(transparent)]
    Powertrain(#[from] PowertrainError),
    #[error("non-finite plant state")]
    NonFinite,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("plant failure at t = {t:.3} s: {source}")]
    Plant { t: f64, source: PlantError },
    #[error("reference unavailable at t = {t:.3} s: {source}")]
    Reference { t: f64, source: TrajectoryError },
}

impl SimError {
    /// Time of the failure, if the run had started.
    pub fn time(&self) -> Option<f64> {
        match self {
            SimError::Config(_) => None,
            SimError::Plant { t, .. } | SimError::Reference { t, .. } => Some(*t),
        }
    }
}

/// Where the hitch force acting on the tractor comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ForceProvider {
    None,
    Chain(Vec<TrailerParams>),
    Replay(ForceProfile),
}

impl ForceProvider {
    pub fn trailers(&self) -> usize {
        match self {
            ForceProvider::Chain(p) => p.len(),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    pub tractor: TractorParams,
    pub map: PropulsionMap,
    pub brake: BrakeParams,
    pub force: ForceProvider,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub tractor: TractorState,
    pub chain: ChainState,
}

impl PlantState {
    fn to_vec(&self) -> Vec<f64> {
        let s = &self.tractor;
        let mut out = vec![s.x, s.y, s.theta, s.v_x, s.psi];
        out.extend_from_slice(&self.chain.headings);
        out
    }

    fn from_slice(y: &[f64]) -> Self {
        Self {
            tractor: TractorState { x: y[0], y: y[1], theta: y[2], v_x: y[3], psi: y[4] },
            chain: ChainState { headings: y[TRACTOR_DIM..].to_vec() },
        }
    }
}

/// Drive side of the plant input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DriveSource {
    /// Throttle or brake command; the force follows the actuator maps.
    Input(DriveInput),
    /// A driving force applied directly.
    Force(f64),
}

/// Steering side of the plant input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Steering {
    /// Command to the first-order steering actuator.
    Command(f64),
    /// Steering rate imposed directly.
    Rate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantInput {
    pub drive: DriveSource,
    pub steering: Steering,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantEval {
    pub rate: Vec<f64>,
    pub hitch: HitchForce,
    pub f_d: f64,
    pub v_x_dot: f64,
    pub psi_dot: f64,
}

impl Plant {
    pub fn validate(&self) -> Result<(), SimError> {
        let cfg = |e: String| SimError::Config(e);
        self.tractor.validate().map_err(|e| cfg(e.to_string()))?;
        self.map.validate().map_err(|e| cfg(e.to_string()))?;
        self.brake.validate().map_err(|e| cfg(e.to_string()))?;
        if let ForceProvider::Chain(params) = &self.force {
            for (i, p) in params.iter().enumerate() {
                p.validate(i).map_err(|e| cfg(e.to_string()))?;
            }
        }
        Ok(())
    }

    fn drive_force(&self, drive: DriveSource, v: f64) -> Result<f64, PlantError> {
        Ok(match drive {
            DriveSource::Force(f) => f,
            // the physical map saturates outside its identified speed range
            DriveSource::Input(input) => input.force(&self.map, &self.brake, v.clamp(0.0, self.map.v_max))?,
        })
    }

    fn chain_force(
        &self,
        params: &[TrailerParams],
        s: &PlantState,
        a: f64,
        psi_dot: f64,
    ) -> Result<HitchForce, PlantError> {
        let t = &s.tractor;
        let motion = AxleMotion {
            theta: t.theta,
            v: t.v_x,
            v_dot: a,
            omega: yaw_rate(&self.tractor, t.v_x, t.psi),
            omega_dot: yaw_accel(&self.tractor, t.v_x, a, t.psi, psi_dot),
        };
        Ok(quasi_static_hitch_force(motion, &s.chain, params)?)
    }

    /// State derivative, realized hitch force and driving force at time `t`.
    ///
    /// With a trailer chain the hitch force depends affinely on the tractor
    /// acceleration, so the longitudinal equation is solved for it exactly.
    pub fn evaluate(&self, t: f64, s: &PlantState, input: &PlantInput) -> Result<PlantEval, PlantError> {
        let tr = &s.tractor;
        let psi_dot = match input.steering {
            Steering::Command(u2) => steering_rate(&self.tractor, tr.psi, u2),
            Steering::Rate(r) => r,
        };
        let f_d = self.drive_force(input.drive, tr.v_x)?;
        let k = compute_coefficients(&self.tractor, tr.psi, psi_dot, tr.v_x)?;
        let free = k.phi1 + k.phi2 * f_d;
        let (v_x_dot, hitch) = match &self.force {
            ForceProvider::None => (free, HitchForce::ZERO),
            ForceProvider::Replay(profile) => {
                let h = profile.at(t);
                (free - k.phi2 * h.h_x - k.phi3 * h.h_y, h)
            }
            ForceProvider::Chain(params) => {
                let h0 = self.chain_force(params, s, 0.0, psi_dot)?;
                let h1 = self.chain_force(params, s, 1.0, psi_dot)?;
                let (gx, gy) = (h1.h_x - h0.h_x, h1.h_y - h0.h_y);
                let a = (free - k.phi2 * h0.h_x - k.phi3 * h0.h_y) / (1.0 + k.phi2 * gx + k.phi3 * gy);
                (a, HitchForce::new(h0.h_x + gx * a, h0.h_y + gy * a))
            }
        };
        let (sin, cos) = tr.theta.sin_cos();
        let omega = yaw_rate(&self.tractor, tr.v_x, tr.psi);
        let mut rate = vec![tr.v_x * cos, tr.v_x * sin, omega, v_x_dot, psi_dot];
        if let ForceProvider::Chain(params) = &self.force {
            let motion = chain_kinematics(tr.v_x, tr.theta, omega, &s.chain, params)?;
            rate.extend(motion.iter().map(|m| m.yaw_rate));
        }
        if rate.iter().any(|r| !r.is_finite()) {
            return Err(PlantError::NonFinite);
        }
        Ok(PlantEval { rate, hitch, f_d, v_x_dot, psi_dot })
    }
}

/// One classical RK4 step of `y' = f(t, y)`.
pub fn rk4_step<E>(
    t: f64,
    y: &[f64],
    h: f64,
    mut f: impl FnMut(f64, &[f64]) -> Result<Vec<f64>, E>,
) -> Result<Vec<f64>, E> {
    let shifted = |k: &[f64], c: f64| y.iter().zip(k).map(|(a, b)| a + c * b).collect::<Vec<_>>();
    let k1 = f(t, y)?;
    let k2 = f(t + 0.5 * h, &shifted(&k1, 0.5 * h))?;
    let k3 = f(t + 0.5 * h, &shifted(&k2, 0.5 * h))?;
    let k4 = f(t + h, &shifted(&k3, h))?;
    Ok((0..y.len()).map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect())
}

/// Advances the plant by `dt` with the input held constant.
pub fn integrate_step(
    plant: &Plant,
    state: &PlantState,
    input: &PlantInput,
    t: f64,
    dt: f64,
) -> Result<PlantState, SimError> {
    if !(dt > 0.0) {
        return Err(SimError::Config(format!("dt = {dt} must be > 0")));
    }
    let y = rk4_step(t, &state.to_vec(), dt, |ts, ys| {
        plant
            .evaluate(ts, &PlantState::from_slice(ys), input)
            .map(|e| e.rate)
            .map_err(|source| SimError::Plant { t: ts, source })
    })?;
    Ok(PlantState::from_slice(&y))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlTiming {
    /// Evaluated inside every integration stage.
    Continuous,
    /// Evaluated every `period` seconds, held in between.
    Sampled { period: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actuation {
    /// Curvature equals `omega1` and driving force equals `omega2` exactly.
    Ideal,
    /// Steering through the actuator lag, drive through throttle or brake.
    #[default]
    Backstepping,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialCondition {
    pub error: TrackingError,
    pub psi: f64,
    /// Hitch angles, tractor first. Empty means an aligned chain.
    pub hitch_angles: Vec<f64>,
}

impl Default for InitialCondition {
    fn default() -> Self {
        Self { error: TrackingError::default(), psi: 0.0, hitch_angles: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    /// Per-step increase of V2 tolerated as integration error.
    #[serde(default = "default_monotonic_tol")]
    pub monotonic_tol: f64,
    /// Lower bound on the denominator of relative residuals.
    #[serde(default = "default_residual_floor")]
    pub residual_floor: f64,
    #[serde(default)]
    pub max_relative_residual: Option<f64>,
    #[serde(default)]
    pub max_increases_outside_saturation: Option<usize>,
}

fn default_monotonic_tol() -> f64 {
    1e-6
}

fn default_residual_floor() -> f64 {
    1e-9
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            monotonic_tol: default_monotonic_tol(),
            residual_floor: default_residual_floor(),
            max_relative_residual: None,
            max_increases_outside_saturation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub plant: Plant,
    /// Map the controller inverts; may differ from the plant's.
    pub controller_map: PropulsionMap,
    pub gains: ControllerGains,
    pub options: ControllerOptions,
    pub sensor: SensorModel,
    pub trajectory: Trajectory,
    pub initial: InitialCondition,
    pub timing: ControlTiming,
    pub actuation: Actuation,
    pub dt_physics: f64,
    pub duration: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Start of the window the settled error statistics cover.
    pub settle_time: f64,
    pub audit: AuditConfig,
}

impl SimConfig {
    /// A plain configuration around `trajectory`: default tractor, reference
    /// map, no hitch load, 20 ms sampled control at 1 ms physics.
    pub fn new(trajectory: Trajectory, duration: f64) -> Self {
        let tractor = TractorParams::default();
        Self {
            plant: Plant {
                tractor,
                map: PropulsionMap::reference(),
                brake: BrakeParams::default(),
                force: ForceProvider::None,
            },
            controller_map: PropulsionMap::reference(),
            gains: ControllerGains::default(),
            options: ControllerOptions::default(),
            sensor: SensorModel::default(),
            trajectory,
            initial: InitialCondition::default(),
            timing: ControlTiming::Sampled { period: 0.02 },
            actuation: Actuation::Backstepping,
            dt_physics: 1e-3,
            duration,
            seed: 0,
            log_every: 1,
            settle_time: 0.5 * duration,
            audit: AuditConfig::default(),
        }
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt_physics).round() as usize
    }

    fn control_stride(&self) -> Option<usize> {
        match self.timing {
            ControlTiming::Continuous => None,
            ControlTiming::Sampled { period } => Some((period / self.dt_physics).round() as usize),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if !(self.dt_physics > 0.0 && self.dt_physics.is_finite()) {
            return bad(format!("dt_physics = {} must be > 0", self.dt_physics));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration = {} must be > 0", self.duration));
        }
        let n = self.duration / self.dt_physics;
        if (n - n.round()).abs() > 1e-6 * n.max(1.0) {
            return bad("duration must be a multiple of dt_physics".into());
        }
        if let ControlTiming::Sampled { period } = self.timing {
            let r = period / self.dt_physics;
            if !(period > 0.0) || r.round() < 1.0 || (r - r.round()).abs() > 1e-9 * r {
                return bad(format!(
                    "dt_control = {period} must be a positive integer multiple of dt_physics = {}",
                    self.dt_physics
                ));
            }
            if self.actuation == Actuation::Ideal {
                return bad("ideal actuation requires continuous control timing".into());
            }
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1".into());
        }
        if let Some(h) = self.trajectory.horizon() {
            if self.duration > h + 1e-9 {
                return bad(format!("duration {} exceeds the trajectory horizon {h}", self.duration));
            }
        }
        let chain_len = self.plant.force.trailers();
        if !self.initial.hitch_angles.is_empty() && self.initial.hitch_angles.len() != chain_len {
            return bad(format!(
                "{} initial hitch angles given for {chain_len} trailers",
                self.initial.hitch_angles.len()
            ));
        }
        self.plant.validate()?;
        self.gains.validate().map_err(|e| SimError::Config(e.to_string()))?;
        self.sensor.validate().map_err(|e| SimError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn controller(&self) -> Result<Controller, SimError> {
        Controller::new(self.plant.tractor, self.controller_map.clone(), self.plant.brake, self.gains, self.options)
            .map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn initial_state(&self) -> Result<PlantState, SimError> {
        let r = self.trajectory.sample(0.0).map_err(|source| SimError::Reference { t: 0.0, source })?;
        let tractor = state_from_error(&self.initial.error, &r, self.initial.psi);
        let n = self.plant.force.trailers();
        let chain = if self.initial.hitch_angles.is_empty() {
            ChainState::aligned(tractor.theta, n)
        } else {
            let mut heading = tractor.theta;
            let headings = self
                .initial
                .hitch_angles
                .iter()
                .map(|g| {
                    heading -= g;
                    heading
                })
                .collect();
            ChainState { headings }
        };
        Ok(PlantState { tractor, chain })
    }
}

/// One row of the run log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v_x: f64,
    pub psi: f64,
    pub mode: DriveMode,
    pub u1: f64,
    pub u2: f64,
    pub u3: f64,
    pub f_d: f64,
    pub hx_true: f64,
    pub hy_true: f64,
    pub hx_meas: f64,
    pub hy_meas: f64,
    pub x_d: f64,
    pub y_d: f64,
    pub theta_d: f64,
    pub v_d: f64,
    pub x_e: f64,
    pub y_e: f64,
    pub theta_e: f64,
    pub v_e: f64,
    pub delta_psi: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub v1: f64,
    pub v2: f64,
    pub v1_dot_model: f64,
    pub v2_dot_model: f64,
    pub sat_steer: u8,
    pub sat_drive: u8,
    pub e_p: f64,
}

impl LogRecord {
    pub fn saturated(&self) -> bool {
        self.sat_steer != 0 || self.sat_drive != 0
    }

    pub fn error(&self) -> TrackingError {
        TrackingError { x_e: self.x_e, y_e: self.y_e, theta_e: self.theta_e, v_e: self.v_e }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortInfo {
    pub t: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AuditReport {
    pub stencils_checked: usize,
    pub stencils_excluded: usize,
    pub v1_max_relative_residual: f64,
    pub v2_max_relative_residual: f64,
    pub v1_increases: usize,
    pub v2_increases: usize,
    pub v2_increases_outside_saturation: usize,
}

impl AuditReport {
    /// Whether the configured thresholds hold. Unset thresholds always pass.
    pub fn passes(&self, cfg: &AuditConfig) -> bool {
        let residual_ok = cfg.max_relative_residual.is_none_or(|m| self.v2_max_relative_residual <= m);
        let mono_ok = cfg.max_increases_outside_saturation.is_none_or(|m| self.v2_increases_outside_saturation <= m);
        residual_ok && mono_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub completed: bool,
    pub audit_passed: bool,
    pub t_end: f64,
    pub steps: usize,
    pub final_x_e: f64,
    pub final_y_e: f64,
    pub final_theta_e: f64,
    pub final_v_e: f64,
    pub final_e_p: f64,
    pub max_abs_e_p: f64,
    pub settle_time: f64,
    pub settled_max_abs_e_p: f64,
    pub settled_max_abs_theta_e: f64,
    pub settled_max_abs_v_e: f64,
    pub v2_increases: usize,
    pub v2_increases_outside_saturation: usize,
    pub saturation_fraction: f64,
    pub brake_fraction: f64,
    pub controller_faults: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub abort: Option<AbortInfo>,
    pub audit: AuditReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<LogRecord>,
    pub summary: RunSummary,
}

/// Commands in force over one physics step, plus what the log reports.
#[derive(Debug, Clone, Copy)]
struct Applied {
    input: PlantInput,
    mode: DriveMode,
    u1: f64,
    u3: f64,
    u2: f64,
    omega1: f64,
    omega2: f64,
    sat_steer: bool,
    sat_drive: bool,
}

impl Applied {
    fn from_output(out: &ControlOutput) -> Self {
        Self {
            input: PlantInput { drive: DriveSource::Input(out.drive.input), steering: Steering::Command(out.u2) },
            mode: out.drive.mode(),
            u1: out.drive.input.throttle(),
            u3: out.drive.input.brake(),
            u2: out.u2,
            omega1: out.diagnostics.omega1,
            omega2: out.diagnostics.omega2,
            sat_steer: out.steer_saturated,
            sat_drive: out.drive.saturated,
        }
    }
}

/// Exact actuation: sets `psi` so that the curvature equals `omega1` and
/// returns the input that keeps it there while applying `omega2` as force.
fn ideal_actuation(
    ctrl: &Controller,
    state: &mut TractorState,
    r: &ReferenceSample,
    hitch: HitchForce,
) -> Result<Applied, ControllerError> {
    let p = &ctrl.params;
    let l = p.wheelbase();
    let err = error_transform(state, r);
    let w1 = omega1(&err, r, &ctrl.gains)?;
    state.psi = (l * w1).atan();
    let rates = error_rates(&err, r, state.v_x, w1);
    let w1_dot = omega1_dot(&err, r, &ctrl.gains, &rates)?;
    let psi_dot = w1_dot / (1.0 / l + l * w1 * w1);
    let k = compute_coefficients(p, state.psi, psi_dot, state.v_x)?;
    let w2 = omega2(&err, r, hitch, &k, &ctrl.gains, ctrl.options.hitch_compensation)?;
    let (u1, u3) = match select_drive_actuation(w2, &ctrl.map, &ctrl.brake, state.v_x) {
        Ok(cmd) => (cmd.input.throttle(), cmd.input.brake()),
        Err(_) => (0.0, 0.0),
    };
    Ok(Applied {
        input: PlantInput { drive: DriveSource::Force(w2), steering: Steering::Rate(psi_dot) },
        mode: if w2 >= 0.0 { DriveMode::Throttle } else { DriveMode::Brake },
        u1,
        u3,
        u2: state.psi,
        omega1: w1,
        omega2: w2,
        sat_steer: false,
        sat_drive: false,
    })
}

struct Stats {
    max_abs_e_p: f64,
    settled: [f64; 3],
    prev_v2: Option<(f64, bool)>,
    v2_increases: usize,
    v2_increases_outside: usize,
    saturated_steps: usize,
    brake_steps: usize,
    steps: usize,
    faults: usize,
}

impl Stats {
    fn new() -> Self {
        Self {
            max_abs_e_p: 0.0,
            settled: [0.0; 3],
            prev_v2: None,
            v2_increases: 0,
            v2_increases_outside: 0,
            saturated_steps: 0,
            brake_steps: 0,
            steps: 0,
            faults: 0,
        }
    }

    fn push(&mut self, rec: &LogRecord, settle_time: f64, tol: f64) {
        self.steps += 1;
        self.max_abs_e_p = self.max_abs_e_p.max(rec.e_p.abs());
        if rec.t >= settle_time - 1e-9 {
            let s = &mut self.settled;
            s[0] = s[0].max(rec.e_p.abs());
            s[1] = s[1].max(rec.theta_e.abs());
            s[2] = s[2].max(rec.v_e.abs());
        }
        let sat = rec.saturated();
        if let Some((prev, prev_sat)) = self.prev_v2 {
            if rec.v2 - prev > tol {
                self.v2_increases += 1;
                if !(sat || prev_sat) {
                    self.v2_increases_outside += 1;
                }
            }
        }
        self.prev_v2 = Some((rec.v2, sat));
        self.saturated_steps += sat as usize;
        self.brake_steps += (rec.mode == DriveMode::Brake) as usize;
    }
}

struct Runner<'a> {
    cfg: &'a SimConfig,
    controller: Controller,
    sensor: Sensor,
    rng: ChaCha8Rng,
}

impl Runner<'_> {
    fn reference(&self, t: f64) -> Result<ReferenceSample, SimError> {
        self.cfg.trajectory.sample(t).map_err(|source| SimError::Reference { t, source })
    }

    fn plant_eval(&self, t: f64, s: &PlantState, input: &PlantInput) -> Result<PlantEval, SimError> {
        self.cfg.plant.evaluate(t, s, input).map_err(|source| SimError::Plant { t, source })
    }

    /// Continuous-mode command at an integration stage.
    fn stage_command(
        &self,
        state: &mut PlantState,
        r: &ReferenceSample,
        hitch: HitchForce,
        t: f64,
    ) -> Result<(Applied, bool), SimError> {
        match self.cfg.actuation {
            Actuation::Backstepping => match self.controller.compute(&state.tractor, r, hitch) {
                Ok(out) => Ok((Applied::from_output(&out), false)),
                Err(fault) => Ok((Applied::from_output(&fault.safe_stop), true)),
            },
            Actuation::Ideal => ideal_actuation(&self.controller, &mut state.tractor, r, hitch)
                .map(|a| (a, false))
                .map_err(|e| SimError::Plant { t, source: controller_to_plant(e) }),
        }
    }

    fn record(
        &self,
        t: f64,
        s: &PlantState,
        r: &ReferenceSample,
        applied: &Applied,
        eval: &PlantEval,
        measured: HitchForce,
    ) -> LogRecord {
        let tr = &s.tractor;
        let gains = &self.controller.gains;
        let err = error_transform(tr, r);
        let c_psi = tr.psi.tan() / self.cfg.plant.tractor.wheelbase();
        let delta_psi = omega1(&err, r, gains).map(|w| c_psi - w).unwrap_or(f64::NAN);
        let (v1, v2) = lyapunov(&err, delta_psi);
        let (v1_dot, v2_dot) = lyapunov_rates(&err, delta_psi, r, gains);
        LogRecord {
            t,
            x: tr.x,
            y: tr.y,
            theta: tr.theta,
            v_x: tr.v_x,
            psi: tr.psi,
            mode: applied.mode,
            u1: applied.u1,
            u2: applied.u2,
            u3: applied.u3,
            f_d: eval.f_d,
            hx_true: eval.hitch.h_x,
            hy_true: eval.hitch.h_y,
            hx_meas: measured.h_x,
            hy_meas: measured.h_y,
            x_d: r.x_d,
            y_d: r.y_d,
            theta_d: r.theta_d,
            v_d: r.v_d,
            x_e: err.x_e,
            y_e: err.y_e,
            theta_e: err.theta_e,
            v_e: err.v_e,
            delta_psi,
            omega1: applied.omega1,
            omega2: applied.omega2,
            v1,
            v2,
            v1_dot_model: v1_dot,
            v2_dot_model: v2_dot,
            sat_steer: applied.sat_steer as u8,
            sat_drive: applied.sat_drive as u8,
            e_p: err.signed_position_error(),
        }
    }
}

fn controller_to_plant(e: ControllerError) -> PlantError {
    match e {
        ControllerError::Model(m) => PlantError::Model(m),
        ControllerError::Powertrain(p) => PlantError::Powertrain(p),
        _ => PlantError::NonFinite,
    }
}

/// Runs the closed loop. Configuration errors are returned as `Err`; plant
/// failures end the run early and are reported in the summary, with the log
/// up to the failure kept.
pub fn run_closed_loop(cfg: &SimConfig) -> Result<RunOutput, SimError> {
    cfg.validate()?;
    let mut runner = Runner {
        cfg,
        controller: cfg.controller()?,
        sensor: Sensor::new(cfg.sensor).map_err(|e| SimError::Config(e.to_string()))?,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let mut state = cfg.initial_state()?;
    let mut records = Vec::with_capacity(cfg.steps() / cfg.log_every + 2);
    let mut stats = Stats::new();
    let outcome = simulate(&mut runner, &mut state, &mut records, &mut stats);
    let audit = lyapunov_audit(&records, &cfg.audit);
    let last = records.last().copied();
    let abort = outcome.err().map(|e| {
        tracing::warn!("run aborted: {e}");
        AbortInfo { t: e.time().unwrap_or(0.0), reason: e.to_string() }
    });
    let n = stats.steps.max(1) as f64;
    let audit_passed = audit.passes(&cfg.audit);
    let summary = RunSummary {
        completed: abort.is_none(),
        audit_passed,
        t_end: last.map_or(0.0, |r| r.t),
        steps: stats.steps,
        final_x_e: last.map_or(f64::NAN, |r| r.x_e),
        final_y_e: last.map_or(f64::NAN, |r| r.y_e),
        final_theta_e: last.map_or(f64::NAN, |r| r.theta_e),
        final_v_e: last.map_or(f64::NAN, |r| r.v_e),
        final_e_p: last.map_or(f64::NAN, |r| r.e_p),
        max_abs_e_p: stats.max_abs_e_p,
        settle_time: cfg.settle_time,
        settled_max_abs_e_p: stats.settled[0],
        settled_max_abs_theta_e: stats.settled[1],
        settled_max_abs_v_e: stats.settled[2],
        v2_increases: stats.v2_increases,
        v2_increases_outside_saturation: stats.v2_increases_outside,
        saturation_fraction: stats.saturated_steps as f64 / n,
        brake_fraction: stats.brake_steps as f64 / n,
        controller_faults: stats.faults,
        abort,
        audit,
    };
    Ok(RunOutput { records, summary })
}

fn simulate(
    runner: &mut Runner<'_>,
    state: &mut PlantState,
    records: &mut Vec<LogRecord>,
    stats: &mut Stats,
) -> Result<(), SimError> {
    let cfg = runner.cfg;
    let dt = cfg.dt_physics;
    let n_steps = cfg.steps();
    let stride = cfg.control_stride();
    let mut applied: Option<Applied> = None;
    let hold = PlantInput {
        drive: DriveSource::Input(DriveInput::Throttle(0.0)),
        steering: Steering::Command(state.tractor.psi),
    };

    for k in 0..=n_steps {
        let t = k as f64 * dt;
        let r = runner.reference(t)?;
        if cfg.actuation == Actuation::Ideal {
            // the steering angle is slaved to the curvature target
            let err = error_transform(&state.tractor, &r);
            let w1 = omega1(&err, &r, &runner.controller.gains)
                .map_err(|e| SimError::Plant { t, source: controller_to_plant(e) })?;
            state.tractor.psi = (cfg.plant.tractor.wheelbase() * w1).atan();
        }

        let prev_input = applied.map_or(hold, |a| a.input);
        let truth_before = runner.plant_eval(t, state, &prev_input)?.hitch;
        let measured = runner.sensor.measure(truth_before, t, &mut runner.rng);

        let current = match stride {
            Some(stride) if k % stride == 0 || applied.is_none() => {
                let out = match runner.controller.control_step(&state.tractor, &r, measured) {
                    Ok(out) => out,
                    Err(fault) => {
                        stats.faults += 1;
                        tracing::debug!("t = {t:.3}: {fault}; safe stop");
                        *fault.safe_stop
                    }
                };
                Applied::from_output(&out)
            }
            Some(_) => applied.expect("held command exists after the first cycle"),
            None => {
                let mut probe = state.clone();
                let (a, fault) = runner.stage_command(&mut probe, &r, measured, t)?;
                stats.faults += fault as usize;
                a
            }
        };
        applied = Some(current);

        let eval = runner.plant_eval(t, state, &current.input)?;
        let rec = runner.record(t, state, &r, &current, &eval, measured);
        stats.push(&rec, cfg.settle_time, cfg.audit.monotonic_tol);
        if k % cfg.log_every == 0 || k == n_steps {
            records.push(rec);
        }
        if k == n_steps {
            break;
        }

        let y = match stride {
            Some(_) => rk4_step(t, &state.to_vec(), dt, |ts, ys| {
                Ok(runner.plant_eval(ts, &PlantState::from_slice(ys), &current.input)?.rate)
            })?,
            None => {
                let runner = &*runner;
                rk4_step(t, &state.to_vec(), dt, |ts, ys| {
                    let mut s = PlantState::from_slice(ys);
                    let rs = runner.reference(ts)?;
                    let (a, _) = runner.stage_command(&mut s, &rs, measured, ts)?;
                    Ok(runner.plant_eval(ts, &s, &a.input)?.rate)
                })?
            }
        };
        *state = PlantState::from_slice(&y);
        if stride.is_none() && cfg.actuation == Actuation::Backstepping {
            // the command issued at the end of the step becomes the memory
            let r_next = runner.reference(t + dt)?;
            let out = runner.controller.compute(&state.tractor, &r_next, measured);
            runner.controller.set_previous_u2(Some(match out {
                Ok(o) => o.u2,
                Err(f) => f.safe_stop.u2,
            }));
        }
    }
    Ok(())
}

fn fd_derivative(v: &[f64], i: usize, h: f64) -> f64 {
    (-v[i + 2] + 8.0 * v[i + 1] - 8.0 * v[i - 1] + v[i - 2]) / (12.0 * h)
}

/// Compares the closed-form Lyapunov rates in the log with fourth-order
/// central differences of the logged values, and counts increases of V1 and
/// V2. Stencils touching a saturated sample, or a sample next to one, are
/// excluded.
pub fn lyapunov_audit(records: &[LogRecord], cfg: &AuditConfig) -> AuditReport {
    let mut report = AuditReport::default();
    let n = records.len();
    for w in records.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.v1 - a.v1 > cfg.monotonic_tol {
            report.v1_increases += 1;
        }
        if b.v2 - a.v2 > cfg.monotonic_tol {
            report.v2_increases += 1;
            if !(a.saturated() || b.saturated()) {
                report.v2_increases_outside_saturation += 1;
            }
        }
    }
    if n < 5 {
        return report;
    }
    let h = records[1].t - records[0].t;
    let sat: Vec<bool> =
        (0..n).map(|i| records[i.saturating_sub(1)..(i + 2).min(n)].iter().any(LogRecord::saturated)).collect();
    let v1: Vec<f64> = records.iter().map(|r| r.v1).collect();
    let v2: Vec<f64> = records.iter().map(|r| r.v2).collect();
    for i in 2..n - 2 {
        let uniform =
            records[i - 2..=i + 2].windows(2).all(|w| ((w[1].t - w[0].t) - h).abs() <= 1e-9 * h.abs().max(1e-12));
        if !uniform || sat[i - 2..=i + 2].iter().any(|&s| s) {
            report.stencils_excluded += 1;
            continue;
        }
        report.stencils_checked += 1;
        let rel = |fd: f64, model: f64| (fd - model).abs() / model.abs().max(cfg.residual_floor);
        let r = &records[i];
        report.v1_max_relative_residual =
            report.v1_max_relative_residual.max(rel(fd_derivative(&v1, i, h), r.v1_dot_model));
        report.v2_max_relative_residual =
            report.v2_max_relative_residual.max(rel(fd_derivative(&v2, i, h), r.v2_dot_model));
    }
    report
}
