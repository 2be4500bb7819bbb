//! Force-compensating backstepping tracking controller.
//!
//! Tracking errors are taken in the Frenet frame of the reference point. The
//! outer loop picks a desired curvature `omega1` and a desired driving force
//! `omega2`; the latter feeds the measured hitch force forward. The inner
//! loop steers `c_psi = tan(psi) / L` onto `omega1` through the first-order
//! steering actuator, and the driving force is realized by throttle or brake
//! depending on the sign of `omega2`.

use crate::powertrain::{
    select_drive_actuation, BrakeParams, Clamped, DriveCommand, DriveInput, PowertrainError, PropulsionMap,
};
use crate::trajectory::ReferenceSample;
use crate::vehicle::{compute_coefficients, DynamicsCoefficients, HitchForce, ModelError, TractorParams, TractorState};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this |theta_e| the sinc-like terms use their Taylor expansions.
pub const THETA_SWITCH: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("invalid reference: v_d = {0} must be > 0")]
    InvalidReference(f64),
    #[error("invalid gains: {0}")]
    InvalidGains(String),
    #[error("non-positive force gain phi2 = {0}")]
    NonPositivePhi2(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Powertrain(#[from] PowertrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerGains {
    pub k_theta: f64,
    pub k_v: f64,
    pub k_psi: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self { k_theta: 1.0, k_v: 2.0, k_psi: 5.0 }
    }
}

impl ControllerGains {
    pub fn validate(&self) -> Result<(), ControllerError> {
        for (name, k) in [("k_theta", self.k_theta), ("k_v", self.k_v), ("k_psi", self.k_psi)] {
            if !(k > 0.0 && k.is_finite()) {
                return Err(ControllerError::InvalidGains(format!("{name} = {k} must be > 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrackingError {
    pub x_e: f64,
    pub y_e: f64,
    pub theta_e: f64,
    pub v_e: f64,
}

impl TrackingError {
    /// Signed position error: magnitude `sqrt(x_e^2 + y_e^2)`, negative when
    /// the tractor is left of the reference (`y_e > 0`).
    pub fn signed_position_error(&self) -> f64 {
        let mag = self.x_e.hypot(self.y_e);
        if self.y_e > 0.0 {
            -mag
        } else {
            mag
        }
    }
}

pub fn error_transform(state: &TractorState, reference: &ReferenceSample) -> TrackingError {
    let (sin, cos) = reference.theta_d.sin_cos();
    let dx = state.x - reference.x_d;
    let dy = state.y - reference.y_d;
    TrackingError {
        x_e: dx * cos + dy * sin,
        y_e: dy * cos - dx * sin,
        theta_e: state.theta - reference.theta_d,
        v_e: state.v_x - reference.v_d,
    }
}

/// Inverse of [`error_transform`]: the tractor state with steering `psi`
/// that has tracking error `err` against `reference`.
pub fn state_from_error(err: &TrackingError, reference: &ReferenceSample, psi: f64) -> TractorState {
    let (sin, cos) = reference.theta_d.sin_cos();
    TractorState {
        x: reference.x_d + err.x_e * cos - err.y_e * sin,
        y: reference.y_d + err.x_e * sin + err.y_e * cos,
        theta: reference.theta_d + err.theta_e,
        v_x: reference.v_d + err.v_e,
        psi,
    }
}

/// `sin(t)/t`, `(1 - cos(t))/t` and their derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SincTerms {
    pub s1: f64,
    pub s2: f64,
    pub ds1: f64,
    pub ds2: f64,
}

pub fn sinc_like(theta: f64) -> SincTerms {
    if theta.abs() < THETA_SWITCH {
        sinc_taylor(theta)
    } else {
        sinc_direct(theta)
    }
}

pub(crate) fn sinc_taylor(t: f64) -> SincTerms {
    let t2 = t * t;
    SincTerms {
        s1: 1.0 - t2 / 6.0 * (1.0 - t2 / 20.0 * (1.0 - t2 / 42.0)),
        s2: t / 2.0 * (1.0 - t2 / 12.0 * (1.0 - t2 / 30.0)),
        ds1: -t / 3.0 * (1.0 - t2 / 10.0 * (1.0 - t2 / 28.0)),
        ds2: 0.5 - t2 / 8.0 * (1.0 - t2 / 18.0 * (1.0 - t2 / 40.0)),
    }
}

pub(crate) fn sinc_direct(t: f64) -> SincTerms {
    let (sin, cos) = t.sin_cos();
    let half = (0.5 * t).sin();
    let s1 = sin / t;
    // 1 - cos t = 2 sin^2(t/2), free of cancellation
    let s2 = 2.0 * half * half / t;
    SincTerms { s1, s2, ds1: (cos - s1) / t, ds2: s1 - s2 / t }
}

/// Virtual controls: desired curvature and desired driving force.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VirtualControl {
    pub omega1: f64,
    pub omega2: f64,
}

fn check_reference(reference: &ReferenceSample) -> Result<(), ControllerError> {
    if !(reference.v_d > 0.0) {
        return Err(ControllerError::InvalidReference(reference.v_d));
    }
    Ok(())
}

/// Desired curvature `omega1`.
pub fn omega1(
    err: &TrackingError,
    reference: &ReferenceSample,
    gains: &ControllerGains,
) -> Result<f64, ControllerError> {
    check_reference(reference)?;
    let s = sinc_like(err.theta_e);
    Ok(err.x_e * s.s2 - err.y_e * s.s1 - gains.k_theta * err.theta_e + reference.curvature())
}

/// Desired driving force `omega2`. With `compensate_hitch` off the measured
/// hitch terms are dropped (ablation).
pub fn omega2(
    err: &TrackingError,
    reference: &ReferenceSample,
    hitch: HitchForce,
    coeffs: &DynamicsCoefficients,
    gains: &ControllerGains,
    compensate_hitch: bool,
) -> Result<f64, ControllerError> {
    check_reference(reference)?;
    if !(coeffs.phi2 > 0.0) {
        return Err(ControllerError::NonPositivePhi2(coeffs.phi2));
    }
    let h = if compensate_hitch { hitch } else { HitchForce::ZERO };
    let inner = coeffs.phi3 * h.h_y - coeffs.phi1 + reference.v_d_dot - gains.k_v * err.v_e - err.x_e
        + gains.k_theta * err.theta_e * err.theta_e
        - reference.curvature() * err.theta_e;
    Ok(h.h_x + inner / coeffs.phi2)
}

pub fn virtual_control(
    err: &TrackingError,
    reference: &ReferenceSample,
    hitch: HitchForce,
    coeffs: &DynamicsCoefficients,
    gains: &ControllerGains,
) -> Result<VirtualControl, ControllerError> {
    Ok(VirtualControl {
        omega1: omega1(err, reference, gains)?,
        omega2: omega2(err, reference, hitch, coeffs, gains, true)?,
    })
}

/// Time derivatives of the kinematic tracking errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRates {
    pub x_e_dot: f64,
    pub y_e_dot: f64,
    pub theta_e_dot: f64,
}

/// Error rates for speed `v_x` and curvature state `c_psi = tan(psi)/L`.
pub fn error_rates(err: &TrackingError, reference: &ReferenceSample, v_x: f64, c_psi: f64) -> ErrorRates {
    let (sin, cos) = err.theta_e.sin_cos();
    ErrorRates {
        x_e_dot: v_x * cos + reference.theta_d_dot * err.y_e - reference.v_d,
        y_e_dot: v_x * sin - reference.theta_d_dot * err.x_e,
        theta_e_dot: v_x * c_psi - reference.theta_d_dot,
    }
}

/// Total time derivative of `omega1`.
pub fn omega1_dot(
    err: &TrackingError,
    reference: &ReferenceSample,
    gains: &ControllerGains,
    rates: &ErrorRates,
) -> Result<f64, ControllerError> {
    check_reference(reference)?;
    let s = sinc_like(err.theta_e);
    let v = reference.v_d;
    let curvature_rate = reference.theta_d_ddot / v - reference.theta_d_dot * reference.v_d_dot / (v * v);
    Ok(rates.x_e_dot * s.s2 + err.x_e * s.ds2 * rates.theta_e_dot
        - rates.y_e_dot * s.s1
        - err.y_e * s.ds1 * rates.theta_e_dot
        - gains.k_theta * rates.theta_e_dot
        + curvature_rate)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackstepState {
    pub c_psi: f64,
    pub delta_psi: f64,
}

impl BackstepState {
    pub fn new(params: &TractorParams, psi: f64, omega1: f64) -> Self {
        let c_psi = psi.tan() / params.wheelbase();
        Self { c_psi, delta_psi: c_psi - omega1 }
    }
}

/// Steering command driving `c_psi` onto `omega1`, clamped to `psi_max`.
pub fn steering_law(
    backstep: &BackstepState,
    omega1_dot: f64,
    err: &TrackingError,
    state: &TractorState,
    params: &TractorParams,
    gains: &ControllerGains,
) -> Clamped {
    let l = params.wheelbase();
    let gain = params.tau / (1.0 / l + l * backstep.c_psi * backstep.c_psi);
    let raw = gain * (omega1_dot - state.v_x * err.theta_e - gains.k_psi * backstep.delta_psi) + state.psi;
    let value = raw.clamp(-params.psi_max, params.psi_max);
    Clamped { value, saturated: value != raw }
}

/// Lyapunov values `(V1, V2)`.
pub fn lyapunov(err: &TrackingError, delta_psi: f64) -> (f64, f64) {
    let v1 = 0.5 * (err.x_e * err.x_e + err.y_e * err.y_e + err.theta_e * err.theta_e + err.v_e * err.v_e);
    (v1, v1 + 0.5 * delta_psi * delta_psi)
}

/// Closed-form `(dV1/dt, dV2/dt)` under exact actuation.
pub fn lyapunov_rates(
    err: &TrackingError,
    delta_psi: f64,
    reference: &ReferenceSample,
    gains: &ControllerGains,
) -> (f64, f64) {
    let v1 = -gains.k_theta * reference.v_d * err.theta_e * err.theta_e - gains.k_v * err.v_e * err.v_e;
    (v1, v1 - gains.k_psi * delta_psi * delta_psi)
}

/// How the steering rate entering `phi1` is obtained; the actuator has no
/// rate sensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiRateSource {
    /// From the previous steering command through the lag model.
    #[default]
    PreviousCommand,
    /// From the command issued this cycle; equals the plant's true rate.
    AppliedCommand,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerOptions {
    #[serde(default)]
    pub psi_rate: PsiRateSource,
    #[serde(default = "yes")]
    pub hitch_compensation: bool,
}

fn yes() -> bool {
    true
}

impl Default for ControllerOptions {
    fn default() -> Self {
        Self { psi_rate: PsiRateSource::PreviousCommand, hitch_compensation: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Diagnostics {
    pub error: TrackingError,
    pub omega1: f64,
    pub omega2: f64,
    pub omega1_dot: f64,
    pub delta_psi: f64,
    pub v1: f64,
    pub v2: f64,
    pub psi_dot_estimate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    pub drive: DriveCommand,
    pub u2: f64,
    pub steer_saturated: bool,
    pub diagnostics: Diagnostics,
}

/// A failed control cycle: the safe-stop command to apply and the cause.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("control cycle failed: {error}")]
pub struct ControlFault {
    pub error: ControllerError,
    pub safe_stop: Box<ControlOutput>,
}

/// Controller instance. Its only memory is the last steering command.
#[derive(Debug, Clone)]
pub struct Controller {
    pub params: TractorParams,
    pub map: PropulsionMap,
    pub brake: BrakeParams,
    pub gains: ControllerGains,
    pub options: ControllerOptions,
    previous_u2: Option<f64>,
}

impl Controller {
    pub fn new(
        params: TractorParams,
        map: PropulsionMap,
        brake: BrakeParams,
        gains: ControllerGains,
        options: ControllerOptions,
    ) -> Result<Self, ControllerError> {
        gains.validate()?;
        params.validate()?;
        map.validate()?;
        brake.validate()?;
        Ok(Self { params, map, brake, gains, options, previous_u2: None })
    }

    pub fn previous_u2(&self) -> Option<f64> {
        self.previous_u2
    }

    pub fn set_previous_u2(&mut self, u2: Option<f64>) {
        self.previous_u2 = u2;
    }

    fn safe_stop(&self, state: &TractorState) -> ControlOutput {
        let u3 = self.brake.u3_max / 2.0;
        ControlOutput {
            drive: DriveCommand { input: DriveInput::Brake(u3), force: self.brake.force(u3), saturated: false },
            u2: state.psi,
            steer_saturated: false,
            diagnostics: Diagnostics::default(),
        }
    }

    /// One control cycle without touching the controller memory.
    pub fn compute(
        &self,
        state: &TractorState,
        reference: &ReferenceSample,
        hitch: HitchForce,
    ) -> Result<ControlOutput, ControlFault> {
        self.compute_inner(state, reference, hitch)
            .map_err(|error| ControlFault { error, safe_stop: Box::new(self.safe_stop(state)) })
    }

    fn compute_inner(
        &self,
        state: &TractorState,
        reference: &ReferenceSample,
        hitch: HitchForce,
    ) -> Result<ControlOutput, ControllerError> {
        let p = &self.params;
        let err = error_transform(state, reference);
        let w1 = omega1(&err, reference, &self.gains)?;
        // singular steering is caught before the tan() below matters
        compute_coefficients(p, state.psi, 0.0, state.v_x)?;
        let backstep = BackstepState::new(p, state.psi, w1);
        let rates = error_rates(&err, reference, state.v_x, backstep.c_psi);
        let w1_dot = omega1_dot(&err, reference, &self.gains, &rates)?;
        let steer = steering_law(&backstep, w1_dot, &err, state, p, &self.gains);

        let held = match self.options.psi_rate {
            PsiRateSource::PreviousCommand => self.previous_u2.unwrap_or(state.psi),
            PsiRateSource::AppliedCommand => steer.value,
        };
        let psi_dot = (held - state.psi) / p.tau;
        let coeffs = compute_coefficients(p, state.psi, psi_dot, state.v_x)?;
        let w2 = omega2(&err, reference, hitch, &coeffs, &self.gains, self.options.hitch_compensation)?;
        let drive = select_drive_actuation(w2, &self.map, &self.brake, state.v_x)?;
        let (v1, v2) = lyapunov(&err, backstep.delta_psi);
        Ok(ControlOutput {
            drive,
            u2: steer.value,
            steer_saturated: steer.saturated,
            diagnostics: Diagnostics {
                error: err,
                omega1: w1,
                omega2: w2,
                omega1_dot: w1_dot,
                delta_psi: backstep.delta_psi,
                v1,
                v2,
                psi_dot_estimate: psi_dot,
            },
        })
    }

    /// One control cycle. On failure the safe-stop command becomes the
    /// remembered steering command.
    pub fn control_step(
        &mut self,
        state: &TractorState,
        reference: &ReferenceSample,
        hitch: HitchForce,
    ) -> Result<ControlOutput, ControlFault> {
        let out = self.compute(state, reference, hitch);
        self.previous_u2 = Some(match &out {
            Ok(o) => o.u2,
            Err(f) => f.safe_stop.u2,
        });
        out
    }
}
