//! Tractor parameters and the reduced planar dynamics of a rear-drive,
//! front-steer tractor loaded by a measured hitch force.
//!
//! The canonical state is the rear-axle midpoint. Lateral slip forces do not
//! appear: they are eliminated by the two no-slip constraints, which leaves
//! heading and longitudinal speed driven by the coefficients in
//! [`DynamicsCoefficients`].

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

/// Guard below pi/2 at which the steering geometry is declared singular.
pub const STEER_SINGULARITY_GUARD: f64 = 1e-3;

/// Range of the three-axis load cell at the hitch, per axis [N].
pub const HITCH_SENSOR_RANGE: f64 = 50_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("steering angle {psi} rad is within {STEER_SINGULARITY_GUARD} rad of pi/2")]
    SingularSteering { psi: f64 },
    #[error("invalid tractor parameters: {0}")]
    InvalidParams(String),
}

/// Physical constants of the tractor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TractorParams {
    /// Mass [kg].
    pub m: f64,
    /// Yaw moment of inertia about the COG [kg m^2].
    pub j: f64,
    /// COG to front axle [m].
    pub a: f64,
    /// COG to rear axle [m].
    pub b: f64,
    /// Rear axle to hitch load cell [m].
    pub c: f64,
    /// Steering actuator time constant [s].
    pub tau: f64,
    /// Steering command limit [rad].
    pub psi_max: f64,
    /// Throttle opening interval (min, max).
    pub u1_range: (f64, f64),
    /// Braking pressure limit.
    pub u3_max: f64,
}

impl Default for TractorParams {
    fn default() -> Self {
        Self {
            m: 3000.0,
            j: 4000.0,
            a: 1.0,
            b: 1.0,
            c: 0.5,
            tau: 0.2,
            psi_max: 0.55,
            u1_range: (0.0, 300.0),
            u3_max: 40.0,
        }
    }
}

impl TractorParams {
    /// Wheelbase `a + b`.
    pub fn wheelbase(&self) -> f64 {
        self.a + self.b
    }

    /// Smallest turning radius of the rear-axle point at full steering lock.
    pub fn min_turning_radius(&self) -> f64 {
        self.wheelbase() / self.psi_max.tan()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidParams(msg.to_string()));
        let finite =
            [self.m, self.j, self.a, self.b, self.c, self.tau, self.psi_max, self.u3_max].iter().all(|v| v.is_finite());
        if !finite || !self.u1_range.0.is_finite() || !self.u1_range.1.is_finite() {
            return bad("all parameters must be finite");
        }
        if self.m <= 0.0 {
            return bad("m must be > 0");
        }
        if self.j <= 0.0 {
            return bad("j must be > 0");
        }
        if self.a <= 0.0 || self.b <= 0.0 {
            return bad("a and b must be > 0");
        }
        if self.c < 0.0 {
            return bad("c must be >= 0");
        }
        if self.tau <= 0.0 {
            return bad("tau must be > 0");
        }
        if !(self.psi_max > 0.0 && self.psi_max < FRAC_PI_2) {
            return bad("psi_max must lie in (0, pi/2)");
        }
        if !(self.u1_range.0 >= 0.0 && self.u1_range.0 < self.u1_range.1) {
            return bad("u1_range must satisfy 0 <= min < max");
        }
        if self.u3_max <= 0.0 {
            return bad("u3_max must be > 0");
        }
        Ok(())
    }
}

/// Tractor state at one instant. `theta` is never wrapped.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TractorState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v_x: f64,
    pub psi: f64,
}

impl TractorState {
    /// COG position, `b` ahead of the rear-axle point.
    pub fn cog(&self, params: &TractorParams) -> (f64, f64) {
        (self.x + params.b * self.theta.cos(), self.y + params.b * self.theta.sin())
    }
}

/// Planar force exerted on the tractor at the hitch, in the tractor frame.
/// Positive `h_x` resists forward motion; positive `h_y` points to the left.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HitchForce {
    pub h_x: f64,
    pub h_y: f64,
}

impl HitchForce {
    pub const ZERO: HitchForce = HitchForce { h_x: 0.0, h_y: 0.0 };

    pub fn new(h_x: f64, h_y: f64) -> Self {
        Self { h_x, h_y }
    }

    pub fn clamp(self, limit: f64) -> Self {
        Self { h_x: self.h_x.clamp(-limit, limit), h_y: self.h_y.clamp(-limit, limit) }
    }

    pub fn within_sensor_range(&self) -> bool {
        self.h_x.abs() <= HITCH_SENSOR_RANGE && self.h_y.abs() <= HITCH_SENSOR_RANGE
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsCoefficients {
    pub phi1: f64,
    pub phi2: f64,
    pub phi3: f64,
    pub z: f64,
}

/// Time derivative of the rear-axle state (excluding steering).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateRate {
    pub x_dot: f64,
    pub y_dot: f64,
    pub theta_dot: f64,
    pub v_x_dot: f64,
}

fn check_steering(psi: f64) -> Result<(), ModelError> {
    if !psi.is_finite() || psi.abs() >= FRAC_PI_2 - STEER_SINGULARITY_GUARD {
        Err(ModelError::SingularSteering { psi })
    } else {
        Ok(())
    }
}

pub fn compute_coefficients(
    params: &TractorParams,
    psi: f64,
    psi_dot: f64,
    v_x: f64,
) -> Result<DynamicsCoefficients, ModelError> {
    check_steering(psi)?;
    let l = params.wheelbase();
    let (sin, cos) = psi.sin_cos();
    let tan = psi.tan();
    // m b^2 + J: yaw inertia about the rear axle
    let inertia_rear = params.m * params.b * params.b + params.j;
    let z = cos * cos * (l * l * params.m + inertia_rear * tan * tan);
    Ok(DynamicsCoefficients {
        phi1: -inertia_rear * tan * psi_dot * v_x / z,
        phi2: l * l * cos * cos / z,
        phi3: l * l * params.c * sin * cos / z,
        z,
    })
}

/// Yaw rate of the tractor for speed `v_x` and steering angle `psi`.
pub fn yaw_rate(params: &TractorParams, v_x: f64, psi: f64) -> f64 {
    v_x * psi.tan() / params.wheelbase()
}

/// Yaw acceleration implied by differentiating [`yaw_rate`].
pub fn yaw_accel(params: &TractorParams, v_x: f64, v_x_dot: f64, psi: f64, psi_dot: f64) -> f64 {
    let l = params.wheelbase();
    let cos = psi.cos();
    v_x_dot * psi.tan() / l + psi_dot * v_x / (l * cos * cos)
}

pub fn state_derivative(
    params: &TractorParams,
    state: &TractorState,
    f_d: f64,
    hitch: HitchForce,
    psi_dot: f64,
) -> Result<StateRate, ModelError> {
    let k = compute_coefficients(params, state.psi, psi_dot, state.v_x)?;
    let (sin, cos) = state.theta.sin_cos();
    Ok(StateRate {
        x_dot: state.v_x * cos,
        y_dot: state.v_x * sin,
        theta_dot: yaw_rate(params, state.v_x, state.psi),
        v_x_dot: k.phi1 + k.phi2 * (f_d - hitch.h_x) - k.phi3 * hitch.h_y,
    })
}

/// First-order steering lag.
pub fn steering_rate(params: &TractorParams, psi: f64, u2: f64) -> f64 {
    (u2 - psi) / params.tau
}

/// Residuals (rear, front) of the two no-slip constraints, evaluated at the
/// COG reconstructed from the rear-axle point.
pub fn constraint_residuals(params: &TractorParams, state: &TractorState, rate: &StateRate) -> (f64, f64) {
    let (sin, cos) = state.theta.sin_cos();
    let w = rate.theta_dot;
    let xg_dot = rate.x_dot - params.b * sin * w;
    let yg_dot = rate.y_dot + params.b * cos * w;
    let rear = yg_dot * cos - xg_dot * sin - params.b * w;
    let heading = state.theta + state.psi;
    let front = yg_dot * heading.cos() - xg_dot * heading.sin() + params.a * w * state.psi.cos();
    (rear, front)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> TractorParams {
        TractorParams { m: 3000.0, j: 4000.0, a: 1.0, b: 1.0, c: 0.5, ..TractorParams::default() }
    }

    #[test]
    fn straight_wheels_collapse_coefficients() {
        let k = compute_coefficients(&params(), 0.0, 0.0, 1.0).unwrap();
        assert_eq!(k.phi1, 0.0);
        assert_eq!(k.phi3, 0.0);
        assert!((k.phi2 - 1.0 / 3000.0).abs() < 1e-18);
        assert!((k.z - 12000.0).abs() < 1e-9);
    }

    #[test]
    fn coefficients_at_generic_steering() {
        // Hand evaluation: psi=0.3, psi_dot=0.1, v=2, m=3000, J=4000, b=1, L=2, c=0.5.
        // mb^2+J = 7000; tan(0.3)=0.30933624960962325; cos^2(0.3)=0.9126678074548391
        // Z = cos^2 (4*3000 + 7000 tan^2) = 0.9126678074548391 * (12000 + 669.82...)
        let (psi, psi_dot, v): (f64, f64, f64) = (0.3, 0.1, 2.0);
        let tan = 0.309_336_249_609_623_25_f64;
        let cos2 = 0.912_667_807_454_839_1_f64;
        let z = cos2 * (12000.0 + 7000.0 * tan * tan);
        let expected_phi1 = -7000.0 * tan * psi_dot * v / z;
        let expected_phi2 = 4.0 * cos2 / z;
        let expected_phi3 = 4.0 * 0.5 * psi.sin() * psi.cos() / z;
        let k = compute_coefficients(&params(), psi, psi_dot, v).unwrap();
        assert!((k.z - z).abs() < 1e-9 * z);
        assert!((k.phi1 - expected_phi1).abs() < 1e-15);
        assert!((k.phi2 - expected_phi2).abs() < 1e-15);
        assert!((k.phi3 - expected_phi3).abs() < 1e-15);
        // Z = 11563.339... independent numeric value
        assert!((z - 11_563.339_037_274_196).abs() < 1e-8, "z = {z}");
    }

    #[test]
    fn steering_parity() {
        let p = params();
        let a = compute_coefficients(&p, 0.25, 0.3, 1.5).unwrap();
        let b = compute_coefficients(&p, -0.25, 0.3, 1.5).unwrap();
        assert!((a.phi1 + b.phi1).abs() < 1e-15);
        assert!((a.phi3 + b.phi3).abs() < 1e-15);
        assert_eq!(a.phi2, b.phi2);
        assert_eq!(a.z, b.z);
    }

    #[test]
    fn singular_steering_rejected() {
        let p = params();
        assert!(matches!(
            compute_coefficients(&p, FRAC_PI_2 - 1e-4, 0.0, 1.0),
            Err(ModelError::SingularSteering { .. })
        ));
        assert!(compute_coefficients(&p, -FRAC_PI_2, 0.0, 1.0).is_err());
        assert!(compute_coefficients(&p, FRAC_PI_2 - 2e-3, 0.0, 1.0).is_ok());
    }

    #[test]
    fn positive_normalizer_and_gain_on_dense_grid() {
        let p = params();
        let n = 20_000;
        let limit = FRAC_PI_2 - STEER_SINGULARITY_GUARD;
        for i in 0..n {
            let psi = -limit * 0.999_999 + 2.0 * limit * 0.999_999 * i as f64 / (n - 1) as f64;
            let k = compute_coefficients(&p, psi, 1.0, 1.0).unwrap();
            assert!(k.z > 0.0 && k.phi2 > 0.0, "psi = {psi}");
        }
    }

    #[test]
    fn coasting_straight() {
        let s = TractorState { v_x: 1.0, ..Default::default() };
        let r = state_derivative(&params(), &s, 0.0, HitchForce::ZERO, 0.0).unwrap();
        assert_eq!(r, StateRate { x_dot: 1.0, y_dot: 0.0, theta_dot: 0.0, v_x_dot: 0.0 });
    }

    #[test]
    fn net_force_over_mass_when_straight() {
        let s = TractorState { v_x: 1.0, ..Default::default() };
        let r = state_derivative(&params(), &s, 3000.0, HitchForce::new(1500.0, 0.0), 0.0).unwrap();
        assert!((r.v_x_dot - 0.5).abs() < 1e-15);
        // m * v_x_dot = F_d - H_x, regardless of H_y at psi = 0
        let r = state_derivative(&params(), &s, 700.0, HitchForce::new(-250.0, 900.0), 0.4).unwrap();
        assert!((r.v_x_dot * 3000.0 - 950.0).abs() < 1e-10);
    }

    #[test]
    fn yaw_rate_matches_bicycle_relation() {
        let s = TractorState { v_x: 1.0, psi: 0.2, ..Default::default() };
        let r = state_derivative(&params(), &s, 0.0, HitchForce::ZERO, 0.0).unwrap();
        assert!((r.theta_dot - 0.101_355_017_754_336_25).abs() < 1e-12);
    }

    #[test]
    fn steering_lag() {
        let p = params();
        assert_eq!(steering_rate(&p, 0.0, 0.0), 0.0);
        assert!((steering_rate(&p, 0.0, 0.4) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn odd_in_steering_and_lateral_force() {
        let p = params();
        let s = TractorState { v_x: 1.3, psi: 0.3, theta: 0.7, ..Default::default() };
        let m = TractorState { psi: -0.3, ..s };
        let h = HitchForce::new(400.0, 250.0);
        let hm = HitchForce::new(400.0, -250.0);
        let ra = state_derivative(&p, &s, 1000.0, h, 0.0).unwrap();
        let rb = state_derivative(&p, &m, 1000.0, hm, 0.0).unwrap();
        assert!((ra.theta_dot + rb.theta_dot).abs() < 1e-15);
        // phi3 * H_y is even under the joint flip, so the full v_x_dot is unchanged.
        let ka = compute_coefficients(&p, 0.3, 0.0, 1.3).unwrap();
        let kb = compute_coefficients(&p, -0.3, 0.0, 1.3).unwrap();
        assert!((ka.phi3 * 250.0 - kb.phi3 * -250.0).abs() < 1e-15);
        assert!((ra.v_x_dot - rb.v_x_dot).abs() < 1e-15);
    }

    #[test]
    fn constraint_residuals_vanish_on_model_rates() {
        let p = params();
        for &(theta, psi, v) in &[(0.0, 0.0, 1.0), (0.7, 0.3, 1.2), (-2.1, -0.5, 0.4), (5.0, 0.1, 3.0)] {
            let s = TractorState { x: 3.0, y: -1.0, theta, v_x: v, psi };
            let r = state_derivative(&p, &s, 500.0, HitchForce::new(100.0, 30.0), 0.2).unwrap();
            let (rear, front) = constraint_residuals(&p, &s, &r);
            assert!(rear.abs() < 1e-10 && front.abs() < 1e-10, "{rear} {front}");
        }
    }

    #[test]
    fn perturbed_lateral_rate_shows_in_rear_residual() {
        let p = params();
        let s = TractorState { theta: 0.6, v_x: 1.0, psi: 0.2, ..Default::default() };
        let mut r = state_derivative(&p, &s, 0.0, HitchForce::ZERO, 0.0).unwrap();
        r.y_dot += 0.1;
        let (rear, _) = constraint_residuals(&p, &s, &r);
        assert!((rear - 0.1 * 0.6_f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn params_validation() {
        assert!(TractorParams::default().validate().is_ok());
        let bad = TractorParams { psi_max: 1.6, ..TractorParams::default() };
        assert!(bad.validate().is_err());
        let bad = TractorParams { m: 0.0, ..TractorParams::default() };
        assert!(bad.validate().is_err());
        let p = TractorParams::default();
        assert_eq!(p.wheelbase(), p.a + p.b);
    }
}
