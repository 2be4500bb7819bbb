//! Hitch-force sources: a kinematic off-axle trailer chain with a
//! quasi-static force balance, a replayed force table, and the load-cell
//! sensor model the controller reads through.
//!
//! Trailers are single-axle bodies whose mass is lumped at the axle midpoint
//! and whose yaw inertia is neglected. Trailer `i` is pulled at a hitch
//! located `d_i` behind the axle of the body in front of it and reaches its
//! own axle through a drawbar of length `l_i`.

use crate::vehicle::{HitchForce, HITCH_SENSOR_RANGE};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

pub const GRAVITY: f64 = 9.81;
pub const DEFAULT_ROLLING_RESISTANCE: f64 = 0.02;
/// Hitch angle at which a jack-knife warning is raised [rad].
pub const JACKKNIFE_WARN: f64 = 1.2;
/// Hitch angle at which the chain is declared jack-knifed [rad].
pub const JACKKNIFE_LIMIT: f64 = FRAC_PI_2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrailerError {
    #[error("jack-knife: hitch angle of trailer {index} is {gamma} rad")]
    JackKnife { index: usize, gamma: f64 },
    #[error("invalid trailer {index}: {reason}")]
    InvalidParams { index: usize, reason: String },
    #[error("chain has {headings} headings for {trailers} trailers")]
    LengthMismatch { headings: usize, trailers: usize },
    #[error("force profile row {row}: {reason}")]
    Profile { row: usize, reason: String },
    #[error("invalid sensor model: {0}")]
    InvalidSensor(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrailerParams {
    /// Mass including payload [kg].
    pub mass: f64,
    /// Hitch offset behind the towing body's axle midpoint [m].
    pub d: f64,
    /// Drawbar length from the hitch to this trailer's axle [m].
    pub l: f64,
    #[serde(default = "default_crr")]
    pub c_rr: f64,
}

fn default_crr() -> f64 {
    DEFAULT_ROLLING_RESISTANCE
}

impl TrailerParams {
    pub fn validate(&self, index: usize) -> Result<(), TrailerError> {
        let fail = |reason: &str| Err(TrailerError::InvalidParams { index, reason: reason.to_string() });
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return fail("mass must be > 0");
        }
        if !(self.l > 0.0 && self.l.is_finite()) {
            return fail("l must be > 0");
        }
        if !(self.d >= 0.0 && self.d.is_finite()) {
            return fail("d must be >= 0");
        }
        if !(0.0..0.1).contains(&self.c_rr) {
            return fail("c_rr must lie in [0, 0.1)");
        }
        Ok(())
    }
}

/// Headings of the trailers, first trailer first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChainState {
    pub headings: Vec<f64>,
}

impl ChainState {
    pub fn aligned(theta: f64, trailers: usize) -> Self {
        Self { headings: vec![theta; trailers] }
    }

    /// Relative angles `theta_{i-1} - theta_i`, starting from the tractor.
    pub fn hitch_angles(&self, tractor_theta: f64) -> Vec<f64> {
        let mut prev = tractor_theta;
        self.headings
            .iter()
            .map(|&h| {
                let g = prev - h;
                prev = h;
                g
            })
            .collect()
    }
}

/// Planar motion of a body's axle midpoint: speed along its heading, yaw
/// rate, and their time derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AxleMotion {
    pub theta: f64,
    pub v: f64,
    pub v_dot: f64,
    pub omega: f64,
    pub omega_dot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrailerMotion {
    pub speed: f64,
    pub yaw_rate: f64,
}

fn check_lengths(chain: &ChainState, params: &[TrailerParams]) -> Result<(), TrailerError> {
    if chain.headings.len() != params.len() {
        return Err(TrailerError::LengthMismatch { headings: chain.headings.len(), trailers: params.len() });
    }
    Ok(())
}

/// Propagates axle motion down the chain, tractor first. Returns one entry
/// per trailer.
fn propagate(
    tractor: AxleMotion,
    chain: &ChainState,
    params: &[TrailerParams],
) -> Result<Vec<AxleMotion>, TrailerError> {
    check_lengths(chain, params)?;
    let mut out = Vec::with_capacity(params.len());
    let mut prev = tractor;
    for (i, (p, &theta)) in params.iter().zip(&chain.headings).enumerate() {
        let gamma = prev.theta - theta;
        if !gamma.is_finite() || gamma.abs() >= JACKKNIFE_LIMIT {
            return Err(TrailerError::JackKnife { index: i, gamma });
        }
        let (sin, cos) = gamma.sin_cos();
        let omega = (prev.v * sin - p.d * prev.omega * cos) / p.l;
        let v = prev.v * cos + p.d * prev.omega * sin;
        let gamma_dot = prev.omega - omega;
        let omega_dot = (prev.v_dot * sin + prev.v * cos * gamma_dot - p.d * prev.omega_dot * cos
            + p.d * prev.omega * sin * gamma_dot)
            / p.l;
        let v_dot =
            prev.v_dot * cos - prev.v * sin * gamma_dot + p.d * (prev.omega_dot * sin + prev.omega * cos * gamma_dot);
        let next = AxleMotion { theta, v, v_dot, omega, omega_dot };
        out.push(next);
        prev = next;
    }
    Ok(out)
}

/// Speeds and yaw rates of every trailer for the given tractor axle motion.
/// The headings advance with these yaw rates.
pub fn chain_kinematics(
    tractor_v: f64,
    tractor_theta: f64,
    tractor_omega: f64,
    chain: &ChainState,
    params: &[TrailerParams],
) -> Result<Vec<TrailerMotion>, TrailerError> {
    let tractor = AxleMotion { theta: tractor_theta, v: tractor_v, omega: tractor_omega, ..AxleMotion::default() };
    Ok(propagate(tractor, chain, params)?
        .into_iter()
        .map(|m| TrailerMotion { speed: m.v, yaw_rate: m.omega })
        .collect())
}

/// Explicit Euler update of the chain headings over `dt`, for stand-alone
/// use. The simulator integrates headings with the rest of the plant.
pub fn chain_kinematics_step(
    tractor_v: f64,
    tractor_theta: f64,
    tractor_omega: f64,
    chain: &ChainState,
    params: &[TrailerParams],
    dt: f64,
) -> Result<(ChainState, Vec<TrailerMotion>), TrailerError> {
    let motion = chain_kinematics(tractor_v, tractor_theta, tractor_omega, chain, params)?;
    let headings = chain.headings.iter().zip(&motion).map(|(h, m)| h + dt * m.yaw_rate).collect();
    Ok((ChainState { headings }, motion))
}

fn rotate_into(theta_from: f64, theta_to: f64, along: f64, lateral: f64) -> (f64, f64) {
    // vector given in frame `from`, expressed in frame `to`
    let (s, c) = (theta_from - theta_to).sin_cos();
    (along * c - lateral * s, along * s + lateral * c)
}

/// Force the trailer chain exerts on the tractor hitch.
///
/// Working back from the last trailer, trailer `i` needs a pull `F_i` at its
/// front hitch that balances its own inertia along its heading, its rolling
/// resistance, and the pull `F_{i+1}` it transmits rearward. With no yaw
/// inertia, moments about its axle fix the lateral part:
/// `F_i . n_i = -(d_{i+1} / l_i) F_{i+1} . n_i`. The result is returned in
/// the tractor frame with the sign convention of [`HitchForce`]; for an
/// aligned chain it reduces to `H_x = M v_dot + c_rr g M`, `H_y = 0`.
pub fn quasi_static_hitch_force(
    tractor: AxleMotion,
    chain: &ChainState,
    params: &[TrailerParams],
) -> Result<HitchForce, TrailerError> {
    let motion = propagate(tractor, chain, params)?;
    // pull on the trailer behind, expressed in that trailer's frame
    let mut behind: Option<(f64, f64, f64)> = None; // (theta, along, lateral)
    for i in (0..params.len()).rev() {
        let p = &params[i];
        let m = motion[i];
        let rolling = p.c_rr * GRAVITY * p.mass * m.v.signum() * (m.v != 0.0) as u8 as f64;
        let (rear_along, rear_lat, d_next) = match behind {
            Some((theta, along, lat)) => {
                let (a, l) = rotate_into(theta, m.theta, along, lat);
                (a, l, params[i + 1].d)
            }
            None => (0.0, 0.0, 0.0),
        };
        let along = p.mass * m.v_dot + rear_along + rolling;
        let lateral = -(d_next / p.l) * rear_lat;
        behind = Some((m.theta, along, lateral));
    }
    Ok(match behind {
        None => HitchForce::ZERO,
        Some((theta, along, lat)) => {
            let (a, l) = rotate_into(theta, tractor.theta, along, lat);
            HitchForce { h_x: a, h_y: -l }
        }
    })
}

/// Time-stamped hitch force table with linear interpolation and constant
/// extrapolation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceProfile {
    samples: Vec<(f64, HitchForce)>,
}

impl ForceProfile {
    pub fn new(samples: Vec<(f64, HitchForce)>) -> Result<Self, TrailerError> {
        if samples.is_empty() {
            return Err(TrailerError::Profile { row: 0, reason: "profile is empty".into() });
        }
        for (i, (t, h)) in samples.iter().enumerate() {
            if !t.is_finite() || !h.h_x.is_finite() || !h.h_y.is_finite() {
                return Err(TrailerError::Profile { row: i + 1, reason: "non-finite value".into() });
            }
            if i > 0 && *t <= samples[i - 1].0 {
                return Err(TrailerError::Profile {
                    row: i + 1,
                    reason: format!("timestamp {t} not strictly increasing"),
                });
            }
        }
        Ok(Self { samples })
    }

    pub fn constant(h: HitchForce) -> Self {
        Self { samples: vec![(0.0, h)] }
    }

    pub fn samples(&self) -> &[(f64, HitchForce)] {
        &self.samples
    }

    pub fn at(&self, t: f64) -> HitchForce {
        let s = &self.samples;
        let first = s[0];
        let last = s[s.len() - 1];
        if t <= first.0 {
            return first.1;
        }
        if t >= last.0 {
            return last.1;
        }
        let k = s.partition_point(|(ts, _)| *ts <= t);
        let (t0, h0) = s[k - 1];
        let (t1, h1) = s[k];
        let w = (t - t0) / (t1 - t0);
        HitchForce { h_x: h0.h_x + w * (h1.h_x - h0.h_x), h_y: h0.h_y + w * (h1.h_y - h0.h_y) }
    }
}

pub fn replay_force(profile: &ForceProfile, t: f64) -> HitchForce {
    profile.at(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorModel {
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub bias: f64,
    #[serde(default = "default_sample_period")]
    pub sample_period: f64,
    #[serde(default = "default_saturation")]
    pub saturation: f64,
}

fn default_sample_period() -> f64 {
    0.01
}

fn default_saturation() -> f64 {
    HITCH_SENSOR_RANGE
}

impl Default for SensorModel {
    fn default() -> Self {
        Self { noise_sigma: 0.0, bias: 0.0, sample_period: default_sample_period(), saturation: default_saturation() }
    }
}

impl SensorModel {
    pub fn validate(&self) -> Result<(), TrailerError> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(TrailerError::InvalidSensor("noise_sigma must be >= 0".into()));
        }
        if !(self.sample_period > 0.0 && self.sample_period.is_finite()) {
            return Err(TrailerError::InvalidSensor("sample_period must be > 0".into()));
        }
        if !(self.saturation > 0.0) {
            return Err(TrailerError::InvalidSensor("saturation must be > 0".into()));
        }
        if !self.bias.is_finite() {
            return Err(TrailerError::InvalidSensor("bias must be finite".into()));
        }
        Ok(())
    }
}

/// Load cell with zero-order hold: a new reading is taken whenever `t`
/// reaches the next sample instant, otherwise the held reading is returned.
#[derive(Debug, Clone)]
pub struct Sensor {
    model: SensorModel,
    noise: Option<Normal<f64>>,
    held: Option<HitchForce>,
    next_sample: f64,
    samples_taken: u64,
}

impl Sensor {
    pub fn new(model: SensorModel) -> Result<Self, TrailerError> {
        model.validate()?;
        let noise = if model.noise_sigma > 0.0 {
            Some(Normal::new(0.0, model.noise_sigma).map_err(|e| TrailerError::InvalidSensor(e.to_string()))?)
        } else {
            None
        };
        Ok(Self { model, noise, held: None, next_sample: 0.0, samples_taken: 0 })
    }

    pub fn model(&self) -> &SensorModel {
        &self.model
    }

    pub fn measure<R: Rng + ?Sized>(&mut self, truth: HitchForce, t: f64, rng: &mut R) -> HitchForce {
        // tolerance absorbs accumulated round-off in t
        let due = self.held.is_none() || t >= self.next_sample - 1e-9 * self.model.sample_period;
        if due {
            let mut reading = HitchForce { h_x: truth.h_x + self.model.bias, h_y: truth.h_y + self.model.bias };
            if let Some(noise) = &self.noise {
                reading.h_x += noise.sample(rng);
                reading.h_y += noise.sample(rng);
            }
            self.held = Some(reading.clamp(self.model.saturation));
            self.samples_taken += 1;
            self.next_sample = self.samples_taken as f64 * self.model.sample_period;
            while self.next_sample <= t - 1e-9 * self.model.sample_period {
                self.samples_taken += 1;
                self.next_sample = self.samples_taken as f64 * self.model.sample_period;
            }
        }
        self.held.expect("sensor holds a reading after the first sample")
    }
}

pub fn apply_sensor<R: Rng + ?Sized>(sensor: &mut Sensor, truth: HitchForce, t: f64, rng: &mut R) -> HitchForce {
    sensor.measure(truth, t, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trailer(mass: f64, d: f64, l: f64, c_rr: f64) -> TrailerParams {
        TrailerParams { mass, d, l, c_rr }
    }

    #[test]
    fn aligned_chain_follows_tractor() {
        let params = vec![trailer(630.0, 0.5, 2.0, 0.02), trailer(630.0, 0.4, 2.5, 0.02)];
        let chain = ChainState::aligned(0.3, 2);
        let m = chain_kinematics(1.4, 0.3, 0.0, &chain, &params).unwrap();
        for t in m {
            assert_eq!(t.yaw_rate, 0.0);
            assert!((t.speed - 1.4).abs() < 1e-15);
        }
    }

    #[test]
    fn on_axle_single_trailer_values() {
        let params = vec![trailer(630.0, 0.0, 2.0, 0.0)];
        let chain = ChainState { headings: vec![-0.3] };
        let m = chain_kinematics(1.0, 0.0, 0.0, &chain, &params).unwrap();
        assert!((m[0].yaw_rate - 0.147_760_103_330_669_77).abs() < 1e-12);
        assert!((m[0].speed - 0.955_336_489_125_606).abs() < 1e-12);
    }

    #[test]
    fn off_axle_terms_vanish_for_zero_offset() {
        let chain = ChainState { headings: vec![0.1, -0.2] };
        let on = vec![trailer(1.0, 0.0, 2.0, 0.0), trailer(1.0, 0.0, 1.5, 0.0)];
        let m = chain_kinematics(1.2, 0.4, 0.7, &chain, &on).unwrap();
        // classical on-axle recursion
        let g1: f64 = 0.4 - 0.1;
        let w1 = 1.2 * g1.sin() / 2.0;
        let v1 = 1.2 * g1.cos();
        let g2: f64 = 0.1 + 0.2;
        assert!((m[0].yaw_rate - w1).abs() < 1e-15);
        assert!((m[1].yaw_rate - v1 * g2.sin() / 1.5).abs() < 1e-15);
    }

    #[test]
    fn jackknife_aborts() {
        let params = vec![trailer(630.0, 0.5, 2.0, 0.02)];
        let chain = ChainState { headings: vec![-1.6] };
        assert!(matches!(
            chain_kinematics(1.0, 0.0, 0.0, &chain, &params),
            Err(TrailerError::JackKnife { index: 0, .. })
        ));
    }

    #[test]
    fn straight_towing_attracts_to_alignment() {
        let params = vec![trailer(630.0, 0.5, 2.0, 0.02), trailer(630.0, 0.4, 2.5, 0.02)];
        let mut chain = ChainState { headings: vec![0.3, 0.0] };
        let dt = 1e-3;
        let mut prev = chain.hitch_angles(0.0);
        let mut increases_after_transient = 0;
        for k in 0..60_000 {
            let (next, _) = chain_kinematics_step(1.0, 0.0, 0.0, &chain, &params, dt).unwrap();
            chain = next;
            let angles = chain.hitch_angles(0.0);
            if k > 10_000 {
                for (a, b) in angles.iter().zip(&prev) {
                    if a.abs() > b.abs() + 1e-15 {
                        increases_after_transient += 1;
                    }
                }
            }
            prev = angles;
        }
        assert!(prev.iter().all(|g| g.abs() < 1e-3), "{prev:?}");
        assert_eq!(increases_after_transient, 0);
    }

    fn motion(v: f64, v_dot: f64) -> AxleMotion {
        AxleMotion { theta: 0.0, v, v_dot, omega: 0.0, omega_dot: 0.0 }
    }

    #[test]
    fn rolling_resistance_of_aligned_chain() {
        // two 630 kg trailers with 2000 kg payload on the first
        let params = vec![trailer(2630.0, 0.5, 2.0, 0.02), trailer(630.0, 0.4, 2.0, 0.02)];
        let h = quasi_static_hitch_force(motion(1.0, 0.0), &ChainState::aligned(0.0, 2), &params).unwrap();
        assert!((h.h_x - 0.02 * 9.81 * 3260.0).abs() < 1e-9, "{h:?}");
        assert!((h.h_x - 639.612).abs() < 1e-9);
        assert_eq!(h.h_y, 0.0);
    }

    #[test]
    fn inertial_pull_of_aligned_chain() {
        let params = vec![trailer(2630.0, 0.5, 2.0, 0.0), trailer(630.0, 0.4, 2.0, 0.0)];
        let h = quasi_static_hitch_force(motion(1.0, 0.5), &ChainState::aligned(0.0, 2), &params).unwrap();
        assert!((h.h_x - 0.5 * 3260.0).abs() < 1e-9);
        assert_eq!(h.h_y, 0.0);
        let none = quasi_static_hitch_force(motion(1.0, 0.5), &ChainState::default(), &[]).unwrap();
        assert_eq!(none, HitchForce::ZERO);
    }

    #[test]
    fn frictionless_constant_speed_straight_is_force_free() {
        let params = vec![trailer(1300.0, 0.5, 2.0, 0.0), trailer(1300.0, 0.4, 2.0, 0.0)];
        let h = quasi_static_hitch_force(motion(0.8, 0.0), &ChainState::aligned(0.0, 2), &params).unwrap();
        assert_eq!(h, HitchForce::ZERO);
    }

    #[test]
    fn steady_left_turn_pulls_tractor_left_and_back() {
        // one on-axle trailer on its steady circle: pull is along the drawbar
        let params = vec![trailer(1000.0, 0.0, 2.0, 0.02)];
        let (v, r) = (1.0, 10.0);
        let gamma = (2.0_f64 / r).asin();
        let chain = ChainState { headings: vec![-gamma] };
        let tractor = AxleMotion { theta: 0.0, v, v_dot: 0.0, omega: v / r, omega_dot: 0.0 };
        let h = quasi_static_hitch_force(tractor, &chain, &params).unwrap();
        let pull = 0.02 * 9.81 * 1000.0;
        assert!((h.h_x - pull * gamma.cos()).abs() < 1e-9);
        assert!((h.h_y - pull * gamma.sin()).abs() < 1e-9);
    }

    #[test]
    fn replay_interpolates_and_holds_ends() {
        let p =
            ForceProfile::new(vec![(0.0, HitchForce::new(100.0, 0.0)), (10.0, HitchForce::new(300.0, 0.0))]).unwrap();
        assert_eq!(p.at(5.0), HitchForce::new(200.0, 0.0));
        assert_eq!(p.at(-1.0), HitchForce::new(100.0, 0.0));
        assert_eq!(p.at(20.0), HitchForce::new(300.0, 0.0));
    }

    #[test]
    fn replay_rejects_bad_profiles() {
        assert!(ForceProfile::new(vec![]).is_err());
        let err = ForceProfile::new(vec![(0.0, HitchForce::ZERO), (1.0, HitchForce::ZERO), (1.0, HitchForce::ZERO)])
            .unwrap_err();
        assert_eq!(err, TrailerError::Profile { row: 3, reason: "timestamp 1 not strictly increasing".into() });
    }

    #[test]
    fn noiseless_sensor_is_a_zero_order_hold() {
        let mut s = Sensor::new(SensorModel { sample_period: 0.01, ..SensorModel::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let profile = ForceProfile::new(vec![(0.0, HitchForce::ZERO), (1.0, HitchForce::new(1000.0, -500.0))]).unwrap();
        for k in 0..1000 {
            let t = k as f64 * 1e-3;
            let held_t = (k / 10) as f64 * 1e-2;
            let out = s.measure(profile.at(t), t, &mut rng);
            assert_eq!(out, profile.at(held_t), "k = {k}");
        }
    }

    #[test]
    fn sensor_saturates() {
        let mut s = Sensor::new(SensorModel::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = s.measure(HitchForce::new(60_000.0, -70_000.0), 0.0, &mut rng);
        assert_eq!(out, HitchForce::new(50_000.0, -50_000.0));
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let model = SensorModel { noise_sigma: 50.0, sample_period: 1e-3, ..SensorModel::default() };
        let run = || {
            let mut s = Sensor::new(model).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            (0..5).map(|k| s.measure(HitchForce::new(100.0, 0.0), k as f64 * 1e-3, &mut rng)).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().all(|h| h.h_x != 100.0));
    }

    #[test]
    fn validation() {
        assert!(trailer(0.0, 0.0, 1.0, 0.0).validate(0).is_err());
        assert!(trailer(1.0, -0.1, 1.0, 0.0).validate(0).is_err());
        assert!(trailer(1.0, 0.0, 1.0, 0.1).validate(0).is_err());
        assert!(trailer(1.0, 0.0, 1.0, 0.05).validate(0).is_ok());
        assert!(Sensor::new(SensorModel { sample_period: 0.0, ..SensorModel::default() }).is_err());
    }
}
