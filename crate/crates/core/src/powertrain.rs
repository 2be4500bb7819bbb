//! Propulsion map, brake model, throttle/brake switching and least-squares
//! identification of the map from force-speed data.
//!
//! The map is `F_p = u1 * (b1 + b2 v + b3 v^2 + b4 v^3 + b5 v^4 + b6 v^5)`:
//! linear in throttle, fifth order in speed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coefficients identified on the test tractor, ascending powers of speed.
pub const REFERENCE_COEFFS: [f64; 6] = [26.2, -9.999, 3.018, -1.041, 0.2354, -0.021];

/// Below this value of `V^T Phi` [N per throttle unit] the map cannot be inverted.
pub const MAP_DEGENERACY_EPS: f64 = 1e-6;

/// Relative singular-value threshold used to detect a rank-deficient regressor.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowertrainError {
    #[error("throttle {u1} outside [{min}, {max}]")]
    ThrottleOutOfRange { u1: f64, min: f64, max: f64 },
    #[error("speed {v} m/s outside the fitted range [0, {v_max}]")]
    SpeedOutOfRange { v: f64, v_max: f64 },
    #[error("desired force {force} N must be >= 0 for throttle inversion")]
    NegativeForce { force: f64 },
    #[error("propulsion map degenerate at v = {v} m/s (V^T Phi = {gain})")]
    DegenerateMap { v: f64, gain: f64 },
    #[error("no samples")]
    NoSamples,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("ill-conditioned fit, rank-deficient regressor; unidentifiable directions: {}", directions.join(", "))]
    IllConditioned { directions: Vec<String> },
    #[error("invalid brake ratio {0}: must be < 0")]
    InvalidBrake(f64),
    #[error("invalid propulsion map: {0}")]
    InvalidMap(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropulsionMap {
    pub coeffs: [f64; 6],
    pub u1_min: f64,
    pub u1_max: f64,
    pub v_max: f64,
}

impl Default for PropulsionMap {
    fn default() -> Self {
        Self::reference()
    }
}

/// Result of an inversion or actuator clamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clamped {
    pub value: f64,
    pub saturated: bool,
}

fn speed_powers(v: f64) -> [f64; 6] {
    let mut out = [1.0; 6];
    for i in 1..6 {
        out[i] = out[i - 1] * v;
    }
    out
}

impl PropulsionMap {
    /// The identified map of the test tractor, throttle 0..300, speeds up to 5 m/s.
    pub fn reference() -> Self {
        Self { coeffs: REFERENCE_COEFFS, u1_min: 0.0, u1_max: 300.0, v_max: 5.0 }
    }

    pub fn validate(&self) -> Result<(), PowertrainError> {
        if self.coeffs.iter().any(|c| !c.is_finite()) {
            return Err(PowertrainError::InvalidMap("non-finite coefficient".into()));
        }
        if !(self.u1_min >= 0.0 && self.u1_min < self.u1_max && self.u1_max.is_finite()) {
            return Err(PowertrainError::InvalidMap("need 0 <= u1_min < u1_max".into()));
        }
        if !(self.v_max > 0.0 && self.v_max.is_finite()) {
            return Err(PowertrainError::InvalidMap("v_max must be > 0".into()));
        }
        Ok(())
    }

    fn check_speed(&self, v: f64) -> Result<(), PowertrainError> {
        if !(0.0..=self.v_max).contains(&v) {
            return Err(PowertrainError::SpeedOutOfRange { v, v_max: self.v_max });
        }
        Ok(())
    }

    /// Force per throttle unit, `V(v)^T Phi`.
    pub fn gain(&self, v: f64) -> Result<f64, PowertrainError> {
        self.check_speed(v)?;
        Ok(self.gain_unchecked(v))
    }

    fn gain_unchecked(&self, v: f64) -> f64 {
        // Horner
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * v + c)
    }

    pub fn evaluate(&self, u1: f64, v: f64) -> Result<f64, PowertrainError> {
        if !(self.u1_min..=self.u1_max).contains(&u1) {
            return Err(PowertrainError::ThrottleOutOfRange { u1, min: self.u1_min, max: self.u1_max });
        }
        Ok(u1 * self.gain(v)?)
    }

    /// Throttle that produces `force` at speed `v`, clamped to the throttle range.
    pub fn invert(&self, force: f64, v: f64) -> Result<Clamped, PowertrainError> {
        if force < 0.0 || force.is_nan() {
            return Err(PowertrainError::NegativeForce { force });
        }
        let gain = self.gain(v)?;
        if gain <= MAP_DEGENERACY_EPS {
            return Err(PowertrainError::DegenerateMap { v, gain });
        }
        let raw = force / gain;
        let value = raw.clamp(self.u1_min, self.u1_max);
        Ok(Clamped { value, saturated: value != raw })
    }
}

pub fn evaluate_map(map: &PropulsionMap, u1: f64, v_x: f64) -> Result<f64, PowertrainError> {
    map.evaluate(u1, v_x)
}

pub fn invert_map(map: &PropulsionMap, force: f64, v_x: f64) -> Result<Clamped, PowertrainError> {
    map.invert(force, v_x)
}

/// Brake model `F_b = u3 * n_b` with `n_b < 0`, so pressure is never negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrakeParams {
    pub n_b: f64,
    pub u3_max: f64,
}

impl Default for BrakeParams {
    fn default() -> Self {
        Self { n_b: -800.0, u3_max: 40.0 }
    }
}

impl BrakeParams {
    pub fn validate(&self) -> Result<(), PowertrainError> {
        if !(self.n_b < 0.0 && self.n_b.is_finite()) {
            return Err(PowertrainError::InvalidBrake(self.n_b));
        }
        if !(self.u3_max > 0.0 && self.u3_max.is_finite()) {
            return Err(PowertrainError::InvalidMap("u3_max must be > 0".into()));
        }
        Ok(())
    }

    pub fn force(&self, u3: f64) -> f64 {
        u3 * self.n_b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriveMode {
    Throttle,
    Brake,
}

/// A held drive input: either a throttle opening or a brake pressure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DriveInput {
    Throttle(f64),
    Brake(f64),
}

impl DriveInput {
    pub fn mode(&self) -> DriveMode {
        match self {
            DriveInput::Throttle(_) => DriveMode::Throttle,
            DriveInput::Brake(_) => DriveMode::Brake,
        }
    }

    /// Driving force at speed `v`.
    pub fn force(&self, map: &PropulsionMap, brake: &BrakeParams, v: f64) -> Result<f64, PowertrainError> {
        match *self {
            DriveInput::Throttle(u1) => map.evaluate(u1, v),
            DriveInput::Brake(u3) => Ok(brake.force(u3)),
        }
    }

    pub fn throttle(&self) -> f64 {
        match *self {
            DriveInput::Throttle(u1) => u1,
            DriveInput::Brake(_) => 0.0,
        }
    }

    pub fn brake(&self) -> f64 {
        match *self {
            DriveInput::Throttle(_) => 0.0,
            DriveInput::Brake(u3) => u3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveCommand {
    pub input: DriveInput,
    /// Force the actuator realizes at the current speed.
    pub force: f64,
    pub saturated: bool,
}

impl DriveCommand {
    pub fn mode(&self) -> DriveMode {
        self.input.mode()
    }
}

/// Throttle when the desired force is nonnegative, brake otherwise.
pub fn select_drive_actuation(
    omega2: f64,
    map: &PropulsionMap,
    brake: &BrakeParams,
    v_x: f64,
) -> Result<DriveCommand, PowertrainError> {
    if omega2 >= 0.0 {
        let u1 = map.invert(omega2, v_x)?;
        let force = map.evaluate(u1.value, v_x)?;
        Ok(DriveCommand { input: DriveInput::Throttle(u1.value), force, saturated: u1.saturated })
    } else {
        let raw = omega2 / brake.n_b;
        let u3 = raw.min(brake.u3_max);
        Ok(DriveCommand { input: DriveInput::Brake(u3), force: brake.force(u3), saturated: u3 != raw })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapFitSample {
    pub u1: f64,
    pub v: f64,
    #[serde(rename = "F")]
    pub force: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub map: PropulsionMap,
    pub rms_residual: f64,
    pub samples: usize,
    /// Singular values of the column-normalized regressor, largest first.
    pub singular_values: Vec<f64>,
}

const COEFF_NAMES: [&str; 6] = ["b1", "b2", "b3", "b4", "b5", "b6"];

fn distinct_count(mut values: Vec<f64>) -> usize {
    values.sort_by(f64::total_cmp);
    values.dedup();
    values.len()
}

/// Least-squares fit of the six map coefficients.
///
/// Each sample contributes the regressor row `u1 * [1, v, .., v^5]`. Columns
/// are normalized before the SVD so the rank test is scale free; directions
/// whose singular value falls below `1e-10` of the largest are reported by
/// their dominant coefficients.
pub fn fit_map(samples: &[MapFitSample]) -> Result<FitReport, PowertrainError> {
    if samples.is_empty() {
        return Err(PowertrainError::NoSamples);
    }
    for (i, s) in samples.iter().enumerate() {
        if !(s.u1 >= 0.0 && s.v >= 0.0 && s.force.is_finite() && s.u1.is_finite() && s.v.is_finite()) {
            return Err(PowertrainError::InsufficientData(format!(
                "sample {i} violates u1 >= 0, v >= 0 or is not finite"
            )));
        }
    }
    if samples.len() < 6 {
        return Err(PowertrainError::InsufficientData(format!("{} samples, need at least 6", samples.len())));
    }
    if !samples.iter().any(|s| s.u1 > 0.0) {
        return Err(PowertrainError::InsufficientData("no sample with u1 > 0".into()));
    }
    let throttle_levels = distinct_count(samples.iter().map(|s| s.u1).collect());
    if throttle_levels < 2 {
        return Err(PowertrainError::IllConditioned {
            directions: vec![format!("single throttle level: need >= 2 distinct u1 values, found {throttle_levels}")],
        });
    }

    let n = samples.len();
    let mut a = DMatrix::<f64>::zeros(n, 6);
    let mut rhs = DVector::<f64>::zeros(n);
    for (i, s) in samples.iter().enumerate() {
        for (j, p) in speed_powers(s.v).iter().enumerate() {
            a[(i, j)] = s.u1 * p;
        }
        rhs[i] = s.force;
    }
    let scales: Vec<f64> = (0..6).map(|j| a.column(j).norm()).collect();
    let dead: Vec<usize> = (0..6).filter(|&j| scales[j] == 0.0).collect();
    if !dead.is_empty() {
        return Err(PowertrainError::IllConditioned {
            directions: dead.iter().map(|&j| COEFF_NAMES[j].to_string()).collect(),
        });
    }
    for (j, s) in scales.iter().enumerate() {
        a.column_mut(j).scale_mut(1.0 / s);
    }

    let svd = a.clone().svd(true, true);
    let sv = svd.singular_values.clone();
    let smax = sv.max();
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let mut directions = Vec::new();
    for (k, &s) in sv.iter().enumerate() {
        if s <= RANK_TOLERANCE * smax {
            let row = v_t.row(k);
            let terms: Vec<String> =
                (0..6).filter(|&j| row[j].abs() > 0.1).map(|j| format!("{:+.3}*{}", row[j], COEFF_NAMES[j])).collect();
            directions.push(terms.join(" "));
        }
    }
    if !directions.is_empty() {
        return Err(PowertrainError::IllConditioned { directions });
    }
    let distinct_speeds = distinct_count(samples.iter().filter(|s| s.u1 > 0.0).map(|s| s.v).collect());
    if distinct_speeds < 6 {
        return Err(PowertrainError::InsufficientData(format!(
            "{distinct_speeds} distinct speeds with u1 > 0, need at least 6"
        )));
    }

    let scaled = svd.solve(&rhs, 0.0).map_err(|e| PowertrainError::InvalidMap(e.to_string()))?;
    let mut coeffs = [0.0; 6];
    for j in 0..6 {
        coeffs[j] = scaled[j] / scales[j];
    }
    let residual = &a * &scaled - &rhs;
    let rms_residual = (residual.norm_squared() / n as f64).sqrt();

    let u1_min = samples.iter().map(|s| s.u1).fold(f64::INFINITY, f64::min);
    let u1_max = samples.iter().map(|s| s.u1).fold(f64::NEG_INFINITY, f64::max);
    let v_max = samples.iter().map(|s| s.v).fold(f64::NEG_INFINITY, f64::max);
    let mut singular_values: Vec<f64> = sv.iter().copied().collect();
    singular_values.sort_by(|a, b| b.total_cmp(a));
    Ok(FitReport { map: PropulsionMap { coeffs, u1_min, u1_max, v_max }, rms_residual, samples: n, singular_values })
}

/// Noiseless samples of `map` on a throttle x speed grid.
pub fn synthesize_grid(map: &PropulsionMap, throttles: &[f64], speeds: &[f64]) -> Vec<MapFitSample> {
    let mut out = Vec::with_capacity(throttles.len() * speeds.len());
    for &u1 in throttles {
        for &v in speeds {
            out.push(MapFitSample { u1, v, force: u1 * map.gain_unchecked(v) });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_map_values() {
        let map = PropulsionMap::reference();
        assert!((map.evaluate(100.0, 0.0).unwrap() - 2620.0).abs() < 1e-9);
        // sum of the six coefficients is 18.3924
        assert!((map.evaluate(300.0, 1.0).unwrap() - 5517.72).abs() < 1e-9);
        assert_eq!(map.evaluate(0.0, 3.3).unwrap(), 0.0);
    }

    #[test]
    fn out_of_domain_is_an_error() {
        let map = PropulsionMap::reference();
        assert!(matches!(map.evaluate(301.0, 1.0), Err(PowertrainError::ThrottleOutOfRange { .. })));
        assert!(matches!(map.evaluate(10.0, 5.01), Err(PowertrainError::SpeedOutOfRange { .. })));
        assert!(matches!(map.evaluate(10.0, -0.01), Err(PowertrainError::SpeedOutOfRange { .. })));
    }

    #[test]
    fn inversion_examples() {
        let map = PropulsionMap::reference();
        let u = map.invert(2620.0, 0.0).unwrap();
        assert!((u.value - 100.0).abs() < 1e-12 && !u.saturated);
        assert_eq!(map.invert(0.0, 1.0).unwrap(), Clamped { value: 0.0, saturated: false });
        let u = map.invert(1e6, 0.0).unwrap();
        assert_eq!(u.value, 300.0);
        assert!(u.saturated);
        assert!(map.invert(-1.0, 0.0).is_err());
    }

    #[test]
    fn degenerate_map_detected() {
        let map = PropulsionMap { coeffs: [0.0, 1.0, 0.0, 0.0, 0.0, 0.0], ..PropulsionMap::reference() };
        assert!(matches!(map.invert(10.0, 0.0), Err(PowertrainError::DegenerateMap { .. })));
    }

    #[test]
    fn reference_map_gain_positive_up_to_five_mps() {
        let map = PropulsionMap::reference();
        let mut min_gain = f64::INFINITY;
        for i in 0..=50_000 {
            let v = 5.0 * i as f64 / 50_000.0;
            min_gain = min_gain.min(map.gain(v).unwrap());
        }
        assert!(min_gain > MAP_DEGENERACY_EPS, "min gain {min_gain}");
    }

    #[test]
    fn switching_examples() {
        let map = PropulsionMap::reference();
        let brake = BrakeParams { n_b: -500.0, u3_max: 40.0 };
        let c = select_drive_actuation(2620.0, &map, &brake, 0.0).unwrap();
        assert_eq!(c.mode(), DriveMode::Throttle);
        assert!((c.input.throttle() - 100.0).abs() < 1e-12);
        assert!((c.force - 2620.0).abs() < 1e-9);

        let c = select_drive_actuation(-1000.0, &map, &brake, 1.0).unwrap();
        assert_eq!(c.input, DriveInput::Brake(2.0));
        assert_eq!(c.force, -1000.0);

        let c = select_drive_actuation(0.0, &map, &brake, 1.0).unwrap();
        assert_eq!(c.input, DriveInput::Throttle(0.0));
        assert_eq!(c.force, 0.0);

        let c = select_drive_actuation(-1e6, &map, &brake, 1.0).unwrap();
        assert_eq!(c.input, DriveInput::Brake(40.0));
        assert!(c.saturated);
        assert_eq!(c.force, -20_000.0);
    }

    fn reference_grid() -> Vec<MapFitSample> {
        let throttles: Vec<f64> = (0..=10).map(|i| 30.0 * i as f64).collect();
        let speeds: Vec<f64> = (0..=20).map(|i| 0.25 * i as f64).collect();
        synthesize_grid(&PropulsionMap::reference(), &throttles, &speeds)
    }

    #[test]
    fn exact_recovery_from_noiseless_grid() {
        let fit = fit_map(&reference_grid()).unwrap();
        for (got, want) in fit.map.coeffs.iter().zip(REFERENCE_COEFFS) {
            assert!(((got - want) / want).abs() < 1e-9, "{got} vs {want}");
        }
        assert!(fit.rms_residual < 1e-8);
        assert_eq!(fit.map.v_max, 5.0);
        assert_eq!((fit.map.u1_min, fit.map.u1_max), (0.0, 300.0));
    }

    #[test]
    fn refit_of_fitted_predictions_is_identity() {
        let mut samples = reference_grid();
        for (k, s) in samples.iter_mut().enumerate() {
            s.force += ((k * 37 % 101) as f64 - 50.0) * 1.3;
        }
        let first = fit_map(&samples).unwrap();
        let again: Vec<MapFitSample> =
            samples.iter().map(|s| MapFitSample { force: first.map.evaluate(s.u1, s.v).unwrap(), ..*s }).collect();
        let second = fit_map(&again).unwrap();
        for (a, b) in first.map.coeffs.iter().zip(second.map.coeffs) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn zero_speed_data_is_rank_deficient() {
        let samples: Vec<MapFitSample> =
            (1..=10).map(|i| MapFitSample { u1: 30.0 * i as f64, v: 0.0, force: 786.0 * i as f64 }).collect();
        match fit_map(&samples) {
            Err(PowertrainError::IllConditioned { directions }) => {
                assert_eq!(directions, vec!["b2", "b3", "b4", "b5", "b6"]);
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn single_throttle_level_rejected() {
        let samples: Vec<MapFitSample> =
            (0..20).map(|i| MapFitSample { u1: 100.0, v: 0.25 * i as f64, force: 1000.0 }).collect();
        let err = fit_map(&samples).unwrap_err();
        assert!(err.to_string().contains("single throttle level"), "{err}");
        assert_eq!(fit_map(&[]).unwrap_err(), PowertrainError::NoSamples);
    }

    #[test]
    fn too_few_speeds_rejected() {
        let samples: Vec<MapFitSample> = [50.0, 100.0, 150.0]
            .iter()
            .flat_map(|&u1| (0..4).map(move |i| MapFitSample { u1, v: i as f64, force: u1 * 10.0 }))
            .collect();
        assert!(fit_map(&samples).is_err());
    }

    proptest! {
        #[test]
        fn inversion_round_trip(u1 in 0.0f64..300.0, v in 0.0f64..5.0) {
            let map = PropulsionMap::reference();
            let f = map.evaluate(u1, v).unwrap();
            let back = map.invert(f, v).unwrap();
            prop_assert!(!back.saturated);
            prop_assert!((back.value - u1).abs() < 1e-9);
        }

        #[test]
        fn linear_in_throttle(u1 in 0.0f64..150.0, v in 0.0f64..5.0) {
            let map = PropulsionMap::reference();
            let single = map.evaluate(u1, v).unwrap();
            let double = map.evaluate(2.0 * u1, v).unwrap();
            prop_assert!((double - 2.0 * single).abs() <= 1e-12 * single.abs().max(1.0));
        }

        #[test]
        fn realized_force_sign_and_magnitude(omega2 in -40_000.0f64..8_000.0, v in 0.0f64..5.0) {
            let map = PropulsionMap::reference();
            let brake = BrakeParams::default();
            let c = select_drive_actuation(omega2, &map, &brake, v).unwrap();
            if omega2 > 0.0 { prop_assert!(c.force > 0.0); }
            if omega2 < 0.0 { prop_assert!(c.force < 0.0); }
            prop_assert!(c.force.abs() <= omega2.abs() * (1.0 + 1e-12) + 1e-9);
            if !c.saturated {
                prop_assert!((c.force - omega2).abs() <= 1e-9 * omega2.abs().max(1.0));
            }
        }
    }
}
