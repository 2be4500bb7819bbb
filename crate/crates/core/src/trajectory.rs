//! Reference trajectories for the tractor's rear-axle point.
//!
//! Generated references are arc-length paths built from straight and
//! constant-curvature segments, traversed with a speed profile made of
//! quintic smoothstep ramps. Every derivative the controller needs is
//! analytic. Curvature is piecewise constant, so `theta_d_dot` jumps at
//! segment junctions; within a segment all quantities are smooth.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Lower bound on the reference speed [m/s].
pub const V_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("time {0} s is before the start of the trajectory")]
    NegativeTime(f64),
    #[error("time {t} s is beyond the trajectory horizon {horizon} s")]
    BeyondHorizon { t: f64, horizon: f64 },
    #[error("infeasible trajectory: radius {radius} m is below the minimum turning radius {min_radius} m")]
    Infeasible { radius: f64, min_radius: f64 },
    #[error("invalid speed profile: {0}")]
    InvalidSpeed(String),
    #[error("invalid trajectory parameters: {0}")]
    InvalidParams(String),
    #[error("trajectory table row {row}: {reason}")]
    Table { row: usize, reason: String },
}

/// Desired rear-axle motion at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReferenceSample {
    pub x_d: f64,
    pub y_d: f64,
    pub theta_d: f64,
    pub v_d: f64,
    pub theta_d_dot: f64,
    pub v_d_dot: f64,
    pub theta_d_ddot: f64,
    pub v_d_ddot: f64,
}

impl ReferenceSample {
    /// Path curvature `theta_d_dot / v_d`.
    pub fn curvature(&self) -> f64 {
        self.theta_d_dot / self.v_d
    }
}

/// Smooth change of speed to `to` over `[start, start + duration]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedRamp {
    pub start: f64,
    pub duration: f64,
    pub to: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedProfile {
    pub initial: f64,
    #[serde(default)]
    pub ramps: Vec<SpeedRamp>,
}

// quintic smoothstep and its integral / derivatives on [0, 1]
fn smooth(tau: f64) -> f64 {
    tau * tau * tau * (10.0 + tau * (-15.0 + 6.0 * tau))
}
fn smooth_integral(tau: f64) -> f64 {
    tau.powi(4) * (2.5 + tau * (-3.0 + tau))
}
fn smooth_d1(tau: f64) -> f64 {
    30.0 * tau * tau * (1.0 - tau) * (1.0 - tau)
}
fn smooth_d2(tau: f64) -> f64 {
    60.0 * tau * (1.0 - tau) * (1.0 - 2.0 * tau)
}

/// Distance, speed, acceleration and jerk at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
struct SpeedState {
    s: f64,
    v: f64,
    a: f64,
    j: f64,
}

impl SpeedProfile {
    pub fn constant(v: f64) -> Self {
        Self { initial: v, ramps: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let bad = |m: String| Err(TrajectoryError::InvalidSpeed(m));
        if !(self.initial > V_FLOOR && self.initial.is_finite()) {
            return bad(format!("initial speed {} must exceed {V_FLOOR} m/s", self.initial));
        }
        let mut end = 0.0;
        for (i, r) in self.ramps.iter().enumerate() {
            if !(r.to > V_FLOOR && r.to.is_finite()) {
                return bad(format!("ramp {i}: target speed {} must exceed {V_FLOOR} m/s", r.to));
            }
            if !(r.duration > 0.0 && r.duration.is_finite()) {
                return bad(format!("ramp {i}: duration must be > 0"));
            }
            if !(r.start >= end && r.start.is_finite()) {
                return bad(format!("ramp {i}: ramps must be ordered and non-overlapping"));
            }
            end = r.start + r.duration;
        }
        Ok(())
    }

    fn at(&self, t: f64) -> SpeedState {
        let mut s = 0.0;
        let mut v = self.initial;
        let mut t_prev = 0.0;
        for r in &self.ramps {
            if t <= r.start {
                break;
            }
            s += v * (r.start - t_prev);
            let dv = r.to - v;
            let tau = ((t - r.start) / r.duration).min(1.0);
            if tau < 1.0 {
                return SpeedState {
                    s: s + r.duration * (v * tau + dv * smooth_integral(tau)),
                    v: v + dv * smooth(tau),
                    a: dv * smooth_d1(tau) / r.duration,
                    j: dv * smooth_d2(tau) / (r.duration * r.duration),
                };
            }
            s += r.duration * (v + dv * smooth_integral(1.0));
            v = r.to;
            t_prev = r.start + r.duration;
        }
        SpeedState { s: s + v * (t - t_prev), v, a: 0.0, j: 0.0 }
    }
}

/// Straight (`curvature == 0`) or circular segment of an arc-length path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub length: f64,
    pub curvature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pose {
    x: f64,
    y: f64,
    theta: f64,
}

impl Pose {
    fn advance(&self, curvature: f64, ds: f64) -> Pose {
        let theta = self.theta + curvature * ds;
        if curvature.abs() < 1e-12 {
            return Pose { x: self.x + ds * self.theta.cos(), y: self.y + ds * self.theta.sin(), theta };
        }
        Pose {
            x: self.x + (theta.sin() - self.theta.sin()) / curvature,
            y: self.y - (theta.cos() - self.theta.cos()) / curvature,
            theta,
        }
    }
}

/// Piecewise-constant-curvature path. A periodic path repeats its segments
/// forever (it must close on itself); otherwise the last segment extends
/// without end.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcPath {
    segments: Vec<Segment>,
    starts: Vec<(f64, Pose)>,
    period: Option<(f64, f64)>, // (length, heading gain per lap)
}

impl ArcPath {
    fn new(x0: f64, y0: f64, theta0: f64, segments: Vec<Segment>, periodic: bool) -> Result<Self, TrajectoryError> {
        if segments.is_empty() {
            return Err(TrajectoryError::InvalidParams("path has no segments".into()));
        }
        let mut pose = Pose { x: x0, y: y0, theta: theta0 };
        let mut s = 0.0;
        let mut starts = Vec::with_capacity(segments.len());
        for seg in &segments {
            if !(seg.length > 0.0) || !seg.curvature.is_finite() {
                return Err(TrajectoryError::InvalidParams("segment lengths must be > 0".into()));
            }
            starts.push((s, pose));
            if seg.length.is_finite() {
                pose = pose.advance(seg.curvature, seg.length);
                s += seg.length;
            }
        }
        let period = if periodic {
            if ((pose.x - x0).hypot(pose.y - y0)) > 1e-9 * s.max(1.0) {
                return Err(TrajectoryError::InvalidParams("periodic path does not close".into()));
            }
            Some((s, pose.theta - theta0))
        } else {
            None
        };
        Ok(Self { segments, starts, period })
    }

    /// Pose and curvature at arc length `s >= 0`.
    fn at(&self, s: f64) -> (Pose, f64) {
        let (s_local, laps) = match self.period {
            Some((len, _)) => {
                let laps = (s / len).floor();
                (s - laps * len, laps)
            }
            None => (s, 0.0),
        };
        let k = self.starts.partition_point(|(s0, _)| *s0 <= s_local).max(1) - 1;
        let (s0, start) = self.starts[k];
        let seg = self.segments[k];
        let mut pose = start.advance(seg.curvature, s_local - s0);
        if let Some((_, gain)) = self.period {
            pose.theta += laps * gain;
        }
        (pose, seg.curvature)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathTrajectory {
    pub path: ArcPath,
    pub speed: SpeedProfile,
}

impl PathTrajectory {
    pub fn sample(&self, t: f64) -> ReferenceSample {
        let sp = self.speed.at(t);
        let (pose, kappa) = self.path.at(sp.s);
        ReferenceSample {
            x_d: pose.x,
            y_d: pose.y,
            theta_d: pose.theta,
            v_d: sp.v,
            theta_d_dot: kappa * sp.v,
            v_d_dot: sp.a,
            theta_d_ddot: kappa * sp.a,
            v_d_ddot: sp.j,
        }
    }
}

/// Generator selection with its geometric parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    /// Straight line through the origin with heading `heading`.
    Line {
        #[serde(default)]
        heading: f64,
    },
    /// Counter-clockwise circle (clockwise if `clockwise`) starting at the
    /// origin, heading along +x.
    Circle {
        radius: f64,
        #[serde(default)]
        clockwise: bool,
    },
    /// Two tangent circles of equal radius meeting at the origin; left loop first.
    FigureEight { radius: f64 },
    /// Lead-in straight, left arc, right arc of the same angle, then straight.
    SCurve {
        radius: f64,
        #[serde(default = "default_s_angle")]
        angle: f64,
        #[serde(default = "default_s_lead")]
        lead: f64,
    },
}

fn default_s_angle() -> f64 {
    PI / 3.0
}
fn default_s_lead() -> f64 {
    5.0
}

/// Builds a reference from a generator spec. `min_radius` is the tightest
/// radius the vehicle can follow, typically `L / tan(psi_max)`.
pub fn make_generator(
    spec: &GeneratorSpec,
    speed: SpeedProfile,
    min_radius: f64,
) -> Result<PathTrajectory, TrajectoryError> {
    speed.validate()?;
    let check_radius = |radius: f64| {
        if !radius.is_finite() || radius <= min_radius {
            Err(TrajectoryError::Infeasible { radius, min_radius })
        } else {
            Ok(())
        }
    };
    let path = match *spec {
        GeneratorSpec::Line { heading } => {
            ArcPath::new(0.0, 0.0, heading, vec![Segment { length: f64::INFINITY, curvature: 0.0 }], false)?
        }
        GeneratorSpec::Circle { radius, clockwise } => {
            check_radius(radius)?;
            let k = if clockwise { -1.0 / radius } else { 1.0 / radius };
            ArcPath::new(0.0, 0.0, 0.0, vec![Segment { length: 2.0 * PI * radius, curvature: k }], true)?
        }
        GeneratorSpec::FigureEight { radius } => {
            check_radius(radius)?;
            let len = 2.0 * PI * radius;
            ArcPath::new(
                0.0,
                0.0,
                0.0,
                vec![
                    Segment { length: len, curvature: 1.0 / radius },
                    Segment { length: len, curvature: -1.0 / radius },
                ],
                true,
            )?
        }
        GeneratorSpec::SCurve { radius, angle, lead } => {
            check_radius(radius)?;
            if !(angle > 0.0 && angle < PI) || !(lead > 0.0) {
                return Err(TrajectoryError::InvalidParams("s_curve needs 0 < angle < pi and lead > 0".into()));
            }
            ArcPath::new(
                0.0,
                0.0,
                0.0,
                vec![
                    Segment { length: lead, curvature: 0.0 },
                    Segment { length: radius * angle, curvature: 1.0 / radius },
                    Segment { length: radius * angle, curvature: -1.0 / radius },
                    Segment { length: f64::INFINITY, curvature: 0.0 },
                ],
                false,
            )?
        }
    };
    Ok(PathTrajectory { path, speed })
}

/// Reference loaded from time-stamped positions. Derivatives at each row
/// come from a local cubic least-squares fit over a 7-sample window (shifted
/// inward at the ends); between rows all fields are linearly interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct TableTrajectory {
    times: Vec<f64>,
    samples: Vec<ReferenceSample>,
}

pub const TABLE_WINDOW: usize = 7;

fn cubic_fit(ts: &[f64], vs: &[f64], t_c: f64) -> [f64; 4] {
    // normal equations in tau = t - t_c, scaled by the window half-width
    let h = ts.iter().map(|t| (t - t_c).abs()).fold(0.0, f64::max).max(1e-12);
    let mut ata = nalgebra::Matrix4::<f64>::zeros();
    let mut atb = nalgebra::Vector4::<f64>::zeros();
    for (&t, &v) in ts.iter().zip(vs) {
        let u = (t - t_c) / h;
        let row = nalgebra::Vector4::new(1.0, u, u * u, u * u * u);
        ata += row * row.transpose();
        atb += row * v;
    }
    let c = ata.lu().solve(&atb).unwrap_or_else(nalgebra::Vector4::zeros);
    [c[0], c[1] / h, 2.0 * c[2] / (h * h), 6.0 * c[3] / (h * h * h)]
}

impl TableTrajectory {
    pub fn from_points(points: &[(f64, f64, f64)]) -> Result<Self, TrajectoryError> {
        if points.len() < TABLE_WINDOW {
            return Err(TrajectoryError::Table {
                row: points.len(),
                reason: format!("need at least {TABLE_WINDOW} rows"),
            });
        }
        for (i, p) in points.iter().enumerate() {
            if !(p.0.is_finite() && p.1.is_finite() && p.2.is_finite()) {
                return Err(TrajectoryError::Table { row: i + 1, reason: "non-finite value".into() });
            }
            if i > 0 && p.0 <= points[i - 1].0 {
                return Err(TrajectoryError::Table { row: i + 1, reason: "time not strictly increasing".into() });
            }
        }
        if points[0].0 != 0.0 {
            return Err(TrajectoryError::Table { row: 1, reason: "table must start at t = 0".into() });
        }
        let n = points.len();
        let half = TABLE_WINDOW / 2;
        let mut samples = Vec::with_capacity(n);
        let mut prev_theta: Option<f64> = None;
        for i in 0..n {
            let lo = i.saturating_sub(half).min(n - TABLE_WINDOW);
            let win = &points[lo..lo + TABLE_WINDOW];
            let ts: Vec<f64> = win.iter().map(|p| p.0).collect();
            let xs: Vec<f64> = win.iter().map(|p| p.1).collect();
            let ys: Vec<f64> = win.iter().map(|p| p.2).collect();
            let t_c = points[i].0;
            let [_, xd, xdd, xddd] = cubic_fit(&ts, &xs, t_c);
            let [_, yd, ydd, yddd] = cubic_fit(&ts, &ys, t_c);
            let v = xd.hypot(yd);
            if !(v > V_FLOOR) {
                return Err(TrajectoryError::Table {
                    row: i + 1,
                    reason: format!("reference speed {v} m/s is not above {V_FLOOR}"),
                });
            }
            let mut theta = yd.atan2(xd);
            if let Some(p) = prev_theta {
                theta = p + (theta - p + PI).rem_euclid(2.0 * PI) - PI;
            }
            prev_theta = Some(theta);
            let cross = xd * ydd - yd * xdd;
            let v_dot = (xd * xdd + yd * ydd) / v;
            let theta_dot = cross / (v * v);
            let cross_dot = xd * yddd - yd * xddd;
            let theta_ddot = cross_dot / (v * v) - 2.0 * cross * v_dot / (v * v * v);
            let v_ddot = (xdd * xdd + xd * xddd + ydd * ydd + yd * yddd - v_dot * v_dot) / v;
            samples.push(ReferenceSample {
                x_d: points[i].1,
                y_d: points[i].2,
                theta_d: theta,
                v_d: v,
                theta_d_dot: theta_dot,
                v_d_dot: v_dot,
                theta_d_ddot: theta_ddot,
                v_d_ddot: v_ddot,
            });
        }
        Ok(Self { times: points.iter().map(|p| p.0).collect(), samples })
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("non-empty table")
    }

    pub fn sample(&self, t: f64) -> Result<ReferenceSample, TrajectoryError> {
        let horizon = self.horizon();
        if t > horizon {
            return Err(TrajectoryError::BeyondHorizon { t, horizon });
        }
        let k = self.times.partition_point(|&ti| ti <= t);
        if k >= self.times.len() {
            return Ok(self.samples[self.samples.len() - 1]);
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let w = (t - t0) / (t1 - t0);
        let (a, b) = (self.samples[k - 1], self.samples[k]);
        let lerp = |p: f64, q: f64| p + w * (q - p);
        Ok(ReferenceSample {
            x_d: lerp(a.x_d, b.x_d),
            y_d: lerp(a.y_d, b.y_d),
            theta_d: lerp(a.theta_d, b.theta_d),
            v_d: lerp(a.v_d, b.v_d),
            theta_d_dot: lerp(a.theta_d_dot, b.theta_d_dot),
            v_d_dot: lerp(a.v_d_dot, b.v_d_dot),
            theta_d_ddot: lerp(a.theta_d_ddot, b.theta_d_ddot),
            v_d_ddot: lerp(a.v_d_ddot, b.v_d_ddot),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Trajectory {
    Path(PathTrajectory),
    Table(TableTrajectory),
}

impl Trajectory {
    pub fn sample(&self, t: f64) -> Result<ReferenceSample, TrajectoryError> {
        if t < 0.0 || t.is_nan() {
            return Err(TrajectoryError::NegativeTime(t));
        }
        match self {
            Trajectory::Path(p) => Ok(p.sample(t)),
            Trajectory::Table(tab) => tab.sample(t),
        }
    }

    /// Last valid time, if bounded.
    pub fn horizon(&self) -> Option<f64> {
        match self {
            Trajectory::Path(_) => None,
            Trajectory::Table(t) => Some(t.horizon()),
        }
    }
}

impl From<PathTrajectory> for Trajectory {
    fn from(p: PathTrajectory) -> Self {
        Trajectory::Path(p)
    }
}

pub fn sample(trajectory: &Trajectory, t: f64) -> Result<ReferenceSample, TrajectoryError> {
    trajectory.sample(t)
}
