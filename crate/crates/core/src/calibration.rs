//! Angular misalignment estimation.
//!
//! Every sensor `s` at known location `l_s` reports targets in a local frame
//! rotated by an unknown misalignment. The estimate `A_s` maps local vectors
//! back into the global frame, so with perfect data `A_s p_s^i + l_s` is the
//! same point for every sensor. All algorithms here are built from repeated
//! [`wahba`] solves:
//!
//! * [`relative_3d`] / [`relative_hetero`]: one sensor against an unbiased
//!   reference (3D/3D and 2D/3D).
//! * [`absolute_3d_pair`] / [`absolute_3d`]: alternating pairwise alignment
//!   of all 3D sensors, starting from identity.
//! * [`absolute_2d_pair`] / [`absolute_2d`]: the same sweep on positions
//!   rebuilt by triangulating the bias-compensated angle measurements at the
//!   start of each iteration.
//!
//! With two sensors only the relative rotation is observable; any common
//! rotation about the sensor baseline leaves the cost unchanged, so the
//! two-sensor absolute results carry [`CalibrationWarning::GaugeAmbiguous`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    cart_to_spherical, nearly_collinear, spherical_to_cart, GeometryError, Measurement, RotationMatrix, Vec3,
};
use crate::triangulation::{triangulate, Bearing, BearingSet};
use crate::wahba::{wahba, WahbaError};

/// Collinearity threshold on the ratio of the second to the first principal
/// extent of the sensor locations.
pub const COLLINEAR_RATIO: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("invalid measurement batch: {0}")]
    InvalidBatch(String),
    #[error("{algorithm} requires {expected}")]
    IncompatibleSensors {
        algorithm: Algorithm,
        expected: &'static str,
    },
    #[error("invalid stopping criteria: {0}")]
    InvalidStopping(String),
    #[error("invalid pair schedule: {0}")]
    InvalidSchedule(String),
    #[error("only {surviving} target indices could be triangulated, at least 2 are required")]
    TooFewIndices { surviving: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Wahba(#[from] WahbaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SensorKind {
    /// Azimuth and elevation only.
    #[serde(rename = "2d")]
    TwoD,
    /// Range, azimuth and elevation.
    #[serde(rename = "3d")]
    ThreeD,
}

/// All measurements of one sensor, indexed by target instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorTrack {
    pub location: Vec3,
    pub kind: SensorKind,
    pub measurements: Vec<Measurement>,
}

/// Time-aligned measurements from every sensor: index `i` refers to the same
/// target instance for all sensors.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementBatch {
    sensors: Vec<SensorTrack>,
}

impl MeasurementBatch {
    pub fn new(sensors: Vec<SensorTrack>) -> Result<Self, CalibrationError> {
        let first = sensors
            .first()
            .ok_or_else(|| CalibrationError::InvalidBatch("no sensors".into()))?;
        let n = first.measurements.len();
        if n < 2 {
            return Err(CalibrationError::InvalidBatch(format!(
                "at least 2 measurements per sensor are required, got {n}"
            )));
        }
        for (s, track) in sensors.iter().enumerate() {
            if track.measurements.len() != n {
                return Err(CalibrationError::InvalidBatch(format!(
                    "sensor {s} has {} measurements, sensor 0 has {n}",
                    track.measurements.len()
                )));
            }
            if !track.location.iter().all(|v| v.is_finite()) {
                return Err(CalibrationError::InvalidBatch(format!(
                    "sensor {s} location is not finite"
                )));
            }
            for (i, m) in track.measurements.iter().enumerate() {
                let range_ok = match (track.kind, m.range) {
                    (SensorKind::ThreeD, Some(r)) => r.is_finite() && r >= 0.0,
                    (SensorKind::ThreeD, None) => false,
                    (SensorKind::TwoD, _) => true,
                };
                if !range_ok || !m.azimuth.is_finite() || !m.elevation.is_finite() {
                    return Err(CalibrationError::InvalidBatch(format!(
                        "sensor {s} measurement {i} is incomplete or not finite"
                    )));
                }
            }
        }
        Ok(Self { sensors })
    }

    pub fn sensors(&self) -> &[SensorTrack] {
        &self.sensors
    }

    pub fn sensor_count(&self) -> usize {
        self.sensors.len()
    }

    /// Number of target instances `n`.
    pub fn len(&self) -> usize {
        self.sensors[0].measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn locations(&self) -> Vec<Vec3> {
        self.sensors.iter().map(|s| s.location).collect()
    }

    /// Cartesian positions in sensor `s`'s local frame. Requires range data.
    pub fn local_positions(&self, s: usize) -> Result<Vec<Vec3>, CalibrationError> {
        self.sensors[s]
            .measurements
            .iter()
            .map(|m| spherical_to_cart(m).map_err(CalibrationError::from))
            .collect()
    }

    /// Unit lines of sight in sensor `s`'s local frame.
    pub fn directions(&self, s: usize) -> Vec<Vec3> {
        self.sensors[s]
            .measurements
            .iter()
            .map(Measurement::direction)
            .collect()
    }

    /// A batch restricted to the given target indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self, CalibrationError> {
        let n = self.len();
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(CalibrationError::InvalidBatch(format!(
                "index {bad} out of range (n = {n})"
            )));
        }
        Self::new(
            self.sensors
                .iter()
                .map(|t| SensorTrack {
                    location: t.location,
                    kind: t.kind,
                    measurements: indices.iter().map(|&i| t.measurements[i]).collect(),
                })
                .collect(),
        )
    }
}

/// When to stop the alternating iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoppingCriteria {
    /// Stop once `|cost_prev - cost| <= rel_cost_tol * cost_prev`.
    pub rel_cost_tol: f64,
    pub max_iterations: usize,
}

impl Default for StoppingCriteria {
    fn default() -> Self {
        Self {
            rel_cost_tol: 1e-3,
            max_iterations: 100,
        }
    }
}

impl StoppingCriteria {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if !(self.rel_cost_tol > 0.0) || !self.rel_cost_tol.is_finite() {
            return Err(CalibrationError::InvalidStopping(format!(
                "rel_cost_tol must be positive, got {}",
                self.rel_cost_tol
            )));
        }
        if self.max_iterations == 0 {
            return Err(CalibrationError::InvalidStopping(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn is_met(&self, previous: f64, current: f64, floor: f64) -> bool {
        previous <= floor || current <= floor || (previous - current).abs() <= self.rel_cost_tol * previous
    }
}

/// Order of the relative alignments within one iteration.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum PairSchedule {
    /// `1->2, 2->1, 1->3, 3->1, ..., 1->S, S->1, 2->3, 3->2, ..., S-1->S, S->S-1`.
    #[default]
    Sequential,
    /// Explicit `(from, to)` steps: each step re-solves `A_from` against
    /// sensor `to` held fixed. Zero-based sensor indices.
    Custom(Vec<(usize, usize)>),
}

impl PairSchedule {
    pub fn steps(&self, sensor_count: usize) -> Result<Vec<(usize, usize)>, CalibrationError> {
        match self {
            PairSchedule::Sequential => Ok((0..sensor_count)
                .flat_map(|a| (a + 1..sensor_count).flat_map(move |b| [(a, b), (b, a)]))
                .collect()),
            PairSchedule::Custom(steps) => {
                if steps.is_empty() {
                    return Err(CalibrationError::InvalidSchedule("no steps".into()));
                }
                for &(a, b) in steps {
                    if a == b || a >= sensor_count || b >= sensor_count {
                        return Err(CalibrationError::InvalidSchedule(format!(
                            "step ({a}, {b}) invalid for {sensor_count} sensors"
                        )));
                    }
                }
                Ok(steps.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationWarning {
    /// Two-sensor absolute calibration: only the relative rotation is
    /// identified, rotations about the baseline are unobservable.
    GaugeAmbiguous,
    /// Sensor locations are nearly collinear; absolute calibration may be
    /// ambiguous.
    CollinearSensors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// One estimate `A_s` per sensor, mapping local vectors to the global frame.
    pub estimates: Vec<RotationMatrix>,
    /// Cost before the first iteration (all estimates at identity).
    pub initial_cost: f64,
    /// Pairwise cost after each completed iteration.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Target indices skipped because triangulation failed, summed over
    /// iterations.
    pub dropped_indices: usize,
    pub warnings: Vec<CalibrationWarning>,
}

impl CalibrationResult {
    pub fn final_cost(&self) -> f64 {
        self.cost_trace.last().copied().unwrap_or(self.initial_cost)
    }
}

/// Selects one of the registration algorithms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    /// Relative, two 3D sensors, sensor 2 is the reference.
    #[serde(rename = "alg1")]
    Relative3d,
    /// Relative, 2D sensor 1 against 3D reference sensor 2.
    #[serde(rename = "alg2")]
    RelativeHetero,
    /// Absolute, two 3D sensors (gauge ambiguous).
    #[serde(rename = "alg3")]
    Absolute3dPair,
    /// Absolute, three or more 3D sensors.
    #[serde(rename = "alg4")]
    Absolute3d,
    /// Absolute, two 2D sensors (gauge ambiguous).
    #[serde(rename = "alg6")]
    Absolute2dPair,
    /// Absolute, three or more 2D sensors.
    #[serde(rename = "alg7")]
    Absolute2d,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Relative3d,
        Algorithm::RelativeHetero,
        Algorithm::Absolute3dPair,
        Algorithm::Absolute3d,
        Algorithm::Absolute2dPair,
        Algorithm::Absolute2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Relative3d => "alg1",
            Algorithm::RelativeHetero => "alg2",
            Algorithm::Absolute3dPair => "alg3",
            Algorithm::Absolute3d => "alg4",
            Algorithm::Absolute2dPair => "alg6",
            Algorithm::Absolute2d => "alg7",
        }
    }

    /// Whether the algorithm treats the last sensor as an unbiased reference.
    pub fn is_relative(self) -> bool {
        matches!(self, Algorithm::Relative3d | Algorithm::RelativeHetero)
    }

    /// Sensor kinds the algorithm accepts, as a function of sensor count.
    pub fn check_sensors(self, kinds: &[SensorKind]) -> Result<(), CalibrationError> {
        use SensorKind::*;
        let s = kinds.len();
        let all = |k: SensorKind| kinds.iter().all(|x| *x == k);
        let (ok, expected) = match self {
            Algorithm::Relative3d => (s == 2 && all(ThreeD), "exactly 2 3D sensors"),
            Algorithm::RelativeHetero => (
                s == 2 && kinds[0] == TwoD && kinds[1] == ThreeD,
                "a 2D sensor followed by a 3D sensor",
            ),
            Algorithm::Absolute3dPair => (s == 2 && all(ThreeD), "exactly 2 3D sensors"),
            Algorithm::Absolute3d => (s >= 3 && all(ThreeD), "at least 3 3D sensors"),
            Algorithm::Absolute2dPair => (s == 2 && all(TwoD), "exactly 2 2D sensors"),
            Algorithm::Absolute2d => (s >= 3 && all(TwoD), "at least 3 2D sensors"),
        };
        if ok {
            Ok(())
        } else {
            Err(CalibrationError::IncompatibleSensors {
                algorithm: self,
                expected,
            })
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown algorithm '{s}' (expected alg1, alg2, alg3, alg4, alg6 or alg7)"))
    }
}

/// Runs `algorithm` with the default pair schedule. Relative algorithms
/// report the reference sensor's estimate as identity.
pub fn calibrate(
    batch: &MeasurementBatch,
    algorithm: Algorithm,
    stop: &StoppingCriteria,
) -> Result<CalibrationResult, CalibrationError> {
    let kinds: Vec<SensorKind> = batch.sensors.iter().map(|s| s.kind).collect();
    algorithm.check_sensors(&kinds)?;
    match algorithm {
        Algorithm::Relative3d | Algorithm::RelativeHetero => {
            let estimate = if algorithm == Algorithm::Relative3d {
                relative_3d(batch)?
            } else {
                relative_hetero(batch)?
            };
            let estimates = vec![estimate, RotationMatrix::identity()];
            let (initial_cost, cost) = if algorithm == Algorithm::Relative3d {
                let identity = [RotationMatrix::identity(); 2];
                (pairwise_cost(&identity, batch)?, pairwise_cost(&estimates, batch)?)
            } else {
                let identity = [RotationMatrix::identity(); 2];
                (hetero_cost(&identity, batch)?, hetero_cost(&estimates, batch)?)
            };
            Ok(CalibrationResult {
                estimates,
                initial_cost,
                cost_trace: vec![cost],
                iterations: 1,
                converged: true,
                dropped_indices: 0,
                warnings: Vec::new(),
            })
        }
        Algorithm::Absolute3dPair => absolute_3d_pair(batch, stop),
        Algorithm::Absolute3d => absolute_3d(batch, stop),
        Algorithm::Absolute2dPair => absolute_2d_pair(batch, stop),
        Algorithm::Absolute2d => absolute_2d(batch, stop),
    }
}

/// `sum_{s<t} sum_i |A_s p_s^i + l_s - (A_t p_t^i + l_t)|^2` on explicit
/// local positions.
pub fn pairwise_cost_local(estimates: &[RotationMatrix], locals: &[Vec<Vec3>], locations: &[Vec3]) -> f64 {
    let global: Vec<Vec<Vec3>> = estimates
        .iter()
        .zip(locals)
        .zip(locations)
        .map(|((a, ps), l)| ps.iter().map(|p| a * p + l).collect())
        .collect();
    let mut total = 0.0;
    for s in 0..global.len() {
        for t in s + 1..global.len() {
            total += global[s]
                .iter()
                .zip(&global[t])
                .map(|(u, v)| (u - v).norm_squared())
                .sum::<f64>();
        }
    }
    total
}

/// Pairwise cost of a batch whose sensors all report range, m^2.
pub fn pairwise_cost(estimates: &[RotationMatrix], batch: &MeasurementBatch) -> Result<f64, CalibrationError> {
    if estimates.len() != batch.sensor_count() {
        return Err(CalibrationError::InvalidBatch(format!(
            "{} estimates for {} sensors",
            estimates.len(),
            batch.sensor_count()
        )));
    }
    let locals = all_local_positions(batch)?;
    Ok(pairwise_cost_local(estimates, &locals, &batch.locations()))
}

/// Aligns sensor 1 to reference sensor 2, both 3D. Returns `A_1`.
pub fn relative_3d(batch: &MeasurementBatch) -> Result<RotationMatrix, CalibrationError> {
    Algorithm::Relative3d.check_sensors(&kinds(batch))?;
    let p1 = batch.local_positions(0)?;
    let offset = batch.sensors[1].location - batch.sensors[0].location;
    let p2: Vec<Vec3> = batch.local_positions(1)?.into_iter().map(|p| p + offset).collect();
    Ok(wahba(&p1, &p2)?)
}

/// Aligns the lines of sight of 2D sensor 1 to those implied by 3D reference
/// sensor 2. Returns `A_1`.
pub fn relative_hetero(batch: &MeasurementBatch) -> Result<RotationMatrix, CalibrationError> {
    Algorithm::RelativeHetero.check_sensors(&kinds(batch))?;
    let q1 = batch.directions(0);
    let q2 = reference_directions(batch)?;
    Ok(wahba(&q1, &q2)?)
}

/// Directions from sensor 1 to the targets located by sensor 2.
fn reference_directions(batch: &MeasurementBatch) -> Result<Vec<Vec3>, CalibrationError> {
    let offset = batch.sensors[1].location - batch.sensors[0].location;
    batch
        .local_positions(1)?
        .into_iter()
        .map(|p| {
            let shifted = p + offset;
            let norm = shifted.norm();
            if norm < 1e-9 {
                Err(GeometryError::ZeroVector(norm).into())
            } else {
                Ok(shifted / norm)
            }
        })
        .collect()
}

fn hetero_cost(estimates: &[RotationMatrix], batch: &MeasurementBatch) -> Result<f64, CalibrationError> {
    let q2 = reference_directions(batch)?;
    Ok(batch
        .directions(0)
        .iter()
        .zip(&q2)
        .map(|(q1, q2)| (estimates[0] * *q1 - estimates[1] * *q2).norm_squared())
        .sum())
}

/// Alternating absolute calibration of two 3D sensors.
///
/// The cost trace is non-increasing: each half step is a global minimizer
/// over one rotation with the other held fixed.
pub fn absolute_3d_pair(
    batch: &MeasurementBatch,
    stop: &StoppingCriteria,
) -> Result<CalibrationResult, CalibrationError> {
    Algorithm::Absolute3dPair.check_sensors(&kinds(batch))?;
    let mut result = run_3d(batch, stop, &PairSchedule::Sequential)?;
    result.warnings.push(CalibrationWarning::GaugeAmbiguous);
    Ok(result)
}

/// Alternating absolute calibration of `S >= 3` 3D sensors.
pub fn absolute_3d(batch: &MeasurementBatch, stop: &StoppingCriteria) -> Result<CalibrationResult, CalibrationError> {
    absolute_3d_with_schedule(batch, stop, &PairSchedule::Sequential)
}

pub fn absolute_3d_with_schedule(
    batch: &MeasurementBatch,
    stop: &StoppingCriteria,
    schedule: &PairSchedule,
) -> Result<CalibrationResult, CalibrationError> {
    Algorithm::Absolute3d.check_sensors(&kinds(batch))?;
    let mut result = run_3d(batch, stop, schedule)?;
    if nearly_collinear(&batch.locations(), COLLINEAR_RATIO) {
        result.warnings.push(CalibrationWarning::CollinearSensors);
    }
    Ok(result)
}

/// Absolute calibration of two 2D sensors via triangulation (gauge ambiguous).
pub fn absolute_2d_pair(
    batch: &MeasurementBatch,
    stop: &StoppingCriteria,
) -> Result<CalibrationResult, CalibrationError> {
    Algorithm::Absolute2dPair.check_sensors(&kinds(batch))?;
    let mut result = run_2d(batch, stop, &PairSchedule::Sequential)?;
    result.warnings.push(CalibrationWarning::GaugeAmbiguous);
    Ok(result)
}

/// Absolute calibration of `S >= 3` 2D sensors via triangulation.
pub fn absolute_2d(batch: &MeasurementBatch, stop: &StoppingCriteria) -> Result<CalibrationResult, CalibrationError> {
    absolute_2d_with_schedule(batch, stop, &PairSchedule::Sequential)
}

pub fn absolute_2d_with_schedule(
    batch: &MeasurementBatch,
    stop: &StoppingCriteria,
    schedule: &PairSchedule,
) -> Result<CalibrationResult, CalibrationError> {
    Algorithm::Absolute2d.check_sensors(&kinds(batch))?;
    let mut result = run_2d(batch, stop, schedule)?;
    if nearly_collinear(&batch.locations(), COLLINEAR_RATIO) {
        result.warnings.push(CalibrationWarning::CollinearSensors);
    }
    Ok(result)
}

fn kinds(batch: &MeasurementBatch) -> Vec<SensorKind> {
    batch.sensors.iter().map(|s| s.kind).collect()
}

fn all_local_positions(batch: &MeasurementBatch) -> Result<Vec<Vec<Vec3>>, CalibrationError> {
    (0..batch.sensor_count()).map(|s| batch.local_positions(s)).collect()
}

/// Re-solves `A_from` against sensor `to` held at its latest estimate.
fn align(
    estimates: &mut [RotationMatrix],
    locals: &[Vec<Vec3>],
    locations: &[Vec3],
    from: usize,
    to: usize,
    targets: &mut Vec<Vec3>,
) -> Result<(), CalibrationError> {
    let offset = locations[to] - locations[from];
    let fixed = estimates[to];
    targets.clear();
    targets.extend(locals[to].iter().map(|p| fixed * *p + offset));
    estimates[from] = wahba(&locals[from], targets)?;
    Ok(())
}

fn sweep(
    estimates: &mut [RotationMatrix],
    locals: &[Vec<Vec3>],
    locations: &[Vec3],
    steps: &[(usize, usize)],
) -> Result<(), CalibrationError> {
    let mut targets = Vec::with_capacity(locals[0].len());
    for &(from, to) in steps {
        align(estimates, locals, locations, from, to, &mut targets)?;
    }
    Ok(())
}

/// Costs below this fraction of the summed squared local position norms are
/// at the floating-point floor and count as converged.
const COST_FLOOR_RATIO: f64 = 1e-24;

/// Iteration bookkeeping shared by the 3D and 2D drivers.
struct Progress {
    stop: StoppingCriteria,
    floor: f64,
    initial_cost: f64,
    trace: Vec<f64>,
    best: (f64, Vec<RotationMatrix>),
}

impl Progress {
    fn new(stop: StoppingCriteria, locals: &[Vec<Vec3>], initial_cost: f64, estimates: &[RotationMatrix]) -> Self {
        let scale: f64 = locals.iter().flatten().map(|p| p.norm_squared()).sum();
        Self {
            stop,
            floor: COST_FLOOR_RATIO * scale,
            initial_cost,
            trace: Vec::new(),
            best: (initial_cost, estimates.to_vec()),
        }
    }

    /// Records the cost of a finished iteration and reports whether to stop.
    fn record(&mut self, cost: f64, estimates: &[RotationMatrix]) -> bool {
        let previous = self.trace.last().copied().unwrap_or(self.initial_cost);
        self.trace.push(cost);
        if cost <= self.best.0 {
            self.best = (cost, estimates.to_vec());
        }
        self.stop.is_met(previous, cost, self.floor)
    }

    fn finish(self, converged: bool, estimates: Vec<RotationMatrix>, dropped_indices: usize) -> CalibrationResult {
        // Without convergence the lowest-cost iterate is reported.
        let estimates = if converged { estimates } else { self.best.1 };
        CalibrationResult {
            estimates,
            initial_cost: self.initial_cost,
            iterations: self.trace.len(),
            cost_trace: self.trace,
            converged,
            dropped_indices,
            warnings: Vec::new(),
        }
    }
}

fn run_3d(
    batch: &MeasurementBatch,
    stop: &StoppingCriteria,
    schedule: &PairSchedule,
) -> Result<CalibrationResult, CalibrationError> {
    stop.validate()?;
    let steps = schedule.steps(batch.sensor_count())?;
    let locals = all_local_positions(batch)?;
    let locations = batch.locations();
    let mut estimates = vec![RotationMatrix::identity(); batch.sensor_count()];
    let initial_cost = pairwise_cost_local(&estimates, &locals, &locations);
    let mut progress = Progress::new(*stop, &locals, initial_cost, &estimates);

    let mut converged = false;
    for _ in 0..stop.max_iterations {
        sweep(&mut estimates, &locals, &locations, &steps)?;
        let cost = pairwise_cost_local(&estimates, &locals, &locations);
        if progress.record(cost, &estimates) {
            converged = true;
            break;
        }
    }
    Ok(progress.finish(converged, estimates, 0))
}

/// Local position estimates from triangulating every target index with the
/// current bias compensation applied. Returns the surviving per-sensor
/// positions (built from the raw angles and the triangulated ranges) and the
/// number of dropped indices.
fn triangulate_all(
    raw_directions: &[Vec<Vec3>],
    locations: &[Vec3],
    estimates: &[RotationMatrix],
) -> Result<(Vec<Vec<Vec3>>, usize), CalibrationError> {
    let sensor_count = raw_directions.len();
    let n = raw_directions[0].len();
    let mut locals = vec![Vec::with_capacity(n); sensor_count];
    let mut dropped = 0;

    'targets: for i in 0..n {
        let mut bearings = Vec::with_capacity(sensor_count);
        for s in 0..sensor_count {
            let compensated = estimates[s] * raw_directions[s][i];
            let Ok(angles) = cart_to_spherical(&compensated) else {
                dropped += 1;
                continue 'targets;
            };
            bearings.push(Bearing::new(angles.azimuth, angles.elevation, locations[s]));
        }
        let fix = BearingSet::new(bearings).and_then(|set| triangulate(&set));
        match fix {
            Ok(fix) => {
                for (s, local) in locals.iter_mut().enumerate() {
                    local.push(fix.ranges[s] * raw_directions[s][i]);
                }
            }
            Err(_) => dropped += 1,
        }
    }

    let surviving = n - dropped;
    if surviving < 2 {
        return Err(CalibrationError::TooFewIndices { surviving });
    }
    Ok((locals, dropped))
}

fn run_2d(
    batch: &MeasurementBatch,
    stop: &StoppingCriteria,
    schedule: &PairSchedule,
) -> Result<CalibrationResult, CalibrationError> {
    stop.validate()?;
    let sensor_count = batch.sensor_count();
    let steps = schedule.steps(sensor_count)?;
    let locations = batch.locations();
    let raw: Vec<Vec<Vec3>> = (0..sensor_count).map(|s| batch.directions(s)).collect();
    let mut estimates = vec![RotationMatrix::identity(); sensor_count];

    let mut progress: Option<Progress> = None;
    let mut dropped_total = 0;
    let mut converged = false;
    for _ in 0..stop.max_iterations {
        let (locals, dropped) = triangulate_all(&raw, &locations, &estimates)?;
        dropped_total += dropped;
        let progress = progress.get_or_insert_with(|| {
            Progress::new(
                *stop,
                &locals,
                pairwise_cost_local(&estimates, &locals, &locations),
                &estimates,
            )
        });
        sweep(&mut estimates, &locals, &locations, &steps)?;
        let cost = pairwise_cost_local(&estimates, &locals, &locations);
        if progress.record(cost, &estimates) {
            converged = true;
            break;
        }
    }
    // max_iterations >= 1, so at least one iteration ran.
    let progress = progress.expect("at least one iteration");
    Ok(progress.finish(converged, estimates, dropped_total))
}
