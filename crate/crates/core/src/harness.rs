//! Monte-Carlo experiment runner, metrics and report files.
//!
//! Realizations run in parallel, each from its own seeded substreams, and are
//! collected in run-id order, so every output file is byte-identical for a
//! given configuration.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{calibrate, Algorithm, CalibrationError, MeasurementBatch, SensorKind, StoppingCriteria};
use crate::geometry::{EulerAngles, RotationMatrix, Vec3};
use crate::scenario::{
    build_batch, generate_trajectory, random_bias, random_locations, GroundTruth, NoiseSpec, PlacementBox,
    ScenarioError, ScenarioSeed, SensorTruth, TrajectorySpec,
};

/// Minimum fraction of successful runs for an experiment to count.
pub const MIN_SUCCESS_RATE: f64 = 0.8;

/// Placement seed used when a config does not name one.
pub const DEFAULT_PLACEMENT_SEED: u64 = 1;

pub const SEED_POLICY: &str = "common random numbers: every sweep point reuses the base seed; \
biases are keyed by (seed, run, sensor) and noise by (seed, run, sensor, epoch, channel); \
the sensor layout depends only on the placement seed";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("only {succeeded} of {total} runs succeeded")]
    TooManyFailures { succeeded: usize, total: usize },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Placement {
    Random {
        #[serde(default = "default_placement_seed")]
        seed: u64,
        #[serde(default)]
        region: PlacementBox,
    },
    Fixed {
        locations_m: Vec<[f64; 3]>,
    },
}

fn default_placement_seed() -> u64 {
    DEFAULT_PLACEMENT_SEED
}

impl Default for Placement {
    fn default() -> Self {
        Placement::Random {
            seed: DEFAULT_PLACEMENT_SEED,
            region: PlacementBox::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub count: usize,
    /// Sensor kind for the whole constellation. When absent it follows from
    /// the algorithm (alg2 uses a 2D sensor and a 3D reference).
    pub kind: Option<SensorKind>,
    pub placement: Placement,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            count: 4,
            kind: None,
            placement: Placement::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma_range_m: f64,
    pub sigma_az_mrad: f64,
    pub sigma_el_mrad: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_range_m: 10.0,
            sigma_az_mrad: 3.0,
            sigma_el_mrad: 3.0,
        }
    }
}

impl NoiseConfig {
    pub fn to_spec(&self) -> NoiseSpec {
        NoiseSpec {
            sigma_range_m: self.sigma_range_m,
            sigma_az_rad: self.sigma_az_mrad * 1e-3,
            sigma_el_rad: self.sigma_el_mrad * 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BiasModel {
    /// Every angle drawn per run with magnitude uniform in
    /// `[min_deg, max_deg]` and a random sign.
    UniformMagnitude { min_deg: f64, max_deg: f64 },
    /// `[yaw, pitch, roll]` in degrees, one triple per sensor, every run.
    Fixed { degrees: Vec<[f64; 3]> },
}

impl Default for BiasModel {
    fn default() -> Self {
        BiasModel::UniformMagnitude {
            min_deg: 1.0,
            max_deg: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub out_dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("results"),
        }
    }
}

/// A complete Monte-Carlo study description. Every field has a default, so
/// `{}` is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub trajectory: TrajectorySpec,
    pub sensors: SensorConfig,
    pub noise: NoiseConfig,
    pub bias: BiasModel,
    pub algorithm: Algorithm,
    pub stopping: StoppingCriteria,
    pub mc_runs: usize,
    pub seed: u64,
    /// Evenly down-sample the trajectory to this many epochs.
    pub sample_count: Option<usize>,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            trajectory: TrajectorySpec::default(),
            sensors: SensorConfig::default(),
            noise: NoiseConfig::default(),
            bias: BiasModel::default(),
            algorithm: Algorithm::Absolute3d,
            stopping: StoppingCriteria::default(),
            mc_runs: 50,
            seed: 0,
            sample_count: None,
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config file body. A summary file is accepted too: its
    /// `config` member is the echo of the config that produced it.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        if let Some(inner) = value.as_object_mut().and_then(|o| o.remove("config")) {
            value = inner;
        }
        serde_json::from_value(value)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text).map_err(|source| HarnessError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Sensor kinds, resolved against the algorithm when not given.
    pub fn kinds(&self) -> Vec<SensorKind> {
        let n = self.sensors.count;
        match (self.sensors.kind, self.algorithm) {
            (Some(kind), _) => vec![kind; n],
            (None, Algorithm::RelativeHetero) => {
                let mut kinds = vec![SensorKind::TwoD; n];
                if let Some(last) = kinds.last_mut() {
                    *last = SensorKind::ThreeD;
                }
                kinds
            }
            (None, Algorithm::Absolute2dPair | Algorithm::Absolute2d) => vec![SensorKind::TwoD; n],
            (None, _) => vec![SensorKind::ThreeD; n],
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.mc_runs == 0 {
            return bad("mc_runs must be at least 1".into());
        }
        self.trajectory.validate()?;
        self.noise.to_spec().validate()?;
        self.stopping.validate()?;
        self.algorithm
            .check_sensors(&self.kinds())
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let n = self.sensors.count;
        if let Placement::Fixed { locations_m } = &self.sensors.placement {
            if locations_m.len() < n {
                return bad(format!("{} fixed locations for {n} sensors", locations_m.len()));
            }
        }
        match &self.bias {
            BiasModel::UniformMagnitude { min_deg, max_deg } => {
                if !(min_deg.is_finite() && max_deg.is_finite() && 0.0 <= *min_deg && min_deg <= max_deg) {
                    return bad(format!("bias range [{min_deg}, {max_deg}] deg"));
                }
            }
            BiasModel::Fixed { degrees } => {
                if degrees.len() < n {
                    return bad(format!("{} fixed biases for {n} sensors", degrees.len()));
                }
            }
        }
        if let Some(m) = self.sample_count {
            let total = self.trajectory.sample_count();
            if m < 2 || m > total {
                return bad(format!("sample_count {m} outside [2, {total}]"));
            }
        }
        Ok(())
    }

    /// Sensor locations shared by all runs.
    pub fn locations(&self) -> Result<Vec<Vec3>, HarnessError> {
        let n = self.sensors.count;
        match &self.sensors.placement {
            Placement::Fixed { locations_m } => Ok(locations_m[..n].iter().map(|l| Vec3::from(*l)).collect()),
            Placement::Random { seed, region } => {
                let targets = generate_trajectory(&self.trajectory)?;
                Ok(random_locations(n, &targets, region, ScenarioSeed(*seed))?)
            }
        }
    }

    /// True misalignments for `run`. The reference sensor of a relative
    /// algorithm is unbiased.
    pub fn biases(&self, run: u64) -> Vec<EulerAngles> {
        let n = self.sensors.count;
        let mut biases: Vec<EulerAngles> = match &self.bias {
            BiasModel::UniformMagnitude { min_deg, max_deg } => (0..n)
                .map(|s| random_bias(*min_deg, *max_deg, ScenarioSeed(self.seed), run, s))
                .collect(),
            BiasModel::Fixed { degrees } => degrees[..n]
                .iter()
                .map(|d| EulerAngles::from_degrees(d[0], d[1], d[2]))
                .collect(),
        };
        if self.algorithm.is_relative() {
            if let Some(last) = biases.last_mut() {
                *last = EulerAngles::default();
            }
        }
        biases
    }

    /// Epoch indices kept after down-sampling.
    pub fn epoch_indices(&self) -> Vec<usize> {
        let total = self.trajectory.sample_count();
        match self.sample_count {
            None => (0..total).collect(),
            Some(m) => evenly_spaced(total, m),
        }
    }
}

/// `m` indices in `0..total`, evenly spread and including both ends.
pub fn evenly_spaced(total: usize, m: usize) -> Vec<usize> {
    if m <= 1 || total <= 1 {
        return vec![0; m.min(total)];
    }
    let step = (total - 1) as f64 / (m - 1) as f64;
    (0..m).map(|k| (k as f64 * step).round() as usize).collect()
}

/// Builds the measurement batch and ground truth of one realization.
/// Down-sampling keeps the original epoch numbering for the noise streams.
pub fn simulate_run(
    cfg: &ExperimentConfig,
    locations: &[Vec3],
    run: u64,
) -> Result<(MeasurementBatch, GroundTruth), HarnessError> {
    let noise = cfg.noise.to_spec();
    let sensors: Vec<SensorTruth> = locations
        .iter()
        .zip(cfg.kinds())
        .zip(cfg.biases(run))
        .map(|((location, kind), bias)| SensorTruth {
            location: *location,
            kind,
            bias,
            noise,
        })
        .collect();
    let (batch, mut truth) = build_batch(&cfg.trajectory, &sensors, ScenarioSeed(cfg.seed), run)?;
    if cfg.sample_count.is_none() {
        return Ok((batch, truth));
    }
    let keep = cfg.epoch_indices();
    truth.targets = keep.iter().map(|&i| truth.targets[i]).collect();
    Ok((batch.select(&keep)?, truth))
}

/// Estimation error of one sensor in one run, milliradians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorError {
    pub yaw_mrad: f64,
    pub pitch_mrad: f64,
    pub roll_mrad: f64,
    pub geodesic_mrad: f64,
}

impl SensorError {
    pub fn score(estimate: &RotationMatrix, truth: EulerAngles) -> Result<Self, HarnessError> {
        let d = estimate
            .to_euler()
            .map_err(|e| HarnessError::Config(format!("scoring: {e}")))?
            .wrapped_difference(truth);
        Ok(Self {
            yaw_mrad: d.yaw * 1e3,
            pitch_mrad: d.pitch * 1e3,
            roll_mrad: d.roll * 1e3,
            geodesic_mrad: estimate.angle_to(&RotationMatrix::from_euler(truth)) * 1e3,
        })
    }

    pub fn angles(&self) -> [f64; 3] {
        [self.yaw_mrad, self.pitch_mrad, self.roll_mrad]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: u64,
    /// Set when the run failed; the other fields are then empty.
    pub error: Option<String>,
    pub errors: Vec<SensorError>,
    pub iterations: usize,
    pub converged: bool,
    pub initial_cost: f64,
    pub cost_trace: Vec<f64>,
    pub dropped_indices: usize,
}

impl RunRecord {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }

    pub fn final_cost(&self) -> f64 {
        self.cost_trace.last().copied().unwrap_or(self.initial_cost)
    }

    fn failed(run_id: u64, error: String) -> Self {
        Self {
            run_id,
            error: Some(error),
            errors: Vec::new(),
            iterations: 0,
            converged: false,
            initial_cost: f64::NAN,
            cost_trace: Vec::new(),
            dropped_indices: 0,
        }
    }
}

/// RMS errors in milliradians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RmsErrors {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub geodesic: f64,
}

impl RmsErrors {
    pub fn angles(&self) -> [f64; 3] {
        [self.yaw, self.pitch, self.roll]
    }

    pub fn max_angle(&self) -> f64 {
        self.angles().into_iter().fold(0.0, f64::max)
    }

    fn from_errors<'a>(errors: impl Iterator<Item = &'a SensorError>) -> Self {
        let (mut sum, mut count) = ([0.0; 4], 0usize);
        for e in errors {
            for (acc, v) in sum
                .iter_mut()
                .zip([e.yaw_mrad, e.pitch_mrad, e.roll_mrad, e.geodesic_mrad])
            {
                *acc += v * v;
            }
            count += 1;
        }
        if count == 0 {
            return Self {
                yaw: f64::NAN,
                pitch: f64::NAN,
                roll: f64::NAN,
                geodesic: f64::NAN,
            };
        }
        let rms = |s: f64| (s / count as f64).sqrt();
        Self {
            yaw: rms(sum[0]),
            pitch: rms(sum[1]),
            roll: rms(sum[2]),
            geodesic: rms(sum[3]),
        }
    }
}

/// Outcome of a Monte-Carlo study; `runs` holds one record per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub config: ExperimentConfig,
    pub sensor_locations_m: Vec<[f64; 3]>,
    pub success_rate: f64,
    /// RMS over successful runs and all sensors.
    pub rms_mrad: RmsErrors,
    /// RMS over successful runs, one entry per sensor.
    pub rms_per_sensor_mrad: Vec<RmsErrors>,
    pub seed_policy: String,
    pub runs: Vec<RunRecord>,
}

impl ErrorReport {
    pub fn successful_runs(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(|r| r.succeeded())
    }

    /// Fraction of successful runs that converged within `max_iterations`.
    pub fn fraction_within(&self, max_iterations: usize) -> f64 {
        let ok: Vec<_> = self.successful_runs().collect();
        if ok.is_empty() {
            return 0.0;
        }
        ok.iter()
            .filter(|r| r.converged && r.iterations <= max_iterations)
            .count() as f64
            / ok.len() as f64
    }
}

fn run_one(cfg: &ExperimentConfig, locations: &[Vec3], run: u64) -> Result<RunRecord, HarnessError> {
    let (batch, truth) = simulate_run(cfg, locations, run)?;
    let result = calibrate(&batch, cfg.algorithm, &cfg.stopping)?;
    let errors = result
        .estimates
        .iter()
        .zip(&truth.biases)
        .map(|(est, bias)| SensorError::score(est, *bias))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RunRecord {
        run_id: run,
        error: None,
        errors,
        iterations: result.iterations,
        converged: result.converged,
        initial_cost: result.initial_cost,
        cost_trace: result.cost_trace,
        dropped_indices: result.dropped_indices,
    })
}

/// Runs all Monte-Carlo realizations of `cfg`. Failed runs are recorded and
/// skipped in the statistics; fewer than 80% successes is an error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ErrorReport, HarnessError> {
    cfg.validate()?;
    let locations = cfg.locations()?;
    let runs: Vec<RunRecord> = (0..cfg.mc_runs as u64)
        .into_par_iter()
        .map(|run| run_one(cfg, &locations, run).unwrap_or_else(|e| RunRecord::failed(run, e.to_string())))
        .collect();

    let succeeded = runs.iter().filter(|r| r.succeeded()).count();
    if (succeeded as f64) < MIN_SUCCESS_RATE * runs.len() as f64 {
        return Err(HarnessError::TooManyFailures {
            succeeded,
            total: runs.len(),
        });
    }
    let ok = || runs.iter().filter(|r| r.succeeded());
    let rms_mrad = RmsErrors::from_errors(ok().flat_map(|r| r.errors.iter()));
    let rms_per_sensor_mrad = (0..cfg.sensors.count)
        .map(|s| RmsErrors::from_errors(ok().map(|r| &r.errors[s])))
        .collect();
    Ok(ErrorReport {
        config: cfg.clone(),
        sensor_locations_m: locations.iter().map(|l| [l.x, l.y, l.z]).collect(),
        success_rate: succeeded as f64 / runs.len() as f64,
        rms_mrad,
        rms_per_sensor_mrad,
        seed_policy: SEED_POLICY.to_string(),
        runs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    SensorCount,
    /// Azimuth and elevation standard deviation together, milliradians.
    NoiseStd,
    SampleCount,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::SensorCount => "sensor_count",
            SweepAxis::NoiseStd => "noise_std",
            SweepAxis::SampleCount => "sample_count",
        }
    }

    /// `cfg` with this axis set to `value`.
    pub fn apply(self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig, HarnessError> {
        let mut out = cfg.clone();
        let as_count = |v: f64| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(HarnessError::Config(format!(
                    "{} value {v} is not a count",
                    self.name()
                )))
            }
        };
        match self {
            SweepAxis::SensorCount => out.sensors.count = as_count(value)?,
            SweepAxis::NoiseStd => {
                out.noise.sigma_az_mrad = value;
                out.noise.sigma_el_mrad = value;
            }
            SweepAxis::SampleCount => out.sample_count = Some(as_count(value)?),
        }
        Ok(out)
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [SweepAxis::SensorCount, SweepAxis::NoiseStd, SweepAxis::SampleCount]
            .into_iter()
            .find(|a| a.name() == s.replace('-', "_"))
            .ok_or_else(|| format!("unknown sweep axis '{s}' (expected sensor_count, noise_std or sample_count)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub reports: Vec<ErrorReport>,
}

/// One experiment per axis value, all from the same base seed.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<SweepTable, HarnessError> {
    let reports = values
        .iter()
        .map(|v| run_experiment(&axis.apply(cfg, *v)?))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SweepTable {
        axis,
        values: values.to_vec(),
        reports,
    })
}

/// Machine-readable summary; `config` is a loadable config echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub sensor_locations_m: Vec<[f64; 3]>,
    pub success_rate: f64,
    pub rms_mrad: RmsErrors,
    pub rms_per_sensor_mrad: Vec<RmsErrors>,
    pub seed_policy: String,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    pub cost_traces: Vec<Vec<f64>>,
    pub failures: Vec<(u64, String)>,
}

impl Summary {
    pub fn of(report: &ErrorReport) -> Self {
        Self {
            config: report.config.clone(),
            sensor_locations_m: report.sensor_locations_m.clone(),
            success_rate: report.success_rate,
            rms_mrad: report.rms_mrad,
            rms_per_sensor_mrad: report.rms_per_sensor_mrad.clone(),
            seed_policy: report.seed_policy.clone(),
            iterations: report.runs.iter().map(|r| r.iterations).collect(),
            converged: report.runs.iter().map(|r| r.converged).collect(),
            cost_traces: report
                .runs
                .iter()
                .map(|r| {
                    std::iter::once(r.initial_cost)
                        .chain(r.cost_trace.iter().copied())
                        .collect()
                })
                .collect(),
            failures: report
                .runs
                .iter()
                .filter_map(|r| r.error.clone().map(|e| (r.run_id, e)))
                .collect(),
        }
    }
}

/// Files written by [`emit_reports`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportPaths {
    pub runs_csv: PathBuf,
    pub summary_json: PathBuf,
    pub cost_trace_csv: PathBuf,
}

impl ReportPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            runs_csv: dir.join("runs.csv"),
            summary_json: dir.join("summary.json"),
            cost_trace_csv: dir.join("cost_trace.csv"),
        }
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, HarnessError> {
    csv::Writer::from_path(path).map_err(|source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

fn write_rows(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), HarnessError> {
    let mut w = csv_writer(path)?;
    let csv_err = |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    };
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

/// Writes `runs.csv` (one row per run and sensor), `summary.json` and
/// `cost_trace.csv` (iteration 0 is the cost before calibration) into `dir`.
pub fn emit_reports(report: &ErrorReport, dir: &Path) -> Result<ReportPaths, HarnessError> {
    create_dir(dir)?;
    let paths = ReportPaths::in_dir(dir);
    let s_count = report.config.sensors.count;

    let mut rows = Vec::with_capacity(report.runs.len() * s_count);
    for r in &report.runs {
        for s in 0..s_count {
            let mut row = vec![r.run_id.to_string(), s.to_string()];
            match r.errors.get(s) {
                Some(e) => {
                    row.extend([e.yaw_mrad, e.pitch_mrad, e.roll_mrad, e.geodesic_mrad].map(|v| v.to_string()));
                    row.extend([r.iterations.to_string(), r.final_cost().to_string()]);
                }
                None => row.extend(std::iter::repeat_n(String::new(), 6)),
            }
            rows.push(row);
        }
    }
    write_rows(
        &paths.runs_csv,
        &[
            "run_id",
            "sensor_id",
            "yaw_err_mrad",
            "pitch_err_mrad",
            "roll_err_mrad",
            "geodesic_err_mrad",
            "iterations",
            "final_cost",
        ],
        rows,
    )?;

    let mut rows = Vec::new();
    for r in report.successful_runs() {
        let trace = std::iter::once(r.initial_cost).chain(r.cost_trace.iter().copied());
        for (k, c) in trace.enumerate() {
            rows.push(vec![r.run_id.to_string(), k.to_string(), c.to_string()]);
        }
    }
    write_rows(&paths.cost_trace_csv, &["run_id", "iteration", "cost"], rows)?;

    write_json(&paths.summary_json, &Summary::of(report))?;
    Ok(paths)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Writes `sweep.csv` (one row per axis value, preceded by a `#` line with
/// the seed policy) plus the full report set of every point in
/// `<dir>/<axis>_<value>/`.
pub fn emit_sweep(table: &SweepTable, dir: &Path) -> Result<PathBuf, HarnessError> {
    create_dir(dir)?;
    let path = dir.join("sweep.csv");
    let mut file = fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
    writeln!(file, "# {}", SEED_POLICY).map_err(|e| HarnessError::io(&path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |source| HarnessError::Csv {
        path: path.clone(),
        source,
    };
    w.write_record([
        table.axis.name(),
        "success_rate",
        "rms_yaw_mrad",
        "rms_pitch_mrad",
        "rms_roll_mrad",
        "rms_geodesic_mrad",
        "mean_iterations",
    ])
    .map_err(csv_err)?;
    for (value, report) in table.values.iter().zip(&table.reports) {
        let ok: Vec<_> = report.successful_runs().collect();
        let mean_iter = ok.iter().map(|r| r.iterations as f64).sum::<f64>() / ok.len().max(1) as f64;
        let rms = report.rms_mrad;
        w.write_record(
            [
                *value,
                report.success_rate,
                rms.yaw,
                rms.pitch,
                rms.roll,
                rms.geodesic,
                mean_iter,
            ]
            .map(|v| v.to_string()),
        )
        .map_err(csv_err)?;
        emit_reports(report, &dir.join(format!("{}_{}", table.axis.name(), value)))?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(alg: Algorithm, count: usize) -> ExperimentConfig {
        ExperimentConfig {
            algorithm: alg,
            sensors: SensorConfig {
                count,
                ..Default::default()
            },
            mc_runs: 4,
            ..Default::default()
        }
    }

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"mc_run": 3}"#).is_err());
    }

    #[test]
    fn summary_body_parses_as_config() {
        let cfg = ExperimentConfig {
            seed: 17,
            mc_runs: 3,
            ..Default::default()
        };
        let wrapped = serde_json::json!({ "config": cfg, "success_rate": 1.0 }).to_string();
        assert_eq!(ExperimentConfig::from_json(&wrapped).unwrap(), cfg);
    }

    #[test]
    fn kinds_follow_the_algorithm() {
        assert_eq!(small(Algorithm::Absolute2d, 3).kinds(), vec![SensorKind::TwoD; 3]);
        assert_eq!(
            small(Algorithm::RelativeHetero, 2).kinds(),
            vec![SensorKind::TwoD, SensorKind::ThreeD]
        );
        let mut cfg = small(Algorithm::Absolute2d, 3);
        cfg.sensors.kind = Some(SensorKind::ThreeD);
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = ExperimentConfig {
            mc_runs: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.mc_runs = 1;
        cfg.sample_count = Some(1);
        assert!(cfg.validate().is_err());
        cfg.sample_count = Some(92);
        assert!(cfg.validate().is_err());
        cfg.sample_count = None;
        cfg.bias = BiasModel::Fixed {
            degrees: vec![[1.0, 2.0, 3.0]],
        };
        assert!(cfg.validate().is_err());
        cfg.bias = BiasModel::UniformMagnitude {
            min_deg: 3.0,
            max_deg: 1.0,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn even_down_sampling() {
        assert_eq!(evenly_spaced(91, 10), vec![0, 10, 20, 30, 40, 50, 60, 70, 80, 90]);
        assert_eq!(evenly_spaced(5, 5), vec![0, 1, 2, 3, 4]);
        assert_eq!(evenly_spaced(91, 2), vec![0, 90]);
    }

    #[test]
    fn relative_reference_is_unbiased() {
        let cfg = small(Algorithm::Relative3d, 2);
        let b = cfg.biases(3);
        assert_eq!(b[1], EulerAngles::default());
        assert!(b[0].yaw.abs() >= 1f64.to_radians() - 1e-12);
    }

    #[test]
    fn down_sampled_runs_share_noise() {
        let full = ExperimentConfig::default();
        let reduced = ExperimentConfig {
            sample_count: Some(10),
            ..full.clone()
        };
        let locs = full.locations().unwrap();
        let (a, _) = simulate_run(&full, &locs, 2).unwrap();
        let (b, truth) = simulate_run(&reduced, &locs, 2).unwrap();
        assert_eq!(b.len(), 10);
        assert_eq!(truth.targets.len(), 10);
        for (k, i) in evenly_spaced(91, 10).into_iter().enumerate() {
            assert_eq!(a.sensors()[1].measurements[i], b.sensors()[1].measurements[k]);
        }
    }

    #[test]
    fn noiseless_3d_experiment_is_exact() {
        let mut cfg = small(Algorithm::Absolute3d, 3);
        cfg.noise = NoiseConfig {
            sigma_range_m: 0.0,
            sigma_az_mrad: 0.0,
            sigma_el_mrad: 0.0,
        };
        cfg.stopping = StoppingCriteria {
            rel_cost_tol: 1e-12,
            max_iterations: 500,
        };
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.runs.len(), 4);
        assert_eq!(report.success_rate, 1.0);
        assert!(report.rms_mrad.max_angle() < 1e-6, "{:?}", report.rms_mrad);
    }

    #[test]
    fn rms_definition() {
        let e = |v: f64| SensorError {
            yaw_mrad: v,
            pitch_mrad: -v,
            roll_mrad: 0.0,
            geodesic_mrad: v,
        };
        let errs = [e(3.0), e(4.0)];
        let rms = RmsErrors::from_errors(errs.iter());
        assert!((rms.yaw - 12.5f64.sqrt()).abs() < 1e-12);
        assert!((rms.pitch - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(rms.roll, 0.0);
    }

    #[test]
    fn failures_are_recorded_up_to_the_threshold() {
        // A sensor sitting on the first target position cannot observe it.
        let mut cfg = small(Algorithm::Relative3d, 2);
        cfg.sensors.placement = Placement::Fixed {
            locations_m: vec![[0.0, 0.0, -1000.0], [5000.0, 0.0, 0.0]],
        };
        let err = run_experiment(&cfg).unwrap_err();
        assert!(
            matches!(err, HarnessError::TooManyFailures { succeeded: 0, total: 4 }),
            "{err}"
        );
    }

    #[test]
    fn sweep_axis_parsing_and_application() {
        assert_eq!("noise-std".parse::<SweepAxis>().unwrap(), SweepAxis::NoiseStd);
        let cfg = SweepAxis::NoiseStd.apply(&ExperimentConfig::default(), 5.0).unwrap();
        assert_eq!(cfg.noise.sigma_az_mrad, 5.0);
        assert_eq!(cfg.noise.sigma_el_mrad, 5.0);
        assert!(SweepAxis::SensorCount.apply(&cfg, 3.5).is_err());
    }
}
