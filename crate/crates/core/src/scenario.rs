//! Synthetic scenario generation: a climbing racetrack target, a sensor
//! constellation with injected misalignments, and noisy measurements.
//!
//! All randomness comes from ChaCha8 generators seeded by a SplitMix64 hash
//! of `(master seed, domain, indices)`, so every draw is addressable on its
//! own: the noise on sensor `s`, epoch `i`, channel `c` of run `r` does not
//! depend on how many sensors, epochs or runs are generated, or in what order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CalibrationError, MeasurementBatch, SensorKind, SensorTrack};
use crate::geometry::{
    cart_to_spherical, nearly_collinear, wrap_angle, EulerAngles, GeometryError, Measurement, RotationMatrix, Vec3,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("sensor {sensor}, epoch {epoch}: {source}")]
    Observation {
        sensor: usize,
        epoch: usize,
        source: GeometryError,
    },
    #[error(transparent)]
    Batch(#[from] CalibrationError),
}

/// One segment of the horizontal flight plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Leg {
    Straight {
        duration_s: f64,
    },
    /// Coordinated turn; positive rates turn from +x towards +y.
    Turn {
        duration_s: f64,
        rate_deg_s: f64,
    },
}

impl Leg {
    fn duration(&self) -> f64 {
        match *self {
            Leg::Straight { duration_s } | Leg::Turn { duration_s, .. } => duration_s,
        }
    }

    fn rate(&self) -> f64 {
        match *self {
            Leg::Straight { .. } => 0.0,
            Leg::Turn { rate_deg_s, .. } => rate_deg_s.to_radians(),
        }
    }
}

/// Target flight plan. The leg list repeats until `duration_s` is covered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySpec {
    /// Initial position, NED meters.
    pub start_m: [f64; 3],
    /// Initial heading, degrees from +x towards +y.
    pub heading_deg: f64,
    /// Climb rate (altitude gain, i.e. decreasing down coordinate), m/s.
    pub vertical_speed_mps: f64,
    pub horizontal_speed_mps: f64,
    pub duration_s: f64,
    pub sample_period_s: f64,
    pub legs: Vec<Leg>,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            start_m: [0.0, 0.0, -1000.0],
            heading_deg: 0.0,
            vertical_speed_mps: 10.0,
            horizontal_speed_mps: 100.0,
            duration_s: 900.0,
            sample_period_s: 10.0,
            legs: vec![
                Leg::Straight { duration_s: 120.0 },
                Leg::Turn {
                    duration_s: 60.0,
                    rate_deg_s: 3.0,
                },
                Leg::Straight { duration_s: 120.0 },
                Leg::Turn {
                    duration_s: 60.0,
                    rate_deg_s: 3.0,
                },
            ],
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |msg: String| Err(ScenarioError::InvalidSpec(msg));
        if !(self.horizontal_speed_mps > 0.0) || !(self.vertical_speed_mps > 0.0) {
            return bad("speeds must be positive".into());
        }
        if !(self.sample_period_s > 0.0) || !(self.duration_s >= 0.0) {
            return bad("sample period must be positive and duration non-negative".into());
        }
        let steps = self.duration_s / self.sample_period_s;
        if (steps - steps.round()).abs() > 1e-9 {
            return bad(format!(
                "duration {} s is not a multiple of the sample period {} s",
                self.duration_s, self.sample_period_s
            ));
        }
        if self.legs.is_empty() || self.legs.iter().any(|l| !(l.duration() > 0.0)) {
            return bad("legs must be non-empty with positive durations".into());
        }
        if !self.start_m.iter().chain([&self.heading_deg]).all(|v| v.is_finite()) {
            return bad("start position and heading must be finite".into());
        }
        Ok(())
    }

    /// Number of samples, `duration / period + 1`.
    pub fn sample_count(&self) -> usize {
        (self.duration_s / self.sample_period_s).round() as usize + 1
    }

    /// Position and velocity at time `t` seconds.
    pub fn state_at(&self, t: f64) -> (Vec3, Vec3) {
        let v = self.horizontal_speed_mps;
        let mut x = self.start_m[0];
        let mut y = self.start_m[1];
        let mut heading = self.heading_deg.to_radians();
        let mut remaining = t;
        for leg in self.legs.iter().cycle() {
            let dt = remaining.min(leg.duration());
            let rate = leg.rate();
            if rate == 0.0 {
                x += v * dt * heading.cos();
                y += v * dt * heading.sin();
            } else {
                let end = heading + rate * dt;
                x += v / rate * (end.sin() - heading.sin());
                y += v / rate * (heading.cos() - end.cos());
                heading = end;
            }
            remaining -= dt;
            if remaining <= 0.0 {
                break;
            }
        }
        let z = self.start_m[2] - self.vertical_speed_mps * t;
        let position = Vec3::new(x, y, z);
        let velocity = Vec3::new(v * heading.cos(), v * heading.sin(), -self.vertical_speed_mps);
        (position, velocity)
    }
}

/// Target positions at every sample time, global frame.
pub fn generate_trajectory(spec: &TrajectorySpec) -> Result<Vec<Vec3>, ScenarioError> {
    spec.validate()?;
    Ok((0..spec.sample_count())
        .map(|k| spec.state_at(k as f64 * spec.sample_period_s).0)
        .collect())
}

/// Measurement noise standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma_range_m: f64,
    pub sigma_az_rad: f64,
    pub sigma_el_rad: f64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let all = [self.sigma_range_m, self.sigma_az_rad, self.sigma_el_rad];
        if all.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(ScenarioError::InvalidSpec(
                "noise standard deviations must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Simulated sensor: location, kind, true misalignment and noise.
///
/// The sensor reports `R(bias)^T (p0 - location)` (plus noise), so the
/// rotation a calibration should recover is `A_s = R(bias)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorTruth {
    pub location: Vec3,
    pub kind: SensorKind,
    pub bias: EulerAngles,
    pub noise: NoiseSpec,
}

impl SensorTruth {
    /// The rotation `A_s` that undoes this sensor's misalignment.
    pub fn correction(&self) -> RotationMatrix {
        RotationMatrix::from_euler(self.bias)
    }
}

/// Unit-variance Gaussian draws for the range, azimuth and elevation channels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseDraw {
    pub range: f64,
    pub azimuth: f64,
    pub elevation: f64,
}

/// Measurement of the global point `p0` by `sensor`, with the unit draws
/// scaled by the sensor's standard deviations.
pub fn observe(p0: &Vec3, sensor: &SensorTruth, draw: &NoiseDraw) -> Result<Measurement, GeometryError> {
    let local = sensor.correction().transpose() * (p0 - sensor.location);
    let clean = cart_to_spherical(&local)?;
    let range = match sensor.kind {
        SensorKind::ThreeD => clean.range.map(|r| r + sensor.noise.sigma_range_m * draw.range),
        SensorKind::TwoD => None,
    };
    Ok(Measurement {
        range,
        azimuth: wrap_angle(clean.azimuth + sensor.noise.sigma_az_rad * draw.azimuth),
        elevation: clean.elevation + sensor.noise.sigma_el_rad * draw.elevation,
    })
}

/// Independent random streams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScenarioSeed(pub u64);

/// What a substream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamDomain {
    Noise = 1,
    Bias = 2,
    Placement = 3,
}

impl ScenarioSeed {
    pub fn substream(&self, domain: StreamDomain, indices: [u64; 4]) -> ChaCha8Rng {
        let mut h = splitmix64(self.0 ^ splitmix64(domain as u64));
        for i in indices {
            h = splitmix64(h ^ i);
        }
        ChaCha8Rng::seed_from_u64(h)
    }

    /// Unit Gaussian draws for `(run, sensor, epoch)`, one stream per channel.
    pub fn noise_draw(&self, run: u64, sensor: usize, epoch: usize) -> NoiseDraw {
        let channel = |c: u64| -> f64 {
            self.substream(StreamDomain::Noise, [run, sensor as u64, epoch as u64, c])
                .sample(StandardNormal)
        };
        NoiseDraw {
            range: channel(0),
            azimuth: channel(1),
            elevation: channel(2),
        }
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything the scorer needs and the calibration must never see.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub targets: Vec<Vec3>,
    pub biases: Vec<EulerAngles>,
}

impl GroundTruth {
    pub fn corrections(&self) -> Vec<RotationMatrix> {
        self.biases.iter().map(|b| RotationMatrix::from_euler(*b)).collect()
    }
}

/// Observes every trajectory sample with every sensor. Noise for run `run`
/// comes from `seed`'s per-(run, sensor, epoch, channel) substreams.
pub fn build_batch(
    spec: &TrajectorySpec,
    sensors: &[SensorTruth],
    seed: ScenarioSeed,
    run: u64,
) -> Result<(MeasurementBatch, GroundTruth), ScenarioError> {
    let targets = generate_trajectory(spec)?;
    if sensors.is_empty() {
        return Err(ScenarioError::InvalidSpec("no sensors".into()));
    }
    let tracks = sensors
        .iter()
        .enumerate()
        .map(|(s, sensor)| {
            sensor.noise.validate()?;
            let measurements = targets
                .iter()
                .enumerate()
                .map(|(i, p0)| {
                    observe(p0, sensor, &seed.noise_draw(run, s, i)).map_err(|source| ScenarioError::Observation {
                        sensor: s,
                        epoch: i,
                        source,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SensorTrack {
                location: sensor.location,
                kind: sensor.kind,
                measurements,
            })
        })
        .collect::<Result<Vec<_>, ScenarioError>>()?;
    let batch = MeasurementBatch::new(tracks)?;
    let truth = GroundTruth {
        targets,
        biases: sensors.iter().map(|s| s.bias).collect(),
    };
    Ok((batch, truth))
}

/// Axis-aligned placement box for random sensor layouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlacementBox {
    /// Horizontal extent along x and y, centered on the trajectory, meters.
    pub horizontal_extent_m: f64,
    /// Sensors sit between the ground (z = 0) and this height, meters.
    pub max_height_m: f64,
}

impl Default for PlacementBox {
    fn default() -> Self {
        Self {
            horizontal_extent_m: 20_000.0,
            max_height_m: 1000.0,
        }
    }
}

/// Seeded random sensor locations inside `placement`, centered on the
/// horizontal bounding box of `targets`. Location `k` depends only on the
/// seed and the attempt number, so a smaller constellation is a prefix of a
/// larger one unless the collinearity check forces a redraw.
pub fn random_locations(
    count: usize,
    targets: &[Vec3],
    placement: &PlacementBox,
    seed: ScenarioSeed,
) -> Result<Vec<Vec3>, ScenarioError> {
    if targets.is_empty() {
        return Err(ScenarioError::InvalidSpec("empty trajectory".into()));
    }
    let (mut lo, mut hi) = (targets[0], targets[0]);
    for p in targets {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let center = 0.5 * (lo + hi);
    let half = 0.5 * placement.horizontal_extent_m;

    for attempt in 0..1000u64 {
        let locations: Vec<Vec3> = (0..count as u64)
            .map(|k| {
                let mut rng = seed.substream(StreamDomain::Placement, [attempt, k, 0, 0]);
                Vec3::new(
                    center.x + rng.random_range(-half..=half),
                    center.y + rng.random_range(-half..=half),
                    -rng.random_range(0.0..=placement.max_height_m),
                )
            })
            .collect();
        if count < 3 || !nearly_collinear(&locations, 0.01) {
            return Ok(locations);
        }
    }
    Err(ScenarioError::InvalidSpec(
        "could not place non-collinear sensors".into(),
    ))
}

/// Misalignment with every angle's magnitude uniform in
/// `[min_deg, max_deg]` and a random sign.
pub fn random_bias(min_deg: f64, max_deg: f64, seed: ScenarioSeed, run: u64, sensor: usize) -> EulerAngles {
    let mut rng = seed.substream(StreamDomain::Bias, [run, sensor as u64, 0, 0]);
    let mut angle = || {
        let magnitude = rng.random_range(min_deg..=max_deg);
        if rng.random_bool(0.5) {
            magnitude
        } else {
            -magnitude
        }
    };
    EulerAngles::from_degrees(angle(), angle(), angle())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn default_trajectory_shape() {
        let spec = TrajectorySpec::default();
        let pts = generate_trajectory(&spec).unwrap();
        assert_eq!(pts.len(), 91);
        for w in pts.windows(2) {
            assert_abs_diff_eq!(w[0].z - w[1].z, 100.0, epsilon = 1e-9);
        }
        // First straight leg: samples 0..=12 cover 0..120 s.
        for w in pts[..13].windows(2) {
            let d = w[1] - w[0];
            assert_abs_diff_eq!(d.xy().norm(), 1000.0, epsilon = 1e-6);
        }
        for k in 0..pts.len() {
            let (_, v) = spec.state_at(k as f64 * 10.0);
            assert_abs_diff_eq!(v.xy().norm(), 100.0, epsilon = 1e-9);
        }
        // After a full racetrack lap the heading is +x again and y is back to 0.
        let (p, v) = spec.state_at(360.0);
        assert_abs_diff_eq!(p.y, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(v.x, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn trajectory_validation() {
        let mut spec = TrajectorySpec {
            sample_period_s: 7.0,
            ..Default::default()
        };
        assert!(generate_trajectory(&spec).is_err());
        spec.sample_period_s = 10.0;
        spec.horizontal_speed_mps = 0.0;
        assert!(generate_trajectory(&spec).is_err());
        let spec = TrajectorySpec {
            legs: vec![],
            ..Default::default()
        };
        assert!(generate_trajectory(&spec).is_err());
    }

    fn sensor(bias: EulerAngles, noise: NoiseSpec) -> SensorTruth {
        SensorTruth {
            location: Vec3::zeros(),
            kind: SensorKind::ThreeD,
            bias,
            noise,
        }
    }

    #[test]
    fn observe_cases() {
        let s = sensor(EulerAngles::default(), NoiseSpec::default());
        let m = observe(&Vec3::x(), &s, &NoiseDraw::default()).unwrap();
        assert_eq!(m, Measurement::new(1.0, 0.0, 0.0));

        let s = sensor(EulerAngles::from_degrees(10.0, 0.0, 0.0), NoiseSpec::default());
        let m = observe(&Vec3::x(), &s, &NoiseDraw::default()).unwrap();
        assert_abs_diff_eq!(m.azimuth, -10f64.to_radians(), epsilon = 1e-15);

        let two_d = SensorTruth {
            kind: SensorKind::TwoD,
            ..s
        };
        assert_eq!(observe(&Vec3::x(), &two_d, &NoiseDraw::default()).unwrap().range, None);
        assert!(observe(&Vec3::zeros(), &s, &NoiseDraw::default()).is_err());
    }

    #[test]
    fn noiseless_observation_inverts() {
        let s = SensorTruth {
            location: Vec3::new(300.0, -4000.0, -20.0),
            kind: SensorKind::ThreeD,
            bias: EulerAngles::from_degrees(3.0, -2.5, 1.0),
            noise: NoiseSpec::default(),
        };
        for p0 in generate_trajectory(&TrajectorySpec::default()).unwrap() {
            let m = observe(&p0, &s, &NoiseDraw::default()).unwrap();
            let local = crate::geometry::spherical_to_cart(&m).unwrap();
            assert!((s.correction() * local + s.location - p0).norm() < 1e-9);
        }
    }

    #[test]
    fn azimuth_noise_statistics() {
        let noise = NoiseSpec {
            sigma_range_m: 10.0,
            sigma_az_rad: 3e-3,
            sigma_el_rad: 3e-3,
        };
        let s = sensor(EulerAngles::default(), noise);
        let seed = ScenarioSeed(17);
        let p0 = Vec3::new(5000.0, 5000.0, -1000.0);
        let clean = observe(&p0, &s, &NoiseDraw::default()).unwrap();
        let errs: Vec<f64> = (0..10_000)
            .map(|i| wrap_angle(observe(&p0, &s, &seed.noise_draw(0, 0, i)).unwrap().azimuth - clean.azimuth))
            .collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let std = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (errs.len() - 1) as f64).sqrt();
        assert!((2.9e-3..=3.1e-3).contains(&std), "std {std}");
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn noise_streams_are_uncorrelated() {
        let seed = ScenarioSeed(99);
        let n = 10_000;
        let s0: Vec<f64> = (0..n).map(|i| seed.noise_draw(0, 0, i).azimuth).collect();
        let s1: Vec<f64> = (0..n).map(|i| seed.noise_draw(0, 1, i).azimuth).collect();
        let el: Vec<f64> = (0..n).map(|i| seed.noise_draw(0, 0, i).elevation).collect();
        let next: Vec<f64> = (1..=n).map(|i| seed.noise_draw(0, 0, i).azimuth).collect();
        let run1: Vec<f64> = (0..n).map(|i| seed.noise_draw(1, 0, i).azimuth).collect();
        for other in [&s1, &el, &next, &run1] {
            assert!(correlation(&s0, other).abs() < 0.05);
        }
    }

    #[test]
    fn batch_is_deterministic() {
        let spec = TrajectorySpec::default();
        let targets = generate_trajectory(&spec).unwrap();
        let seed = ScenarioSeed(5);
        let noise = NoiseSpec {
            sigma_range_m: 10.0,
            sigma_az_rad: 3e-3,
            sigma_el_rad: 3e-3,
        };
        let sensors: Vec<SensorTruth> = random_locations(3, &targets, &PlacementBox::default(), seed)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(k, location)| SensorTruth {
                location,
                kind: SensorKind::ThreeD,
                bias: random_bias(1.0, 4.0, seed, 0, k),
                noise,
            })
            .collect();
        let (a, truth) = build_batch(&spec, &sensors, seed, 0).unwrap();
        let (b, _) = build_batch(&spec, &sensors, seed, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.sensor_count(), a.len()), (3, 91));
        assert_eq!(truth.targets.len(), 91);
        let (c, _) = build_batch(&spec, &sensors, seed, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn layouts_are_non_collinear_prefixes() {
        let targets = generate_trajectory(&TrajectorySpec::default()).unwrap();
        let seed = ScenarioSeed(11);
        let eight = random_locations(8, &targets, &PlacementBox::default(), seed).unwrap();
        let three = random_locations(3, &targets, &PlacementBox::default(), seed).unwrap();
        assert_eq!(&eight[..3], &three[..]);
        let [major, middle, _] = crate::geometry::principal_extents(&eight);
        assert!(middle > 0.01 * major);
        for p in &eight {
            assert!(p.z <= 0.0 && p.z >= -1000.0);
        }
    }

    #[test]
    fn bias_magnitudes_in_range() {
        let seed = ScenarioSeed(3);
        for run in 0..50 {
            for a in random_bias(1.0, 4.0, seed, run, 2).to_degrees() {
                assert!((1.0..=4.0).contains(&a.abs()), "{a}");
            }
        }
    }
}
