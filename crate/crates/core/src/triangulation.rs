//! Angle-only triangulation.
//!
//! Given azimuth/elevation pairs from two or more sensors at known locations,
//! finds the point minimizing the sum of squared (wrapped) angle residuals with
//! a damped Gauss-Newton iteration, then rebuilds each sensor's local position
//! estimate from its own angles and the range to that point.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use thiserror::Error;

use crate::geometry::{direction_from_angles, wrap_angle, Vec3};

/// Minimum separation between two sensor locations, meters.
pub const MIN_SENSOR_SEPARATION: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TriangulationError {
    #[error("at least 2 bearings are required, got {0}")]
    TooFewBearings(usize),
    #[error("sensors {first} and {second} share a location")]
    CoincidentSensors { first: usize, second: usize },
    #[error("bearing or location is not finite")]
    NonFinite,
    #[error("normal matrix condition number {condition:e} exceeds the limit")]
    IllConditioned { condition: f64 },
    #[error("no convergence after {iterations} iterations (cost {cost:e} rad^2)")]
    NoConvergence { iterations: usize, cost: f64 },
}

/// One sensor's line of sight: angles in the global frame and the sensor
/// location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bearing {
    pub azimuth: f64,
    pub elevation: f64,
    pub location: Vec3,
}

impl Bearing {
    pub fn new(azimuth: f64, elevation: f64, location: Vec3) -> Self {
        Self {
            azimuth,
            elevation,
            location,
        }
    }

    /// The exact bearing from `location` towards `point`.
    pub fn towards(location: Vec3, point: &Vec3) -> Self {
        let [azimuth, elevation] = predicted_angles(&location, point);
        Self {
            azimuth,
            elevation,
            location,
        }
    }

    pub fn direction(&self) -> Vec3 {
        direction_from_angles(self.azimuth, self.elevation)
    }
}

/// Bearings of a single target from `S >= 2` distinct sensor locations.
#[derive(Debug, Clone, PartialEq)]
pub struct BearingSet {
    bearings: Vec<Bearing>,
}

impl BearingSet {
    pub fn new(bearings: Vec<Bearing>) -> Result<Self, TriangulationError> {
        if bearings.len() < 2 {
            return Err(TriangulationError::TooFewBearings(bearings.len()));
        }
        let finite = bearings
            .iter()
            .all(|b| b.azimuth.is_finite() && b.elevation.is_finite() && b.location.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(TriangulationError::NonFinite);
        }
        for (first, a) in bearings.iter().enumerate() {
            for (second, b) in bearings.iter().enumerate().skip(first + 1) {
                if (a.location - b.location).norm() < MIN_SENSOR_SEPARATION {
                    return Err(TriangulationError::CoincidentSensors { first, second });
                }
            }
        }
        Ok(Self { bearings })
    }

    pub fn bearings(&self) -> &[Bearing] {
        &self.bearings
    }

    pub fn len(&self) -> usize {
        self.bearings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bearings.is_empty()
    }

    /// Stacked residuals `wrap(measured - predicted)`, azimuth then elevation
    /// for each sensor.
    pub fn residuals(&self, point: &Vec3) -> DVector<f64> {
        let mut r = DVector::zeros(2 * self.bearings.len());
        for (k, b) in self.bearings.iter().enumerate() {
            let [az, el] = predicted_angles(&b.location, point);
            r[2 * k] = wrap_angle(b.azimuth - az);
            r[2 * k + 1] = wrap_angle(b.elevation - el);
        }
        r
    }

    /// Jacobian of [`BearingSet::residuals`] with respect to the point.
    pub fn residual_jacobian(&self, point: &Vec3) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(2 * self.bearings.len(), 3);
        for (k, b) in self.bearings.iter().enumerate() {
            let [d_az, d_el] = angle_gradients(&b.location, point);
            for c in 0..3 {
                j[(2 * k, c)] = -d_az[c];
                j[(2 * k + 1, c)] = -d_el[c];
            }
        }
        j
    }

    pub fn cost(&self, point: &Vec3) -> f64 {
        self.residuals(point).norm_squared()
    }
}

/// Result of [`triangulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct TriangulationFix {
    /// Triangulated point, global frame.
    pub point: Vec3,
    /// Per-sensor position estimates `r_s * dir(az_s, el_s)` built from the
    /// input angles, in the same order as the bearings.
    pub local_estimates: Vec<Vec3>,
    /// `|point - location_s|`.
    pub ranges: Vec<f64>,
    /// Sum of squared angle residuals at `point`, rad^2.
    pub residual_cost: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangulationOptions {
    pub initial_damping: f64,
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this, rad^2.
    pub cost_tol: f64,
    /// Stop once the step length falls below this, meters.
    pub step_tol: f64,
    pub max_condition: f64,
}

impl Default for TriangulationOptions {
    fn default() -> Self {
        Self {
            initial_damping: 1e-3,
            max_iterations: 50,
            cost_tol: 1e-12,
            step_tol: 1e-9,
            max_condition: 1e12,
        }
    }
}

pub fn triangulate(bearings: &BearingSet) -> Result<TriangulationFix, TriangulationError> {
    triangulate_with(bearings, &TriangulationOptions::default())
}

pub fn triangulate_with(
    bearings: &BearingSet,
    opts: &TriangulationOptions,
) -> Result<TriangulationFix, TriangulationError> {
    let mut point = initial_point(bearings);
    let mut cost = bearings.cost(&point);
    let mut damping = opts.initial_damping;
    let mut converged = cost == 0.0;
    let mut iterations = 0;

    while !converged && iterations < opts.max_iterations {
        iterations += 1;
        let (normal, gradient) = normal_equations(bearings, &point);
        if normal.iter().any(|v| !v.is_finite()) || gradient.iter().any(|v| !v.is_finite()) {
            return Err(TriangulationError::NonFinite);
        }
        let condition = condition_number(&normal);
        if condition > opts.max_condition {
            return Err(TriangulationError::IllConditioned { condition });
        }

        let mut damped = normal;
        for k in 0..3 {
            damped[(k, k)] += damping * normal[(k, k)];
        }
        let step = match damped.cholesky() {
            Some(chol) => -chol.solve(&gradient),
            None => {
                return Err(TriangulationError::IllConditioned {
                    condition: f64::INFINITY,
                })
            }
        };
        let step_len = step.norm();
        let candidate = point + step;
        let candidate_cost = bearings.cost(&candidate);

        if candidate_cost < cost {
            let decrease = cost - candidate_cost;
            point = candidate;
            cost = candidate_cost;
            damping /= 10.0;
            converged = decrease < opts.cost_tol || step_len < opts.step_tol || cost == 0.0;
        } else {
            damping *= 10.0;
            converged = step_len < opts.step_tol;
        }
    }

    if !converged {
        return Err(TriangulationError::NoConvergence { iterations, cost });
    }

    let ranges: Vec<f64> = bearings.bearings.iter().map(|b| (point - b.location).norm()).collect();
    let local_estimates = bearings
        .bearings
        .iter()
        .zip(&ranges)
        .map(|(b, r)| *r * b.direction())
        .collect();
    Ok(TriangulationFix {
        point,
        local_estimates,
        ranges,
        residual_cost: cost,
        iterations,
    })
}

/// Azimuth and elevation of `point` as seen from `location`.
fn predicted_angles(location: &Vec3, point: &Vec3) -> [f64; 2] {
    let d = point - location;
    [wrap_angle(d.y.atan2(d.x)), d.z.atan2(d.x.hypot(d.y))]
}

/// Gradients of the predicted azimuth and elevation with respect to `point`.
fn angle_gradients(location: &Vec3, point: &Vec3) -> [Vec3; 2] {
    let d = point - location;
    let h2 = d.x * d.x + d.y * d.y;
    let h = h2.sqrt();
    let r2 = h2 + d.z * d.z;
    let d_az = Vec3::new(-d.y / h2, d.x / h2, 0.0);
    let d_el = Vec3::new(-d.z * d.x / (h * r2), -d.z * d.y / (h * r2), h / r2);
    [d_az, d_el]
}

/// `J^T J` and `J^T r` accumulated without forming the stacked Jacobian.
fn normal_equations(bearings: &BearingSet, point: &Vec3) -> (Matrix3<f64>, Vec3) {
    let mut normal = Matrix3::zeros();
    let mut gradient = Vec3::zeros();
    for b in &bearings.bearings {
        let [az, el] = predicted_angles(&b.location, point);
        let residual = [wrap_angle(b.azimuth - az), wrap_angle(b.elevation - el)];
        for (row, res) in angle_gradients(&b.location, point).iter().zip(residual) {
            // Residual Jacobian rows are the negated angle gradients.
            normal += row * row.transpose();
            gradient -= row * res;
        }
    }
    (normal, gradient)
}

fn condition_number(m: &Matrix3<f64>) -> f64 {
    let eig = SymmetricEigen::new(*m).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Midpoint of the common perpendicular of the first two rays. Falls back to
/// the sensor centroid pushed 1 km along the mean line of sight when the rays
/// are near parallel or meet behind a sensor.
fn initial_point(bearings: &BearingSet) -> Vec3 {
    let b = &bearings.bearings;
    let (o1, d1) = (b[0].location, b[0].direction());
    let (o2, d2) = (b[1].location, b[1].direction());
    let w0 = o1 - o2;
    let cos = d1.dot(&d2);
    let denom = 1.0 - cos * cos;
    if denom > 1e-10 {
        let (e1, e2) = (d1.dot(&w0), d2.dot(&w0));
        let t1 = (cos * e2 - e1) / denom;
        let t2 = (e2 - cos * e1) / denom;
        if t1 > 0.0 && t2 > 0.0 {
            return 0.5 * ((o1 + t1 * d1) + (o2 + t2 * d2));
        }
    }

    let n = b.len() as f64;
    let centroid = b.iter().map(|x| x.location).sum::<Vec3>() / n;
    let mean_dir = b.iter().map(|x| x.direction()).sum::<Vec3>();
    let dir = if mean_dir.norm() > 1e-9 {
        mean_dir.normalize()
    } else {
        d1
    };
    centroid + 1000.0 * dir
}
