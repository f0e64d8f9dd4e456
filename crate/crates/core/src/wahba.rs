//! Optimal rotation between matched vector sets.
//!
//! Solves `min_R sum_i w_i |R x_i - y_i|^2` over proper rotations with the
//! determinant-corrected orthogonal Procrustes construction: with
//! `B = sum_i w_i y_i x_i^T = U S V^T`, the minimizer is
//! `R = U diag(1, 1, det(U) det(V)) V^T`.

use nalgebra::Matrix3;
use thiserror::Error;

use crate::geometry::{RotationMatrix, Vec3};

/// Relative singular-value threshold below which the attitude profile matrix
/// is treated as rank deficient.
pub const DEGENERACY_RATIO: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WahbaError {
    #[error("vector sets differ in length ({xs} vs {ys})")]
    LengthMismatch { xs: usize, ys: usize },
    #[error("weights length {weights} does not match {pairs} pairs")]
    WeightLengthMismatch { weights: usize, pairs: usize },
    #[error("at least 2 vector pairs are required, got {0}")]
    TooFewPairs(usize),
    #[error("weights must be finite and non-negative")]
    InvalidWeight,
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("rotation is not uniquely determined (singular values {singular_values:?})")]
    DegenerateInput { singular_values: [f64; 3] },
}

/// Matched vectors `x_i -> y_i` with optional non-negative weights.
#[derive(Debug, Clone, Copy)]
pub struct VectorPairSet<'a> {
    xs: &'a [Vec3],
    ys: &'a [Vec3],
    weights: Option<&'a [f64]>,
}

impl<'a> VectorPairSet<'a> {
    pub fn new(xs: &'a [Vec3], ys: &'a [Vec3]) -> Result<Self, WahbaError> {
        if xs.len() != ys.len() {
            return Err(WahbaError::LengthMismatch {
                xs: xs.len(),
                ys: ys.len(),
            });
        }
        if xs.len() < 2 {
            return Err(WahbaError::TooFewPairs(xs.len()));
        }
        Ok(Self { xs, ys, weights: None })
    }

    pub fn with_weights(mut self, weights: &'a [f64]) -> Result<Self, WahbaError> {
        if weights.len() != self.xs.len() {
            return Err(WahbaError::WeightLengthMismatch {
                weights: weights.len(),
                pairs: self.xs.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(WahbaError::InvalidWeight);
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[i])
    }

    /// `sum_i w_i |R x_i - y_i|^2`.
    pub fn cost(&self, r: &RotationMatrix) -> f64 {
        self.xs
            .iter()
            .zip(self.ys)
            .enumerate()
            .map(|(i, (x, y))| self.weight(i) * (r * x - y).norm_squared())
            .sum()
    }

    /// The attitude profile matrix `B = sum_i w_i y_i x_i^T`.
    pub fn profile_matrix(&self) -> Matrix3<f64> {
        self.xs
            .iter()
            .zip(self.ys)
            .enumerate()
            .map(|(i, (x, y))| self.weight(i) * y * x.transpose())
            .sum()
    }
}

/// Rotation minimizing the weighted squared residual of `pairs`.
pub fn solve_wahba(pairs: &VectorPairSet<'_>) -> Result<RotationMatrix, WahbaError> {
    let b = pairs.profile_matrix();
    if b.iter().any(|v| !v.is_finite()) {
        return Err(WahbaError::NonFinite);
    }

    let svd = b.svd(true, true);
    let mut sv = [svd.singular_values[0], svd.singular_values[1], svd.singular_values[2]];
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] == 0.0 || sv[1] < DEGENERACY_RATIO * sv[0] {
        return Err(WahbaError::DegenerateInput { singular_values: sv });
    }

    // Both factors are always requested above.
    let u = svd.u.expect("left singular vectors");
    let v_t = svd.v_t.expect("right singular vectors");
    let d = (u.determinant() * v_t.determinant()).signum();
    let r = u * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * v_t;
    Ok(RotationMatrix::from_matrix_unchecked(r))
}

/// Unweighted convenience form of [`solve_wahba`].
pub fn wahba(xs: &[Vec3], ys: &[Vec3]) -> Result<RotationMatrix, WahbaError> {
    solve_wahba(&VectorPairSet::new(xs, ys)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::EulerAngles;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
        Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        )
        .normalize()
    }

    #[test]
    fn identity_case() {
        let xs = [Vec3::x(), Vec3::y()];
        let r = wahba(&xs, &xs).unwrap();
        assert_abs_diff_eq!(*r.matrix(), Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn recovers_known_rotation_from_three_vectors() {
        let truth = RotationMatrix::from_euler(EulerAngles::from_degrees(30.0, -10.0, 5.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<Vec3> = (0..3).map(|_| random_unit(&mut rng)).collect();
        let ys: Vec<Vec3> = xs.iter().map(|x| truth * *x).collect();
        let r = wahba(&xs, &ys).unwrap();
        assert_abs_diff_eq!(*r.matrix(), *truth.matrix(), epsilon = 1e-10);
    }

    #[test]
    fn two_non_collinear_pairs_suffice() {
        let truth = RotationMatrix::from_euler(EulerAngles::from_degrees(-120.0, 40.0, 170.0));
        let xs = [Vec3::new(1.0, 2.0, 3.0), Vec3::new(-4.0, 0.5, 1.0)];
        let ys = [truth * xs[0], truth * xs[1]];
        let r = wahba(&xs, &ys).unwrap();
        assert!(r.angle_to(&truth) < 1e-10);
    }

    #[test]
    fn collinear_input_is_degenerate() {
        let xs = [Vec3::x(), 2.0 * Vec3::x(), -3.0 * Vec3::x()];
        let ys = xs;
        assert!(matches!(wahba(&xs, &ys), Err(WahbaError::DegenerateInput { .. })));
        let zeros = [Vec3::zeros(); 3];
        assert!(matches!(wahba(&zeros, &zeros), Err(WahbaError::DegenerateInput { .. })));
    }

    #[test]
    fn input_validation() {
        let xs = [Vec3::x(), Vec3::y()];
        assert_eq!(
            wahba(&xs, &xs[..1]).unwrap_err(),
            WahbaError::LengthMismatch { xs: 2, ys: 1 }
        );
        assert_eq!(wahba(&xs[..1], &xs[..1]).unwrap_err(), WahbaError::TooFewPairs(1));
        let set = VectorPairSet::new(&xs, &xs).unwrap();
        assert_eq!(set.with_weights(&[1.0, -1.0]).unwrap_err(), WahbaError::InvalidWeight);
        let nan = [Vec3::new(f64::NAN, 0.0, 0.0), Vec3::y()];
        assert_eq!(wahba(&nan, &xs).unwrap_err(), WahbaError::NonFinite);
    }

    #[test]
    fn weights_shift_the_solution() {
        // Inconsistent pairs: the heavily weighted pair dominates.
        let xs = [Vec3::x(), Vec3::y(), Vec3::z()];
        let rot = RotationMatrix::from_euler(EulerAngles::from_degrees(20.0, 0.0, 0.0));
        let ys = [rot * xs[0], xs[1], xs[2]];
        let unweighted = wahba(&xs, &ys).unwrap();
        let w = [1e6, 1.0, 1.0];
        let weighted = solve_wahba(&VectorPairSet::new(&xs, &ys).unwrap().with_weights(&w).unwrap()).unwrap();
        assert!((weighted * xs[0] - ys[0]).norm() < (unweighted * xs[0] - ys[0]).norm());
    }

    #[test]
    fn reflection_is_never_returned() {
        // Mirror-image data: the best orthogonal matrix is a reflection.
        let xs = [Vec3::x(), Vec3::y(), Vec3::z()];
        let ys = [Vec3::x(), Vec3::y(), -Vec3::z()];
        let r = wahba(&xs, &ys).unwrap();
        let (orth, det) = r.invariant_errors();
        assert!(orth < 1e-12 && det < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn optimality_certificate(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = RotationMatrix::from_rotation_vector(random_unit(&mut rng) * rng.random_range(0.0..3.0));
            let xs: Vec<Vec3> = (0..6).map(|_| random_unit(&mut rng) * rng.random_range(0.5..5.0)).collect();
            let ys: Vec<Vec3> = xs.iter().map(|x| truth * *x + 0.05 * random_unit(&mut rng)).collect();
            let set = VectorPairSet::new(&xs, &ys).unwrap();
            let r = solve_wahba(&set).unwrap();
            let best = set.cost(&r);
            for _ in 0..100 {
                let delta = random_unit(&mut rng) * 1e-3;
                let perturbed = r * RotationMatrix::from_rotation_vector(delta);
                prop_assert!(best <= set.cost(&perturbed) + 1e-12);
            }
        }

        #[test]
        fn left_equivariance(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<Vec3> = (0..5).map(|_| random_unit(&mut rng)).collect();
            let ys: Vec<Vec3> = (0..5).map(|_| random_unit(&mut rng)).collect();
            let q = RotationMatrix::from_rotation_vector(random_unit(&mut rng) * rng.random_range(0.0..3.0));
            let qys: Vec<Vec3> = ys.iter().map(|y| q * *y).collect();
            let lhs = wahba(&xs, &qys).unwrap();
            let rhs = q * wahba(&xs, &ys).unwrap();
            prop_assert!((lhs.matrix() - rhs.matrix()).abs().max() < 1e-9);
        }
    }
}
