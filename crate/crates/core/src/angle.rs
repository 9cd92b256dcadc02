//! Planar orientation algebra.
//!
//! An orientation is a single heading angle kept in `(-π, π]`. The
//! semicircle decomposition splits it into a binary label `ε` (which half of
//! the circle the heading lies in) and a folded angle `φ ∈ [0, π]`; the
//! regression target is `cos φ`. [`reconstruct`] is the exact inverse of
//! [`decompose`]:
//!
//! ```text
//! ε = 1 if θ ≥ 0 else 0      i = 2 − ε
//! φ = θ + (1 − ε)π           θ = wrap((i − 1)π + φ)
//! ```

use std::f64::consts::{PI, TAU};
use std::fmt;

use crate::error::AngleError;

/// Values this close to the lower bound `-π` are snapped onto `+π`.
const SEAM_SNAP: f64 = 4.0 * f64::EPSILON;

/// A heading angle in radians, always in `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Orientation(f64);

impl Orientation {
    /// Wraps any finite angle into `(-π, π]`.
    pub fn new(angle: f64) -> Result<Self, AngleError> {
        wrap(angle)
    }

    pub fn radians(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<Orientation> for f64 {
    fn from(o: Orientation) -> f64 {
        o.0
    }
}

/// Semicircle label, the fold and the regression target of one orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientationDecomposition {
    /// 1 for `θ ∈ [0, π]`, 0 for `θ ∈ (-π, 0)`.
    pub epsilon: u8,
    /// `2 − ε`; 1 for the non-negative half, 2 for the negative half.
    pub class_index: u8,
    /// Folded angle in `[0, π]`.
    pub folded: f64,
    /// `cos(folded)`.
    pub cos_target: f64,
}

impl OrientationDecomposition {
    /// Logit index of the semicircle class (`class_index − 1`).
    pub fn logit_index(&self) -> usize {
        usize::from(self.class_index - 1)
    }
}

/// Wrapped difference between two orientations, in `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct AngularError(f64);

impl AngularError {
    pub fn delta(self) -> f64 {
        self.0
    }

    pub fn abs(self) -> f64 {
        self.0.abs()
    }
}

/// Wraps a finite angle into `(-π, π]`.
///
/// Angles already inside the range are returned unchanged, bit for bit.
pub fn wrap(angle: f64) -> Result<Orientation, AngleError> {
    if !angle.is_finite() {
        return Err(AngleError::NonFinite(angle));
    }
    if angle > -PI && angle <= PI {
        return Ok(Orientation(angle));
    }
    let mut r = angle.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    if r <= -PI + SEAM_SNAP || r > PI {
        r = PI;
    }
    Ok(Orientation(r))
}

/// Semicircle step function; `ε(0) = 1`.
pub fn step_epsilon(theta: Orientation) -> u8 {
    u8::from(theta.0 >= 0.0)
}

pub fn decompose(theta: Orientation) -> OrientationDecomposition {
    let epsilon = step_epsilon(theta);
    let folded = if epsilon == 1 { theta.0 } else { theta.0 + PI };
    OrientationDecomposition {
        epsilon,
        class_index: 2 - epsilon,
        folded,
        cos_target: folded.cos(),
    }
}

/// Joins a semicircle class index and a folded angle back into an orientation.
pub fn reconstruct(class_index: u8, folded: f64) -> Result<Orientation, AngleError> {
    if !(1..=2).contains(&class_index) {
        return Err(AngleError::ClassIndex(class_index));
    }
    if !(0.0..=PI).contains(&folded) {
        return Err(AngleError::FoldedOutOfRange(folded));
    }
    wrap(f64::from(class_index - 1) * PI + folded)
}

/// Orientation of the horizontally mirrored object.
pub fn mirror(theta: Orientation) -> Orientation {
    // -θ is finite whenever θ is.
    wrap(-theta.0).expect("finite angle")
}

pub fn angular_error(predicted: Orientation, truth: Orientation) -> AngularError {
    AngularError(wrap(predicted.0 - truth.0).expect("finite angle").0)
}

/// `(1 + cos Δ) / 2`.
pub fn orientation_similarity(delta: AngularError) -> f64 {
    (1.0 + delta.0.cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, FRAC_PI_4};

    fn o(x: f64) -> Orientation {
        wrap(x).unwrap()
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(o(0.0).radians(), 0.0);
        assert!((o(3.0 * PI).radians() - PI).abs() < 1e-12);
        assert!(o(3.0 * PI).radians() > 0.0);
        assert_eq!(o(-PI).radians(), PI);
        assert_eq!(o(PI).radians(), PI);
        assert!((o(-5.0 * PI).radians() - PI).abs() < 1e-12);
    }

    #[test]
    fn wrap_rejects_non_finite() {
        assert!(matches!(wrap(f64::NAN), Err(AngleError::NonFinite(_))));
        assert!(wrap(f64::INFINITY).is_err());
        assert!(wrap(f64::NEG_INFINITY).is_err());
    }

    #[test]
    fn step_examples() {
        assert_eq!(step_epsilon(o(FRAC_PI_2)), 1);
        assert_eq!(step_epsilon(o(-FRAC_PI_4)), 0);
        assert_eq!(step_epsilon(o(0.0)), 1);
    }

    #[test]
    fn decompose_examples() {
        let d = decompose(o(FRAC_PI_2));
        assert_eq!((d.epsilon, d.class_index), (1, 1));
        assert_eq!(d.folded, FRAC_PI_2);
        assert!(d.cos_target.abs() < 1e-15);

        let d = decompose(o(-FRAC_PI_4));
        assert_eq!((d.epsilon, d.class_index), (0, 2));
        assert!((d.folded - 3.0 * FRAC_PI_4).abs() < 1e-15);
        assert!((d.cos_target + 2f64.sqrt() / 2.0).abs() < 1e-15);

        let d = decompose(o(PI));
        assert_eq!((d.epsilon, d.class_index), (1, 1));
        assert_eq!(d.folded, PI);
        assert_eq!(d.cos_target, -1.0);
    }

    #[test]
    fn reconstruct_examples() {
        assert_eq!(reconstruct(1, FRAC_PI_2).unwrap().radians(), FRAC_PI_2);
        assert!((reconstruct(2, 3.0 * FRAC_PI_4).unwrap().radians() + FRAC_PI_4).abs() < 1e-15);
        assert_eq!(reconstruct(2, 0.0).unwrap().radians(), PI);
    }

    #[test]
    fn reconstruct_rejects_bad_inputs() {
        assert!(matches!(reconstruct(0, 1.0), Err(AngleError::ClassIndex(0))));
        assert!(matches!(reconstruct(3, 1.0), Err(AngleError::ClassIndex(3))));
        assert!(matches!(reconstruct(1, -0.1), Err(AngleError::FoldedOutOfRange(_))));
        assert!(matches!(reconstruct(2, PI + 1e-9), Err(AngleError::FoldedOutOfRange(_))));
    }

    #[test]
    fn mirror_examples() {
        assert_eq!(mirror(o(FRAC_PI_3)).radians(), -FRAC_PI_3);
        assert_eq!(mirror(o(PI)).radians(), PI);
        let m = mirror(o(-FRAC_PI_4));
        assert_eq!(m.radians(), FRAC_PI_4);
        assert_eq!(step_epsilon(o(-FRAC_PI_4)), 0);
        assert_eq!(step_epsilon(m), 1);
    }

    #[test]
    fn angular_error_examples() {
        assert_eq!(angular_error(o(FRAC_PI_2), o(FRAC_PI_2)).delta(), 0.0);
        assert_eq!(angular_error(o(PI), o(0.0)).delta(), PI);

        // brute force: the representative of (pred - truth) mod 2π of least magnitude
        let raw: f64 = -3.0 - 3.0;
        let best = (-2..=2)
            .map(|k| raw - TAU * f64::from(k))
            .min_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap();
        let got = angular_error(o(-3.0), o(3.0)).delta();
        assert!((got - best).abs() < 1e-12);
        assert!((got - 0.283_185_307_179_586).abs() < 1e-12);
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(orientation_similarity(AngularError(0.0)), 1.0);
        assert_eq!(orientation_similarity(AngularError(PI)), 0.0);
        assert!((orientation_similarity(AngularError(FRAC_PI_2)) - 0.5).abs() < 1e-15);
    }
}
