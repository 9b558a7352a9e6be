//! Penalty coefficients of the relaxed bilevel program and the constraint
//! violation bounds they imply.
//!
//! The relaxed objective is
//!
//! ```text
//! f(x,y) + (g(x,y) + h+(y)/sigma3)/sigma1 - min_z (g(x,z) + h+(z)/sigma2)/sigma1
//! ```
//!
//! with `h+(y) = max(h(y) - c0, 0)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyCoefficients {
    sigma1: f64,
    sigma2: f64,
    sigma3: f64,
    c0: f64,
    warn_sigma_order: bool,
}

impl PenaltyCoefficients {
    pub fn sigma1(&self) -> f64 {
        self.sigma1
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn sigma3(&self) -> f64 {
        self.sigma3
    }

    pub fn c0(&self) -> f64 {
        self.c0
    }

    /// Set when `sigma3 <= sigma2`; the violation bound is derived assuming
    /// `sigma3` is much larger than `sigma2`.
    pub fn warn_sigma_order(&self) -> bool {
        self.warn_sigma_order
    }

    /// Same coefficients with a different constraint threshold.
    pub fn with_c0(self, c0: f64) -> Self {
        Self { c0, ..self }
    }

    /// Hinge `h+ = max(h - c0, 0)` at this threshold.
    pub fn hinge(&self, h: f64) -> f64 {
        hinge(h, self.c0)
    }
}

pub fn validate_penalty_coefficients(
    sigma1: f64,
    sigma2: f64,
    sigma3: f64,
    c0: f64,
) -> Result<PenaltyCoefficients> {
    for (name, value) in [("sigma1", sigma1), ("sigma2", sigma2), ("sigma3", sigma3)] {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::NonPositiveCoefficient { name, value });
        }
    }
    if !c0.is_finite() {
        return Err(Error::Config(format!("c0 must be finite, got {c0}")));
    }
    if sigma2 == sigma3 {
        return Err(Error::EqualSigmas(sigma2));
    }
    Ok(PenaltyCoefficients {
        sigma1,
        sigma2,
        sigma3,
        c0,
        warn_sigma_order: sigma3 <= sigma2,
    })
}

pub fn hinge(v: f64, c0: f64) -> f64 {
    (v - c0).max(0.0)
}

/// Worst-case constraint violation `max{2 Cg s2, 2 Cf s1 + 2 Cg s2/s3, 2 Cf s1 s3 + 2 Cg s3}`.
///
/// `c_f` and `c_g` are sup-norms of the outer and inner objectives over the
/// region of interest and are supplied by the caller.
pub fn epsilon_lambda(c_f: f64, c_g: f64, coeffs: &PenaltyCoefficients) -> f64 {
    let terms = violation_terms(c_f, c_g, coeffs);
    terms.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// The three individual violation bounds, in the order
/// `[h+(z), g(x,y) - g(x,z), h+(y)]`.
pub fn violation_terms(c_f: f64, c_g: f64, coeffs: &PenaltyCoefficients) -> [f64; 3] {
    let (s1, s2, s3) = (coeffs.sigma1, coeffs.sigma2, coeffs.sigma3);
    [
        2.0 * c_g * s2,
        2.0 * c_f * s1 + 2.0 * c_g * (s2 / s3),
        2.0 * c_f * s1 * s3 + 2.0 * c_g * s3,
    ]
}

/// Suboptimality transferred to the relaxed program: `(1/s1) eps_lambda (1 + 1/s2) + eps`.
pub fn epsilon_prime(eps_lambda: f64, sigma1: f64, sigma2: f64, eps: f64) -> f64 {
    (1.0 / sigma1) * (eps_lambda * (1.0 + 1.0 / sigma2)) + eps
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn validation_examples() {
        let ok = validate_penalty_coefficients(0.1, 0.01, 1.0, 0.0).unwrap();
        assert!(!ok.warn_sigma_order());
        assert!(matches!(
            validate_penalty_coefficients(0.1, 0.5, 0.5, 0.0),
            Err(Error::EqualSigmas(_))
        ));
        let warned = validate_penalty_coefficients(0.1, 1.0, 0.01, 0.0).unwrap();
        assert!(warned.warn_sigma_order());
    }

    #[test]
    fn rejects_non_positive() {
        for (a, b, c) in [(0.0, 1.0, 2.0), (1.0, -1.0, 2.0), (1.0, 1.0, 0.0)] {
            assert!(matches!(
                validate_penalty_coefficients(a, b, c, 0.0),
                Err(Error::NonPositiveCoefficient { .. })
            ));
        }
        assert!(validate_penalty_coefficients(f64::NAN, 1.0, 2.0, 0.0).is_err());
    }

    #[test]
    fn epsilon_lambda_examples() {
        let c = validate_penalty_coefficients(0.1, 0.01, 1.0, 0.0).unwrap();
        assert!((epsilon_lambda(1.0, 1.0, &c) - 2.2).abs() < 1e-12);
        assert_eq!(epsilon_lambda(0.0, 0.0, &c), 0.0);
        let c = validate_penalty_coefficients(0.01, 0.001, 0.01, 0.0).unwrap();
        assert!((epsilon_lambda(1.0, 1.0, &c) - 0.22).abs() < 1e-12);
    }

    #[test]
    fn epsilon_prime_examples() {
        assert_eq!(epsilon_prime(0.0, 0.3, 0.2, 0.0), 0.0);
        assert!((epsilon_prime(2.2, 0.1, 0.01, 0.05) - 2222.05).abs() < 1e-9);
        assert!((epsilon_prime(1.0, 1.0, 1.0, 0.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn hinge_boundary() {
        assert_eq!(hinge(1.0, 1.0), 0.0);
        assert_eq!(hinge(2.0, 1.0), 1.0);
        assert_eq!(hinge(0.0, 1.0), 0.0);
    }

    #[test]
    fn epsilon_lambda_not_monotone_in_sigma3() {
        // sigma2/sigma3 term shrinks as sigma3 grows
        let lo = validate_penalty_coefficients(0.01, 0.75, 0.01, 0.0).unwrap();
        let hi = validate_penalty_coefficients(0.01, 0.75, 0.9, 0.0).unwrap();
        assert!(epsilon_lambda(0.0, 8.0, &hi) < epsilon_lambda(0.0, 8.0, &lo));
    }

    proptest! {
        #[test]
        fn epsilon_lambda_monotone(
            cf in 0.0..10.0f64, cg in 0.0..10.0f64,
            s1 in 0.01..5.0f64, s2 in 0.01..5.0f64, s3 in 0.01..5.0f64,
            bump in 0.0..2.0f64, which in 0usize..4,
        ) {
            prop_assume!(s2 != s3);
            let base = validate_penalty_coefficients(s1, s2, s3, 0.0).unwrap();
            let mut v = [cf, cg, s1, s2, s3];
            v[which] += bump;
            prop_assume!(v[3] != v[4]);
            let bumped = validate_penalty_coefficients(v[2], v[3], v[4], 0.0).unwrap();
            prop_assert!(epsilon_lambda(v[0], v[1], &bumped) >= epsilon_lambda(cf, cg, &base));
        }

        #[test]
        fn hinge_convex_nonnegative(a in -10.0..10.0f64, b in -10.0..10.0f64, c0 in -5.0..5.0f64, w in 0.0..1.0f64) {
            prop_assert!(hinge(a, c0) >= 0.0);
            prop_assert_eq!(hinge(a, c0) == 0.0, a <= c0);
            let mid = hinge(w * a + (1.0 - w) * b, c0);
            prop_assert!(mid <= w * hinge(a, c0) + (1.0 - w) * hinge(b, c0) + 1e-12);
        }
    }
}
