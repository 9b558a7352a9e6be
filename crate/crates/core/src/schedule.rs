use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step-size rule indexed by iteration (`t` for the outer loop, `k` for the inner loop).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    /// `c_a / (1 + t)^a`, `a` in (0, 1).
    OuterPower { c_a: f64, a: f64 },
    /// `eta / (k + 1)`.
    InnerHarmonic { eta: f64 },
    Constant { c_a: f64 },
}

impl StepSchedule {
    pub fn outer_power(c_a: f64, a: f64) -> Result<Self> {
        positive("c_a", c_a)?;
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::BadExponent(a));
        }
        Ok(Self::OuterPower { c_a, a })
    }

    pub fn inner_harmonic(eta: f64) -> Result<Self> {
        positive("eta", eta)?;
        Ok(Self::InnerHarmonic { eta })
    }

    pub fn constant(c_a: f64) -> Result<Self> {
        positive("c_a", c_a)?;
        Ok(Self::Constant { c_a })
    }

    /// Re-validates a schedule that came from deserialization.
    pub fn validated(self) -> Result<Self> {
        match self {
            Self::OuterPower { c_a, a } => Self::outer_power(c_a, a),
            Self::InnerHarmonic { eta } => Self::inner_harmonic(eta),
            Self::Constant { c_a } => Self::constant(c_a),
        }
    }

    pub fn step(&self, index: usize) -> f64 {
        let i = index as f64;
        match *self {
            Self::OuterPower { c_a, a } => c_a / (1.0 + i).powf(a),
            Self::InnerHarmonic { eta } => eta / (i + 1.0),
            Self::Constant { c_a } => c_a,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::BadSchedule(format!("{name} must be positive, got {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let s = StepSchedule::outer_power(0.1, 0.5).unwrap();
        assert_eq!(s.step(0), 0.1);
        assert!((s.step(3) - 0.05).abs() < 1e-15);
        let s = StepSchedule::inner_harmonic(2.0).unwrap();
        assert_eq!([s.step(0), s.step(1), s.step(3)], [2.0, 1.0, 0.5]);
        assert!(matches!(
            StepSchedule::outer_power(0.1, 1.5),
            Err(Error::BadExponent(_))
        ));
        assert!(StepSchedule::outer_power(0.1, 0.0).is_err());
        assert!(StepSchedule::inner_harmonic(-1.0).is_err());
    }

    #[test]
    fn serde_shape() {
        let s: StepSchedule = toml::from_str("kind = \"outer_power\"\nc_a = 0.5\na = 0.5").unwrap();
        assert_eq!(s, StepSchedule::OuterPower { c_a: 0.5, a: 0.5 });
        let bad: StepSchedule = toml::from_str("kind = \"outer_power\"\nc_a = 0.5\na = 2.0").unwrap();
        assert!(bad.validated().is_err());
    }

    proptest! {
        #[test]
        fn decreasing_to_zero(c in 0.01..10.0f64, a in 0.2..0.99f64, t in 0usize..100_000) {
            for s in [StepSchedule::outer_power(c, a).unwrap(), StepSchedule::inner_harmonic(c).unwrap()] {
                prop_assert!(s.step(t + 1) < s.step(t));
                prop_assert!(s.step(1 << 60) < 1e-3 * s.step(0));
            }
        }
    }
}
