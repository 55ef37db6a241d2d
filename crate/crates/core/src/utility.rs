//! Utility families on the positive half-line.
//!
//! Every family is nondecreasing, concave and continuous on `[0, ∞)` and is
//! extended by `-∞` (the [`VALUE_FLOOR`] sentinel) below zero. An optional
//! per-terminal-node endowment shifts the argument, `U(ω, x) = U(x + e(ω))`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sentinel for `-∞`. Absorbing under minima and expectations.
pub const VALUE_FLOOR: f64 = -1e18;

/// True when `v` stands for `-∞`.
#[inline]
pub fn is_floor(v: f64) -> bool {
    v <= VALUE_FLOOR
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UtilityError {
    #[error("power exponent must lie in (0,1), got {0}")]
    BadGamma(f64),
    #[error("exponential rate must be positive, got {0}")]
    BadAlpha(f64),
    #[error("piecewise-linear utility: {0}")]
    BadKnots(String),
}

/// Concrete utility shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum UtilityFamily {
    Log,
    Power {
        gamma: f64,
    },
    /// `x ↦ 1 − exp(−αx)`.
    Exponential {
        alpha: f64,
    },
    /// Linear interpolation through `(knots[i], values[i])`, first knot at 0,
    /// extended beyond the last knot with the last slope.
    PiecewiseLinear {
        knots: Vec<f64>,
        values: Vec<f64>,
    },
}

impl UtilityFamily {
    pub fn validate(&self) -> Result<(), UtilityError> {
        match self {
            UtilityFamily::Log => Ok(()),
            UtilityFamily::Power { gamma } => {
                if *gamma > 0.0 && *gamma < 1.0 {
                    Ok(())
                } else {
                    Err(UtilityError::BadGamma(*gamma))
                }
            }
            UtilityFamily::Exponential { alpha } => {
                if *alpha > 0.0 && alpha.is_finite() {
                    Ok(())
                } else {
                    Err(UtilityError::BadAlpha(*alpha))
                }
            }
            UtilityFamily::PiecewiseLinear { knots, values } => check_piecewise(knots, values),
        }
    }
}

fn check_piecewise(knots: &[f64], values: &[f64]) -> Result<(), UtilityError> {
    let bad = |m: &str| Err(UtilityError::BadKnots(m.to_string()));
    if knots.len() < 2 || knots.len() != values.len() {
        return bad("need at least two knots and one value per knot");
    }
    if knots[0] != 0.0 {
        return bad("first knot must be 0");
    }
    if knots.iter().chain(values).any(|v| !v.is_finite()) {
        return bad("knots and values must be finite");
    }
    let mut prev_slope = f64::INFINITY;
    for i in 0..knots.len() - 1 {
        let dx = knots[i + 1] - knots[i];
        if dx <= 0.0 {
            return bad("knots must be strictly increasing");
        }
        let slope = (values[i + 1] - values[i]) / dx;
        if slope < 0.0 {
            return bad("values must be nondecreasing");
        }
        if slope > prev_slope * (1.0 + 1e-12) + 1e-15 {
            return bad("slopes must be nonincreasing (concavity)");
        }
        prev_slope = slope;
    }
    Ok(())
}

/// A utility family plus the switch for terminal endowments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilitySpec {
    pub family: UtilityFamily,
    pub endowment_enabled: bool,
}

impl UtilitySpec {
    pub fn new(family: UtilityFamily) -> Result<Self, UtilityError> {
        family.validate()?;
        Ok(Self {
            family,
            endowment_enabled: false,
        })
    }

    pub fn log() -> Self {
        Self::new(UtilityFamily::Log).unwrap()
    }

    pub fn power(gamma: f64) -> Result<Self, UtilityError> {
        Self::new(UtilityFamily::Power { gamma })
    }

    pub fn exponential(alpha: f64) -> Result<Self, UtilityError> {
        Self::new(UtilityFamily::Exponential { alpha })
    }

    pub fn piecewise_linear(knots: Vec<f64>, values: Vec<f64>) -> Result<Self, UtilityError> {
        Self::new(UtilityFamily::PiecewiseLinear { knots, values })
    }

    pub fn with_endowments(mut self, enabled: bool) -> Self {
        self.endowment_enabled = enabled;
        self
    }

    /// `U(x + endowment)`, with `VALUE_FLOOR` for negative arguments and for
    /// `log` at zero.
    pub fn evaluate(&self, x: f64, endowment: f64) -> f64 {
        self.value(x + endowment)
    }

    /// Base utility at wealth `w` (no endowment).
    pub fn value(&self, w: f64) -> f64 {
        if w.is_nan() || w < 0.0 {
            return VALUE_FLOOR;
        }
        match &self.family {
            UtilityFamily::Log => {
                if w == 0.0 {
                    VALUE_FLOOR
                } else {
                    w.ln().max(VALUE_FLOOR)
                }
            }
            UtilityFamily::Power { gamma } => w.powf(*gamma),
            UtilityFamily::Exponential { alpha } => -(-alpha * w).exp_m1(),
            UtilityFamily::PiecewiseLinear { knots, values } => {
                let last = knots.len() - 1;
                if w >= knots[last] {
                    let s = (values[last] - values[last - 1]) / (knots[last] - knots[last - 1]);
                    return values[last] + s * (w - knots[last]);
                }
                let i = knots.partition_point(|&k| k <= w).saturating_sub(1);
                let t = (w - knots[i]) / (knots[i + 1] - knots[i]);
                values[i] + t * (values[i + 1] - values[i])
            }
        }
    }

    /// Left derivative of the base utility at `w > 0` (right derivative at 0).
    /// Infinite where the family's slope blows up at the origin.
    pub fn left_slope(&self, w: f64) -> f64 {
        if w < 0.0 {
            return f64::INFINITY;
        }
        match &self.family {
            UtilityFamily::Log => 1.0 / w,
            UtilityFamily::Power { gamma } => gamma * w.powf(gamma - 1.0),
            UtilityFamily::Exponential { alpha } => alpha * (-alpha * w).exp(),
            UtilityFamily::PiecewiseLinear { knots, values } => {
                let last = knots.len() - 1;
                // segment (knots[i], knots[i+1]] contains w
                let mut i = knots.partition_point(|&k| k < w).saturating_sub(1);
                if i >= last {
                    i = last - 1;
                }
                (values[i + 1] - values[i]) / (knots[i + 1] - knots[i])
            }
        }
    }

    /// Whether `U(0) = -∞`.
    pub fn diverges_at_zero(&self) -> bool {
        matches!(self.family, UtilityFamily::Log)
    }

    /// `sup U` when finite.
    pub fn sup_value(&self) -> Option<f64> {
        match &self.family {
            UtilityFamily::Exponential { .. } => Some(1.0),
            UtilityFamily::PiecewiseLinear { knots, values } => {
                let last = knots.len() - 1;
                let s = values[last] - values[last - 1];
                (s == 0.0).then_some(values[last])
            }
            _ => None,
        }
    }

    pub fn bounded_above(&self) -> bool {
        self.sup_value().is_some()
    }
}

/// Both sides of `εU⁺(y) ≤ 2U⁺(εy) + 2U(2)` for `U` shifted by a constant
/// so that `U(1) ≥ 0`.
pub fn scaling_sides(u: &UtilitySpec, eps: f64, y: f64) -> (f64, f64) {
    let shift = (-u.value(1.0)).max(0.0);
    let pos = |w: f64| {
        let v = u.value(w);
        if is_floor(v) {
            0.0
        } else {
            (v + shift).max(0.0)
        }
    };
    (eps * pos(y), 2.0 * pos(eps * y) + 2.0 * (u.value(2.0) + shift))
}

/// Free-function form of [`UtilitySpec::evaluate`].
pub fn evaluate_utility(u: &UtilitySpec, x: f64, endowment: f64) -> f64 {
    u.evaluate(x, endowment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn families() -> Vec<UtilitySpec> {
        vec![
            UtilitySpec::log(),
            UtilitySpec::power(0.5).unwrap(),
            UtilitySpec::power(0.2).unwrap(),
            UtilitySpec::exponential(1.5).unwrap(),
            UtilitySpec::piecewise_linear(vec![0.0, 1.0, 3.0], vec![0.0, 2.0, 3.0]).unwrap(),
        ]
    }

    #[test]
    fn point_values() {
        assert_eq!(UtilitySpec::log().evaluate(1.0, 0.0), 0.0);
        assert_eq!(UtilitySpec::power(0.5).unwrap().evaluate(4.0, 0.0), 2.0);
        assert_eq!(UtilitySpec::log().evaluate(0.0, 0.0), VALUE_FLOOR);
        assert_eq!(UtilitySpec::power(0.5).unwrap().evaluate(-0.1, 0.0), VALUE_FLOOR);
        assert_eq!(UtilitySpec::power(0.5).unwrap().evaluate(0.5, -0.25), 0.5);
    }

    #[test]
    fn parameters_rejected_at_construction() {
        assert_eq!(UtilitySpec::power(1.0), Err(UtilityError::BadGamma(1.0)));
        assert_eq!(UtilitySpec::power(0.0), Err(UtilityError::BadGamma(0.0)));
        assert_eq!(UtilitySpec::exponential(0.0), Err(UtilityError::BadAlpha(0.0)));
        assert!(UtilitySpec::piecewise_linear(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 3.0]).is_err());
        assert!(UtilitySpec::piecewise_linear(vec![0.5, 1.0], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn piecewise_interpolation_and_extension() {
        let u = UtilitySpec::piecewise_linear(vec![0.0, 1.0, 3.0], vec![0.0, 2.0, 3.0]).unwrap();
        assert_eq!(u.value(0.5), 1.0);
        assert_eq!(u.value(2.0), 2.5);
        assert_eq!(u.value(5.0), 4.0);
        assert_eq!(u.left_slope(1.0), 2.0);
        assert_eq!(u.left_slope(1.5), 0.5);
        assert!(!u.bounded_above());
        let flat = UtilitySpec::piecewise_linear(vec![0.0, 1.0, 3.0], vec![0.0, 2.0, 2.0]).unwrap();
        assert_eq!(flat.sup_value(), Some(2.0));
    }

    #[test]
    fn bounded_above_flags() {
        assert!(UtilitySpec::exponential(1.0).unwrap().bounded_above());
        assert!(!UtilitySpec::log().bounded_above());
        assert!(!UtilitySpec::power(0.5).unwrap().bounded_above());
    }

    proptest! {
        #[test]
        fn monotone_and_concave(a in 0.0f64..50.0, b in 0.0f64..50.0, lam in 0.0f64..=1.0) {
            for u in families() {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(u.value(lo) <= u.value(hi));
                let mid = u.value(lam * a + (1.0 - lam) * b);
                let chord = lam * u.value(a) + (1.0 - lam) * u.value(b);
                if !is_floor(chord) {
                    prop_assert!(mid >= chord - 1e-12 * (1.0 + chord.abs()));
                }
            }
        }

        #[test]
        fn scaling_inequality(eps in 1e-9f64..1.0, y in 0.0f64..1e6) {
            for u in families() {
                let (lhs, rhs) = scaling_sides(&u, eps, y);
                prop_assert!(lhs <= rhs);
            }
        }

        #[test]
        fn left_slope_is_a_supergradient(w in 0.01f64..20.0, y in 0.0f64..30.0) {
            for u in families() {
                let g = u.left_slope(w);
                prop_assert!(u.value(y) <= u.value(w) + g * (y - w) + 1e-9 * (1.0 + u.value(w).abs()));
            }
        }
    }
}
