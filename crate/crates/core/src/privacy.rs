//! Noise calibration for the Gaussian mechanism and DP-SGD on the synthetic set.
//!
//! All logarithms are natural. The moments-accountant bound of DP-SGD carries
//! two unspecified constants (`σ ≥ c₂·Δ·q·√(T·log(1/δ))/ε` for `ε < c₁·q²·T`),
//! so calibration here uses the closed-form tail bound instead:
//! `σ ≥ √(ln δ / (T·q² − ε))`, which reduces to `σ ≥ √(2·ln(1/δ)/ε)` once
//! `T·q² ≤ ε/2`.

use crate::error::{Error, Result};

/// An `(ε, δ)` guarantee.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpBudget {
    epsilon: f64,
    delta: f64,
}

impl DpBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::invalid("epsilon", format!("must be positive, got {epsilon}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::invalid("delta", format!("must lie in (0, 1), got {delta}")));
        }
        Ok(DpBudget { epsilon, delta })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// Noise multiplier, clip bound, sampling rate and step count of one DP-SGD run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpMechanismParams {
    pub sigma: f64,
    pub clip: f64,
    pub sampling_rate: f64,
    pub steps: u64,
}

impl DpMechanismParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) {
            return Err(Error::invalid("sigma", format!("must be non-negative, got {}", self.sigma)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::invalid("clip", format!("must be positive, got {}", self.clip)));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(Error::invalid(
                "q",
                format!("must lie in (0, 1], got {}", self.sampling_rate),
            ));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be at least 1"));
        }
        Ok(())
    }
}

/// Gaussian-mechanism noise multiplier `√(2·ln(1.25/δ))/ε`.
///
/// `δ` may exceed 1 here as long as it stays below 1.25, where the bound
/// reaches zero.
pub fn gaussian_sigma(epsilon: f64, delta: f64) -> Result<f64> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid("epsilon", format!("must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.25) {
        return Err(Error::invalid("delta", format!("must lie in (0, 1.25), got {delta}")));
    }
    Ok((2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

pub fn gaussian_sigma_for(budget: &DpBudget) -> f64 {
    gaussian_sigma(budget.epsilon, budget.delta).expect("budget validated on construction")
}

/// Tail-bound noise multiplier `√(ln δ / (T·q² − ε))`; requires `T·q² < ε`.
pub fn tailbound_sigma(budget: &DpBudget, q: f64, steps: u64) -> Result<f64> {
    if !(q >= 0.0 && q <= 1.0) {
        return Err(Error::invalid("q", format!("must lie in [0, 1], got {q}")));
    }
    let load = steps as f64 * q * q;
    if load >= budget.epsilon {
        return Err(Error::invalid(
            "steps",
            format!("T·q² = {load} must be below ε = {}", budget.epsilon),
        ));
    }
    Ok((budget.delta.ln() / (load - budget.epsilon)).sqrt())
}

/// `√(2·ln(1/δ)/ε)`, the tail bound in the regime `T·q² ≤ ε/2`.
pub fn simplified_tailbound_sigma(budget: &DpBudget) -> f64 {
    (2.0 * -budget.delta.ln() / budget.epsilon).sqrt()
}

/// Whether the simplified bound applies: `T·q² ≤ ε/2`.
///
/// The boundary is inclusive up to a few ulps, since decimal rates such as
/// `q = 0.1` are not exact in binary.
pub fn check_budget(q: f64, steps: u64, epsilon: f64) -> bool {
    steps as f64 * q * q <= epsilon / 2.0 * (1.0 + 8.0 * f64::EPSILON)
}

/// Guarantee of mechanisms run on disjoint data: the coordinate-wise maximum.
pub fn compose_parallel(budgets: &[DpBudget]) -> Result<DpBudget> {
    let first = budgets
        .first()
        .ok_or_else(|| Error::invalid("budgets", "need at least one budget"))?;
    Ok(budgets.iter().fold(*first, |acc, b| DpBudget {
        epsilon: acc.epsilon.max(b.epsilon),
        delta: acc.delta.max(b.delta),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gaussian_reference_value() {
        // √(2 ln 125000) = 4.84481
        let s = gaussian_sigma(1.0, 1e-5).unwrap();
        assert!((s - 4.8455).abs() < 1e-3);
        assert!((s - (2.0 * 125_000f64.ln()).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn gaussian_homogeneity_and_limit() {
        for &(e, d) in &[(1.0, 1e-5), (0.3, 1e-3), (5.0, 0.2)] {
            assert_eq!(gaussian_sigma(2.0 * e, d).unwrap(), gaussian_sigma(e, d).unwrap() / 2.0);
        }
        let near = gaussian_sigma(1.0, 1.25 - 1e-12).unwrap();
        assert!(near > 0.0 && near < 1e-5);
        assert!(gaussian_sigma(0.0, 1e-5).is_err());
        assert!(gaussian_sigma(1.0, 0.0).is_err());
        assert!(gaussian_sigma(1.0, 1.25).is_err());
    }

    #[test]
    fn tailbound_reference_value() {
        let b = DpBudget::new(2.0, 1e-5).unwrap();
        let s = tailbound_sigma(&b, 0.01, 100).unwrap();
        let expected = (1e-5f64.ln() / (0.01 - 2.0)).sqrt();
        assert_eq!(s, expected);
        assert!((s - 2.4053).abs() < 1e-3);
    }

    #[test]
    fn tailbound_meets_simplified_bound_at_half_epsilon() {
        // T·q² = 2·0.25 = 0.5 = ε/2, exact in binary
        let b = DpBudget::new(1.0, 1e-5).unwrap();
        assert!(check_budget(0.5, 2, 1.0));
        assert_eq!(tailbound_sigma(&b, 0.5, 2).unwrap(), simplified_tailbound_sigma(&b));
        // q = 0.1 lands a rounding error above the boundary
        assert!((tailbound_sigma(&b, 0.1, 50).unwrap() - simplified_tailbound_sigma(&b)).abs() < 1e-12);
        // below the boundary the full bound is smaller
        assert!(tailbound_sigma(&b, 0.1, 10).unwrap() < simplified_tailbound_sigma(&b));
    }

    #[test]
    fn tailbound_domain() {
        let b = DpBudget::new(1.0, 1e-5).unwrap();
        assert!(tailbound_sigma(&b, 0.1, 100).is_err());
        assert!(tailbound_sigma(&b, 0.5, 4).is_err());
        assert!(tailbound_sigma(&b, 1.5, 1).is_err());
    }

    #[test]
    fn budget_check_examples() {
        assert!(check_budget(0.1, 50, 1.0));
        assert!(!check_budget(0.1, 51, 1.0));
        assert!(check_budget(0.0, 1_000_000, 1e-9));
    }

    #[test]
    fn parallel_composition() {
        let a = DpBudget::new(1.0, 1e-5).unwrap();
        let b = DpBudget::new(2.0, 1e-6).unwrap();
        assert_eq!(compose_parallel(&[a, a]).unwrap(), a);
        assert_eq!(compose_parallel(&[a]).unwrap(), a);
        assert_eq!(compose_parallel(&[a, b]).unwrap(), DpBudget::new(2.0, 1e-5).unwrap());
        assert!(compose_parallel(&[]).is_err());
    }

    #[test]
    fn budget_validation() {
        assert!(DpBudget::new(-1.0, 1e-5).is_err());
        assert!(DpBudget::new(1.0, 1.0).is_err());
        let p = DpMechanismParams { sigma: 1.0, clip: 5.0, sampling_rate: 0.1, steps: 10 };
        assert!(p.validate().is_ok());
        assert!(DpMechanismParams { clip: 0.0, ..p }.validate().is_err());
        assert!(DpMechanismParams { sampling_rate: 0.0, ..p }.validate().is_err());
        assert!(DpMechanismParams { steps: 0, ..p }.validate().is_err());
    }

    fn budget() -> impl Strategy<Value = DpBudget> {
        (0.01f64..10.0, 1e-9f64..0.5).prop_map(|(e, d)| DpBudget::new(e, d).unwrap())
    }

    proptest! {
        #[test]
        fn composition_laws(a in budget(), b in budget(), c in budget()) {
            prop_assert_eq!(compose_parallel(&[a, b]).unwrap(), compose_parallel(&[b, a]).unwrap());
            let ab = compose_parallel(&[a, b]).unwrap();
            prop_assert_eq!(compose_parallel(&[ab, ab]).unwrap(), ab);
            let abc = compose_parallel(&[a, b, c]).unwrap();
            prop_assert!(abc.epsilon() >= ab.epsilon() && abc.delta() >= ab.delta());
        }

        #[test]
        fn gaussian_monotone(e in 0.01f64..10.0, d in 1e-9f64..0.5) {
            let s = gaussian_sigma(e, d).unwrap();
            prop_assert!(gaussian_sigma(e, d / 2.0).unwrap() > s);
            prop_assert!(gaussian_sigma(e * 2.0, d).unwrap() < s);
        }

        #[test]
        fn tailbound_grows_with_steps(b in budget(), q in 1e-4f64..0.05, t in 1u64..100) {
            prop_assume!(((t + 1) as f64) * q * q < b.epsilon());
            prop_assert!(tailbound_sigma(&b, q, t + 1).unwrap() >= tailbound_sigma(&b, q, t).unwrap());
        }
    }
}
