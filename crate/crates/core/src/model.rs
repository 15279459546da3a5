//! Patient engagement model.
//!
//! The latent engagement state evolves as `x' = b·x + c_a·d`, where `a` is the
//! recommended treatment burden and `d` the observed adherence decision. The
//! patient adheres with probability `exp(-λ_a·x)`, and the provider collects
//! reward `γ_a` only on adherence. With `c_a ≤ c_h` the state never leaves
//! `[0, c_h / (1 - b)]`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Absolute slack used for every comparison against the state bound.
pub const BOUND_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("recovery rate b must lie in (0, 1), got {0}")]
    RecoveryRate(f64),
    #[error("discount factor alpha must lie in (0, 1), got {0}")]
    Discount(f64),
    #[error("c_high must equal 1 for identifiability, got {0}")]
    HighCost(f64),
    #[error("c_low must lie in [0, 1], got {0}")]
    LowCost(f64),
    #[error("lambda_{which} must be positive and finite, got {value}")]
    Lambda { which: &'static str, value: f64 },
    #[error("lambda_low ({low}) must not exceed lambda_high ({high})")]
    LambdaOrder { low: f64, high: f64 },
    #[error("gamma_{which} must be non-negative and finite, got {value}")]
    Reward { which: &'static str, value: f64 },
    #[error("gamma_low ({low}) must not exceed gamma_high ({high})")]
    RewardOrder { low: f64, high: f64 },
    #[error("state {x} outside [0, {bound}]")]
    StateOutOfBounds { x: f64, bound: f64 },
    #[error("initial state x0 = {x0} outside [0, {bound}]")]
    InitialState { x0: f64, bound: f64 },
}

/// Treatment burden level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Low,
    High,
}

impl Action {
    pub const ALL: [Action; 2] = [Action::Low, Action::High];

    /// The other action; with two actions this is the sub-optimal choice.
    pub fn complement(self) -> Action {
        match self {
            Action::Low => Action::High,
            Action::High => Action::Low,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Low => "low",
            Action::High => "high",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "low" | "l" | "Low" => Ok(Action::Low),
            "high" | "h" | "High" => Ok(Action::High),
            other => Err(format!("unknown action `{other}`")),
        }
    }
}

/// Binary adherence decision, `d ∈ {0, 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Adherence {
    Missed,
    Adhered,
}

impl Adherence {
    pub fn from_bool(adhered: bool) -> Self {
        if adhered {
            Adherence::Adhered
        } else {
            Adherence::Missed
        }
    }

    pub fn is_adhered(self) -> bool {
        self == Adherence::Adhered
    }

    /// `0` or `1`.
    pub fn as_u8(self) -> u8 {
        self.is_adhered() as u8
    }

    pub fn as_scalar<T: Scalar>(self) -> T {
        if self.is_adhered() {
            T::one()
        } else {
            T::zero()
        }
    }
}

impl TryFrom<u8> for Adherence {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Adherence::Missed),
            1 => Ok(Adherence::Adhered),
            other => Err(format!("adherence must be 0 or 1, got {other}")),
        }
    }
}

/// Raw parameter values as read from a config file, before validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncheckedParams<T> {
    pub c_low: T,
    pub c_high: T,
    pub lambda_low: T,
    pub lambda_high: T,
    pub b: T,
    pub x0: T,
    pub gamma_low: T,
    pub gamma_high: T,
    pub alpha: T,
}

/// Validated patient parameters `θ = (c_ℓ, c_h, λ_ℓ, λ_h, b, x0)` together with
/// the known rewards `(γ_ℓ, γ_h)` and discount `α`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatientParams<T> {
    c_low: T,
    c_high: T,
    lambda_low: T,
    lambda_high: T,
    b: T,
    x0: T,
    gamma_low: T,
    gamma_high: T,
    alpha: T,
}

fn check_unit_open<T: Scalar>(v: T, err: fn(f64) -> ModelError) -> Result<(), ModelError> {
    if v.is_finite() && v > T::zero() && v < T::one() {
        Ok(())
    } else {
        Err(err(v.to_f64_lossy()))
    }
}

/// `x̄ = c_h / (1 - b)`; rejects `b` outside `(0, 1)`.
pub fn state_bound<T: Scalar>(c_high: T, b: T) -> Result<T, ModelError> {
    check_unit_open(b, ModelError::RecoveryRate)?;
    Ok(c_high / (T::one() - b))
}

impl<T: Scalar> PatientParams<T> {
    /// Validates every invariant, including the `λ_ℓ ≤ λ_h` ordering.
    pub fn new(raw: UncheckedParams<T>) -> Result<Self, ModelError> {
        Self::validate(raw, true)
    }

    /// Same as [`PatientParams::new`] but accepts `λ_ℓ > λ_h`. Used for
    /// estimates drawn from tuple grids that do not enforce the ordering.
    pub fn new_unordered(raw: UncheckedParams<T>) -> Result<Self, ModelError> {
        Self::validate(raw, false)
    }

    fn validate(raw: UncheckedParams<T>, lambda_order: bool) -> Result<Self, ModelError> {
        let f = |v: T| v.to_f64_lossy();
        check_unit_open(raw.b, ModelError::RecoveryRate)?;
        check_unit_open(raw.alpha, ModelError::Discount)?;
        if raw.c_high != T::one() {
            return Err(ModelError::HighCost(f(raw.c_high)));
        }
        if !(raw.c_low.is_finite() && raw.c_low >= T::zero() && raw.c_low <= raw.c_high) {
            return Err(ModelError::LowCost(f(raw.c_low)));
        }
        for (which, value) in [("low", raw.lambda_low), ("high", raw.lambda_high)] {
            if !(value.is_finite() && value > T::zero()) {
                return Err(ModelError::Lambda { which, value: f(value) });
            }
        }
        if lambda_order && raw.lambda_low > raw.lambda_high {
            return Err(ModelError::LambdaOrder {
                low: f(raw.lambda_low),
                high: f(raw.lambda_high),
            });
        }
        for (which, value) in [("low", raw.gamma_low), ("high", raw.gamma_high)] {
            if !(value.is_finite() && value >= T::zero()) {
                return Err(ModelError::Reward { which, value: f(value) });
            }
        }
        if raw.gamma_low > raw.gamma_high {
            return Err(ModelError::RewardOrder {
                low: f(raw.gamma_low),
                high: f(raw.gamma_high),
            });
        }
        let bound = raw.c_high / (T::one() - raw.b);
        let tol = T::lit(BOUND_TOLERANCE);
        if !(raw.x0.is_finite() && raw.x0 >= -tol && raw.x0 <= bound + tol) {
            return Err(ModelError::InitialState {
                x0: f(raw.x0),
                bound: f(bound),
            });
        }
        Ok(Self {
            c_low: raw.c_low,
            c_high: raw.c_high,
            lambda_low: raw.lambda_low,
            lambda_high: raw.lambda_high,
            b: raw.b,
            x0: raw.x0.max(T::zero()).min(bound),
            gamma_low: raw.gamma_low,
            gamma_high: raw.gamma_high,
            alpha: raw.alpha,
        })
    }

    pub fn to_unchecked(&self) -> UncheckedParams<T> {
        UncheckedParams {
            c_low: self.c_low,
            c_high: self.c_high,
            lambda_low: self.lambda_low,
            lambda_high: self.lambda_high,
            b: self.b,
            x0: self.x0,
            gamma_low: self.gamma_low,
            gamma_high: self.gamma_high,
            alpha: self.alpha,
        }
    }

    pub fn c_low(&self) -> T {
        self.c_low
    }
    pub fn c_high(&self) -> T {
        self.c_high
    }
    pub fn lambda_low(&self) -> T {
        self.lambda_low
    }
    pub fn lambda_high(&self) -> T {
        self.lambda_high
    }
    pub fn b(&self) -> T {
        self.b
    }
    pub fn x0(&self) -> T {
        self.x0
    }
    pub fn gamma_low(&self) -> T {
        self.gamma_low
    }
    pub fn gamma_high(&self) -> T {
        self.gamma_high
    }
    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn cost(&self, a: Action) -> T {
        match a {
            Action::Low => self.c_low,
            Action::High => self.c_high,
        }
    }

    pub fn lambda(&self, a: Action) -> T {
        match a {
            Action::Low => self.lambda_low,
            Action::High => self.lambda_high,
        }
    }

    pub fn gamma(&self, a: Action) -> T {
        match a {
            Action::Low => self.gamma_low,
            Action::High => self.gamma_high,
        }
    }

    /// Upper end of the state space, `x̄ = c_h / (1 - b)`.
    pub fn state_bound(&self) -> T {
        self.c_high / (T::one() - self.b)
    }

    pub fn initial_state(&self) -> EngagementState<T> {
        EngagementState(self.x0)
    }
}

/// Latent engagement state `x ∈ [0, x̄]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct EngagementState<T>(T);

impl<T: Scalar> EngagementState<T> {
    pub fn new(x: T, params: &PatientParams<T>) -> Result<Self, ModelError> {
        check_state(x, params)?;
        Ok(Self(x.max(T::zero()).min(params.state_bound())))
    }

    pub fn value(self) -> T {
        self.0
    }
}

fn check_state<T: Scalar>(x: T, params: &PatientParams<T>) -> Result<(), ModelError> {
    let bound = params.state_bound();
    let tol = T::lit(BOUND_TOLERANCE);
    if x.is_finite() && x >= -tol && x <= bound + tol {
        Ok(())
    } else {
        Err(ModelError::StateOutOfBounds {
            x: x.to_f64_lossy(),
            bound: bound.to_f64_lossy(),
        })
    }
}

/// One day of engagement dynamics, `b·x + c_a·d`.
pub fn step_dynamics<T: Scalar>(
    x: EngagementState<T>,
    a: Action,
    d: Adherence,
    params: &PatientParams<T>,
) -> Result<EngagementState<T>, ModelError> {
    check_state(x.0, params)?;
    let next = params.b * x.0 + params.cost(a) * d.as_scalar::<T>();
    Ok(EngagementState(next.max(T::zero()).min(params.state_bound())))
}

/// `p_a(x) = exp(-λ_a·x)`.
pub fn adherence_prob<T: Scalar>(x: EngagementState<T>, a: Action, params: &PatientParams<T>) -> T {
    adherence_prob_raw(x.0, params.lambda(a))
}

#[inline]
pub(crate) fn adherence_prob_raw<T: Scalar>(x: T, lambda: T) -> T {
    (-lambda * x.max(T::zero())).exp()
}

/// `g(x, a, d) = γ_a·d`.
pub fn reward<T: Scalar>(a: Action, d: Adherence, params: &PatientParams<T>) -> T {
    params.gamma(a) * d.as_scalar::<T>()
}

/// Synthetic patients and the policy-structure example model.
pub mod presets {
    use super::*;

    /// Patient 1: both treatments relatively costly.
    pub fn patient_one<T: Scalar>() -> PatientParams<T> {
        table_patient(0.7, 0.4, 0.5)
    }

    /// Patient 2: large perceived gap between low and high burden.
    pub fn patient_two<T: Scalar>() -> PatientParams<T> {
        table_patient(0.1, 0.2, 0.4)
    }

    fn table_patient<T: Scalar>(c_low: f64, lambda_low: f64, gamma_low: f64) -> PatientParams<T> {
        let b = 0.8;
        let bound = 1.0 / (1.0 - b);
        PatientParams::new(UncheckedParams {
            c_low: T::lit(c_low),
            c_high: T::one(),
            lambda_low: T::lit(lambda_low),
            lambda_high: T::one(),
            b: T::lit(b),
            x0: T::lit(0.5 * bound),
            gamma_low: T::lit(gamma_low),
            gamma_high: T::one(),
            alpha: T::lit(0.95),
        })
        .expect("preset parameters are valid")
    }

    /// `(b, λ_ℓ, λ_h, c_h, γ_ℓ, γ_h, α) = (0.9, 0.7, 0.8, 1, 0.5, 1, 0.95)` with the
    /// given low-burden cost. Small changes in `c_low` flip the optimal policy
    /// between always-low, double-threshold and single-threshold shapes.
    pub fn structure_example<T: Scalar>(c_low: T) -> Result<PatientParams<T>, ModelError> {
        PatientParams::new(UncheckedParams {
            c_low,
            c_high: T::one(),
            lambda_low: T::lit(0.7),
            lambda_high: T::lit(0.8),
            b: T::lit(0.9),
            x0: T::zero(),
            gamma_low: T::lit(0.5),
            gamma_high: T::one(),
            alpha: T::lit(0.95),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::presets::*;
    use super::*;
    use proptest::prelude::*;

    fn with(b: f64, c_low: f64, lambda_low: f64, lambda_high: f64) -> PatientParams<f64> {
        PatientParams::new(UncheckedParams {
            c_low,
            c_high: 1.0,
            lambda_low,
            lambda_high,
            b,
            x0: 0.0,
            gamma_low: 0.5,
            gamma_high: 1.0,
            alpha: 0.95,
        })
        .unwrap()
    }

    #[test]
    fn bound_values() {
        assert!((state_bound(1.0, 0.8).unwrap() - 5.0_f64).abs() < 1e-12);
        assert!((state_bound(1.0, 0.9).unwrap() - 10.0_f64).abs() < 1e-12);
        assert_eq!(state_bound(1.0, 0.5).unwrap(), 2.0_f64);
        assert!(state_bound(1.0, 1.0_f64).is_err());
        assert!(state_bound(1.0, 0.0_f64).is_err());
        assert!(state_bound(1.0, 1.5_f64).is_err());
    }

    #[test]
    fn dynamics_examples() {
        let p = with(0.8, 0.7, 0.4, 1.0);
        let x = EngagementState::new(0.5, &p).unwrap();
        let next = step_dynamics(x, Action::High, Adherence::Adhered, &p).unwrap();
        assert!((next.value() - 1.4).abs() < 1e-12);

        let x = EngagementState::new(1.0, &p).unwrap();
        let next = step_dynamics(x, Action::Low, Adherence::Missed, &p).unwrap();
        assert!((next.value() - 0.8).abs() < 1e-12);

        let top = EngagementState::new(p.state_bound(), &p).unwrap();
        let next = step_dynamics(top, Action::High, Adherence::Adhered, &p).unwrap();
        assert!((next.value() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn dynamics_rejects_out_of_bound_state() {
        let p = with(0.8, 0.7, 0.4, 1.0);
        assert!(EngagementState::new(5.1, &p).is_err());
        assert!(EngagementState::new(-0.1, &p).is_err());
        // rounding slack at the bound is absorbed
        assert!(EngagementState::new(5.0 + 1e-13, &p).is_ok());
    }

    #[test]
    fn adherence_probability_examples() {
        let p = with(0.8, 0.7, 1.0, 1.0);
        for a in Action::ALL {
            assert_eq!(adherence_prob(EngagementState::new(0.0, &p).unwrap(), a, &p), 1.0);
        }
        let one = EngagementState::new(1.0, &p).unwrap();
        assert!((adherence_prob(one, Action::High, &p) - 0.36788).abs() < 1e-5);
        let q = with(0.8, 0.7, 0.5, 1.0);
        let two = EngagementState::new(2.0, &q).unwrap();
        assert!((adherence_prob(two, Action::Low, &q) - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn reward_examples() {
        let p = patient_one::<f64>();
        assert_eq!(reward(Action::High, Adherence::Adhered, &p), 1.0);
        assert_eq!(reward(Action::Low, Adherence::Adhered, &p), 0.5);
        assert_eq!(reward(Action::High, Adherence::Missed, &p), 0.0);
        assert_eq!(reward(Action::Low, Adherence::Missed, &p), 0.0);
    }

    #[test]
    fn validation_rejects_bad_params() {
        let ok = patient_one::<f64>().to_unchecked();
        let cases: Vec<(UncheckedParams<f64>, &str)> = vec![
            (UncheckedParams { c_high: 2.0, ..ok }, "c_high"),
            (UncheckedParams { c_low: 1.2, ..ok }, "c_low"),
            (UncheckedParams { c_low: -0.1, ..ok }, "c_low"),
            (UncheckedParams { b: 1.0, ..ok }, "b"),
            (UncheckedParams { alpha: 1.0, ..ok }, "alpha"),
            (UncheckedParams { lambda_low: 0.0, ..ok }, "lambda"),
            (UncheckedParams { lambda_low: 2.0, ..ok }, "lambda order"),
            (UncheckedParams { gamma_low: 2.0, ..ok }, "gamma order"),
            (UncheckedParams { x0: 6.0, ..ok }, "x0"),
        ];
        for (raw, what) in cases {
            assert!(PatientParams::new(raw).is_err(), "{what} accepted");
        }
        let swapped = UncheckedParams { lambda_low: 2.0, ..ok };
        assert!(PatientParams::new_unordered(swapped).is_ok());
    }

    #[test]
    fn presets_match_table() {
        let p1 = patient_one::<f64>();
        assert_eq!((p1.c_low(), p1.lambda_low(), p1.lambda_high(), p1.b()), (0.7, 0.4, 1.0, 0.8));
        assert!((p1.x0() - 2.5).abs() < 1e-12);
        let p2 = patient_two::<f64>();
        assert_eq!((p2.c_low(), p2.lambda_low(), p2.gamma_low()), (0.1, 0.2, 0.4));
    }

    #[test]
    fn works_in_single_precision() {
        let p = patient_one::<f32>();
        let x = EngagementState::new(0.5f32, &p).unwrap();
        let next = step_dynamics(x, Action::High, Adherence::Adhered, &p).unwrap();
        assert!((next.value() - 1.4).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn dynamics_stay_bounded(
            b in 0.05f64..0.99,
            c_low in 0.0f64..=1.0,
            frac in 0.0f64..=1.0,
            high in any::<bool>(),
            adhered in any::<bool>(),
        ) {
            let p = with(b, c_low, 0.5, 1.0);
            let x = EngagementState::new(frac * p.state_bound(), &p).unwrap();
            let a = if high { Action::High } else { Action::Low };
            let next = step_dynamics(x, a, Adherence::from_bool(adhered), &p).unwrap();
            prop_assert!(next.value() >= 0.0 && next.value() <= p.state_bound());
            if !adhered && x.value() > 0.0 {
                prop_assert!(next.value() < x.value());
            }
        }

        #[test]
        fn adherence_prob_monotone(
            x in 0.0f64..5.0, dx in 1e-3f64..1.0, lam in 0.1f64..2.0, dl in 1e-3f64..1.0,
        ) {
            prop_assert!(adherence_prob_raw(x + dx, lam) < adherence_prob_raw(x, lam));
            if x > 0.0 {
                prop_assert!(adherence_prob_raw(x, lam + dl) < adherence_prob_raw(x, lam));
                prop_assert!(adherence_prob_raw(x, lam) < 1.0);
            }
            let p = with(0.8, 0.5, lam, lam + dl);
            let s = EngagementState::new(x.min(p.state_bound()), &p).unwrap();
            prop_assert!(adherence_prob(s, Action::Low, &p) >= adherence_prob(s, Action::High, &p));
        }
    }
}
