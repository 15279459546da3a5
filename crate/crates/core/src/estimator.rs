//! Profile-likelihood estimation of patient parameters from observed actions
//! and adherence decisions.
//!
//! With `(λ_ℓ, λ_h, b)` fixed, every latent state is affine in the remaining
//! unknowns,
//!
//! ```text
//! x_t = b^t·x0 + c_ℓ·Σ_{k<t, a_k=ℓ, d_k=1} b^{t-1-k} + Σ_{k<t, a_k=h, d_k=1} b^{t-1-k}
//! ```
//!
//! so the log-likelihood is a sum of linear terms (adhered days, `-λ·x_t`) and
//! concave terms (missed days, `log(1 - e^{-λ·x_t})`). Each tuple of the finite
//! `(λ_ℓ, λ_h, b)` grid is therefore a concave maximization over the box
//! `(x0, c_ℓ) ∈ [0, x̄(b)] × [0, 1]`, solved here by projected Newton ascent.
//! The maximum over tuples is the MLE (or MAP with a log-concave prior), and
//! the normalized exponentiated objectives give posterior weights over tuples.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Action, Adherence, ModelError, PatientParams, UncheckedParams};
use crate::scalar::Scalar;

/// States below this value make a missed day a probability-zero event.
pub const MISSED_STATE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("observation log is empty")]
    EmptyLog,
    #[error("{actions} actions but {decisions} adherence decisions")]
    LengthMismatch { actions: usize, decisions: usize },
    #[error("objective is -inf at the requested point")]
    InvalidPoint,
    #[error("data have zero likelihood everywhere on the feasible box for tuple {0}")]
    InfeasibleData(String),
    #[error("no subproblem has a finite objective")]
    EstimationFailure,
    #[error("invalid subproblem grid: {0}")]
    InvalidGrid(String),
}

/// Observed `(a_t, d_t)` pairs, `t = 0..n`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ObservationLog {
    actions: Vec<Action>,
    decisions: Vec<Adherence>,
}

impl ObservationLog {
    pub fn new(actions: Vec<Action>, decisions: Vec<Adherence>) -> Result<Self, EstimatorError> {
        if actions.len() != decisions.len() {
            return Err(EstimatorError::LengthMismatch {
                actions: actions.len(),
                decisions: decisions.len(),
            });
        }
        Ok(Self { actions, decisions })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Action, Adherence)>) -> Self {
        let (actions, decisions) = pairs.into_iter().unzip();
        Self { actions, decisions }
    }

    pub fn push(&mut self, a: Action, d: Adherence) {
        self.actions.push(a);
        self.decisions.push(d);
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn decisions(&self) -> &[Adherence] {
        &self.decisions
    }

    pub fn iter(&self) -> impl Iterator<Item = (Action, Adherence)> + '_ {
        self.actions.iter().copied().zip(self.decisions.iter().copied())
    }

    /// The first `n` observations.
    pub fn prefix(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            actions: self.actions[..n].to_vec(),
            decisions: self.decisions[..n].to_vec(),
        }
    }
}

/// Day indices split by `(action, decision)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IndexSets {
    pub low_missed: Vec<usize>,
    pub low_adhered: Vec<usize>,
    pub high_missed: Vec<usize>,
    pub high_adhered: Vec<usize>,
}

pub fn build_index_sets(log: &ObservationLog) -> IndexSets {
    let mut sets = IndexSets::default();
    for (t, (a, d)) in log.iter().enumerate() {
        let bucket = match (a, d) {
            (Action::Low, Adherence::Missed) => &mut sets.low_missed,
            (Action::Low, Adherence::Adhered) => &mut sets.low_adhered,
            (Action::High, Adherence::Missed) => &mut sets.high_missed,
            (Action::High, Adherence::Adhered) => &mut sets.high_adhered,
        };
        bucket.push(t);
    }
    sets
}

/// The parameters held fixed in one subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelTuple<T> {
    pub lambda_low: T,
    pub lambda_high: T,
    pub b: T,
}

impl<T: Scalar> ModelTuple<T> {
    pub fn new(lambda_low: T, lambda_high: T, b: T) -> Self {
        Self {
            lambda_low,
            lambda_high,
            b,
        }
    }

    pub fn lambda(&self, a: Action) -> T {
        match a {
            Action::Low => self.lambda_low,
            Action::High => self.lambda_high,
        }
    }

    /// `x̄ = 1 / (1 - b)` with `c_h = 1`.
    pub fn state_bound(&self) -> T {
        T::one() / (T::one() - self.b)
    }

    pub fn of_params(p: &PatientParams<T>) -> Self {
        Self::new(p.lambda_low(), p.lambda_high(), p.b())
    }

    pub fn approx_eq(&self, other: &Self, tol: T) -> bool {
        (self.lambda_low - other.lambda_low).abs() <= tol
            && (self.lambda_high - other.lambda_high).abs() <= tol
            && (self.b - other.b).abs() <= tol
    }
}

impl<T: Scalar> std::fmt::Display for ModelTuple<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(λℓ={}, λh={}, b={})", self.lambda_low, self.lambda_high, self.b)
    }
}

/// Finite grid of `(λ_ℓ, λ_h, b)` tuples, one subproblem each.
#[derive(Debug, Clone, PartialEq)]
pub struct SubproblemGrid<T> {
    lambda_set: Vec<T>,
    b_set: Vec<T>,
    enforce_order: bool,
    tuples: Vec<ModelTuple<T>>,
}

impl<T: Scalar> SubproblemGrid<T> {
    /// Enumerates `(λ_ℓ, λ_h)` pairs in ascending order (skipping `λ_ℓ > λ_h`
    /// when `enforce_order`), with `b` varying fastest.
    pub fn new(lambda_set: Vec<T>, b_set: Vec<T>, enforce_order: bool) -> Result<Self, EstimatorError> {
        let ascending = |v: &[T]| v.windows(2).all(|w| w[0] < w[1]);
        if lambda_set.is_empty() || b_set.is_empty() {
            return Err(EstimatorError::InvalidGrid("parameter sets must be non-empty".into()));
        }
        if !ascending(&lambda_set) || !ascending(&b_set) {
            return Err(EstimatorError::InvalidGrid("parameter sets must be strictly ascending".into()));
        }
        if lambda_set.iter().any(|l| !(*l > T::zero() && l.is_finite())) {
            return Err(EstimatorError::InvalidGrid("lambda values must be positive".into()));
        }
        if b_set.iter().any(|b| !(*b > T::zero() && *b < T::one())) {
            return Err(EstimatorError::InvalidGrid("b values must lie in (0, 1)".into()));
        }
        let mut tuples = Vec::new();
        for &ll in &lambda_set {
            for &lh in &lambda_set {
                if enforce_order && ll > lh {
                    continue;
                }
                for &b in &b_set {
                    tuples.push(ModelTuple::new(ll, lh, b));
                }
            }
        }
        Ok(Self {
            lambda_set,
            b_set,
            enforce_order,
            tuples,
        })
    }

    /// `Θ^λ = {0.2, 0.4, 0.6, 0.8, 1}`, `Θ^b = {0.6, 0.7, 0.8, 0.9}`, ordered pairs: 60 tuples.
    pub fn standard() -> Self {
        let lambdas = [0.2, 0.4, 0.6, 0.8, 1.0].map(T::lit).to_vec();
        let bs = [0.6, 0.7, 0.8, 0.9].map(T::lit).to_vec();
        Self::new(lambdas, bs, true).expect("standard grid is valid")
    }

    pub fn tuples(&self) -> &[ModelTuple<T>] {
        &self.tuples
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn lambda_set(&self) -> &[T] {
        &self.lambda_set
    }

    pub fn b_set(&self) -> &[T] {
        &self.b_set
    }

    pub fn enforces_order(&self) -> bool {
        self.enforce_order
    }

    pub fn index_of(&self, tuple: &ModelTuple<T>) -> Option<usize> {
        let tol = T::lit(1e-9);
        self.tuples.iter().position(|t| t.approx_eq(tuple, tol))
    }

    fn b_index(&self, b: T) -> usize {
        self.b_set
            .iter()
            .position(|v| *v == b)
            .expect("tuple b drawn from b_set")
    }
}

/// Log-prior hook over `(c_ℓ, x0)` within one tuple (`c_h` is fixed at 1).
/// Must be concave in `(x0, c_ℓ)` and finite on the feasible box.
pub trait LogPrior<T>: Send + Sync {
    fn log_density(&self, x0: T, c_low: T, tuple: &ModelTuple<T>) -> T;
    /// `(∂/∂x0, ∂/∂c_ℓ)`.
    fn gradient(&self, x0: T, c_low: T, tuple: &ModelTuple<T>) -> [T; 2];
    /// Hessian in `(x0, c_ℓ)` order.
    fn hessian(&self, x0: T, c_low: T, tuple: &ModelTuple<T>) -> [[T; 2]; 2];
}

/// Constant log-prior: MAP coincides with MLE.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformPrior;

impl<T: Scalar> LogPrior<T> for UniformPrior {
    fn log_density(&self, _: T, _: T, _: &ModelTuple<T>) -> T {
        T::zero()
    }
    fn gradient(&self, _: T, _: T, _: &ModelTuple<T>) -> [T; 2] {
        [T::zero(); 2]
    }
    fn hessian(&self, _: T, _: T, _: &ModelTuple<T>) -> [[T; 2]; 2] {
        [[T::zero(); 2]; 2]
    }
}

/// Independent normal log-densities (up to a constant) on `x0` and `c_ℓ`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianPrior<T> {
    pub x0_mean: T,
    pub x0_sd: T,
    pub c_low_mean: T,
    pub c_low_sd: T,
}

impl<T: Scalar> LogPrior<T> for GaussianPrior<T> {
    fn log_density(&self, x0: T, c_low: T, _: &ModelTuple<T>) -> T {
        let half = T::lit(0.5);
        let zx = (x0 - self.x0_mean) / self.x0_sd;
        let zc = (c_low - self.c_low_mean) / self.c_low_sd;
        -half * (zx * zx + zc * zc)
    }
    fn gradient(&self, x0: T, c_low: T, _: &ModelTuple<T>) -> [T; 2] {
        [
            -(x0 - self.x0_mean) / (self.x0_sd * self.x0_sd),
            -(c_low - self.c_low_mean) / (self.c_low_sd * self.c_low_sd),
        ]
    }
    fn hessian(&self, _: T, _: T, _: &ModelTuple<T>) -> [[T; 2]; 2] {
        [
            [-T::one() / (self.x0_sd * self.x0_sd), T::zero()],
            [T::zero(), -T::one() / (self.c_low_sd * self.c_low_sd)],
        ]
    }
}

/// States implied by `(x0, c_ℓ)` under the tuple's `b`, for `t = 0..=n`. The
/// last entry is the state after the final observation.
pub fn induced_trajectory<T: Scalar>(x0: T, c_low: T, tuple: &ModelTuple<T>, log: &ObservationLog) -> Vec<T> {
    let b = tuple.b;
    let mut pow = T::one();
    let (mut low_sum, mut high_sum) = (T::zero(), T::zero());
    let mut states = Vec::with_capacity(log.len() + 1);
    states.push(x0);
    for (a, d) in log.iter() {
        pow = pow * b;
        low_sum = b * low_sum;
        high_sum = b * high_sum;
        if d.is_adhered() {
            match a {
                Action::Low => low_sum = low_sum + T::one(),
                Action::High => high_sum = high_sum + T::one(),
            }
        }
        states.push(pow * x0 + low_sum * c_low + high_sum);
    }
    states
}

#[inline]
fn floor<T: Scalar>() -> T {
    T::lit(MISSED_STATE_FLOOR)
}

/// `log(1 - e^{-λx})`, or `-inf` below the state floor.
#[inline]
fn log_miss_prob<T: Scalar>(lambda: T, x: T) -> T {
    if x < floor() {
        T::neg_infinity()
    } else {
        (-(-lambda * x).exp_m1()).ln()
    }
}

/// Log-likelihood of the log under `(x0, c_ℓ)` and the tuple. `-inf` when a
/// missed day falls on a zero state.
pub fn log_likelihood<T: Scalar>(x0: T, c_low: T, tuple: &ModelTuple<T>, log: &ObservationLog) -> T {
    let states = induced_trajectory(x0, c_low, tuple, log);
    log.iter()
        .zip(&states)
        .map(|((a, d), &x)| {
            let lambda = tuple.lambda(a);
            if d.is_adhered() {
                -lambda * x
            } else {
                log_miss_prob(lambda, x)
            }
        })
        .fold(T::zero(), |acc, v| acc + v)
}

/// `(∂/∂x0, ∂/∂c_ℓ)` of [`log_likelihood`].
pub fn log_likelihood_gradient<T: Scalar>(
    x0: T,
    c_low: T,
    tuple: &ModelTuple<T>,
    log: &ObservationLog,
) -> Result<(T, T), EstimatorError> {
    let stats = AffineStates::from_log(tuple.b, log);
    let obj = Objective::new(&stats, *tuple, &UniformPrior);
    let (_, g, _) = obj.derivatives([x0, c_low]).ok_or(EstimatorError::InvalidPoint)?;
    Ok((g[0], g[1]))
}

#[derive(Debug, Clone, Copy, Default)]
struct Coeffs<T> {
    pow: T,
    low: T,
    high: T,
}

impl<T: Scalar> Coeffs<T> {
    #[inline]
    fn state(&self, x0: T, c_low: T) -> T {
        self.pow * x0 + self.low * c_low + self.high
    }

    fn add(&mut self, o: &Coeffs<T>) {
        self.pow = self.pow + o.pow;
        self.low = self.low + o.low;
        self.high = self.high + o.high;
    }
}

/// Coefficients of the missed days under one action, stored column-wise.
#[derive(Debug, Clone, Default)]
struct MissedDays<T> {
    pow: Vec<T>,
    low: Vec<T>,
    high: Vec<T>,
}

impl<T: Scalar> MissedDays<T> {
    fn push(&mut self, c: Coeffs<T>) {
        self.pow.push(c.pow);
        self.low.push(c.low);
        self.high.push(c.high);
    }

    fn min_state(&self, x0: T, c_low: T) -> T {
        let mut m = T::infinity();
        for i in 0..self.pow.len() {
            m = m.min(self.pow[i] * x0 + self.low[i] * c_low + self.high[i]);
        }
        m
    }
}

/// Affine decomposition `x_t = pow_t·x0 + low_t·c_ℓ + high_t` of every state for
/// one recovery rate, maintained incrementally as observations arrive.
///
/// Adhered days contribute linearly, so only their coefficient sums are kept;
/// missed days are stored individually.
#[derive(Debug, Clone)]
pub struct AffineStates<T> {
    b: T,
    next: Coeffs<T>,
    adhered_low: Coeffs<T>,
    adhered_high: Coeffs<T>,
    missed_low: MissedDays<T>,
    missed_high: MissedDays<T>,
    len: usize,
}

impl<T: Scalar> AffineStates<T> {
    pub fn new(b: T) -> Self {
        Self {
            b,
            next: Coeffs {
                pow: T::one(),
                low: T::zero(),
                high: T::zero(),
            },
            adhered_low: Coeffs::default(),
            adhered_high: Coeffs::default(),
            missed_low: MissedDays::default(),
            missed_high: MissedDays::default(),
            len: 0,
        }
    }

    pub fn from_log(b: T, log: &ObservationLog) -> Self {
        let mut s = Self::new(b);
        for (a, d) in log.iter() {
            s.push(a, d);
        }
        s
    }

    pub fn push(&mut self, a: Action, d: Adherence) {
        let cur = self.next;
        if d.is_adhered() {
            match a {
                Action::Low => self.adhered_low.add(&cur),
                Action::High => self.adhered_high.add(&cur),
            }
        } else {
            match a {
                Action::Low => self.missed_low.push(cur),
                Action::High => self.missed_high.push(cur),
            }
        }
        let b = self.b;
        self.next = Coeffs {
            pow: cur.pow * b,
            low: cur.low * b + if d.is_adhered() && a == Action::Low { T::one() } else { T::zero() },
            high: cur.high * b + if d.is_adhered() && a == Action::High { T::one() } else { T::zero() },
        };
        self.len += 1;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn b(&self) -> T {
        self.b
    }

    /// State after the last observation under `(x0, c_ℓ)`.
    pub fn current_state(&self, x0: T, c_low: T) -> T {
        self.next.state(x0, c_low)
    }

    /// Whether every missed day has a state above the floor, i.e. the
    /// log-likelihood is finite at `(x0, c_ℓ)`.
    fn feasible_at(&self, z: [T; 2]) -> bool {
        self.missed_low.min_state(z[0], z[1]).min(self.missed_high.min_state(z[0], z[1])) >= floor()
    }
}

/// Subproblem objective in `z = (x0, c_ℓ)`.
struct Objective<'a, T> {
    stats: &'a AffineStates<T>,
    tuple: ModelTuple<T>,
    prior: &'a dyn LogPrior<T>,
    // linear part from adhered days: lin_const + lin[0]·x0 + lin[1]·c_ℓ
    lin_const: T,
    lin: [T; 2],
}

impl<'a, T: Scalar> Objective<'a, T> {
    fn new(stats: &'a AffineStates<T>, tuple: ModelTuple<T>, prior: &'a dyn LogPrior<T>) -> Self {
        let (ll, lh) = (tuple.lambda_low, tuple.lambda_high);
        let (al, ah) = (&stats.adhered_low, &stats.adhered_high);
        Self {
            stats,
            tuple,
            prior,
            lin_const: -(ll * al.high + lh * ah.high),
            lin: [-(ll * al.pow + lh * ah.pow), -(ll * al.low + lh * ah.low)],
        }
    }

    #[cfg(test)]
    fn value(&self, z: [T; 2]) -> T {
        self.derivatives(z).map_or(T::neg_infinity(), |d| d.0)
    }

    /// Value, gradient and Hessian, or `None` where the objective is `-inf`.
    #[allow(clippy::type_complexity)]
    fn derivatives(&self, z: [T; 2]) -> Option<(T, [T; 2], [[T; 2]; 2])> {
        let mut acc = [self.lin_const + self.lin[0] * z[0] + self.lin[1] * z[1], self.lin[0], self.lin[1]];
        let mut hess = [T::zero(); 3];
        for (days, lambda) in [
            (&self.stats.missed_low, self.tuple.lambda_low),
            (&self.stats.missed_high, self.tuple.lambda_high),
        ] {
            if !missed_terms(days, lambda, z, &mut acc, &mut hess) {
                return None;
            }
        }
        let pf = self.prior.log_density(z[0], z[1], &self.tuple);
        let pg = self.prior.gradient(z[0], z[1], &self.tuple);
        let ph = self.prior.hessian(z[0], z[1], &self.tuple);
        Some((
            acc[0] + pf,
            [acc[1] + pg[0], acc[2] + pg[1]],
            [
                [hess[0] + ph[0][0], hess[1] + ph[0][1]],
                [hess[1] + ph[1][0], hess[2] + ph[1][1]],
            ],
        ))
    }
}

/// Adds the missed-day terms of one action to `acc = (f, ∂x0, ∂c)` and
/// `hess = (xx, xc, cc)`. Returns false if a state falls below the floor.
#[inline]
fn missed_terms<T: Scalar>(days: &MissedDays<T>, lambda: T, z: [T; 2], acc: &mut [T; 3], hess: &mut [T; 3]) -> bool {
    let [mut f, mut g0, mut g1] = *acc;
    let [mut h00, mut h01, mut h11] = *hess;
    let lambda2 = lambda * lambda;
    for i in 0..days.pow.len() {
        let (cx, cc) = (days.pow[i], days.low[i]);
        let x = cx * z[0] + cc * z[1] + days.high[i];
        if x < floor() {
            return false;
        }
        let em1 = (-lambda * x).exp_m1(); // e^{-λx} - 1 ∈ (-1, 0)
        let e = T::one() + em1;
        f = f + (-em1).ln();
        // d/dx log(1 - e^{-λx}) = λ e^{-λx} / (1 - e^{-λx})
        let d1 = -lambda * e / em1;
        // d²/dx² = -λ² e^{-λx} / (1 - e^{-λx})²
        let d2 = -lambda2 * e / (em1 * em1);
        g0 = g0 + d1 * cx;
        g1 = g1 + d1 * cc;
        h00 = h00 + d2 * cx * cx;
        h01 = h01 + d2 * cx * cc;
        h11 = h11 + d2 * cc * cc;
    }
    *acc = [f, g0, g1];
    *hess = [h00, h01, h11];
    true
}

/// Inner solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions<T> {
    pub initial_step: T,
    pub shrink: T,
    pub armijo: T,
    /// Stop when `‖P(z + ∇f) - z‖∞` falls below this.
    pub tolerance: T,
    pub max_iterations: usize,
    /// Solve from the center and four corners and keep the best; the spread of
    /// the five optima is reported as a concavity certificate.
    pub multi_start: bool,
}

impl<T: Scalar> Default for SolverOptions<T> {
    fn default() -> Self {
        Self {
            initial_step: T::one(),
            shrink: T::lit(0.5),
            armijo: T::lit(1e-4),
            tolerance: T::lit(1e-8),
            max_iterations: 500,
            multi_start: true,
        }
    }
}

impl<T: Scalar> SolverOptions<T> {
    /// Single start, intended for warm-started refits.
    pub fn single_start() -> Self {
        Self {
            multi_start: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitDiagnostics<T> {
    pub iterations: usize,
    pub converged: bool,
    /// Maximizer sits on a bound with the gradient pushing outward.
    pub boundary_active: bool,
    /// Largest minus smallest optimum over the starts (`None` for a single start).
    pub start_spread: Option<T>,
}

/// Argmax `(ĉ_ℓ, ĉ_h = 1, x̂0)` of one subproblem and its objective `ψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubproblemSolution<T> {
    pub tuple: ModelTuple<T>,
    pub c_low: T,
    pub c_high: T,
    pub x0: T,
    /// Log-likelihood plus log-prior at the argmax; `-inf` for infeasible data.
    pub psi: T,
    pub induced_states: Vec<T>,
    pub diagnostics: FitDiagnostics<T>,
}

impl<T: Scalar> SubproblemSolution<T> {
    /// Full parameter vector with the known rewards and discount attached.
    pub fn to_params(&self, gamma_low: T, gamma_high: T, alpha: T) -> Result<PatientParams<T>, ModelError> {
        PatientParams::new_unordered(UncheckedParams {
            c_low: self.c_low,
            c_high: self.c_high,
            lambda_low: self.tuple.lambda_low,
            lambda_high: self.tuple.lambda_high,
            b: self.tuple.b,
            x0: self.x0,
            gamma_low,
            gamma_high,
            alpha,
        })
    }

    pub fn is_feasible(&self) -> bool {
        self.psi > T::neg_infinity()
    }
}

struct Maximum<T> {
    z: [T; 2],
    f: T,
    g: [T; 2],
    iterations: usize,
    converged: bool,
}

#[inline]
fn project<T: Scalar>(z: [T; 2], hi: [T; 2]) -> [T; 2] {
    [z[0].max(T::zero()).min(hi[0]), z[1].max(T::zero()).min(hi[1])]
}

#[inline]
fn projected_gradient_norm<T: Scalar>(z: [T; 2], g: [T; 2], hi: [T; 2]) -> T {
    let p = project([z[0] + g[0], z[1] + g[1]], hi);
    (p[0] - z[0]).abs().max((p[1] - z[1]).abs())
}

/// Projected Newton ascent on the box `[0, hi[0]] × [0, hi[1]]`.
///
/// Coordinates on a bound whose gradient points outward are held at the bound
/// and take a plain gradient step; the free block takes a Newton step when its
/// Hessian is negative definite and a gradient step otherwise. Steps are
/// accepted by Armijo backtracking along the projection arc.
fn maximize<T: Scalar>(obj: &Objective<'_, T>, start: [T; 2], hi: [T; 2], opts: &SolverOptions<T>) -> Option<Maximum<T>> {
    let mut z = project(start, hi);
    let (mut f, mut g, mut h) = obj.derivatives(z)?;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        let pg = projected_gradient_norm(z, g, hi);
        if pg < opts.tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let eps = pg.min(T::lit(1e-8));
        let active = [0, 1].map(|i| (z[i] <= eps && g[i] < T::zero()) || (z[i] >= hi[i] - eps && g[i] > T::zero()));
        let newton = newton_direction(g, h, active);
        let mut accepted = None;
        let mut stationary = false;
        for dir in newton.into_iter().chain(std::iter::once(g)) {
            match armijo_search(obj, z, f, g, dir, hi, opts) {
                LineSearch::Ascent(step) => accepted = Some(step),
                LineSearch::Stationary(step) => {
                    accepted = step;
                    stationary = true;
                }
                LineSearch::Failed => continue,
            }
            break;
        }
        if let Some((z_new, (nf, ng, nh))) = accepted {
            z = z_new;
            f = nf;
            g = ng;
            h = nh;
        }
        if stationary || accepted.is_none() {
            // no measurable ascent along the projection arc
            converged = true;
            break;
        }
    }
    Some(Maximum {
        z,
        f,
        g,
        iterations,
        converged,
    })
}

fn newton_direction<T: Scalar>(g: [T; 2], h: [[T; 2]; 2], active: [bool; 2]) -> Option<[T; 2]> {
    let tiny = T::epsilon();
    match active {
        [false, false] => {
            let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
            let scale = (h[0][0] * h[1][1]).abs().max(h[0][1] * h[0][1]);
            if h[0][0] < T::zero() && h[1][1] < T::zero() && det > tiny * scale.max(tiny) {
                // d = -H^{-1} g
                Some([
                    -(h[1][1] * g[0] - h[0][1] * g[1]) / det,
                    -(-h[1][0] * g[0] + h[0][0] * g[1]) / det,
                ])
            } else {
                None
            }
        }
        [true, true] => None,
        [a0, _] => {
            let (free, fixed) = if a0 { (1, 0) } else { (0, 1) };
            if h[free][free] < T::zero() {
                let mut d = [T::zero(); 2];
                d[free] = -g[free] / h[free][free];
                d[fixed] = g[fixed];
                Some(d)
            } else {
                None
            }
        }
    }
}

type Evaluated<T> = ([T; 2], (T, [T; 2], [[T; 2]; 2]));

enum LineSearch<T> {
    Ascent(Evaluated<T>),
    /// The predicted gain is below the rounding level of `f`: the point is
    /// optimal to working precision. Carries the final step if it did not
    /// measurably decrease `f`.
    Stationary(Option<Evaluated<T>>),
    Failed,
}

fn armijo_search<T: Scalar>(
    obj: &Objective<'_, T>,
    z: [T; 2],
    f: T,
    g: [T; 2],
    dir: [T; 2],
    hi: [T; 2],
    opts: &SolverOptions<T>,
) -> LineSearch<T> {
    let roundoff = T::lit(64.0) * T::epsilon() * (T::one() + f.abs());
    let mut step = opts.initial_step;
    for _ in 0..64 {
        let cand = project([z[0] + step * dir[0], z[1] + step * dir[1]], hi);
        if cand == z {
            return LineSearch::Failed;
        }
        let gain = g[0] * (cand[0] - z[0]) + g[1] * (cand[1] - z[1]);
        if gain <= T::zero() {
            return LineSearch::Failed;
        }
        let eval = obj.derivatives(cand);
        if gain <= roundoff {
            return LineSearch::Stationary(eval.filter(|d| d.0 >= f - roundoff).map(|d| (cand, d)));
        }
        if let Some(d) = eval {
            if d.0 - f >= opts.armijo * gain {
                return LineSearch::Ascent((cand, d));
            }
        }
        step = step * opts.shrink;
    }
    LineSearch::Failed
}

/// Maximizes log-likelihood plus log-prior over `(x0, c_ℓ) ∈ [0, x̄(b)] × [0, 1]`.
pub fn solve_subproblem<T: Scalar>(
    tuple: &ModelTuple<T>,
    log: &ObservationLog,
    prior: &dyn LogPrior<T>,
) -> Result<SubproblemSolution<T>, EstimatorError> {
    if log.is_empty() {
        return Err(EstimatorError::EmptyLog);
    }
    let stats = AffineStates::from_log(tuple.b, log);
    solve_subproblem_with(tuple, &stats, log, prior, &SolverOptions::default(), None)
}

/// [`solve_subproblem`] on precomputed state coefficients, with explicit
/// solver options and an optional `(x0, c_ℓ)` warm start.
pub fn solve_subproblem_with<T: Scalar>(
    tuple: &ModelTuple<T>,
    stats: &AffineStates<T>,
    log: &ObservationLog,
    prior: &dyn LogPrior<T>,
    opts: &SolverOptions<T>,
    warm_start: Option<[T; 2]>,
) -> Result<SubproblemSolution<T>, EstimatorError> {
    if stats.is_empty() {
        return Err(EstimatorError::EmptyLog);
    }
    let obj = Objective::new(stats, *tuple, prior);
    let hi = [tuple.state_bound(), T::one()];
    let half = T::lit(0.5);
    let center = [hi[0] * half, half];
    // every state is nondecreasing in (x0, c_ℓ): if the top corner is -inf, so is the box
    if !stats.feasible_at(hi) {
        return Err(EstimatorError::InfeasibleData(tuple.to_string()));
    }

    let mut starts = Vec::with_capacity(5);
    if let Some(w) = warm_start {
        starts.push(project(w, hi));
    }
    if opts.multi_start || warm_start.is_none() {
        starts.push(center);
    }
    if opts.multi_start {
        let inset = T::lit(1e-3);
        let (lo_x, hi_x) = (hi[0] * inset, hi[0] * (T::one() - inset));
        let (lo_c, hi_c) = (inset, T::one() - inset);
        starts.extend([[lo_x, lo_c], [lo_x, hi_c], [hi_x, lo_c], [hi_x, hi_c]]);
    }

    let mut best: Option<Maximum<T>> = None;
    let (mut lo_f, mut hi_f) = (T::infinity(), T::neg_infinity());
    let mut finite_runs = 0usize;
    for s in starts {
        let s = if stats.feasible_at(s) { s } else { hi };
        if let Some(m) = maximize(&obj, s, hi, opts) {
            finite_runs += 1;
            lo_f = lo_f.min(m.f);
            hi_f = hi_f.max(m.f);
            if best.as_ref().is_none_or(|b| m.f > b.f) {
                best = Some(m);
            }
        }
    }
    let best = best.ok_or_else(|| EstimatorError::InfeasibleData(tuple.to_string()))?;
    let g = best.g;
    let edge = T::lit(1e-9);
    let boundary_active = (0..2).any(|i| {
        (best.z[i] <= edge && g[i] < -opts.tolerance) || (best.z[i] >= hi[i] - edge && g[i] > opts.tolerance)
    });
    let [x0, c_low] = best.z;
    Ok(SubproblemSolution {
        tuple: *tuple,
        c_low,
        c_high: T::one(),
        x0,
        psi: best.f,
        induced_states: induced_trajectory(x0, c_low, tuple, log),
        diagnostics: FitDiagnostics {
            iterations: best.iterations,
            converged: best.converged,
            boundary_active,
            start_spread: (opts.multi_start && finite_runs > 1).then(|| hi_f - lo_f),
        },
    })
}

/// Placeholder solution for a tuple under which the data are impossible.
fn infeasible_solution<T: Scalar>(tuple: &ModelTuple<T>, log: &ObservationLog) -> SubproblemSolution<T> {
    let x0 = tuple.state_bound();
    SubproblemSolution {
        tuple: *tuple,
        c_low: T::one(),
        c_high: T::one(),
        x0,
        psi: T::neg_infinity(),
        induced_states: induced_trajectory(x0, T::one(), tuple, log),
        diagnostics: FitDiagnostics {
            iterations: 0,
            converged: false,
            boundary_active: false,
            start_spread: None,
        },
    }
}

/// All subproblem solutions, aligned with the grid's tuples.
#[derive(Debug, Clone)]
pub struct FitReport<T> {
    pub solutions: Vec<SubproblemSolution<T>>,
    /// Tuples whose maximizer sits on an outward-pushing bound.
    pub degenerate: Vec<usize>,
    /// Tuples with `ψ = -inf`.
    pub infeasible: Vec<usize>,
    /// Tuples not re-solved by an [`OnlineEstimator`] fit; their `ψ` is the
    /// previous fit's value, an upper bound on the current one.
    pub screened: Vec<usize>,
}

pub fn fit_all<T: Scalar>(
    grid: &SubproblemGrid<T>,
    log: &ObservationLog,
    prior: &dyn LogPrior<T>,
) -> Result<FitReport<T>, EstimatorError> {
    if log.is_empty() {
        return Err(EstimatorError::EmptyLog);
    }
    let stats: Vec<_> = grid.b_set().iter().map(|&b| AffineStates::from_log(b, log)).collect();
    let opts = SolverOptions::default();
    let mut report = FitReport {
        solutions: Vec::with_capacity(grid.len()),
        degenerate: Vec::new(),
        infeasible: Vec::new(),
        screened: Vec::new(),
    };
    for (i, tuple) in grid.tuples().iter().enumerate() {
        let s = &stats[grid.b_index(tuple.b)];
        push_solution(&mut report, i, tuple, solve_subproblem_with(tuple, s, log, prior, &opts, None), log)?;
    }
    Ok(report)
}

fn push_solution<T: Scalar>(
    report: &mut FitReport<T>,
    index: usize,
    tuple: &ModelTuple<T>,
    result: Result<SubproblemSolution<T>, EstimatorError>,
    log: &ObservationLog,
) -> Result<(), EstimatorError> {
    match result {
        Ok(sol) => {
            if sol.diagnostics.boundary_active {
                report.degenerate.push(index);
            }
            report.solutions.push(sol);
        }
        Err(EstimatorError::InfeasibleData(_)) => {
            report.infeasible.push(index);
            report.solutions.push(infeasible_solution(tuple, log));
        }
        Err(e) => return Err(e),
    }
    Ok(())
}

/// Index of the solution with the largest `ψ`; ties go to the smallest index.
pub fn mle_estimate<T: Scalar>(solutions: &[SubproblemSolution<T>]) -> Result<(usize, &SubproblemSolution<T>), EstimatorError> {
    let mut best: Option<(usize, &SubproblemSolution<T>)> = None;
    for (i, s) in solutions.iter().enumerate() {
        if s.is_feasible() && best.is_none_or(|(_, b)| s.psi > b.psi) {
            best = Some((i, s));
        }
    }
    best.ok_or(EstimatorError::EstimationFailure)
}

/// Normalized `exp(ψ_i) / Σ_j exp(ψ_j)` over subproblem solutions.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorWeights<T> {
    pub weights: Vec<T>,
}

impl<T: Scalar> PosteriorWeights<T> {
    /// Index drawn with probability equal to its weight, given `u ∈ [0, 1)`.
    /// Zero-weight entries are never returned.
    pub fn sample_index(&self, u: T) -> usize {
        let mut acc = T::zero();
        let mut last_positive = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > T::zero() {
                acc = acc + w;
                last_positive = i;
                if u < acc {
                    return i;
                }
            }
        }
        last_positive
    }
}

pub fn posterior_weights<T: Scalar>(solutions: &[SubproblemSolution<T>]) -> Result<PosteriorWeights<T>, EstimatorError> {
    weights_from_psi(&solutions.iter().map(|s| s.psi).collect::<Vec<_>>())
}

/// Log-sum-exp normalization of objective values; `-inf` entries get weight 0.
pub fn weights_from_psi<T: Scalar>(psi: &[T]) -> Result<PosteriorWeights<T>, EstimatorError> {
    let max = psi.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return Err(EstimatorError::EstimationFailure);
    }
    let raw: Vec<T> = psi.iter().map(|&p| (p - max).exp()).collect();
    let total: T = raw.iter().copied().sum();
    Ok(PosteriorWeights {
        weights: raw.into_iter().map(|w| w / total).collect(),
    })
}

/// Default screening margin of [`OnlineEstimator`], in log-likelihood units.
pub const DEFAULT_SCREENING_MARGIN: f64 = 50.0;

/// Daily refitting over a growing log. Each subproblem restarts from its
/// previous argmax, and the state coefficients grow by one entry per day.
///
/// Adding observations can only lower a subproblem's maximum, so a previous
/// `ψ_i` is an upper bound on the current one. Subproblems whose bound trails
/// the current best by more than the screening margin are not re-solved: they
/// cannot be the MLE, and their posterior weight is below `e^{-margin}`.
/// Tuples with infeasible data stay infeasible and are never re-solved.
#[derive(Debug, Clone)]
pub struct OnlineEstimator<T> {
    grid: Arc<SubproblemGrid<T>>,
    stats: Vec<AffineStates<T>>,
    previous: Vec<Option<SubproblemSolution<T>>>,
    infeasible: Vec<bool>,
    log: ObservationLog,
    options: SolverOptions<T>,
    screening: Option<T>,
}

impl<T: Scalar> OnlineEstimator<T> {
    pub fn new(grid: Arc<SubproblemGrid<T>>) -> Self {
        Self {
            stats: grid.b_set().iter().map(|&b| AffineStates::new(b)).collect(),
            previous: vec![None; grid.len()],
            infeasible: vec![false; grid.len()],
            log: ObservationLog::default(),
            options: SolverOptions::single_start(),
            screening: Some(T::lit(DEFAULT_SCREENING_MARGIN)),
            grid,
        }
    }

    pub fn with_options(mut self, options: SolverOptions<T>) -> Self {
        self.options = options;
        self
    }

    /// `None` re-solves every subproblem on every fit.
    pub fn with_screening(mut self, margin: Option<T>) -> Self {
        self.screening = margin;
        self
    }

    pub fn grid(&self) -> &SubproblemGrid<T> {
        &self.grid
    }

    pub fn log(&self) -> &ObservationLog {
        &self.log
    }

    pub fn push(&mut self, a: Action, d: Adherence) {
        self.log.push(a, d);
        for s in &mut self.stats {
            s.push(a, d);
        }
    }

    fn solve(&mut self, i: usize, prior: &dyn LogPrior<T>) -> Result<SubproblemSolution<T>, EstimatorError> {
        let tuple = self.grid.tuples()[i];
        let stats = &self.stats[self.grid.b_index(tuple.b)];
        let warm = self.previous[i].as_ref().map(|p| [p.x0, p.c_low]);
        match solve_subproblem_with(&tuple, stats, &self.log, prior, &self.options, warm) {
            Ok(sol) => {
                self.previous[i] = Some(sol.clone());
                Ok(sol)
            }
            Err(EstimatorError::InfeasibleData(_)) => {
                self.infeasible[i] = true;
                Ok(infeasible_solution(&tuple, &self.log))
            }
            Err(e) => Err(e),
        }
    }

    pub fn fit(&mut self, prior: &dyn LogPrior<T>) -> Result<FitReport<T>, EstimatorError> {
        if self.log.is_empty() {
            return Err(EstimatorError::EmptyLog);
        }
        let m = self.grid.len();
        let bound = |p: &Option<SubproblemSolution<T>>| p.as_ref().map_or(T::infinity(), |s| s.psi);
        let prev_best = (0..m)
            .filter(|&i| !self.infeasible[i])
            .map(|i| bound(&self.previous[i]))
            .fold(T::neg_infinity(), T::max);
        let mut solved: Vec<Option<SubproblemSolution<T>>> = vec![None; m];
        let mut best = T::neg_infinity();
        // first pass: everything that was competitive last time
        for i in 0..m {
            if self.infeasible[i] {
                continue;
            }
            let keep = match self.screening {
                Some(margin) => bound(&self.previous[i]) >= prev_best - margin,
                None => true,
            };
            if keep {
                let sol = self.solve(i, prior)?;
                best = best.max(sol.psi);
                solved[i] = Some(sol);
            }
        }
        // second pass: anything whose bound is not clearly below the new best
        let mut screened = Vec::new();
        for i in 0..m {
            if self.infeasible[i] || solved[i].is_some() {
                continue;
            }
            let margin = self.screening.unwrap_or(T::infinity());
            if bound(&self.previous[i]) >= best - margin {
                let sol = self.solve(i, prior)?;
                best = best.max(sol.psi);
                solved[i] = Some(sol);
            } else {
                screened.push(i);
            }
        }
        let mut report = FitReport {
            solutions: Vec::with_capacity(m),
            degenerate: Vec::new(),
            infeasible: Vec::new(),
            screened,
        };
        for (i, slot) in solved.into_iter().enumerate() {
            let tuple = &self.grid.tuples()[i];
            let sol = match slot {
                Some(sol) => sol,
                None if self.infeasible[i] => infeasible_solution(tuple, &self.log),
                None => {
                    let mut stale = self.previous[i].clone().expect("screened tuples were solved before");
                    stale.induced_states = induced_trajectory(stale.x0, stale.c_low, tuple, &self.log);
                    stale
                }
            };
            if self.infeasible[i] {
                report.infeasible.push(i);
            } else if sol.diagnostics.boundary_active && !report.screened.contains(&i) {
                report.degenerate.push(i);
            }
            report.solutions.push(sol);
        }
        Ok(report)
    }

    /// State after the last observation implied by a fitted solution.
    pub fn current_state(&self, sol: &SubproblemSolution<T>) -> T {
        self.stats[self.grid.b_index(sol.tuple.b)].current_state(sol.x0, sol.c_low)
    }
}
