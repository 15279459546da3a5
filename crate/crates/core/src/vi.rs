//! Value iteration for the full-information burden selection problem.
//!
//! The state space `[0, x̄]` is discretized on a uniform grid and the value
//! function is represented by its node values with linear interpolation in
//! between. Each backup takes the expectation over the Bernoulli adherence
//! outcome:
//!
//! ```text
//! Q(x, a) = p_a(x)·(γ_a + α·V(b·x + c_a)) + (1 - p_a(x))·α·V(b·x)
//! ```
//!
//! Linear interpolation is a sup-norm non-expansion, so the discretized
//! operator stays an `α`-contraction.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{adherence_prob_raw, Action, PatientParams, BOUND_TOLERANCE};
use crate::scalar::Scalar;

/// Largest horizon accepted by [`finite_horizon_oracle`]; cost grows as `4^h`.
pub const FINITE_HORIZON_CAP: usize = 12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ViError {
    #[error("grid needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
    #[error("x_max must be positive and finite, got {0}")]
    Extent(f64),
    #[error("grid spans [0, {grid}] but the model's state bound is {model}")]
    BoundMismatch { grid: f64, model: f64 },
    #[error("value iteration did not converge in {iterations} iterations (last residual {residual})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("initial values have length {got}, grid has {expected} nodes")]
    InitialLength { got: usize, expected: usize },
    #[error("horizon {horizon} exceeds the exhaustive-search cap {cap}")]
    HorizonTooLarge { horizon: usize, cap: usize },
    #[error("policy table is empty")]
    EmptyPolicy,
}

/// Grid size and stopping rule, independent of any particular model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViSettings {
    pub n_points: usize,
    pub tolerance: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
}

fn default_max_iterations() -> usize {
    ViSettings::DEFAULT_MAX_ITERATIONS
}

impl ViSettings {
    pub const DEFAULT_POINTS: usize = 3000;
    pub const DEFAULT_TOLERANCE: f64 = 1e-3;
    pub const DEFAULT_MAX_ITERATIONS: usize = 10_000;

    pub fn grid_for<T: Scalar>(&self, params: &PatientParams<T>) -> Result<GridSpec<T>, ViError> {
        GridSpec::new(
            self.n_points,
            params.state_bound(),
            T::lit(self.tolerance),
            self.max_iterations,
        )
    }
}

impl Default for ViSettings {
    fn default() -> Self {
        Self {
            n_points: Self::DEFAULT_POINTS,
            tolerance: Self::DEFAULT_TOLERANCE,
            max_iterations: Self::DEFAULT_MAX_ITERATIONS,
        }
    }
}

/// Uniform grid on `[0, x_max]`, both endpoints included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec<T> {
    n_points: usize,
    x_max: T,
    tolerance: T,
    max_iterations: usize,
}

impl<T: Scalar> GridSpec<T> {
    pub fn new(n_points: usize, x_max: T, tolerance: T, max_iterations: usize) -> Result<Self, ViError> {
        if n_points < 2 {
            return Err(ViError::TooFewPoints(n_points));
        }
        if !(tolerance > T::zero() && tolerance.is_finite()) {
            return Err(ViError::Tolerance(tolerance.to_f64_lossy()));
        }
        if !(x_max > T::zero() && x_max.is_finite()) {
            return Err(ViError::Extent(x_max.to_f64_lossy()));
        }
        Ok(Self {
            n_points,
            x_max,
            tolerance,
            max_iterations,
        })
    }

    /// Default grid for a model: 3000 nodes, tolerance 0.001.
    pub fn for_params(params: &PatientParams<T>) -> Self {
        ViSettings::default()
            .grid_for(params)
            .expect("state bound is positive and finite")
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }
    pub fn x_max(&self) -> T {
        self.x_max
    }
    pub fn tolerance(&self) -> T {
        self.tolerance
    }
    pub fn max_iterations(&self) -> usize {
        self.max_iterations
    }

    pub fn with_points(self, n_points: usize) -> Result<Self, ViError> {
        Self::new(n_points, self.x_max, self.tolerance, self.max_iterations)
    }

    pub fn spacing(&self) -> T {
        self.x_max / T::from_usize(self.n_points - 1).unwrap()
    }

    pub fn node(&self, i: usize) -> T {
        if i + 1 == self.n_points {
            self.x_max
        } else {
            T::from_usize(i).unwrap() * self.spacing()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = T> + '_ {
        (0..self.n_points).map(move |i| self.node(i))
    }

    fn check_matches(&self, params: &PatientParams<T>) -> Result<(), ViError> {
        let bound = params.state_bound();
        let slack = T::lit(BOUND_TOLERANCE) * bound.max(T::one());
        if (self.x_max - bound).abs() > slack {
            return Err(ViError::BoundMismatch {
                grid: self.x_max.to_f64_lossy(),
                model: bound.to_f64_lossy(),
            });
        }
        Ok(())
    }

    /// Linear-interpolation stencil for an arbitrary point, clamped to the grid.
    fn stencil(&self, y: T) -> Stencil<T> {
        let last = self.n_points - 1;
        let pos = (y / self.spacing()).max(T::zero());
        let lo = pos.floor().to_usize().unwrap_or(last).min(last - 1);
        let w = (pos - T::from_usize(lo).unwrap()).max(T::zero()).min(T::one());
        Stencil { lo, w }
    }
}

#[derive(Debug, Clone, Copy)]
struct Stencil<T> {
    lo: usize,
    w: T,
}

impl<T: Scalar> Stencil<T> {
    #[inline]
    fn eval(&self, v: &[T]) -> T {
        v[self.lo] + self.w * (v[self.lo + 1] - v[self.lo])
    }
}

/// Node values of `V` on a grid; evaluated between nodes by linear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction<T> {
    pub grid: GridSpec<T>,
    pub values: Vec<T>,
}

impl<T: Scalar> ValueFunction<T> {
    pub fn zeros(grid: GridSpec<T>) -> Self {
        Self {
            values: vec![T::zero(); grid.n_points()],
            grid,
        }
    }

    pub fn eval(&self, x: T) -> T {
        self.grid.stencil(x).eval(&self.values)
    }

    pub fn sup_distance(&self, other: &Self) -> T {
        sup_distance(&self.values, &other.values)
    }
}

fn sup_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (x, y)| acc.max((*x - *y).abs()))
}

/// Greedy actions and Q-values at every grid node. Exact ties resolve to `Low`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable<T> {
    pub grid: GridSpec<T>,
    pub actions: Vec<Action>,
    pub q_low: Vec<T>,
    pub q_high: Vec<T>,
}

#[inline]
fn greedy<T: Scalar>(q_low: T, q_high: T) -> Action {
    if q_high > q_low {
        Action::High
    } else {
        Action::Low
    }
}

impl<T: Scalar> PolicyTable<T> {
    fn from_q(grid: GridSpec<T>, q_low: Vec<T>, q_high: Vec<T>) -> Self {
        let actions = q_low.iter().zip(&q_high).map(|(l, h)| greedy(*l, *h)).collect();
        Self {
            grid,
            actions,
            q_low,
            q_high,
        }
    }

    /// Action at an arbitrary state, comparing linearly interpolated Q-values.
    pub fn action_at(&self, x: T) -> Action {
        let s = self.grid.stencil(x);
        greedy(s.eval(&self.q_low), s.eval(&self.q_high))
    }

    /// Writes `x, v, q_low, q_high, action` rows.
    pub fn write_csv<W: Write>(&self, value: &ValueFunction<T>, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "v", "q_low", "q_high", "action"])?;
        for (i, x) in self.grid.nodes().enumerate() {
            w.write_record([
                x.to_f64_lossy().to_string(),
                value.values[i].to_f64_lossy().to_string(),
                self.q_low[i].to_f64_lossy().to_string(),
                self.q_high[i].to_f64_lossy().to_string(),
                self.actions[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The discretized Bellman operator for one model and grid, with transition
/// stencils and adherence probabilities precomputed per node.
#[derive(Debug, Clone)]
pub struct BellmanOperator<T> {
    grid: GridSpec<T>,
    alpha: T,
    gamma_low: T,
    gamma_high: T,
    p_low: Vec<T>,
    p_high: Vec<T>,
    stay: Vec<Stencil<T>>,
    jump_low: Vec<Stencil<T>>,
    jump_high: Vec<Stencil<T>>,
}

impl<T: Scalar> BellmanOperator<T> {
    pub fn new(params: &PatientParams<T>, grid: GridSpec<T>) -> Result<Self, ViError> {
        grid.check_matches(params)?;
        let bound = params.state_bound();
        let n = grid.n_points();
        let mut op = Self {
            grid,
            alpha: params.alpha(),
            gamma_low: params.gamma_low(),
            gamma_high: params.gamma_high(),
            p_low: Vec::with_capacity(n),
            p_high: Vec::with_capacity(n),
            stay: Vec::with_capacity(n),
            jump_low: Vec::with_capacity(n),
            jump_high: Vec::with_capacity(n),
        };
        for x in grid.nodes() {
            let decayed = params.b() * x;
            op.p_low.push(adherence_prob_raw(x, params.lambda_low()));
            op.p_high.push(adherence_prob_raw(x, params.lambda_high()));
            op.stay.push(grid.stencil(decayed));
            op.jump_low.push(grid.stencil((decayed + params.c_low()).min(bound)));
            op.jump_high.push(grid.stencil((decayed + params.c_high()).min(bound)));
        }
        Ok(op)
    }

    pub fn grid(&self) -> &GridSpec<T> {
        &self.grid
    }

    #[inline]
    fn q_at(&self, i: usize, v: &[T]) -> (T, T) {
        let cont = self.alpha * self.stay[i].eval(v);
        let (pl, ph) = (self.p_low[i], self.p_high[i]);
        let ql = pl * (self.gamma_low + self.alpha * self.jump_low[i].eval(v)) + (T::one() - pl) * cont;
        let qh = ph * (self.gamma_high + self.alpha * self.jump_high[i].eval(v)) + (T::one() - ph) * cont;
        (ql, qh)
    }

    /// Writes the backup of `v` into `out` and returns the sup-norm change.
    pub fn apply_into(&self, v: &[T], out: &mut [T]) -> T {
        let mut residual = T::zero();
        for (i, slot) in out.iter_mut().enumerate() {
            let (ql, qh) = self.q_at(i, v);
            let next = ql.max(qh);
            residual = residual.max((next - v[i]).abs());
            *slot = next;
        }
        residual
    }

    pub fn apply(&self, v: &ValueFunction<T>) -> ValueFunction<T> {
        let mut out = vec![T::zero(); v.values.len()];
        self.apply_into(&v.values, &mut out);
        ValueFunction {
            grid: self.grid,
            values: out,
        }
    }

    pub fn greedy_policy(&self, v: &[T]) -> PolicyTable<T> {
        let (q_low, q_high) = (0..self.grid.n_points()).map(|i| self.q_at(i, v)).unzip();
        PolicyTable::from_q(self.grid, q_low, q_high)
    }
}

/// One Bellman backup of `v` under `params`.
pub fn bellman_backup<T: Scalar>(v: &ValueFunction<T>, params: &PatientParams<T>) -> Result<ValueFunction<T>, ViError> {
    Ok(BellmanOperator::new(params, v.grid)?.apply(v))
}

#[derive(Debug, Clone)]
pub struct ViSolution<T> {
    pub value: ValueFunction<T>,
    pub policy: PolicyTable<T>,
    /// Sup-norm change of every iteration, in order.
    pub residuals: Vec<T>,
}

impl<T> ViSolution<T> {
    pub fn iterations(&self) -> usize {
        self.residuals.len()
    }
}

/// Value iteration from `V ≡ 0` until the sup-norm change drops below the
/// grid tolerance.
pub fn value_iteration<T: Scalar>(params: &PatientParams<T>, grid: GridSpec<T>) -> Result<ViSolution<T>, ViError> {
    value_iteration_from(params, grid, None)
}

/// Value iteration from given node values (or zero). Starting near the fixed
/// point only shortens the run; the stopping rule is unchanged.
pub fn value_iteration_from<T: Scalar>(
    params: &PatientParams<T>,
    grid: GridSpec<T>,
    initial: Option<&[T]>,
) -> Result<ViSolution<T>, ViError> {
    let op = BellmanOperator::new(params, grid)?;
    let n = grid.n_points();
    let mut v = match initial {
        Some(init) if init.len() != n => {
            return Err(ViError::InitialLength {
                got: init.len(),
                expected: n,
            })
        }
        Some(init) => init.to_vec(),
        None => vec![T::zero(); n],
    };
    let mut next = vec![T::zero(); n];
    let mut residuals = Vec::new();
    loop {
        if residuals.len() >= grid.max_iterations() {
            return Err(ViError::NotConverged {
                iterations: residuals.len(),
                residual: residuals.last().map_or(f64::INFINITY, |r: &T| r.to_f64_lossy()),
            });
        }
        let residual = op.apply_into(&v, &mut next);
        std::mem::swap(&mut v, &mut next);
        residuals.push(residual);
        if residual < grid.tolerance() {
            break;
        }
    }
    let policy = op.greedy_policy(&v);
    Ok(ViSolution {
        value: ValueFunction { grid, values: v },
        policy,
        residuals,
    })
}

/// `steps` backups from `V ≡ 0`: the optimal `steps`-horizon value on the grid.
pub fn truncated_value<T: Scalar>(
    params: &PatientParams<T>,
    grid: GridSpec<T>,
    steps: usize,
) -> Result<ValueFunction<T>, ViError> {
    let op = BellmanOperator::new(params, grid)?;
    let mut v = vec![T::zero(); grid.n_points()];
    let mut next = v.clone();
    for _ in 0..steps {
        op.apply_into(&v, &mut next);
        std::mem::swap(&mut v, &mut next);
    }
    Ok(ValueFunction { grid, values: v })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StructureKind {
    AlwaysLow,
    AlwaysHigh,
    SingleThreshold,
    DoubleThreshold,
    Other,
}

impl StructureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StructureKind::AlwaysLow => "always_low",
            StructureKind::AlwaysHigh => "always_high",
            StructureKind::SingleThreshold => "single_threshold",
            StructureKind::DoubleThreshold => "double_threshold",
            StructureKind::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStructure<T> {
    pub kind: StructureKind,
    /// States where the action switches, ascending.
    pub thresholds: Vec<T>,
}

/// Scans the node actions in state order. Each switch is placed at the
/// midpoint between the last node of one action and the first of the next.
pub fn classify_policy<T: Scalar>(policy: &PolicyTable<T>) -> Result<PolicyStructure<T>, ViError> {
    let first = *policy.actions.first().ok_or(ViError::EmptyPolicy)?;
    let half = T::lit(0.5);
    let thresholds: Vec<T> = policy
        .actions
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] != w[1])
        .map(|(i, _)| (policy.grid.node(i) + policy.grid.node(i + 1)) * half)
        .collect();
    let kind = match (thresholds.len(), first) {
        (0, Action::Low) => StructureKind::AlwaysLow,
        (0, Action::High) => StructureKind::AlwaysHigh,
        (1, _) => StructureKind::SingleThreshold,
        (2, _) => StructureKind::DoubleThreshold,
        _ => StructureKind::Other,
    };
    Ok(PolicyStructure { kind, thresholds })
}

/// Exact optimal discounted reward over `horizon` steps from `x_start`,
/// by exhaustive recursion over both actions and both adherence outcomes with
/// exact state arithmetic. Returns the value and the optimal first action
/// (ties to `Low`).
pub fn finite_horizon_oracle<T: Scalar>(
    params: &PatientParams<T>,
    x_start: T,
    horizon: usize,
) -> Result<(T, Action), ViError> {
    if horizon > FINITE_HORIZON_CAP {
        return Err(ViError::HorizonTooLarge {
            horizon,
            cap: FINITE_HORIZON_CAP,
        });
    }
    if horizon == 0 {
        return Ok((T::zero(), Action::Low));
    }
    let q = |a: Action| {
        let p = adherence_prob_raw(x_start, params.lambda(a));
        let decayed = params.b() * x_start;
        p * (params.gamma(a) + params.alpha() * exhaustive(params, decayed + params.cost(a), horizon - 1))
            + (T::one() - p) * params.alpha() * exhaustive(params, decayed, horizon - 1)
    };
    let (ql, qh) = (q(Action::Low), q(Action::High));
    let a = greedy(ql, qh);
    Ok((ql.max(qh), a))
}

fn exhaustive<T: Scalar>(params: &PatientParams<T>, x: T, steps: usize) -> T {
    if steps == 0 {
        return T::zero();
    }
    let decayed = params.b() * x;
    let miss = params.alpha() * exhaustive(params, decayed, steps - 1);
    Action::ALL
        .iter()
        .map(|&a| {
            let p = adherence_prob_raw(x, params.lambda(a));
            p * (params.gamma(a) + params.alpha() * exhaustive(params, decayed + params.cost(a), steps - 1))
                + (T::one() - p) * miss
        })
        .fold(T::neg_infinity(), T::max)
}
