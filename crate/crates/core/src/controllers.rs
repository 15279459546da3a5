//! Action-selection policies.
//!
//! Controllers see only the actions they proposed and the adherence decisions
//! reported back; the latent state stays inside the simulator. Adaptive
//! controllers reconstruct a believed state from their current parameter
//! estimate instead.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{
    mle_estimate, posterior_weights, EstimatorError, FitReport, OnlineEstimator, SubproblemGrid, SubproblemSolution,
    UniformPrior,
};
use crate::model::{step_dynamics, Action, Adherence, EngagementState, ModelError, PatientParams};
use crate::seeding::{rng_from_seed, StreamRng};
use crate::vi::{value_iteration, value_iteration_from, PolicyTable, ViError, ViSettings};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("expected day {expected}, got {got}")]
    DayOutOfSequence { expected: usize, got: usize },
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Vi(#[from] ViError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// What a controller believed when it made its latest proposal.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ControllerSnapshot {
    pub believed_state: Option<f64>,
    pub mle_tuple_index: Option<usize>,
    pub weights: Option<Vec<f64>>,
    /// The exploration branch replaced the policy's action.
    pub explored: Option<bool>,
    /// Days on which estimation failed and a random action was taken.
    pub fallbacks: usize,
}

/// Day-loop interface shared by all policies. Days are 1-based.
pub trait Controller: Send {
    fn label(&self) -> String;
    fn propose(&mut self, day: usize) -> Result<Action, ControllerError>;
    fn observe(&mut self, action: Action, adherence: Adherence);
    fn snapshot(&self) -> ControllerSnapshot;
}

/// Constants every adaptive controller knows: the subproblem grid, the VI
/// grid settings, the rewards and the discount.
#[derive(Debug, Clone)]
pub struct KnownConstants {
    pub grid: Arc<SubproblemGrid<f64>>,
    pub vi: ViSettings,
    pub gamma_low: f64,
    pub gamma_high: f64,
    pub alpha: f64,
}

impl KnownConstants {
    pub fn for_patient(params: &PatientParams<f64>, grid: Arc<SubproblemGrid<f64>>, vi: ViSettings) -> Self {
        Self {
            grid,
            vi,
            gamma_low: params.gamma_low(),
            gamma_high: params.gamma_high(),
            alpha: params.alpha(),
        }
    }
}

/// `e^{-βn}`.
pub fn exploration_probability(beta: f64, n: usize) -> f64 {
    (-beta * n as f64).exp()
}

/// The policy's action when `eps > p_explore`, its complement otherwise.
pub fn choose_with_epsilon(optimal: Action, eps: f64, p_explore: f64) -> Action {
    if eps > p_explore {
        optimal
    } else {
        optimal.complement()
    }
}

/// Low on odd days, High on even days.
pub fn alternating_action(day: usize) -> Action {
    if day % 2 == 1 {
        Action::Low
    } else {
        Action::High
    }
}

/// VI policy under the true parameters.
pub fn oracle_policy(params: &PatientParams<f64>, vi: &ViSettings) -> Result<PolicyTable<f64>, ViError> {
    Ok(value_iteration(params, vi.grid_for(params)?)?.policy)
}

struct CachedPolicy {
    c_low_bits: u64,
    values: Vec<f64>,
    policy: PolicyTable<f64>,
}

/// One VI solution per subproblem tuple. A tuple's policy is reused while its
/// fitted `c_ℓ` is unchanged; otherwise VI restarts from that tuple's last
/// value function.
struct PolicyCache {
    entries: Vec<Option<CachedPolicy>>,
}

impl PolicyCache {
    fn new(len: usize) -> Self {
        Self {
            entries: (0..len).map(|_| None).collect(),
        }
    }

    fn policy(
        &mut self,
        index: usize,
        sol: &SubproblemSolution<f64>,
        k: &KnownConstants,
    ) -> Result<&PolicyTable<f64>, ControllerError> {
        let bits = sol.c_low.to_bits();
        let stale = self.entries[index].as_ref().is_none_or(|e| e.c_low_bits != bits);
        if stale {
            let params = sol.to_params(k.gamma_low, k.gamma_high, k.alpha)?;
            let grid = k.vi.grid_for(&params)?;
            let warm = self.entries[index].as_ref().map(|e| e.values.as_slice());
            let solved = value_iteration_from(&params, grid, warm)?;
            self.entries[index] = Some(CachedPolicy {
                c_low_bits: bits,
                values: solved.value.values,
                policy: solved.policy,
            });
        }
        Ok(&self.entries[index].as_ref().expect("filled above").policy)
    }
}

/// Shared machinery of the estimate-then-plan controllers.
struct Adaptive {
    known: KnownConstants,
    estimator: OnlineEstimator<f64>,
    cache: PolicyCache,
    rng: StreamRng,
    refit_every: usize,
    fit: Option<FitReport<f64>>,
    days_since_fit: usize,
    snapshot: ControllerSnapshot,
}

impl Adaptive {
    fn new(known: KnownConstants, seed: u64, refit_every: usize) -> Result<Self, ControllerError> {
        if refit_every == 0 {
            return Err(ControllerError::InvalidConfig("refit_every must be at least 1".into()));
        }
        Ok(Self {
            estimator: OnlineEstimator::new(known.grid.clone()),
            cache: PolicyCache::new(known.grid.len()),
            rng: rng_from_seed(seed),
            refit_every,
            fit: None,
            days_since_fit: 0,
            snapshot: ControllerSnapshot::default(),
            known,
        })
    }

    fn check_day(&self, day: usize) -> Result<(), ControllerError> {
        let expected = self.estimator.log().len() + 1;
        if day != expected {
            return Err(ControllerError::DayOutOfSequence { expected, got: day });
        }
        Ok(())
    }

    /// Refits when due. `None` means estimation failed.
    fn refit(&mut self) -> Option<&FitReport<f64>> {
        if self.fit.is_none() || self.days_since_fit >= self.refit_every {
            self.days_since_fit = 0;
            match self.estimator.fit(&UniformPrior) {
                Ok(report) if mle_estimate(&report.solutions).is_ok() => self.fit = Some(report),
                Ok(_) | Err(_) => {
                    self.fit = None;
                    return None;
                }
            }
        }
        self.fit.as_ref()
    }

    /// Action under tuple `index` at the state its fit implies for today.
    fn plan(&mut self, index: usize) -> Result<(Action, f64), ControllerError> {
        let fit = self.fit.as_ref().expect("plan follows a successful fit");
        let sol = &fit.solutions[index];
        let believed = self.estimator.current_state(sol);
        let policy = self.cache.policy(index, sol, &self.known)?;
        Ok((policy.action_at(believed), believed))
    }

    fn fallback(&mut self, day: usize, label: &str) -> Action {
        log::warn!("{label}: estimation failed on day {day}; taking a random action");
        self.snapshot.fallbacks += 1;
        self.snapshot.believed_state = None;
        self.snapshot.explored = None;
        if self.rng.random_bool(0.5) {
            Action::High
        } else {
            Action::Low
        }
    }

    fn observe(&mut self, a: Action, d: Adherence) {
        self.estimator.push(a, d);
        self.days_since_fit += 1;
    }
}

/// Certainty-equivalent control with exploration probability `e^{-βn}`.
pub struct MleBetaController {
    beta: f64,
    inner: Adaptive,
}

impl MleBetaController {
    pub fn new(beta: f64, known: KnownConstants, seed: u64, refit_every: usize) -> Result<Self, ControllerError> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(ControllerError::InvalidConfig(format!("beta must be positive, got {beta}")));
        }
        Ok(Self {
            beta,
            inner: Adaptive::new(known, seed, refit_every)?,
        })
    }
}

impl Controller for MleBetaController {
    fn label(&self) -> String {
        format!("MLE({})", self.beta)
    }

    fn propose(&mut self, day: usize) -> Result<Action, ControllerError> {
        self.inner.check_day(day)?;
        if day <= 2 {
            return Ok(alternating_action(day));
        }
        let Some(fit) = self.inner.refit() else {
            return Ok(self.inner.fallback(day, &self.label()));
        };
        let (index, _) = mle_estimate(&fit.solutions)?;
        let weights = posterior_weights(&fit.solutions)?.weights;
        let (optimal, believed) = self.inner.plan(index)?;
        let eps: f64 = self.inner.rng.random();
        let p = exploration_probability(self.beta, day);
        let action = choose_with_epsilon(optimal, eps, p);
        let snap = &mut self.inner.snapshot;
        snap.believed_state = Some(believed);
        snap.mle_tuple_index = Some(index);
        snap.weights = Some(weights);
        snap.explored = Some(action != optimal);
        Ok(action)
    }

    fn observe(&mut self, action: Action, adherence: Adherence) {
        self.inner.observe(action, adherence);
    }

    fn snapshot(&self) -> ControllerSnapshot {
        self.inner.snapshot.clone()
    }
}

/// Samples a tuple from the posterior weights each day and follows its policy.
pub struct ThompsonController {
    init_period: usize,
    inner: Adaptive,
}

impl ThompsonController {
    pub fn new(init_period: usize, known: KnownConstants, seed: u64, refit_every: usize) -> Result<Self, ControllerError> {
        if init_period < 2 || init_period % 2 != 0 {
            return Err(ControllerError::InvalidConfig(format!(
                "initialization period must be even and at least 2, got {init_period}"
            )));
        }
        Ok(Self {
            init_period,
            inner: Adaptive::new(known, seed, refit_every)?,
        })
    }
}

impl Controller for ThompsonController {
    fn label(&self) -> String {
        format!("Thompson(T={})", self.init_period)
    }

    fn propose(&mut self, day: usize) -> Result<Action, ControllerError> {
        self.inner.check_day(day)?;
        if day <= self.init_period {
            return Ok(alternating_action(day));
        }
        let Some(fit) = self.inner.refit() else {
            return Ok(self.inner.fallback(day, &self.label()));
        };
        let (mle_index, _) = mle_estimate(&fit.solutions)?;
        let weights = posterior_weights(&fit.solutions)?;
        let u: f64 = self.inner.rng.random();
        let index = weights.sample_index(u);
        let (action, believed) = self.inner.plan(index)?;
        let snap = &mut self.inner.snapshot;
        snap.believed_state = Some(believed);
        snap.mle_tuple_index = Some(mle_index);
        snap.weights = Some(weights.weights);
        snap.explored = None;
        Ok(action)
    }

    fn observe(&mut self, action: Action, adherence: Adherence) {
        self.inner.observe(action, adherence);
    }

    fn snapshot(&self) -> ControllerSnapshot {
        self.inner.snapshot.clone()
    }
}

/// Fair coin each day.
pub struct RandomController {
    rng: StreamRng,
}

impl RandomController {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: rng_from_seed(seed),
        }
    }
}

impl Controller for RandomController {
    fn label(&self) -> String {
        "Random".into()
    }

    fn propose(&mut self, _day: usize) -> Result<Action, ControllerError> {
        Ok(if self.rng.random_bool(0.5) {
            Action::High
        } else {
            Action::Low
        })
    }

    fn observe(&mut self, _: Action, _: Adherence) {}

    fn snapshot(&self) -> ControllerSnapshot {
        ControllerSnapshot::default()
    }
}

/// High after an adherent day, Low after a missed one; High on the first day.
#[derive(Debug, Default)]
pub struct ReactiveController {
    last: Option<Adherence>,
}

impl ReactiveController {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Controller for ReactiveController {
    fn label(&self) -> String {
        "Reactive".into()
    }

    fn propose(&mut self, _day: usize) -> Result<Action, ControllerError> {
        Ok(match self.last {
            None | Some(Adherence::Adhered) => Action::High,
            Some(Adherence::Missed) => Action::Low,
        })
    }

    fn observe(&mut self, _: Action, adherence: Adherence) {
        self.last = Some(adherence);
    }

    fn snapshot(&self) -> ControllerSnapshot {
        ControllerSnapshot::default()
    }
}

/// Follows the true-parameter policy. Knowing the true parameters, it
/// recovers the exact state by replaying the observed days.
pub struct OracleController {
    params: PatientParams<f64>,
    policy: Arc<PolicyTable<f64>>,
    state: EngagementState<f64>,
}

impl OracleController {
    pub fn new(params: PatientParams<f64>, policy: Arc<PolicyTable<f64>>) -> Self {
        Self {
            state: params.initial_state(),
            params,
            policy,
        }
    }
}

impl Controller for OracleController {
    fn label(&self) -> String {
        "Oracle".into()
    }

    fn propose(&mut self, _day: usize) -> Result<Action, ControllerError> {
        Ok(self.policy.action_at(self.state.value()))
    }

    fn observe(&mut self, action: Action, adherence: Adherence) {
        self.state = step_dynamics(self.state, action, adherence, &self.params)
            .expect("replaying valid dynamics under validated parameters");
    }

    fn snapshot(&self) -> ControllerSnapshot {
        ControllerSnapshot {
            believed_state: Some(self.state.value()),
            ..Default::default()
        }
    }
}

/// Always the same action.
#[derive(Debug, Clone, Copy)]
pub struct FixedController {
    action: Action,
}

impl FixedController {
    pub fn new(action: Action) -> Self {
        Self { action }
    }
}

impl Controller for FixedController {
    fn label(&self) -> String {
        format!("Always{}", if self.action == Action::High { "High" } else { "Low" })
    }

    fn propose(&mut self, _day: usize) -> Result<Action, ControllerError> {
        Ok(self.action)
    }

    fn observe(&mut self, _: Action, _: Adherence) {}

    fn snapshot(&self) -> ControllerSnapshot {
        ControllerSnapshot::default()
    }
}

fn one() -> usize {
    1
}

/// Serializable controller choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerConfig {
    MleBeta {
        beta: f64,
        #[serde(default = "one")]
        refit_every: usize,
    },
    Thompson {
        init_period: usize,
        #[serde(default = "one")]
        refit_every: usize,
    },
    Random,
    Reactive,
    Oracle,
}

impl ControllerConfig {
    pub fn label(&self) -> String {
        match self {
            Self::MleBeta { beta, .. } => format!("MLE({beta})"),
            Self::Thompson { init_period, .. } => format!("Thompson(T={init_period})"),
            Self::Random => "Random".into(),
            Self::Reactive => "Reactive".into(),
            Self::Oracle => "Oracle".into(),
        }
    }

    /// File-name-safe label, e.g. `mle_0.05`, `thompson_10`.
    pub fn slug(&self) -> String {
        match self {
            Self::MleBeta { beta, .. } => format!("mle_{beta}"),
            Self::Thompson { init_period, .. } => format!("thompson_{init_period}"),
            Self::Random => "random".into(),
            Self::Reactive => "reactive".into(),
            Self::Oracle => "oracle".into(),
        }
    }

    /// Estimates parameters online.
    pub fn is_adaptive(&self) -> bool {
        matches!(self, Self::MleBeta { .. } | Self::Thompson { .. })
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |m: String| Err(ControllerError::InvalidConfig(m));
        match *self {
            Self::MleBeta { beta, refit_every } => {
                if !(beta > 0.0 && beta.is_finite()) {
                    return bad(format!("beta must be positive, got {beta}"));
                }
                if refit_every == 0 {
                    return bad("refit_every must be at least 1".into());
                }
            }
            Self::Thompson {
                init_period,
                refit_every,
            } => {
                if init_period < 2 || init_period % 2 != 0 {
                    return bad(format!("init_period must be even and at least 2, got {init_period}"));
                }
                if refit_every == 0 {
                    return bad("refit_every must be at least 1".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Instantiates the controller. `truth` and `oracle` are consulted only by
    /// the oracle controller.
    pub fn build(
        &self,
        known: &KnownConstants,
        truth: &PatientParams<f64>,
        oracle: &Arc<PolicyTable<f64>>,
        seed: u64,
    ) -> Result<Box<dyn Controller>, ControllerError> {
        self.validate()?;
        Ok(match *self {
            Self::MleBeta { beta, refit_every } => {
                Box::new(MleBetaController::new(beta, known.clone(), seed, refit_every)?)
            }
            Self::Thompson {
                init_period,
                refit_every,
            } => Box::new(ThompsonController::new(init_period, known.clone(), seed, refit_every)?),
            Self::Random => Box::new(RandomController::new(seed)),
            Self::Reactive => Box::new(ReactiveController::new()),
            Self::Oracle => Box::new(OracleController::new(*truth, oracle.clone())),
        })
    }
}
