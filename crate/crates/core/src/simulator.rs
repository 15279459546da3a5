//! Synthetic patient trajectories.
//!
//! The simulator owns the latent state. Controllers see only the actions they
//! proposed and the adherence decisions reported back to them.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::{Controller, ControllerError};
use crate::model::{
    adherence_prob, reward, step_dynamics, Action, Adherence, EngagementState, ModelError, PatientParams,
};
use crate::scalar::Scalar;
use crate::seeding::rng_from_seed;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("controller failed on day {day}: {source}")]
    Controller {
        day: usize,
        #[source]
        source: ControllerError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One simulated day. `latent_state_before` is simulator-private: only the
/// evaluation metrics may read it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub day: usize,
    pub action: Action,
    pub adhered: Adherence,
    pub latent_state_before: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
    pub seed: u64,
    pub params: PatientParams<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks contiguous day indices and `x_{t+1} = f(x_t, a_t, d_t)` for every pair.
    pub fn check_chaining(&self, tol: f64) -> Result<(), String> {
        for (i, rec) in self.records.iter().enumerate() {
            if rec.day != i {
                return Err(format!("record {i} has day {}", rec.day));
            }
        }
        for pair in self.records.windows(2) {
            let x = EngagementState::new(pair[0].latent_state_before, &self.params).map_err(|e| e.to_string())?;
            let next = step_dynamics(x, pair[0].action, pair[0].adhered, &self.params).map_err(|e| e.to_string())?;
            if (next.value() - pair[1].latent_state_before).abs() > tol {
                return Err(format!(
                    "day {}: expected state {}, found {}",
                    pair[1].day,
                    next.value(),
                    pair[1].latent_state_before
                ));
            }
        }
        Ok(())
    }

    /// First `days` records, as if the run had stopped there.
    pub fn truncated(&self, days: usize) -> Trajectory {
        Trajectory {
            records: self.records[..days.min(self.records.len())].to_vec(),
            seed: self.seed,
            params: self.params,
        }
    }
}

/// Draws `d ~ Bernoulli(exp(-λ_a·x))` and advances the state.
pub fn simulate_step<T: Scalar, R: Rng + ?Sized>(
    x: EngagementState<T>,
    a: Action,
    params: &PatientParams<T>,
    rng: &mut R,
) -> Result<(Adherence, EngagementState<T>, T), ModelError> {
    let p = adherence_prob(x, a, params).to_f64_lossy();
    let u: f64 = rng.random();
    let d = Adherence::from_bool(u < p);
    let next = step_dynamics(x, a, d, params)?;
    Ok((d, next, reward(a, d, params)))
}

/// Runs `horizon` days, asking the controller for an action each day and
/// reporting the adherence decision back. Identical inputs give a
/// bit-identical trajectory.
pub fn run_trajectory(
    params: &PatientParams<f64>,
    controller: &mut dyn Controller,
    horizon: usize,
    seed: u64,
) -> Result<Trajectory, SimulationError> {
    run_trajectory_with(params, controller, horizon, seed, |_, _| {})
}

/// Like [`run_trajectory`], calling `on_day` after each day's outcome is drawn
/// but before the controller is told about it, so the controller's snapshot
/// reflects the information it acted on.
pub fn run_trajectory_with<F>(
    params: &PatientParams<f64>,
    controller: &mut dyn Controller,
    horizon: usize,
    seed: u64,
    on_day: F,
) -> Result<Trajectory, SimulationError>
where
    F: FnMut(&TrajectoryRecord, &dyn Controller),
{
    let mut rng = rng_from_seed(seed);
    drive(params, controller, horizon, seed, on_day, |x, a| {
        simulate_step(x, a, params, &mut rng).map(|(d, _, _)| d)
    })
}

/// Replays a fixed adherence sequence instead of sampling it. The latent
/// states still follow the dynamics, so the result is a valid trajectory.
pub fn run_trajectory_scripted(
    params: &PatientParams<f64>,
    controller: &mut dyn Controller,
    decisions: &[Adherence],
) -> Result<Trajectory, SimulationError> {
    let mut script = decisions.iter().copied();
    drive(params, controller, decisions.len(), 0, |_, _| {}, |_, _| {
        Ok(script.next().expect("script covers horizon"))
    })
}

fn drive<F, S>(
    params: &PatientParams<f64>,
    controller: &mut dyn Controller,
    horizon: usize,
    seed: u64,
    mut on_day: F,
    mut sample: S,
) -> Result<Trajectory, SimulationError>
where
    F: FnMut(&TrajectoryRecord, &dyn Controller),
    S: FnMut(EngagementState<f64>, Action) -> Result<Adherence, ModelError>,
{
    if horizon == 0 {
        return Err(SimulationError::EmptyHorizon);
    }
    let mut records = Vec::with_capacity(horizon);
    let mut x = params.initial_state();
    for day in 0..horizon {
        let action = controller
            .propose(day + 1)
            .map_err(|source| SimulationError::Controller { day, source })?;
        let adhered = sample(x, action)?;
        let record = TrajectoryRecord {
            day,
            action,
            adhered,
            latent_state_before: x.value(),
            reward: reward(action, adhered, params),
        };
        on_day(&record, &*controller);
        controller.observe(action, adhered);
        records.push(record);
        x = step_dynamics(x, action, adhered, params)?;
    }
    Ok(Trajectory {
        records,
        seed,
        params: *params,
    })
}
