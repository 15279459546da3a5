//! Replicated experiments: configuration, execution, metrics and output files.
//!
//! Each `(controller, replication)` pair runs once at the longest horizon with
//! its own derived seeds. Shorter horizons are prefixes of that run, which is
//! exactly what a separate run would produce: neither the patient stream nor
//! any controller looks ahead.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::{oracle_policy, ControllerConfig, ControllerError, KnownConstants};
use crate::estimator::{EstimatorError, ModelTuple, SubproblemGrid};
use crate::model::{Action, ModelError, PatientParams, UncheckedParams};
use crate::seeding::{derive_seed, patient_seed, StreamRole};
use crate::simulator::{run_trajectory_with, SimulationError, Trajectory, TrajectoryRecord};
use crate::vi::{classify_policy, value_iteration, PolicyTable, StructureKind, ViError, ViSettings, ViSolution};

/// Trailing window of the moving-average optimal-action fraction.
pub const MOVING_AVERAGE_WINDOW: usize = 28;
/// Day (1-based) at which adaptive controllers are compared.
pub const COMPARABILITY_DAY: usize = 200;
/// Largest spread of the moving-average optimal fraction counted as comparable.
pub const COMPARABILITY_SPREAD: f64 = 0.15;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vi(#[from] ViError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("oracle grid spans [0, {grid}] but the patient's state bound is {model}")]
    GridMismatch { grid: f64, model: f64 },
}

/// Parameter sets of the subproblem grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub lambda_set: Vec<f64>,
    pub b_set: Vec<f64>,
    #[serde(default = "yes")]
    pub enforce_lambda_order: bool,
}

fn yes() -> bool {
    true
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        let g = SubproblemGrid::<f64>::standard();
        Self {
            lambda_set: g.lambda_set().to_vec(),
            b_set: g.b_set().to_vec(),
            enforce_lambda_order: true,
        }
    }
}

impl EstimatorConfig {
    pub fn grid(&self) -> Result<SubproblemGrid<f64>, EstimatorError> {
        SubproblemGrid::new(self.lambda_set.clone(), self.b_set.clone(), self.enforce_lambda_order)
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

/// Experiment description. Every patient parameter must be given explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub replications: usize,
    pub horizons: Vec<usize>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub patient: UncheckedParams<f64>,
    #[serde(default)]
    pub vi: ViSettings,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    pub controllers: Vec<ControllerConfig>,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ExperimentError> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn max_horizon(&self) -> usize {
        self.horizons.iter().copied().max().unwrap_or(0)
    }

    /// Checks everything that can be checked before any replication runs.
    pub fn prepare(&self) -> Result<PreparedExperiment, ExperimentError> {
        if self.replications == 0 {
            return Err(ExperimentError::Config("replications must be at least 1".into()));
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(ExperimentError::Config("horizons must be non-empty and positive".into()));
        }
        if self.controllers.is_empty() {
            return Err(ExperimentError::Config("at least one controller is required".into()));
        }
        let mut slugs: Vec<String> = self.controllers.iter().map(ControllerConfig::slug).collect();
        slugs.sort();
        if slugs.windows(2).any(|w| w[0] == w[1]) {
            return Err(ExperimentError::Config("controller list contains duplicates".into()));
        }
        for c in &self.controllers {
            c.validate()?;
        }
        let params = PatientParams::new(self.patient)?;
        let grid = Arc::new(self.estimator.grid()?);
        self.vi.grid_for(&params)?;
        let oracle = Arc::new(oracle_policy(&params, &self.vi)?);
        let true_tuple = grid.index_of(&ModelTuple::of_params(&params));
        Ok(PreparedExperiment {
            known: KnownConstants::for_patient(&params, grid, self.vi),
            config: self.clone(),
            params,
            oracle,
            true_tuple,
        })
    }
}

/// A validated configuration with the shared, read-only inputs of every run.
pub struct PreparedExperiment {
    pub config: ExperimentConfig,
    pub params: PatientParams<f64>,
    pub known: KnownConstants,
    pub oracle: Arc<PolicyTable<f64>>,
    /// Index of the true `(λ_ℓ, λ_h, b)` in the subproblem grid, if present.
    pub true_tuple: Option<usize>,
}

/// One row of the per-step CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub replication: usize,
    pub day: usize,
    pub action: Action,
    pub adhered: u8,
    pub reward: f64,
    pub latent_state: f64,
    pub oracle_action: Action,
    pub is_optimal: u8,
    pub controller_believed_state: Option<f64>,
    pub mle_tuple_index: Option<usize>,
    pub posterior_weight_on_true_tuple: Option<f64>,
}

/// Per-day metric series of one replication, or their mean.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MetricsSeries {
    pub cumulative_avg_reward: Vec<f64>,
    pub cumulative_optimal_fraction: Vec<f64>,
    pub moving_avg_optimal_fraction: Vec<f64>,
}

impl MetricsSeries {
    pub fn from_days(rewards: &[f64], optimal: &[bool]) -> Self {
        assert_eq!(rewards.len(), optimal.len());
        let n = rewards.len();
        let mut s = Self {
            cumulative_avg_reward: Vec::with_capacity(n),
            cumulative_optimal_fraction: Vec::with_capacity(n),
            moving_avg_optimal_fraction: Vec::with_capacity(n),
        };
        let (mut reward_sum, mut opt_sum) = (0.0, 0usize);
        let mut window = 0usize;
        for t in 0..n {
            reward_sum += rewards[t];
            opt_sum += optimal[t] as usize;
            window += optimal[t] as usize;
            if t >= MOVING_AVERAGE_WINDOW {
                window -= optimal[t - MOVING_AVERAGE_WINDOW] as usize;
            }
            let k = (t + 1) as f64;
            s.cumulative_avg_reward.push(reward_sum / k);
            s.cumulative_optimal_fraction.push(opt_sum as f64 / k);
            s.moving_avg_optimal_fraction
                .push(window as f64 / (t + 1).min(MOVING_AVERAGE_WINDOW) as f64);
        }
        s
    }

    pub fn len(&self) -> usize {
        self.cumulative_avg_reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cumulative_avg_reward.is_empty()
    }

    pub fn truncated(&self, days: usize) -> Self {
        let cut = |v: &Vec<f64>| v[..days.min(v.len())].to_vec();
        Self {
            cumulative_avg_reward: cut(&self.cumulative_avg_reward),
            cumulative_optimal_fraction: cut(&self.cumulative_optimal_fraction),
            moving_avg_optimal_fraction: cut(&self.moving_avg_optimal_fraction),
        }
    }

    /// Day-wise arithmetic mean. All series must have equal length.
    pub fn mean(series: &[MetricsSeries]) -> Self {
        let Some(first) = series.first() else {
            return Self::default();
        };
        let n = first.len();
        assert!(series.iter().all(|s| s.len() == n), "series lengths differ");
        let k = series.len() as f64;
        let avg = |f: fn(&MetricsSeries) -> &Vec<f64>| -> Vec<f64> {
            (0..n).map(|t| series.iter().map(|s| f(s)[t]).sum::<f64>() / k).collect()
        };
        Self {
            cumulative_avg_reward: avg(|s| &s.cumulative_avg_reward),
            cumulative_optimal_fraction: avg(|s| &s.cumulative_optimal_fraction),
            moving_avg_optimal_fraction: avg(|s| &s.moving_avg_optimal_fraction),
        }
    }

    /// Writes `day, cumulative_avg_reward, cumulative_optimal_fraction, moving_avg_optimal_fraction`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "day",
            "cumulative_avg_reward",
            "cumulative_optimal_fraction",
            "moving_avg_optimal_fraction",
        ])?;
        for t in 0..self.len() {
            w.write_record([
                t.to_string(),
                self.cumulative_avg_reward[t].to_string(),
                self.cumulative_optimal_fraction[t].to_string(),
                self.moving_avg_optimal_fraction[t].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_oracle_grid(params: &PatientParams<f64>, oracle: &PolicyTable<f64>) -> Result<(), ExperimentError> {
    let (grid, model) = (oracle.grid.x_max(), params.state_bound());
    if (grid - model).abs() > 1e-9 * model.max(1.0) {
        return Err(ExperimentError::GridMismatch { grid, model });
    }
    Ok(())
}

/// Metrics of a trajectory against the true-parameter policy evaluated at the
/// simulator's latent states.
pub fn compute_metrics(traj: &Trajectory, oracle: &PolicyTable<f64>) -> Result<MetricsSeries, ExperimentError> {
    check_oracle_grid(&traj.params, oracle)?;
    let rewards: Vec<f64> = traj.records.iter().map(|r| r.reward).collect();
    let optimal: Vec<bool> = traj
        .records
        .iter()
        .map(|r| r.action == oracle.action_at(r.latent_state_before))
        .collect();
    Ok(MetricsSeries::from_days(&rewards, &optimal))
}

/// Metrics recomputed from stored rows (one replication, ordered by day),
/// re-deriving optimality from the stored latent states.
pub fn metrics_from_rows(rows: &[StepRow], oracle: &PolicyTable<f64>) -> MetricsSeries {
    let rewards: Vec<f64> = rows.iter().map(|r| r.reward).collect();
    let optimal: Vec<bool> = rows
        .iter()
        .map(|r| r.action == oracle.action_at(r.latent_state))
        .collect();
    MetricsSeries::from_days(&rewards, &optimal)
}

/// Completed replication.
#[derive(Debug, Clone)]
pub struct ReplicationRun {
    pub replication: usize,
    pub rows: Vec<StepRow>,
    pub metrics: MetricsSeries,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicationFailure {
    pub replication: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ControllerResults {
    pub config: ControllerConfig,
    pub runs: Vec<ReplicationRun>,
    pub failures: Vec<ReplicationFailure>,
}

impl ControllerResults {
    /// Mean metrics over successful replications, truncated to `horizon`.
    pub fn mean_metrics(&self, horizon: usize) -> MetricsSeries {
        let series: Vec<_> = self.runs.iter().map(|r| r.metrics.truncated(horizon)).collect();
        MetricsSeries::mean(&series)
    }
}

pub struct ExperimentResults {
    pub config: ExperimentConfig,
    pub true_tuple: Option<usize>,
    pub controllers: Vec<ControllerResults>,
}

impl ExperimentResults {
    pub fn failure_count(&self) -> usize {
        self.controllers.iter().map(|c| c.failures.len()).sum()
    }

    pub fn controller(&self, slug: &str) -> Option<&ControllerResults> {
        self.controllers.iter().find(|c| c.config.slug() == slug)
    }
}

fn run_replication(
    prep: &PreparedExperiment,
    controller_index: usize,
    replication: usize,
) -> Result<ReplicationRun, SimulationError> {
    let cfg = &prep.config;
    let controller_seed = derive_seed(cfg.master_seed, controller_index, replication, StreamRole::Controller);
    let patient_seed = patient_seed(cfg.master_seed, replication);
    let mut controller = cfg.controllers[controller_index]
        .build(&prep.known, &prep.params, &prep.oracle, controller_seed)
        .map_err(|source| SimulationError::Controller { day: 0, source })?;
    let mut rows = Vec::with_capacity(cfg.max_horizon());
    let traj = run_trajectory_with(
        &prep.params,
        controller.as_mut(),
        cfg.max_horizon(),
        patient_seed,
        |rec: &TrajectoryRecord, ctl| {
            let snap = ctl.snapshot();
            let oracle_action = prep.oracle.action_at(rec.latent_state_before);
            rows.push(StepRow {
                replication,
                day: rec.day,
                action: rec.action,
                adhered: rec.adhered.as_u8(),
                reward: rec.reward,
                latent_state: rec.latent_state_before,
                oracle_action,
                is_optimal: (rec.action == oracle_action) as u8,
                controller_believed_state: snap.believed_state,
                mle_tuple_index: snap.mle_tuple_index,
                posterior_weight_on_true_tuple: match (&snap.weights, prep.true_tuple) {
                    (Some(w), Some(i)) => Some(w[i]),
                    _ => None,
                },
            });
        },
    )?;
    let metrics = compute_metrics(&traj, &prep.oracle).expect("oracle built from the same parameters");
    Ok(ReplicationRun {
        replication,
        rows,
        metrics,
    })
}

/// Runs every `(controller, replication)` pair on the current rayon pool.
/// Results come back in configuration order regardless of scheduling.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResults, ExperimentError> {
    let prep = config.prepare()?;
    Ok(run_prepared(&prep))
}

pub fn run_prepared(prep: &PreparedExperiment) -> ExperimentResults {
    let cfg = &prep.config;
    let tasks: Vec<(usize, usize)> = (0..cfg.controllers.len())
        .flat_map(|c| (0..cfg.replications).map(move |r| (c, r)))
        .collect();
    let outcomes: Vec<_> = tasks
        .par_iter()
        .map(|&(c, r)| run_replication(prep, c, r))
        .collect();
    let mut controllers: Vec<ControllerResults> = cfg
        .controllers
        .iter()
        .map(|c| ControllerResults {
            config: c.clone(),
            runs: Vec::new(),
            failures: Vec::new(),
        })
        .collect();
    for (&(c, r), outcome) in tasks.iter().zip(outcomes) {
        match outcome {
            Ok(run) => controllers[c].runs.push(run),
            Err(e) => {
                log::error!("{} replication {r} failed: {e}", cfg.controllers[c].label());
                controllers[c].failures.push(ReplicationFailure {
                    replication: r,
                    message: e.to_string(),
                });
            }
        }
    }
    ExperimentResults {
        config: cfg.clone(),
        true_tuple: prep.true_tuple,
        controllers,
    }
}

pub fn write_step_rows<'a, W: Write>(rows: impl IntoIterator<Item = &'a StepRow>, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_step_rows<R: Read>(input: R) -> csv::Result<Vec<StepRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

/// Groups rows by replication (in order of first appearance), sorted by day.
pub fn group_by_replication(rows: Vec<StepRow>) -> Vec<(usize, Vec<StepRow>)> {
    let mut groups: Vec<(usize, Vec<StepRow>)> = Vec::new();
    for row in rows {
        match groups.iter_mut().find(|(r, _)| *r == row.replication) {
            Some((_, g)) => g.push(row),
            None => groups.push((row.replication, vec![row])),
        }
    }
    for (_, g) in &mut groups {
        g.sort_by_key(|r| r.day);
    }
    groups
}

#[derive(Debug, Clone, Serialize)]
pub struct HorizonSummary {
    pub horizon: usize,
    pub mean_cumulative_avg_reward: f64,
    pub mean_cumulative_optimal_fraction: f64,
    pub mean_moving_avg_optimal_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ControllerSummary {
    pub label: String,
    pub slug: String,
    pub completed: usize,
    pub failures: Vec<ReplicationFailure>,
    pub horizons: Vec<HorizonSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparability {
    pub day: usize,
    pub controllers: Vec<String>,
    pub max_spread: f64,
    /// Per replication: largest minus smallest moving-average optimal fraction.
    pub spreads: Vec<f64>,
    pub fraction_within: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub master_seed: u64,
    pub replications: usize,
    pub horizons: Vec<usize>,
    pub true_tuple_index: Option<usize>,
    pub controllers: Vec<ControllerSummary>,
    pub comparability: Option<Comparability>,
}

/// Spread across adaptive controllers of the moving-average optimal fraction
/// on [`COMPARABILITY_DAY`], paired by replication index. `None` when fewer
/// than two adaptive controllers ran or the horizon is too short.
pub fn comparability(results: &ExperimentResults) -> Option<Comparability> {
    let adaptive: Vec<&ControllerResults> = results.controllers.iter().filter(|c| c.config.is_adaptive()).collect();
    if adaptive.len() < 2 || results.config.max_horizon() < COMPARABILITY_DAY {
        return None;
    }
    let t = COMPARABILITY_DAY - 1;
    let mut spreads = Vec::new();
    for r in 0..results.config.replications {
        let values: Option<Vec<f64>> = adaptive
            .iter()
            .map(|c| {
                c.runs
                    .iter()
                    .find(|run| run.replication == r)
                    .map(|run| run.metrics.moving_avg_optimal_fraction[t])
            })
            .collect();
        if let Some(v) = values {
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            spreads.push(hi - lo);
        }
    }
    let within = spreads.iter().filter(|&&s| s <= COMPARABILITY_SPREAD).count();
    Some(Comparability {
        day: COMPARABILITY_DAY,
        controllers: adaptive.iter().map(|c| c.config.label()).collect(),
        max_spread: COMPARABILITY_SPREAD,
        fraction_within: if spreads.is_empty() { 0.0 } else { within as f64 / spreads.len() as f64 },
        spreads,
    })
}

pub fn summarize(results: &ExperimentResults) -> ExperimentSummary {
    let mut horizons = results.config.horizons.clone();
    horizons.sort_unstable();
    horizons.dedup();
    ExperimentSummary {
        master_seed: results.config.master_seed,
        replications: results.config.replications,
        horizons: horizons.clone(),
        true_tuple_index: results.true_tuple,
        controllers: results
            .controllers
            .iter()
            .map(|c| ControllerSummary {
                label: c.config.label(),
                slug: c.config.slug(),
                completed: c.runs.len(),
                failures: c.failures.clone(),
                horizons: horizons
                    .iter()
                    .filter(|_| !c.runs.is_empty())
                    .map(|&h| {
                        let m = c.mean_metrics(h);
                        HorizonSummary {
                            horizon: h,
                            mean_cumulative_avg_reward: m.cumulative_avg_reward[h - 1],
                            mean_cumulative_optimal_fraction: m.cumulative_optimal_fraction[h - 1],
                            mean_moving_avg_optimal_fraction: m.moving_avg_optimal_fraction[h - 1],
                        }
                    })
                    .collect(),
            })
            .collect(),
        comparability: comparability(results),
    }
}

/// Writes `steps_{slug}_h{h}.csv`, `metrics_{slug}_h{h}.csv` and `summary.json`.
pub fn write_outputs(results: &ExperimentResults, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut horizons = results.config.horizons.clone();
    horizons.sort_unstable();
    horizons.dedup();
    for c in &results.controllers {
        let slug = c.config.slug();
        for &h in &horizons {
            let path = dir.join(format!("steps_{slug}_h{h}.csv"));
            let rows = c.runs.iter().flat_map(|run| run.rows.iter().take(h));
            write_step_rows(rows, fs::File::create(&path)?)?;
            written.push(path);
            let path = dir.join(format!("metrics_{slug}_h{h}.csv"));
            c.mean_metrics(h).write_csv(fs::File::create(&path)?)?;
            written.push(path);
        }
    }
    let path = dir.join("summary.json");
    let mut f = fs::File::create(&path)?;
    serde_json::to_writer_pretty(&mut f, &summarize(results))?;
    f.write_all(b"\n")?;
    written.push(path);
    Ok(written)
}

/// Patient parameter varied by a policy sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    CLow,
    LambdaLow,
    LambdaHigh,
    B,
    X0,
    GammaLow,
    GammaHigh,
    Alpha,
}

impl SweepParameter {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::CLow => "c_low",
            Self::LambdaLow => "lambda_low",
            Self::LambdaHigh => "lambda_high",
            Self::B => "b",
            Self::X0 => "x0",
            Self::GammaLow => "gamma_low",
            Self::GammaHigh => "gamma_high",
            Self::Alpha => "alpha",
        }
    }

    fn apply(self, base: &UncheckedParams<f64>, v: f64) -> UncheckedParams<f64> {
        let mut p = *base;
        match self {
            Self::CLow => p.c_low = v,
            Self::LambdaLow => p.lambda_low = v,
            Self::LambdaHigh => p.lambda_high = v,
            Self::B => p.b = v,
            Self::X0 => p.x0 = v,
            Self::GammaLow => p.gamma_low = v,
            Self::GammaHigh => p.gamma_high = v,
            Self::Alpha => p.alpha = v,
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub patient: UncheckedParams<f64>,
    #[serde(default)]
    pub vi: ViSettings,
    pub sweep: SweepSpec,
}

impl SweepConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ExperimentError> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }
}

pub struct SweepPoint {
    pub value: f64,
    pub solution: ViSolution<f64>,
    pub kind: StructureKind,
    pub thresholds: Vec<f64>,
}

/// One VI solve per sweep value. Parameters are validated (including
/// `λ_ℓ ≤ λ_h`) before anything is solved.
pub fn emit_policy_sweep(
    base: &UncheckedParams<f64>,
    parameter: SweepParameter,
    values: &[f64],
    vi: &ViSettings,
) -> Result<Vec<SweepPoint>, ExperimentError> {
    if values.is_empty() {
        return Err(ExperimentError::Config("sweep needs at least one value".into()));
    }
    let params = values
        .iter()
        .map(|&v| {
            PatientParams::new(parameter.apply(base, v)).map_err(|e| {
                ExperimentError::Config(format!("{} = {v}: {e}", parameter.as_str()))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    values
        .iter()
        .zip(params)
        .map(|(&value, p)| {
            let solution = value_iteration(&p, vi.grid_for(&p)?)?;
            let structure = classify_policy(&solution.policy)?;
            Ok(SweepPoint {
                value,
                kind: structure.kind,
                thresholds: structure.thresholds,
                solution,
            })
        })
        .collect()
}

/// Rows `sweep_value, x, action, classification, thresholds` with thresholds
/// joined by `;`.
pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sweep_value", "x", "action", "classification", "thresholds"])?;
    for p in points {
        let thresholds = p.thresholds.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
        let policy = &p.solution.policy;
        for (x, a) in policy.grid.nodes().zip(&policy.actions) {
            w.write_record([
                p.value.to_string(),
                x.to_string(),
                a.as_str().to_string(),
                p.kind.as_str().to_string(),
                thresholds.clone(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllers::{FixedController, OracleController};
    use crate::model::Adherence;
    use crate::model::presets::{patient_one, structure_example};
    use crate::simulator::run_trajectory_scripted;

    fn small_config(controllers: &str, reps: usize, horizons: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            r#"
            master_seed = 7
            replications = {reps}
            horizons = {horizons}
            controllers = {controllers}

            [patient]
            c_low = 0.7
            c_high = 1.0
            lambda_low = 0.4
            lambda_high = 1.0
            b = 0.8
            x0 = 2.5
            gamma_low = 0.5
            gamma_high = 1.0
            alpha = 0.95

            [vi]
            n_points = 400
            tolerance = 0.001
            "#
        ))
        .unwrap()
    }

    #[test]
    fn cumulative_average_arithmetic() {
        let m = MetricsSeries::from_days(&[1.0, 0.0, 0.5, 1.0, 0.0], &[true; 5]);
        let expected = [1.0, 0.5, 0.5, 0.625, 0.5];
        for (a, b) in m.cumulative_avg_reward.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(m.cumulative_optimal_fraction.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn moving_average_matches_naive_window() {
        let mut rng = crate::seeding::rng_from_seed(2);
        use rand::Rng;
        let optimal: Vec<bool> = (0..300).map(|_| rng.random_bool(0.6)).collect();
        let m = MetricsSeries::from_days(&vec![0.0; 300], &optimal);
        for t in 0..300 {
            let lo = (t + 1usize).saturating_sub(MOVING_AVERAGE_WINDOW);
            let w = &optimal[lo..=t];
            let naive = w.iter().filter(|&&b| b).count() as f64 / w.len() as f64;
            assert!((m.moving_avg_optimal_fraction[t] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn all_high_all_adhere_rewards_one() {
        let p = patient_one::<f64>();
        let oracle = oracle_policy(&p, &ViSettings::default()).unwrap();
        let mut c = FixedController::new(Action::High);
        let traj = run_trajectory_scripted(&p, &mut c, &[Adherence::Adhered; 50]).unwrap();
        let m = compute_metrics(&traj, &oracle).unwrap();
        assert!(m.cumulative_avg_reward.iter().all(|&r| (r - 1.0).abs() < 1e-15));
    }

    #[test]
    fn oracle_controller_is_always_optimal() {
        let p = patient_one::<f64>();
        let oracle = Arc::new(oracle_policy(&p, &ViSettings::default()).unwrap());
        let mut c = OracleController::new(p, oracle.clone());
        let traj = crate::simulator::run_trajectory(&p, &mut c, 300, 5).unwrap();
        let m = compute_metrics(&traj, &oracle).unwrap();
        assert!(m.cumulative_optimal_fraction.iter().all(|&v| v == 1.0));
        assert!(m.moving_avg_optimal_fraction.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grid_mismatch_rejected() {
        let p = patient_one::<f64>();
        let other = structure_example::<f64>(0.2).unwrap();
        let oracle = oracle_policy(&other, &ViSettings::default()).unwrap();
        let mut c = FixedController::new(Action::Low);
        let traj = run_trajectory_scripted(&p, &mut c, &[Adherence::Adhered; 3]).unwrap();
        assert!(matches!(
            compute_metrics(&traj, &oracle),
            Err(ExperimentError::GridMismatch { .. })
        ));
    }

    #[test]
    fn mean_is_daywise_average() {
        let a = MetricsSeries::from_days(&[1.0, 0.0], &[true, false]);
        let b = MetricsSeries::from_days(&[0.0, 0.0], &[false, false]);
        let m = MetricsSeries::mean(&[a.clone(), b.clone()]);
        for t in 0..2 {
            assert_eq!(m.cumulative_avg_reward[t], (a.cumulative_avg_reward[t] + b.cumulative_avg_reward[t]) / 2.0);
            assert_eq!(
                m.cumulative_optimal_fraction[t],
                (a.cumulative_optimal_fraction[t] + b.cumulative_optimal_fraction[t]) / 2.0
            );
        }
    }

    #[test]
    fn single_day_single_replication() {
        let cfg = small_config(r#"[{ kind = "random" }, { kind = "reactive" }]"#, 1, "[1]");
        let res = run_experiment(&cfg).unwrap();
        for c in &res.controllers {
            assert_eq!(c.runs.len(), 1);
            let run = &c.runs[0];
            assert_eq!(run.rows.len(), 1);
            assert_eq!(run.metrics.cumulative_avg_reward[0], run.rows[0].reward);
            assert_eq!(run.metrics.cumulative_optimal_fraction[0], run.rows[0].is_optimal as f64);
        }
    }

    #[test]
    fn prefix_equals_separate_short_run() {
        let long = small_config(r#"[{ kind = "mle_beta", beta = 0.1 }, { kind = "random" }]"#, 2, "[30, 12]");
        let mut short = long.clone();
        short.horizons = vec![12];
        let a = run_experiment(&long).unwrap();
        let b = run_experiment(&short).unwrap();
        for (ca, cb) in a.controllers.iter().zip(&b.controllers) {
            for (ra, rb) in ca.runs.iter().zip(&cb.runs) {
                assert_eq!(&ra.rows[..12], &rb.rows[..]);
                assert_eq!(ra.metrics.truncated(12), rb.metrics);
            }
        }
    }

    #[test]
    fn config_errors_abort_early() {
        let mut cfg = small_config(r#"[{ kind = "random" }]"#, 1, "[5]");
        cfg.replications = 0;
        assert!(cfg.prepare().is_err());
        let mut cfg = small_config(r#"[{ kind = "random" }]"#, 1, "[5]");
        cfg.patient.lambda_low = 2.0;
        assert!(matches!(cfg.prepare(), Err(ExperimentError::Model(_))));
        let cfg = small_config(r#"[{ kind = "random" }, { kind = "random" }]"#, 1, "[5]");
        assert!(cfg.prepare().is_err());
        let cfg = small_config(r#"[{ kind = "thompson", init_period = 3 }]"#, 1, "[5]");
        assert!(cfg.prepare().is_err());
        assert!(ExperimentConfig::from_toml_str("master_seed = 1").is_err());
    }

    #[test]
    fn step_rows_round_trip() {
        let cfg = small_config(r#"[{ kind = "mle_beta", beta = 0.05 }, { kind = "random" }]"#, 2, "[8]");
        let res = run_experiment(&cfg).unwrap();
        let oracle = oracle_policy(&PatientParams::new(cfg.patient).unwrap(), &cfg.vi).unwrap();
        for c in &res.controllers {
            let mut buf = Vec::new();
            write_step_rows(c.runs.iter().flat_map(|r| &r.rows), &mut buf).unwrap();
            let text = String::from_utf8(buf.clone()).unwrap();
            assert!(text.starts_with(
                "replication,day,action,adhered,reward,latent_state,oracle_action,is_optimal,\
                 controller_believed_state,mle_tuple_index,posterior_weight_on_true_tuple"
            ));
            let rows = read_step_rows(buf.as_slice()).unwrap();
            let groups = group_by_replication(rows);
            assert_eq!(groups.len(), 2);
            for ((_, g), run) in groups.iter().zip(&c.runs) {
                assert_eq!(g, &run.rows);
                assert_eq!(metrics_from_rows(g, &oracle), run.metrics);
            }
        }
    }

    #[test]
    fn sweep_single_value_matches_direct_solve() {
        let base = structure_example::<f64>(0.3).unwrap().to_unchecked();
        let vi = ViSettings {
            n_points: 500,
            ..Default::default()
        };
        let pts = emit_policy_sweep(&base, SweepParameter::CLow, &[0.3], &vi).unwrap();
        let p = PatientParams::new(base).unwrap();
        let direct = value_iteration(&p, vi.grid_for(&p).unwrap()).unwrap();
        assert_eq!(pts[0].solution.policy, direct.policy);
        let mut buf = Vec::new();
        write_sweep_csv(&pts, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 501);
    }

    #[test]
    fn sweep_tie_gives_always_low() {
        let mut base = structure_example::<f64>(0.3).unwrap().to_unchecked();
        base.lambda_low = base.lambda_high;
        base.gamma_low = base.gamma_high;
        let vi = ViSettings {
            n_points: 300,
            ..Default::default()
        };
        let pts = emit_policy_sweep(&base, SweepParameter::CLow, &[1.0], &vi).unwrap();
        assert_eq!(pts[0].kind, StructureKind::AlwaysLow);
    }

    #[test]
    fn sweep_rejects_invalid_value() {
        let base = structure_example::<f64>(0.3).unwrap().to_unchecked();
        let err = emit_policy_sweep(&base, SweepParameter::CLow, &[0.2, 1.5], &ViSettings::default())
            .err()
            .unwrap();
        assert!(err.to_string().contains("c_low"));
    }
}
