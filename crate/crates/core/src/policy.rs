//! Closed-loop execution and evaluation.
//!
//! NAP runs as model-predictive control: every step it predicts costs and
//! endpoints, solves the full horizon and executes only the first edge of the
//! plan. Evaluation rolls policies out on generated levels and aggregates
//! success rates and episode lengths in seed order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expert::{build_split, ground_truth_costs, GoalMode, SeedRange, Split};
use crate::gridworld::{
    generate_level, observe, reset, step, EnvState, GenerationConfig, LevelSpec, Observation,
    Status,
};
use crate::neural::{
    action_net_forward, argmax, cost_net_forward, position_net_forward, ModelParams,
};
use crate::tdsp::{edge_to_action, solve_tdsp, Action, GridGraph, PathMatrix};
use crate::training::{train_bc, train_nap, Hyperparams, NapModel};

/// One chosen action. `flagged` marks steps where no plan existed and the
/// policy fell back to `NoOp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub action: Action,
    pub flagged: bool,
    pub extended: bool,
}

impl Decision {
    pub fn plain(action: Action) -> Self {
        Self {
            action,
            flagged: false,
            extended: false,
        }
    }
}

pub trait Policy: Sync {
    fn name(&self) -> String;
    fn act(&self, state: &EnvState) -> Result<Decision>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct NapDecision {
    pub action: Action,
    pub start: usize,
    pub goal: usize,
    /// Solved plan, absent for fallback steps.
    pub plan: Option<PathMatrix>,
    /// The plan needed more rows than the horizon; the last cost row was
    /// repeated to reach the goal.
    pub extended: bool,
    pub flagged: bool,
}

/// Ground-truth endpoints substituted for the position net's predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Endpoints {
    pub start: usize,
    pub goal: usize,
}

/// One MPC step of a neuro-algorithmic policy.
///
/// A goal farther than `T - 1` hops is planned on costs whose last row
/// persists until the goal becomes reachable when `extend_horizon` is set;
/// otherwise the step is flagged and `NoOp` is returned.
pub fn nap_act(
    model: &NapModel,
    obs: &Observation,
    graph: &GridGraph,
    endpoints: Option<Endpoints>,
    extend_horizon: bool,
) -> Result<NapDecision> {
    let (costs, _) = cost_net_forward(&model.cost, obs)?;
    let (start, goal) = match endpoints {
        Some(e) => (e.start, e.goal),
        None => {
            let (s, g, _) = position_net_forward(&model.position, obs)?;
            (argmax(&s), argmax(&g))
        }
    };
    let horizon = costs.horizon();
    let fallback = |flagged| NapDecision {
        action: Action::NoOp,
        start,
        goal,
        plan: None,
        extended: false,
        flagged,
    };
    if horizon == 1 {
        let plan = solve_tdsp(graph, &costs, start, start)?;
        return Ok(NapDecision {
            plan: Some(plan),
            ..fallback(false)
        });
    }
    let needed = graph.hop_distance(start, goal) + 1;
    let (plan, extended) = if needed <= horizon {
        (solve_tdsp(graph, &costs, start, goal)?, false)
    } else if extend_horizon {
        (
            solve_tdsp(graph, &costs.extend_last_row(needed), start, goal)?,
            true,
        )
    } else {
        return Ok(fallback(true));
    };
    let seq = plan.vertex_sequence()?;
    let action = edge_to_action(graph, seq[0], seq[1])?;
    Ok(NapDecision {
        action,
        start,
        goal,
        plan: Some(plan),
        extended,
        flagged: false,
    })
}

/// Argmax over the action logits; ties go to the first declared action.
pub fn bc_act(params: &ModelParams, obs: &Observation) -> Result<Action> {
    let (logits, _) = action_net_forward(params, obs)?;
    Ok(Action::from_index(argmax(&logits)).expect("action head has one logit per action"))
}

/// Optimal plan from the current state on the true costs, or `None` when the
/// jewel can no longer be reached without collision.
fn oracle_plan(state: &EnvState) -> Result<Option<Vec<usize>>> {
    let level = &state.level;
    let graph = level.graph();
    let rows = level.max_episode_steps.saturating_sub(state.t) + 1;
    let costs = ground_truth_costs(level, state.t, rows)?;
    match solve_tdsp(&graph, &costs, state.agent, level.jewel) {
        Ok(path) => {
            if crate::tdsp::path_cost(&costs, &path)? >= crate::expert::C_BLOCK {
                return Ok(None);
            }
            Ok(Some(path.vertex_sequence()?))
        }
        Err(Error::UnreachableGoal { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

pub struct NapPolicy<'a> {
    pub model: &'a NapModel,
    /// Use the true agent cell and expert goal instead of predicted ones.
    pub nap_star: bool,
    pub extend_horizon: bool,
}

impl<'a> NapPolicy<'a> {
    pub fn new(model: &'a NapModel) -> Self {
        Self {
            model,
            nap_star: false,
            extend_horizon: true,
        }
    }

    fn true_endpoints(&self, state: &EnvState) -> Result<Endpoints> {
        let goal = match self.model.goal_mode {
            GoalMode::Global => state.level.jewel,
            GoalMode::Local => {
                let offset = self.model.horizon() - 1;
                match oracle_plan(state)? {
                    Some(seq) => {
                        let arrival = seq
                            .iter()
                            .position(|&v| v == state.level.jewel)
                            .unwrap_or(seq.len() - 1);
                        seq[offset.min(arrival)]
                    }
                    None => state.level.jewel,
                }
            }
        };
        Ok(Endpoints {
            start: state.agent,
            goal,
        })
    }
}

impl Policy for NapPolicy<'_> {
    fn name(&self) -> String {
        if self.nap_star { "nap_star" } else { "nap" }.to_string()
    }

    fn act(&self, state: &EnvState) -> Result<Decision> {
        let endpoints = if self.nap_star {
            Some(self.true_endpoints(state)?)
        } else {
            None
        };
        let graph = state.level.graph();
        let d = nap_act(
            self.model,
            &observe(state),
            &graph,
            endpoints,
            self.extend_horizon,
        )?;
        Ok(Decision {
            action: d.action,
            flagged: d.flagged,
            extended: d.extended,
        })
    }
}

pub struct BcPolicy<'a> {
    pub params: &'a ModelParams,
}

impl Policy for BcPolicy<'_> {
    fn name(&self) -> String {
        "bc".into()
    }

    fn act(&self, state: &EnvState) -> Result<Decision> {
        Ok(Decision::plain(bc_act(self.params, &observe(state))?))
    }
}

/// Replans on the true costs every step.
pub struct OraclePolicy;

impl Policy for OraclePolicy {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn act(&self, state: &EnvState) -> Result<Decision> {
        let graph = state.level.graph();
        match oracle_plan(state)? {
            Some(seq) if seq.len() >= 2 => {
                Ok(Decision::plain(edge_to_action(&graph, seq[0], seq[1])?))
            }
            Some(_) => Ok(Decision::plain(Action::NoOp)),
            None => Ok(Decision {
                action: Action::NoOp,
                flagged: true,
                extended: false,
            }),
        }
    }
}

/// Plays a fixed action list indexed by time, then `NoOp`.
pub struct ReplayPolicy {
    pub actions: Vec<Action>,
}

impl Policy for ReplayPolicy {
    fn name(&self) -> String {
        "replay".into()
    }

    fn act(&self, state: &EnvState) -> Result<Decision> {
        Ok(Decision::plain(
            self.actions.get(state.t).copied().unwrap_or(Action::NoOp),
        ))
    }
}

pub struct NoOpPolicy;

impl Policy for NoOpPolicy {
    fn name(&self) -> String {
        "noop".into()
    }

    fn act(&self, _state: &EnvState) -> Result<Decision> {
        Ok(Decision::plain(Action::NoOp))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub success: bool,
    pub length: usize,
    pub actions: Vec<Action>,
    pub flagged_steps: usize,
    pub extended_steps: usize,
}

/// Runs one episode until the simulator terminates or `step_cap` steps pass.
pub fn rollout(
    level: Arc<LevelSpec>,
    policy: &dyn Policy,
    step_cap: usize,
) -> Result<EpisodeResult> {
    let seed = level.seed;
    let cap = step_cap.min(level.max_episode_steps);
    let mut state = reset(level);
    let mut result = EpisodeResult {
        seed,
        success: false,
        length: 0,
        actions: Vec::new(),
        flagged_steps: 0,
        extended_steps: 0,
    };
    while !state.status.is_terminal() && state.t < cap {
        let d = policy.act(&state)?;
        result.flagged_steps += usize::from(d.flagged);
        result.extended_steps += usize::from(d.extended);
        result.actions.push(d.action);
        state = step(&state, d.action)?;
    }
    result.success = state.status == Status::Success;
    result.length = state.t;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthSummary {
    pub min: usize,
    pub median: f64,
    pub mean: f64,
    pub max: usize,
    /// Episode length → number of levels.
    pub histogram: BTreeMap<usize, usize>,
}

impl LengthSummary {
    pub fn from_lengths(lengths: &[usize]) -> Option<Self> {
        if lengths.is_empty() {
            return None;
        }
        let mut sorted = lengths.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        };
        let mut histogram = BTreeMap::new();
        for &l in &sorted {
            *histogram.entry(l).or_insert(0) += 1;
        }
        Some(Self {
            min: sorted[0],
            median,
            mean: sorted.iter().sum::<usize>() as f64 / n as f64,
            max: sorted[n - 1],
            histogram,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub policy: String,
    pub horizon: Option<usize>,
    pub goal_mode: Option<GoalMode>,
    pub seeds: SeedRange,
    pub config: GenerationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationFailureRecord {
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub settings: EvalSettings,
    pub num_levels: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub lengths: Option<LengthSummary>,
    pub episodes: Vec<EpisodeResult>,
    pub generation_failures: Vec<GenerationFailureRecord>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,success,length,flagged_steps,extended_steps\n");
        for e in &self.episodes {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.seed,
                u8::from(e.success),
                e.length,
                e.flagged_steps,
                e.extended_steps
            ));
        }
        out
    }
}

/// Rolls the policy out on every seed of the range. Levels that fail to
/// generate are listed and left out of the counts.
pub fn evaluate(
    policy: &dyn Policy,
    seeds: SeedRange,
    config: &GenerationConfig,
    horizon: Option<usize>,
    goal_mode: Option<GoalMode>,
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluation needs at least one seed".into(),
        ));
    }
    config.validate()?;
    let outcomes: Vec<(u64, Result<EpisodeResult>)> = seeds
        .iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|seed| {
            let result = generate_level(seed, config)
                .and_then(|level| rollout(Arc::new(level), policy, usize::MAX));
            (seed, result)
        })
        .collect();
    let mut episodes = Vec::new();
    let mut generation_failures = Vec::new();
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(e) => episodes.push(e),
            Err(e @ Error::GenerationFailure { .. }) => {
                generation_failures.push(GenerationFailureRecord {
                    seed,
                    message: e.to_string(),
                })
            }
            Err(e) => return Err(e),
        }
    }
    let successes = episodes.iter().filter(|e| e.success).count();
    let num_levels = episodes.len();
    let lengths: Vec<usize> = episodes.iter().map(|e| e.length).collect();
    Ok(EvalReport {
        settings: EvalSettings {
            policy: policy.name(),
            horizon,
            goal_mode,
            seeds,
            config: config.clone(),
        },
        num_levels,
        successes,
        success_rate: if num_levels == 0 {
            0.0
        } else {
            successes as f64 / num_levels as f64
        },
        lengths: LengthSummary::from_lengths(&lengths),
        episodes,
        generation_failures,
    })
}

/// Rejects evaluation seeds that overlap the training seeds.
pub fn check_disjoint(train: SeedRange, eval: SeedRange) -> Result<()> {
    if train.overlaps(&eval) {
        return Err(Error::InvalidArgument(format!(
            "evaluation seeds {}..{} overlap training seeds {}..{}",
            eval.start, eval.end, train.start, train.end
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Nap,
    Bc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Nap => "nap",
            Method::Bc => "bc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSweepSpec {
    pub config: GenerationConfig,
    pub level_counts: Vec<usize>,
    /// Training levels for count `n` are seeds `train_start..train_start + n`.
    pub train_start: u64,
    pub eval_seeds: SeedRange,
    pub hyperparams: Hyperparams,
    pub restarts: usize,
}

impl LevelSweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.level_counts.is_empty() || self.level_counts.contains(&0) {
            return Err(Error::InvalidArgument(
                "level counts must be positive".into(),
            ));
        }
        if self.level_counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "level counts must be ascending".into(),
            ));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidArgument(
                "at least one restart is required".into(),
            ));
        }
        let max = *self.level_counts.last().expect("nonempty");
        check_disjoint(self.train_seeds(max), self.eval_seeds)?;
        self.hyperparams.validate()
    }

    pub fn train_seeds(&self, levels: usize) -> SeedRange {
        SeedRange::new(self.train_start, self.train_start + levels as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub levels: usize,
    /// `None` marks the mean over restarts.
    pub restart: Option<usize>,
    pub success_rate: Option<f64>,
    pub error: Option<String>,
}

pub fn sweep_rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("method,levels,restart,success_rate,error\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method.name(),
            r.levels,
            r.restart.map_or("mean".to_string(), |x| x.to_string()),
            r.success_rate.map_or(String::new(), |x| x.to_string()),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        ));
    }
    out
}

/// Trains one method on `levels` training levels with restart seed
/// `hyperparams.seed + restart` and returns the held-out success rate.
pub fn run_level_cell(
    spec: &LevelSweepSpec,
    method: Method,
    levels: usize,
    restart: usize,
) -> Result<f64> {
    let dataset = build_split(&spec.config, spec.train_seeds(levels), Split::Train)?;
    let hp = Hyperparams {
        seed: spec.hyperparams.seed.wrapping_add(restart as u64),
        ..spec.hyperparams.clone()
    };
    let report = match method {
        Method::Nap => {
            let (model, _) = train_nap(&dataset, &hp)?;
            evaluate(
                &NapPolicy::new(&model),
                spec.eval_seeds,
                &spec.config,
                Some(hp.horizon),
                Some(hp.goal_mode),
            )?
        }
        Method::Bc => {
            let (params, _) = train_bc(&dataset, &hp)?;
            evaluate(
                &BcPolicy { params: &params },
                spec.eval_seeds,
                &spec.config,
                None,
                None,
            )?
        }
    };
    Ok(report.success_rate)
}

/// Mean row for a completed cell.
pub fn mean_row(method: Method, levels: usize, restarts: &[SweepRow]) -> SweepRow {
    let rates: Vec<f64> = restarts.iter().filter_map(|r| r.success_rate).collect();
    let failed = restarts.len() - rates.len();
    SweepRow {
        method,
        levels,
        restart: None,
        success_rate: (failed == 0 && !rates.is_empty())
            .then(|| rates.iter().sum::<f64>() / rates.len() as f64),
        error: (failed > 0).then(|| format!("{failed} restart(s) failed")),
    }
}

/// NAP and BC per level count, `restarts` rows each followed by their mean.
pub fn sweep_levels(spec: &LevelSweepSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for &levels in &spec.level_counts {
        for method in [Method::Nap, Method::Bc] {
            let cell: Vec<SweepRow> = (0..spec.restarts)
                .map(|restart| {
                    let outcome = run_level_cell(spec, method, levels, restart);
                    SweepRow {
                        method,
                        levels,
                        restart: Some(restart),
                        success_rate: outcome.as_ref().ok().copied(),
                        error: outcome.err().map(|e| e.to_string()),
                    }
                })
                .collect();
            let mean = mean_row(method, levels, &cell);
            rows.extend(cell);
            rows.push(mean);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: usize,
    pub success_rate: f64,
}

/// Evaluates one checkpoint per horizon on the shared seeds.
pub fn sweep_horizon(
    models: &[NapModel],
    eval_seeds: SeedRange,
    config: &GenerationConfig,
) -> Result<Vec<HorizonRow>> {
    models
        .iter()
        .map(|m| {
            let report = evaluate(
                &NapPolicy::new(m),
                eval_seeds,
                config,
                Some(m.horizon()),
                Some(m.goal_mode),
            )?;
            Ok(HorizonRow {
                horizon: m.horizon(),
                success_rate: report.success_rate,
            })
        })
        .collect()
}

pub fn horizon_rows_to_csv(rows: &[HorizonRow]) -> String {
    let mut out = String::from("horizon,success_rate\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.horizon, r.success_rate));
    }
    out
}
