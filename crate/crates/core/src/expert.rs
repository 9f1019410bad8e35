//! Expert demonstrations: ground-truth costs, optimal trajectories, training
//! samples and the JSON-lines dataset format.
//!
//! # Dataset format
//!
//! A dataset file is JSON lines. The first record is the header:
//!
//! ```text
//! {"format_version":1,"split":"train","config":{...},"seeds":{"start":0,"end":10},
//!  "normalization":{"mean":[6 floats],"var":[6 floats]}}
//! ```
//!
//! Every following record is one trajectory:
//!
//! ```text
//! {"level":{"seed":3,"height":5,"width":5,"boxes":[{"column":1,"top_row":2,"size":1,"velocity":1}],
//!           "agent_start":10,"jewel":14,"max_episode_steps":40},
//!  "steps":[[0,10,"Right"],[1,11,"Right"],...],"status":"Success"}
//! ```
//!
//! Step triples are `[time, agent vertex before acting, action]`; actions are
//! spelled `"Up"`, `"Down"`, `"Left"`, `"Right"`, `"NoOp"`. Field order is
//! stable and matches the listing above.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::gridworld::{
    generate_level, observe, reset, step, EnvState, GenerationConfig, LevelSpec, Observation,
    Status, OBS_CHANNELS,
};
use crate::tdsp::{edge_to_action, solve_tdsp, Action, CostTensor, PathMatrix};

/// Cost of an ordinary free cell.
pub const C_STEP: f64 = 1.0;
/// Cost of a cell occupied by a box; stands in for an infinite cost.
pub const C_BLOCK: f64 = 1.0e4;
/// Cost of the jewel cell. Reaching it ends the episode, so no further step
/// cost accrues there.
pub const C_GOAL: f64 = 0.0;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Costs for plan rows `0..horizon`, where row `k` describes time `t0 + k`.
pub fn ground_truth_costs(level: &LevelSpec, t0: usize, horizon: usize) -> Result<CostTensor> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    let n = level.num_vertices();
    let mut values = Vec::with_capacity(horizon * n);
    for k in 0..horizon {
        let occupied = crate::gridworld::occupancy_at(level, t0 + k);
        values.extend(occupied.into_iter().enumerate().map(|(v, blocked)| {
            if blocked {
                C_BLOCK
            } else if v == level.jewel {
                C_GOAL
            } else {
                C_STEP
            }
        }));
    }
    CostTensor::new(horizon, n, values)
}

/// One recorded step: the agent's vertex at time `t` and the action taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, Action)", into = "(usize, usize, Action)")]
pub struct TrajectoryStep {
    pub t: usize,
    pub vertex: usize,
    pub action: Action,
}

impl From<(usize, usize, Action)> for TrajectoryStep {
    fn from((t, vertex, action): (usize, usize, Action)) -> Self {
        Self { t, vertex, action }
    }
}

impl From<TrajectoryStep> for (usize, usize, Action) {
    fn from(s: TrajectoryStep) -> Self {
        (s.t, s.vertex, s.action)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub level: LevelSpec,
    pub steps: Vec<TrajectoryStep>,
    pub status: Status,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Agent vertices at times `0..=len`; the last entry is where the final
    /// action led.
    pub fn vertices(&self) -> Vec<usize> {
        let graph = self.level.graph();
        let mut out: Vec<usize> = self.steps.iter().map(|s| s.vertex).collect();
        let last = match self.steps.last() {
            Some(s) => graph.apply_action(s.vertex, s.action),
            None => self.level.agent_start,
        };
        out.push(last);
        out
    }

    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action).collect()
    }

    /// Replays the actions from reset, returning the states at times
    /// `0..=len`, and checks them against the record.
    pub fn replay(&self) -> Result<Vec<EnvState>> {
        let mut state = reset(Arc::new(self.level.clone()));
        let mut states = Vec::with_capacity(self.steps.len() + 1);
        for s in &self.steps {
            if state.t != s.t || state.agent != s.vertex {
                return Err(Error::OracleInconsistency(format!(
                    "replay reached vertex {} at t={}, record says {} at t={}",
                    state.agent, state.t, s.vertex, s.t
                )));
            }
            let next = step(&state, s.action)?;
            states.push(state);
            state = next;
        }
        if state.status != self.status {
            return Err(Error::OracleInconsistency(format!(
                "replay ended in {:?}, record says {:?}",
                state.status, self.status
            )));
        }
        states.push(state);
        Ok(states)
    }
}

/// Optimal demonstration: plan on the ground-truth costs over the whole
/// episode, cut at the first jewel arrival, and verify it in simulation.
pub fn expert_trajectory(level: &LevelSpec) -> Result<Trajectory> {
    level.validate()?;
    let graph = level.graph();
    let horizon = level.max_episode_steps + 1;
    let costs = ground_truth_costs(level, 0, horizon)?;
    let plan = solve_tdsp(&graph, &costs, level.agent_start, level.jewel)?;
    let mut vertices = plan.vertex_sequence()?;
    let arrival = vertices
        .iter()
        .position(|&v| v == level.jewel)
        .expect("plan ends at the jewel");
    vertices.truncate(arrival + 1);

    let mut state = reset(Arc::new(level.clone()));
    let mut steps = Vec::with_capacity(arrival);
    for pair in vertices.windows(2) {
        let action = edge_to_action(&graph, pair[0], pair[1])?;
        steps.push(TrajectoryStep {
            t: state.t,
            vertex: state.agent,
            action,
        });
        state = step(&state, action)?;
        if state.agent != pair[1] {
            return Err(Error::OracleInconsistency(format!(
                "planned vertex {} but simulator moved to {}",
                pair[1], state.agent
            )));
        }
        if state.status == Status::Failure {
            return Err(Error::OracleInconsistency(format!(
                "expert plan collides at t={} in level {}",
                state.t, level.seed
            )));
        }
    }
    if state.status != Status::Success {
        return Err(Error::OracleInconsistency(format!(
            "expert plan for level {} ended in {:?}",
            level.seed, state.status
        )));
    }
    Ok(Trajectory {
        level: level.clone(),
        steps,
        status: state.status,
    })
}

/// Per-channel observation statistics used to standardise network inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Standard deviation used for scaling; constant channels are left
    /// unscaled.
    pub fn scale(&self, channel: usize) -> f64 {
        let var = self.var[channel];
        if var > 1e-12 {
            1.0 / var.sqrt()
        } else {
            1.0
        }
    }

    /// Statistics over every observation along the given trajectories.
    pub fn from_trajectories(trajectories: &[Trajectory]) -> Result<Self> {
        let mut sum = [0.0; OBS_CHANNELS];
        let mut sum_sq = [0.0; OBS_CHANNELS];
        let mut count = 0usize;
        for traj in trajectories {
            let states = traj.replay()?;
            for state in &states[..traj.len()] {
                let obs = observe(state);
                let cells = obs.height * obs.width;
                for c in 0..OBS_CHANNELS {
                    for &x in obs.channel(c) {
                        sum[c] += x;
                        sum_sq[c] += x * x;
                    }
                }
                count += cells;
            }
        }
        if count == 0 {
            return Ok(Self::identity(OBS_CHANNELS));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let var = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0))
            .collect();
        Ok(Self { mean, var })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl SeedRange {
    pub fn new(start: u64, end: u64) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn iter(&self) -> Range<u64> {
        self.start..self.end
    }

    pub fn contains(&self, seed: u64) -> bool {
        (self.start..self.end).contains(&seed)
    }

    pub fn overlaps(&self, other: &SeedRange) -> bool {
        !self.is_empty() && !other.is_empty() && self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub split: Split,
    pub config: GenerationConfig,
    pub seeds: SeedRange,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn num_levels(&self) -> usize {
        self.trajectories.len()
    }
}

/// Expert trajectories for every seed in the range, in seed order.
pub fn build_split(config: &GenerationConfig, seeds: SeedRange, split: Split) -> Result<Dataset> {
    config.validate()?;
    let trajectories = seeds
        .iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|seed| generate_level(seed, config).and_then(|level| expert_trajectory(&level)))
        .collect::<Result<Vec<_>>>()?;
    let normalization = Normalization::from_trajectories(&trajectories)?;
    Ok(Dataset {
        header: DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            split,
            config: config.clone(),
            seeds,
            normalization,
        },
        trajectories,
    })
}

pub fn build_dataset(
    config: &GenerationConfig,
    train_seeds: SeedRange,
    test_seeds: SeedRange,
) -> Result<(Dataset, Dataset)> {
    if train_seeds.overlaps(&test_seeds) {
        return Err(Error::InvalidArgument(format!(
            "train seeds {train_seeds:?} overlap test seeds {test_seeds:?}"
        )));
    }
    Ok((
        build_split(config, train_seeds, Split::Train)?,
        build_split(config, test_seeds, Split::Test)?,
    ))
}

pub fn serialize_dataset(dataset: &Dataset) -> String {
    let mut out = serde_json::to_string(&dataset.header).expect("header serializes");
    out.push('\n');
    for traj in &dataset.trajectories {
        out.push_str(&serde_json::to_string(traj).expect("trajectory serializes"));
        out.push('\n');
    }
    out
}

pub fn deserialize_dataset(text: &str) -> Result<Dataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty());
    let parse_err = |line: usize, e: serde_json::Error| Error::Parse {
        line: line + 1,
        message: e.to_string(),
    };
    let (i, first) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header record".into(),
    })?;
    let header: DatasetHeader = serde_json::from_str(first).map_err(|e| parse_err(i, e))?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Parse {
            line: i + 1,
            message: format!("unsupported format version {}", header.format_version),
        });
    }
    let trajectories = lines
        .map(|(i, line)| serde_json::from_str(line).map_err(|e| parse_err(i, e)))
        .collect::<Result<Vec<Trajectory>>>()?;
    Ok(Dataset {
        header,
        trajectories,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoalMode {
    Global,
    Local,
}

/// Supervision for one time step of an expert trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub observation: Observation,
    /// Expert vertices over the next `T` rows, padded with the final vertex.
    pub expert_path: PathMatrix,
    pub start: usize,
    /// Positive goal labels, sorted and deduplicated.
    pub goals: Vec<usize>,
    pub action: Action,
}

impl TrainingSample {
    /// Goal vertex the expert path ends at; the solver target during training.
    pub fn path_goal(&self) -> usize {
        let seq = self
            .expert_path
            .vertex_sequence()
            .expect("valid expert path");
        seq[seq.len() - 1]
    }
}

pub fn make_training_samples(
    trajectory: &Trajectory,
    horizon: usize,
    mode: GoalMode,
) -> Result<Vec<TrainingSample>> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    let states = trajectory.replay()?;
    let vertices = trajectory.vertices();
    let last = vertices.len() - 1;
    let at = |k: usize| vertices[k.min(last)];
    let n = trajectory.level.num_vertices();

    trajectory
        .steps
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let path: Vec<usize> = (t..t + horizon).map(at).collect();
            let goals = match mode {
                GoalMode::Global => vec![trajectory.level.jewel],
                GoalMode::Local => {
                    let lo = (t + horizon).min(last);
                    let hi = (t + 2 * horizon).min(last);
                    let mut g: Vec<usize> = (lo..=hi).map(at).collect();
                    g.sort_unstable();
                    g.dedup();
                    g
                }
            };
            Ok(TrainingSample {
                observation: observe(&states[t]),
                expert_path: PathMatrix::from_vertices(n, &path)?,
                start: s.vertex,
                goals,
                action: s.action,
            })
        })
        .collect()
}

/// Samples for every trajectory of a dataset, in order.
pub fn dataset_samples(
    dataset: &Dataset,
    horizon: usize,
    mode: GoalMode,
) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for traj in &dataset.trajectories {
        out.extend(make_training_samples(traj, horizon, mode)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::BoxSpec;
    use crate::tdsp::path_cost;

    fn corridor(height: usize, width: usize, boxes: Vec<BoxSpec>) -> LevelSpec {
        LevelSpec {
            seed: 0,
            height,
            width,
            boxes,
            agent_start: 0,
            jewel: width - 1,
            max_episode_steps: 4 * (height + width),
        }
    }

    #[test]
    fn costs_without_boxes() {
        let level = corridor(5, 5, vec![]);
        let c = ground_truth_costs(&level, 0, 3).unwrap();
        for t in 0..3 {
            for v in 0..25 {
                let expected = if v == level.jewel { C_GOAL } else { C_STEP };
                assert_eq!(c.get(t, v), expected);
            }
        }
        assert!(ground_truth_costs(&level, 0, 0).is_err());
    }

    #[test]
    fn costs_follow_the_box() {
        let b = BoxSpec {
            column: 2,
            top_row: 0,
            size: 1,
            velocity: 1,
        };
        let level = corridor(5, 5, vec![b]);
        let c = ground_truth_costs(&level, 1, 3).unwrap();
        let blocked: Vec<(usize, usize)> = (0..3)
            .flat_map(|t| (0..25).map(move |v| (t, v)))
            .filter(|&(t, v)| c.get(t, v) == C_BLOCK)
            .collect();
        // Rows describe times 1, 2, 3: the box sits at rows 1, 2, 3 of column 2.
        assert_eq!(blocked, vec![(0, 5 + 2), (1, 10 + 2), (2, 15 + 2)]);
        assert_eq!(c, ground_truth_costs(&level, 1, 3).unwrap());
    }

    #[test]
    fn corridor_expert() {
        let level = corridor(1, 3, vec![]);
        let traj = expert_trajectory(&level).unwrap();
        assert_eq!(traj.actions(), vec![Action::Right, Action::Right]);
        assert_eq!(traj.status, Status::Success);
        let states = traj.replay().unwrap();
        assert_eq!(states.last().unwrap().t, 2);
    }

    #[test]
    fn expert_avoids_boxes() {
        let config = GenerationConfig::crash_5x5();
        for seed in 0..20 {
            let level = generate_level(seed, &config).unwrap();
            let traj = expert_trajectory(&level).unwrap();
            traj.replay().unwrap();
            let costs = ground_truth_costs(&level, 0, traj.len() + 1).unwrap();
            let path = PathMatrix::from_vertices(level.num_vertices(), &traj.vertices()).unwrap();
            assert!(path_cost(&costs, &path).unwrap() < C_BLOCK);
        }
    }

    #[test]
    fn samples_pad_with_goal() {
        let level = corridor(1, 3, vec![]);
        let traj = expert_trajectory(&level).unwrap();
        let samples = make_training_samples(&traj, 3, GoalMode::Global).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(
            samples[0].expert_path.vertex_sequence().unwrap(),
            vec![0, 1, 2]
        );
        assert_eq!(
            samples[1].expert_path.vertex_sequence().unwrap(),
            vec![1, 2, 2]
        );
        assert!(samples.iter().all(|s| s.goals == vec![2]));
        assert_eq!(samples[1].start, 1);
        assert_eq!(samples[1].path_goal(), 2);
    }

    #[test]
    fn local_goals_cover_the_window() {
        let level = corridor(1, 6, vec![]);
        let traj = expert_trajectory(&level).unwrap();
        let samples = make_training_samples(&traj, 2, GoalMode::Local).unwrap();
        assert_eq!(samples[0].goals, vec![2, 3, 4]);
        // Windows past the end collapse onto the final vertex.
        assert_eq!(samples[4].goals, vec![5]);
        for s in &samples {
            assert_eq!(s.expert_path.vertex_sequence().unwrap()[0], s.start);
        }
    }

    #[test]
    fn empty_dataset_round_trip() {
        let config = GenerationConfig::crash_5x5();
        let ds = build_split(&config, SeedRange::new(0, 0), Split::Test).unwrap();
        let text = serialize_dataset(&ds);
        assert_eq!(text.lines().count(), 1);
        assert_eq!(deserialize_dataset(&text).unwrap(), ds);
    }

    #[test]
    fn overlapping_seed_ranges_rejected() {
        let config = GenerationConfig::crash_5x5();
        assert!(build_dataset(&config, SeedRange::new(0, 10), SeedRange::new(5, 15)).is_err());
    }

    #[test]
    fn parse_errors_name_the_line() {
        let config = GenerationConfig::crash_5x5();
        let ds = build_split(&config, SeedRange::new(0, 2), Split::Train).unwrap();
        let mut text = serialize_dataset(&ds);
        text.push_str("{\"level\": 3}\n");
        match deserialize_dataset(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(
            deserialize_dataset(""),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn handwritten_record_parses() {
        let text = concat!(
            r#"{"format_version":1,"split":"train","config":{"height":1,"width":3,"#,
            r#""boxes_per_column":{"min":0,"max":0},"box_size":{"min":1,"max":1},"#,
            r#""velocity":{"min":0,"max":0},"max_episode_steps":null,"max_draws":10},"#,
            r#""seeds":{"start":0,"end":1},"normalization":{"mean":[0,0,0,0,0,0],"var":[1,1,1,1,1,1]}}"#,
            "\n",
            r#"{"level":{"seed":0,"height":1,"width":3,"boxes":[],"agent_start":0,"jewel":2,"#,
            r#""max_episode_steps":16},"steps":[[0,0,"Right"],[1,1,"Right"]],"status":"Success"}"#,
            "\n"
        );
        let ds = deserialize_dataset(text).unwrap();
        assert_eq!(ds.trajectories.len(), 1);
        let traj = &ds.trajectories[0];
        assert_eq!(traj, &expert_trajectory(&corridor(1, 3, vec![])).unwrap());
        assert_eq!(
            traj.steps[1],
            TrajectoryStep {
                t: 1,
                vertex: 1,
                action: Action::Right
            }
        );
    }
}
