//! Moving-obstacle grid world.
//!
//! The agent starts in the leftmost column and must reach the jewel in the
//! rightmost column. Boxes in the columns between move downwards with cyclic
//! wrap-around; stepping into an occupied cell ends the episode.
//!
//! Box dynamics are a closed-form function of time, so the environment state
//! factorises into the agent position and the clock.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expert::ground_truth_costs;
use crate::tdsp::{build_grid_graph, path_cost, solve_tdsp, Action, GridGraph};

/// Number of observation channels: (agent, boxes, jewel) for two frames.
pub const OBS_CHANNELS: usize = 6;
pub const CH_AGENT: usize = 0;
pub const CH_BOXES: usize = 1;
pub const CH_JEWEL: usize = 2;
const FRAME_CHANNELS: usize = 3;

/// One box: a vertical run of `size` cells in `column` whose top sits at
/// `top_row` at time zero and moves down `velocity` cells per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxSpec {
    pub column: usize,
    pub top_row: usize,
    pub size: usize,
    pub velocity: usize,
}

/// A generated level. Field order is the serialized order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<BoxSpec>,
    pub agent_start: usize,
    pub jewel: usize,
    pub max_episode_steps: usize,
}

impl LevelSpec {
    pub fn graph(&self) -> GridGraph {
        build_grid_graph(self.height, self.width).expect("validated level dimensions")
    }

    pub fn num_vertices(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.height == 0 || self.width < 2 {
            return bad(format!(
                "level must be at least 1x2, got {}x{}",
                self.height, self.width
            ));
        }
        if self.max_episode_steps == 0 {
            return bad("max_episode_steps must be positive".into());
        }
        if self.agent_start >= self.num_vertices() || !self.agent_start.is_multiple_of(self.width) {
            return bad(format!(
                "agent start {} is not in the first column",
                self.agent_start
            ));
        }
        if self.jewel >= self.num_vertices() || self.jewel % self.width != self.width - 1 {
            return bad(format!("jewel {} is not in the last column", self.jewel));
        }
        for b in &self.boxes {
            if b.column == 0 || b.column + 1 >= self.width {
                return bad(format!(
                    "box in column {} outside the obstacle field",
                    b.column
                ));
            }
            if b.size == 0 || b.size >= self.height || b.top_row >= self.height {
                return bad(format!(
                    "box {b:?} does not fit a grid of height {}",
                    self.height
                ));
            }
        }
        Ok(())
    }

    /// Shortest time after which the whole obstacle field repeats.
    pub fn period(&self) -> usize {
        self.boxes
            .iter()
            .map(|b| self.height / gcd(b.velocity % self.height, self.height))
            .fold(1, lcm)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Row-major occupancy of every cell at time `t`.
pub fn occupancy_at(level: &LevelSpec, t: usize) -> Vec<bool> {
    let h = level.height;
    let mut grid = vec![false; h * level.width];
    for b in &level.boxes {
        let shift = (b.velocity % h) * (t % h) % h;
        let top = (b.top_row + shift) % h;
        for k in 0..b.size {
            let row = (top + k) % h;
            grid[row * level.width + b.column] = true;
        }
    }
    grid
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Running,
    Success,
    Failure,
}

impl Status {
    pub fn is_terminal(self) -> bool {
        self != Status::Running
    }
}

/// Simulation state: the level, the clock, and the agent's current and
/// previous cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvState {
    pub level: Arc<LevelSpec>,
    pub t: usize,
    pub agent: usize,
    pub prev_agent: usize,
    pub status: Status,
}

pub fn reset(level: Arc<LevelSpec>) -> EnvState {
    let agent = level.agent_start;
    let status = if occupancy_at(&level, 0)[agent] {
        Status::Failure
    } else {
        Status::Running
    };
    EnvState {
        level,
        t: 0,
        agent,
        prev_agent: agent,
        status,
    }
}

/// Advances the clock by one step. Boxes move first, then the agent's new
/// cell is checked against the occupancy at the new time.
pub fn step(state: &EnvState, action: Action) -> Result<EnvState> {
    if state.status.is_terminal() {
        return Err(Error::InvalidState(format!(
            "episode already ended with {:?} at t={}",
            state.status, state.t
        )));
    }
    let level = &state.level;
    let graph = level.graph();
    let agent = graph.apply_action(state.agent, action);
    let t = state.t + 1;
    let status = if agent == level.jewel {
        Status::Success
    } else if occupancy_at(level, t)[agent] || t >= level.max_episode_steps {
        Status::Failure
    } else {
        Status::Running
    };
    Ok(EnvState {
        level: Arc::clone(level),
        t,
        agent,
        prev_agent: state.agent,
        status,
    })
}

/// Two stacked symbolic frames, channels-first: `[agent, boxes, jewel]` at
/// `t - 1` followed by the same at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Observation {
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

pub fn observe(state: &EnvState) -> Observation {
    let level = &state.level;
    let n = level.num_vertices();
    let mut data = vec![0.0; OBS_CHANNELS * n];
    let frames = [
        (state.t.saturating_sub(1), state.prev_agent),
        (state.t, state.agent),
    ];
    for (f, (t, agent)) in frames.into_iter().enumerate() {
        let base = f * FRAME_CHANNELS * n;
        data[base + CH_AGENT * n + agent] = 1.0;
        for (v, occupied) in occupancy_at(level, t).into_iter().enumerate() {
            if occupied {
                data[base + CH_BOXES * n + v] = 1.0;
            }
        }
        data[base + CH_JEWEL * n + level.jewel] = 1.0;
    }
    Observation {
        height: level.height,
        width: level.width,
        data,
    }
}

/// Whether the jewel can be reached without touching a box within `horizon`
/// time rows (row 0 being the start).
pub fn is_solvable(level: &LevelSpec, horizon: usize) -> Result<bool> {
    let graph = level.graph();
    let costs = ground_truth_costs(level, 0, horizon)?;
    match solve_tdsp(&graph, &costs, level.agent_start, level.jewel) {
        Ok(path) => Ok(path_cost(&costs, &path)? < crate::expert::C_BLOCK),
        Err(Error::UnreachableGoal { .. }) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Inclusive integer range used by the level generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Range {
    pub min: usize,
    pub max: usize,
}

impl Range {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        rng.gen_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub height: usize,
    pub width: usize,
    pub boxes_per_column: Range,
    pub box_size: Range,
    /// One velocity is drawn per level and shared by all of its boxes.
    pub velocity: Range,
    /// Defaults to `4 * (height + width)` when absent.
    pub max_episode_steps: Option<usize>,
    pub max_draws: usize,
}

impl GenerationConfig {
    /// 5×5 moving-box world.
    pub fn crash_5x5() -> Self {
        Self {
            height: 5,
            width: 5,
            boxes_per_column: Range::new(1, 1),
            box_size: Range::new(2, 3),
            velocity: Range::new(0, 1),
            max_episode_steps: None,
            max_draws: 1000,
        }
    }

    /// 5 rows by 10 columns.
    pub fn crash_5x10() -> Self {
        Self {
            width: 10,
            ..Self::crash_5x5()
        }
    }

    /// 5×5 world without obstacles.
    pub fn empty_5x5() -> Self {
        Self {
            boxes_per_column: Range::new(0, 0),
            ..Self::crash_5x5()
        }
    }

    pub fn episode_steps(&self) -> usize {
        self.max_episode_steps
            .unwrap_or(4 * (self.height + self.width))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.height == 0 || self.width < 2 {
            return bad("grid must be at least 1x2");
        }
        for r in [self.boxes_per_column, self.box_size, self.velocity] {
            if r.min > r.max {
                return bad("range minimum exceeds maximum");
            }
        }
        if self.boxes_per_column.max > 0
            && (self.box_size.min == 0 || self.box_size.max >= self.height)
        {
            return bad("box sizes must lie in 1..height");
        }
        if self.episode_steps() == 0 || self.max_draws == 0 {
            return bad("max_episode_steps and max_draws must be positive");
        }
        Ok(())
    }
}

fn draw_level(seed: u64, config: &GenerationConfig, rng: &mut ChaCha8Rng) -> LevelSpec {
    let (h, w) = (config.height, config.width);
    let velocity = config.velocity.sample(rng);
    let mut boxes = Vec::new();
    for column in 1..w.saturating_sub(1) {
        for _ in 0..config.boxes_per_column.sample(rng) {
            let size = config.box_size.sample(rng);
            let top_row = rng.gen_range(0..h);
            boxes.push(BoxSpec {
                column,
                top_row,
                size,
                velocity,
            });
        }
    }
    let agent_start = rng.gen_range(0..h) * w;
    let jewel = rng.gen_range(0..h) * w + (w - 1);
    LevelSpec {
        seed,
        height: h,
        width: w,
        boxes,
        agent_start,
        jewel,
        max_episode_steps: config.episode_steps(),
    }
}

/// Draws levels from a seeded stream until one is solvable.
pub fn generate_level(seed: u64, config: &GenerationConfig) -> Result<LevelSpec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..config.max_draws {
        let level = draw_level(seed, config, &mut rng);
        if is_solvable(&level, level.max_episode_steps + 1)? {
            return Ok(level);
        }
    }
    Err(Error::GenerationFailure {
        seed,
        draws: config.max_draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

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
    fn generation_is_deterministic() {
        let config = GenerationConfig::crash_5x5();
        let a = generate_level(7, &config).unwrap();
        let b = generate_level(7, &config).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
    }

    #[test]
    fn empty_config_places_agent_and_jewel() {
        let level = generate_level(3, &GenerationConfig::empty_5x5()).unwrap();
        assert!(level.boxes.is_empty());
        assert_eq!(level.agent_start % 5, 0);
        assert_eq!(level.jewel % 5, 4);
    }

    #[test]
    fn generated_levels_are_solvable() {
        let config = GenerationConfig {
            boxes_per_column: Range::new(1, 2),
            box_size: Range::new(1, 2),
            velocity: Range::new(0, 1),
            ..GenerationConfig::crash_5x5()
        };
        for seed in 0..100 {
            let level = generate_level(seed, &config).unwrap();
            level.validate().unwrap();
            assert!(is_solvable(&level, level.max_episode_steps + 1).unwrap());
            let velocities: Vec<usize> = level.boxes.iter().map(|b| b.velocity).collect();
            assert!(velocities.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn generation_failure_is_reported() {
        let config = GenerationConfig {
            height: 2,
            width: 3,
            boxes_per_column: Range::new(1, 1),
            box_size: Range::new(1, 1),
            velocity: Range::new(0, 0),
            max_episode_steps: Some(1),
            max_draws: 5,
        };
        assert_eq!(
            generate_level(1, &config),
            Err(Error::GenerationFailure { seed: 1, draws: 5 })
        );
    }

    #[test]
    fn occupancy_moves_cyclically() {
        let b = BoxSpec {
            column: 2,
            top_row: 0,
            size: 1,
            velocity: 1,
        };
        let level = corridor(5, 5, vec![b]);
        assert!(occupancy_at(&level, 0)[2]);
        let grid = occupancy_at(&level, 7);
        let occupied: Vec<usize> = (0..25).filter(|&v| grid[v]).collect();
        assert_eq!(occupied, vec![2 * 5 + 2]);
    }

    #[test]
    fn occupancy_is_periodic() {
        let level = corridor(
            6,
            5,
            vec![
                BoxSpec {
                    column: 1,
                    top_row: 1,
                    size: 2,
                    velocity: 2,
                },
                BoxSpec {
                    column: 3,
                    top_row: 4,
                    size: 1,
                    velocity: 3,
                },
            ],
        );
        let period = level.period();
        assert_eq!(period, 6);
        for t in 0..2 * period {
            assert_eq!(occupancy_at(&level, t), occupancy_at(&level, t + period));
        }
    }

    #[test]
    fn reset_and_observe() {
        let level = Arc::new(generate_level(11, &GenerationConfig::crash_5x5()).unwrap());
        let s = reset(Arc::clone(&level));
        assert_eq!(s.t, 0);
        assert_eq!(s.status, Status::Running);
        assert_eq!(s, reset(Arc::clone(&level)));
        let obs = observe(&s);
        assert_eq!(obs.data.len(), OBS_CHANNELS * 25);
        for c in 0..3 {
            assert_eq!(obs.channel(c), obs.channel(c + 3));
        }
    }

    #[test]
    fn observation_channels() {
        let level = Arc::new(generate_level(5, &GenerationConfig::crash_5x5()).unwrap());
        let mut s = reset(Arc::clone(&level));
        s = step(&s, Action::NoOp).unwrap();
        s = step(&s, Action::Down).unwrap_or(s);
        let obs = observe(&s);
        for frame in 0..2 {
            let agent = obs.channel(frame * 3 + CH_AGENT);
            assert_eq!(agent.iter().filter(|&&x| x == 1.0).count(), 1);
            let jewel = obs.channel(frame * 3 + CH_JEWEL);
            assert_eq!(jewel.iter().filter(|&&x| x == 1.0).count(), 1);
        }
        let boxes: Vec<bool> = obs
            .channel(3 + CH_BOXES)
            .iter()
            .map(|&x| x == 1.0)
            .collect();
        assert_eq!(boxes, occupancy_at(&level, s.t));
        let prev: Vec<bool> = obs.channel(CH_BOXES).iter().map(|&x| x == 1.0).collect();
        assert_eq!(prev, occupancy_at(&level, s.t - 1));
    }

    #[test]
    fn step_reaches_jewel() {
        let level = Arc::new(corridor(1, 2, vec![]));
        let s = step(&reset(level), Action::Right).unwrap();
        assert_eq!((s.t, s.status), (1, Status::Success));
        assert!(matches!(
            step(&s, Action::NoOp),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn step_clips_at_border() {
        let level = Arc::new(corridor(3, 3, vec![]));
        let s = step(&reset(level), Action::Up).unwrap();
        assert_eq!((s.t, s.agent, s.status), (1, 0, Status::Running));
    }

    #[test]
    fn step_into_box_fails() {
        // Box occupies row 0 of column 1 at t=0 and row 1 at t=1.
        let b = BoxSpec {
            column: 1,
            top_row: 0,
            size: 1,
            velocity: 1,
        };
        let level = Arc::new(LevelSpec {
            agent_start: 3,
            jewel: 5,
            ..corridor(3, 3, vec![b])
        });
        assert!(occupancy_at(&level, 1)[4]);
        let s = step(&reset(Arc::clone(&level)), Action::Right).unwrap();
        assert_eq!((s.agent, s.status), (4, Status::Failure));

        // Moving into the cell the box just left is safe.
        let level = Arc::new(LevelSpec {
            agent_start: 0,
            ..(*level).clone()
        });
        let s = step(&reset(level), Action::Right).unwrap();
        assert_eq!((s.agent, s.status), (1, Status::Running));
    }

    #[test]
    fn episode_step_limit() {
        let level = Arc::new(LevelSpec {
            max_episode_steps: 2,
            ..corridor(1, 3, vec![])
        });
        let s = step(&reset(level), Action::NoOp).unwrap();
        assert_eq!(s.status, Status::Running);
        let s = step(&s, Action::NoOp).unwrap();
        assert_eq!(s.status, Status::Failure);
    }

    #[test]
    fn blocked_field_is_unsolvable() {
        // Two stacked static boxes fill every middle column of a height-2 grid.
        let boxes = (1..4)
            .flat_map(|column| {
                (0..2).map(move |top_row| BoxSpec {
                    column,
                    top_row,
                    size: 1,
                    velocity: 0,
                })
            })
            .collect();
        let level = corridor(2, 5, boxes);
        level.validate().unwrap();
        assert!(!is_solvable(&level, 40).unwrap());
        assert!(is_solvable(&corridor(5, 5, vec![]), 5).unwrap());
        assert!(!is_solvable(&corridor(5, 5, vec![]), 4).unwrap());
    }

    #[test]
    fn validate_rejects_bad_levels() {
        let b = BoxSpec {
            column: 0,
            top_row: 0,
            size: 1,
            velocity: 0,
        };
        assert!(corridor(3, 3, vec![b]).validate().is_err());
        let big = BoxSpec {
            column: 1,
            top_row: 0,
            size: 3,
            velocity: 0,
        };
        assert!(corridor(3, 3, vec![big]).validate().is_err());
        let misplaced = LevelSpec {
            agent_start: 1,
            ..corridor(3, 3, vec![])
        };
        assert!(misplaced.validate().is_err());
    }
}
