//! Imitation-learning trainers.
//!
//! NAP training pushes every sample through cost net → margin → solver and
//! back with the blackbox gradient, while a separate position net learns start
//! and goal vertices with cross-entropy. The behaviour-cloning baseline is a
//! plain action classifier on the same trunk.
//!
//! Both trainers share the epoch schedule and stop early once the training set
//! is fitted exactly.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::bbdiff::{apply_margin, backward, forward, hamming_grad, hamming_loss};
use crate::error::{Error, Result};
use crate::expert::{dataset_samples, Dataset, GoalMode, Normalization, TrainingSample};
use crate::neural::{
    action_net_forward, adam_step, argmax, backprop, cost_net_forward, init_params,
    position_net_forward, softmax_cross_entropy, AdamState, Gradients, Head, ModelParams,
    NetworkDescription, Upstream,
};
use crate::tdsp::{solve_tdsp, Action, GridGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub learning_rate: f64,
    /// Cost margin α.
    pub margin: f64,
    /// Interpolation strength λ of the blackbox gradient.
    pub lambda: f64,
    /// Planning horizon T.
    pub horizon: usize,
    pub batch_size: usize,
    pub goal_mode: GoalMode,
    /// Upper bound on epochs on top of [`epoch_schedule`].
    pub epoch_cap: Option<usize>,
    pub seed: u64,
    pub trunk_channels: Vec<usize>,
    pub kernel_size: usize,
}

impl Hyperparams {
    /// Crash-world defaults: lr 1e-3, α 0.2, λ 20, batch 32.
    pub fn crash(horizon: usize) -> Self {
        Self {
            learning_rate: 1e-3,
            margin: 0.2,
            lambda: 20.0,
            horizon,
            batch_size: 32,
            goal_mode: GoalMode::Global,
            epoch_cap: None,
            seed: 0,
            trunk_channels: vec![32, 32],
            kernel_size: 3,
        }
    }

    /// Chaser-style preset: λ 40, batch 16, local goals.
    pub fn chaser(horizon: usize) -> Self {
        Self {
            lambda: 40.0,
            batch_size: 16,
            goal_mode: GoalMode::Local,
            ..Self::crash(horizon)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad("margin must be nonnegative");
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be positive");
        }
        if self.horizon == 0 || self.batch_size == 0 {
            return bad("horizon and batch size must be positive");
        }
        if self.epoch_cap == Some(0) {
            return bad("epoch cap must be positive");
        }
        Ok(())
    }

    fn description(&self, head: Head, height: usize, width: usize) -> NetworkDescription {
        NetworkDescription {
            trunk_channels: self.trunk_channels.clone(),
            kernel_size: self.kernel_size,
            ..NetworkDescription::new(head, height, width)
        }
    }
}

/// `min(150000 / levels, 15000)` epochs.
pub fn epoch_schedule(num_levels: usize) -> Result<usize> {
    if num_levels == 0 {
        return Err(Error::InvalidArgument(
            "epoch schedule needs at least one level".into(),
        ));
    }
    Ok((150_000 / num_levels).min(15_000))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochCap,
    ZeroTrainingError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub j_cost: f64,
    pub j_pos: f64,
    pub total: f64,
    /// Fraction of training samples predicted without error after the epoch.
    pub train_success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    /// Solver calls made by gradient steps (error checks excluded).
    pub solver_calls: u64,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn final_success(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.train_success)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,j_cost,j_pos,total,train_success\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.j_cost, e.j_pos, e.total, e.train_success
            ));
        }
        out
    }
}

/// Cost and position networks of a trained neuro-algorithmic policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NapModel {
    pub cost: ModelParams,
    pub position: ModelParams,
    pub goal_mode: GoalMode,
}

impl NapModel {
    pub fn init(
        height: usize,
        width: usize,
        normalization: &Normalization,
        hp: &Hyperparams,
    ) -> Result<Self> {
        let cost_desc = hp.description(
            Head::Cost {
                horizon: hp.horizon,
            },
            height,
            width,
        );
        let pos_desc = hp.description(Head::Position, height, width);
        Ok(Self {
            cost: init_params(&cost_desc, normalization.clone(), hp.seed)?,
            position: init_params(&pos_desc, normalization.clone(), hp.seed.wrapping_add(1))?,
            goal_mode: hp.goal_mode,
        })
    }

    pub fn horizon(&self) -> usize {
        match self.cost.description.head {
            Head::Cost { horizon } => horizon,
            _ => unreachable!("cost network always carries a cost head"),
        }
    }
}

/// Per-sample losses and gradients of the NAP objective.
#[derive(Debug, Clone, PartialEq)]
pub struct NapGradients {
    pub cost: Gradients,
    pub position: Gradients,
    pub j_cost: f64,
    pub j_pos: f64,
    pub solver_calls: u64,
}

/// Loss and gradients for one sample. The solver runs between the expert's
/// own start and end vertices on margin-shifted predicted costs.
pub fn nap_sample_gradients(
    model: &NapModel,
    sample: &TrainingSample,
    graph: &GridGraph,
    hp: &Hyperparams,
) -> Result<NapGradients> {
    let (costs, cost_tape) = cost_net_forward(&model.cost, &sample.observation)?;
    let shifted = apply_margin(&costs, &sample.expert_path, hp.margin)?;
    let (path, ctx) = forward(graph, &shifted, sample.start, sample.path_goal())?;
    let j_cost = hamming_loss(&path, &sample.expert_path)?;
    let cost_grad = backward(graph, &ctx, &hamming_grad(&sample.expert_path), hp.lambda)?;
    let cost = backprop(&model.cost, &cost_tape, Upstream::Cost(&cost_grad))?;

    let (start_logits, goal_logits, pos_tape) =
        position_net_forward(&model.position, &sample.observation)?;
    let (start_loss, start_grad) = softmax_cross_entropy(&start_logits, &[sample.start])?;
    let (goal_loss, goal_grad) = softmax_cross_entropy(&goal_logits, &sample.goals)?;
    let position = backprop(
        &model.position,
        &pos_tape,
        Upstream::Position {
            start: &start_grad,
            goal: &goal_grad,
        },
    )?;
    Ok(NapGradients {
        cost,
        position,
        j_cost,
        j_pos: start_loss + goal_loss,
        solver_calls: 2,
    })
}

/// Batch mean of [`nap_sample_gradients`], reduced in sample order.
pub fn nap_batch_gradients(
    model: &NapModel,
    samples: &[&TrainingSample],
    graph: &GridGraph,
    hp: &Hyperparams,
) -> Result<NapGradients> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let per_sample = samples
        .par_iter()
        .map(|s| nap_sample_gradients(model, s, graph, hp))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / samples.len() as f64;
    let mut total = NapGradients {
        cost: Gradients::zeros_like(&model.cost),
        position: Gradients::zeros_like(&model.position),
        j_cost: 0.0,
        j_pos: 0.0,
        solver_calls: 0,
    };
    for g in &per_sample {
        total.cost.accumulate(&g.cost, scale);
        total.position.accumulate(&g.position, scale);
        total.j_cost += g.j_cost * scale;
        total.j_pos += g.j_pos * scale;
        total.solver_calls += g.solver_calls;
    }
    Ok(total)
}

/// Whether the model reproduces the sample exactly: the unshifted costs
/// yield the expert path and both position heads pick a correct vertex.
pub fn nap_sample_correct(
    model: &NapModel,
    sample: &TrainingSample,
    graph: &GridGraph,
) -> Result<bool> {
    let (costs, _) = cost_net_forward(&model.cost, &sample.observation)?;
    let path = solve_tdsp(graph, &costs, sample.start, sample.path_goal())?;
    if path != sample.expert_path {
        return Ok(false);
    }
    let (start_logits, goal_logits, _) =
        position_net_forward(&model.position, &sample.observation)?;
    Ok(argmax(&start_logits) == sample.start && sample.goals.contains(&argmax(&goal_logits)))
}

fn check_finite(what: &str, value: f64, grads: &[&Gradients]) -> Result<()> {
    if !value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::TrainingDiverged(format!("{what} became non-finite")));
    }
    Ok(())
}

fn training_samples(
    dataset: &Dataset,
    hp: &Hyperparams,
) -> Result<(Vec<TrainingSample>, GridGraph)> {
    hp.validate()?;
    if dataset.trajectories.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    let samples = dataset_samples(dataset, hp.horizon, hp.goal_mode)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "training dataset has no steps".into(),
        ));
    }
    let graph = dataset.trajectories[0].level.graph();
    Ok((samples, graph))
}

fn max_epochs(dataset: &Dataset, hp: &Hyperparams) -> Result<usize> {
    let scheduled = epoch_schedule(dataset.num_levels())?;
    Ok(hp.epoch_cap.map_or(scheduled, |cap| cap.min(scheduled)))
}

fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size)
}

pub fn train_nap(dataset: &Dataset, hp: &Hyperparams) -> Result<(NapModel, TrainReport)> {
    let clock = Instant::now();
    let (samples, graph) = training_samples(dataset, hp)?;
    let level = &dataset.trajectories[0].level;
    let mut model = NapModel::init(level.height, level.width, &dataset.header.normalization, hp)?;
    let mut cost_opt = AdamState::new(&model.cost);
    let mut pos_opt = AdamState::new(&model.position);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epochs = Vec::new();
    let mut solver_calls = 0;
    let mut stop_reason = StopReason::EpochCap;

    for epoch in 1..=max_epochs(dataset, hp)? {
        order.shuffle(&mut rng);
        let (mut j_cost, mut j_pos) = (0.0, 0.0);
        for batch in batches(&order, hp.batch_size) {
            let refs: Vec<&TrainingSample> = batch.iter().map(|&i| &samples[i]).collect();
            let g = nap_batch_gradients(&model, &refs, &graph, hp)?;
            check_finite("NAP loss", g.j_cost + g.j_pos, &[&g.cost, &g.position])?;
            adam_step(&mut cost_opt, &mut model.cost, &g.cost, hp.learning_rate)?;
            adam_step(
                &mut pos_opt,
                &mut model.position,
                &g.position,
                hp.learning_rate,
            )?;
            let weight = batch.len() as f64 / samples.len() as f64;
            j_cost += g.j_cost * weight;
            j_pos += g.j_pos * weight;
            solver_calls += g.solver_calls;
        }
        let correct = samples
            .par_iter()
            .map(|s| nap_sample_correct(&model, s, &graph))
            .collect::<Result<Vec<bool>>>()?;
        let train_success = correct.iter().filter(|&&c| c).count() as f64 / samples.len() as f64;
        epochs.push(EpochRecord {
            epoch,
            j_cost,
            j_pos,
            total: j_cost + j_pos,
            train_success,
        });
        if train_success == 1.0 {
            stop_reason = StopReason::ZeroTrainingError;
            break;
        }
    }
    Ok((
        model,
        TrainReport {
            epochs,
            stop_reason,
            solver_calls,
            wall_clock_secs: clock.elapsed().as_secs_f64(),
        },
    ))
}

fn bc_sample_gradients(params: &ModelParams, sample: &TrainingSample) -> Result<(Gradients, f64)> {
    let (logits, tape) = action_net_forward(params, &sample.observation)?;
    let (loss, grad) = softmax_cross_entropy(&logits, &[sample.action.index()])?;
    Ok((backprop(params, &tape, Upstream::Action(&grad))?, loss))
}

pub fn bc_sample_correct(params: &ModelParams, sample: &TrainingSample) -> Result<bool> {
    let (logits, _) = action_net_forward(params, &sample.observation)?;
    Ok(argmax(&logits) == sample.action.index())
}

/// Behaviour cloning: cross-entropy on the expert action at every step.
pub fn train_bc(dataset: &Dataset, hp: &Hyperparams) -> Result<(ModelParams, TrainReport)> {
    let clock = Instant::now();
    let (samples, _) = training_samples(dataset, hp)?;
    let level = &dataset.trajectories[0].level;
    let desc = hp.description(
        Head::Action {
            num_actions: Action::ALL.len(),
        },
        level.height,
        level.width,
    );
    let mut params = init_params(&desc, dataset.header.normalization.clone(), hp.seed)?;
    let mut opt = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::EpochCap;

    for epoch in 1..=max_epochs(dataset, hp)? {
        order.shuffle(&mut rng);
        let mut j_pos = 0.0;
        for batch in batches(&order, hp.batch_size) {
            let per_sample = batch
                .par_iter()
                .map(|&i| bc_sample_gradients(&params, &samples[i]))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads = Gradients::zeros_like(&params);
            let mut loss = 0.0;
            for (g, l) in &per_sample {
                grads.accumulate(g, scale);
                loss += l * scale;
            }
            check_finite("BC loss", loss, &[&grads])?;
            adam_step(&mut opt, &mut params, &grads, hp.learning_rate)?;
            j_pos += loss * batch.len() as f64 / samples.len() as f64;
        }
        let correct = samples
            .par_iter()
            .map(|s| bc_sample_correct(&params, s))
            .collect::<Result<Vec<bool>>>()?;
        let train_success = correct.iter().filter(|&&c| c).count() as f64 / samples.len() as f64;
        epochs.push(EpochRecord {
            epoch,
            j_cost: 0.0,
            j_pos,
            total: j_pos,
            train_success,
        });
        if train_success == 1.0 {
            stop_reason = StopReason::ZeroTrainingError;
            break;
        }
    }
    Ok((
        params,
        TrainReport {
            epochs,
            stop_reason,
            solver_calls: 0,
            wall_clock_secs: clock.elapsed().as_secs_f64(),
        },
    ))
}
