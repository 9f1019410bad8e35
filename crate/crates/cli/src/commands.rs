use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nap_core::expert::{
    build_dataset, build_split, deserialize_dataset, expert_trajectory, ground_truth_costs,
    serialize_dataset, Dataset, Normalization, SeedRange, Split,
};
use nap_core::gridworld::{generate_level, observe, reset, step, GenerationConfig, LevelSpec};
use nap_core::neural::cost_net_forward;
use nap_core::policy::{
    check_disjoint, evaluate, horizon_rows_to_csv, mean_row, nap_act, run_level_cell,
    sweep_horizon, sweep_rows_to_csv, BcPolicy, EvalReport, HorizonRow, LevelSweepSpec, Method,
    NapPolicy, OraclePolicy, SweepRow,
};
use nap_core::tdsp::{solve_tdsp, CostTensor};
use nap_core::training::{train_bc, train_nap, Hyperparams, StopReason, TrainReport};

use crate::artifacts::{
    load_checkpoint, read_json, read_text, to_json, write_json, write_text, Checkpoint,
    CheckpointModel, Envelope,
};
use crate::config::{content_hash, MethodChoice, ResolvedConfig, SweepKind};
use crate::error::{CliError, CliResult};

/// Resolved settings plus the run directory.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ResolvedConfig,
    pub out: PathBuf,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_config(&self) -> CliResult<()> {
        write_json(
            &self.path("config.json"),
            &Envelope::new(&self.config, Empty {}),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Empty {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub train_file: String,
    pub test_file: String,
    pub train_levels: usize,
    pub test_levels: usize,
    pub train_steps: usize,
    pub test_steps: usize,
    pub normalization: Normalization,
}

pub fn gen_data(ctx: &Context) -> CliResult<()> {
    let c = &ctx.config;
    let (train, test) = build_dataset(&c.env, c.data.train_seeds, c.data.test_seeds)?;
    write_text(&ctx.path("train.jsonl"), &serialize_dataset(&train))?;
    write_text(&ctx.path("test.jsonl"), &serialize_dataset(&test))?;
    let steps = |d: &Dataset| d.trajectories.iter().map(|t| t.len()).sum();
    let manifest = Manifest {
        train_file: "train.jsonl".into(),
        test_file: "test.jsonl".into(),
        train_levels: train.num_levels(),
        test_levels: test.num_levels(),
        train_steps: steps(&train),
        test_steps: steps(&test),
        normalization: train.header.normalization.clone(),
    };
    ctx.write_config()?;
    write_json(&ctx.path("manifest.json"), &Envelope::new(c, manifest))
}

fn load_dataset(path: &Path, env: &GenerationConfig) -> CliResult<Dataset> {
    let data = deserialize_dataset(&read_text(path)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if &data.header.config != env {
        return Err(CliError::Config(format!(
            "{}: dataset was generated with a different env config",
            path.display()
        )));
    }
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub method: Method,
    pub train_seeds: SeedRange,
    pub stop_reason: StopReason,
    pub epochs_run: usize,
    pub final_train_success: f64,
    pub solver_calls: u64,
    pub report: TrainReport,
}

fn write_training(
    ctx: &Context,
    method: Method,
    seeds: SeedRange,
    model: CheckpointModel,
    report: TrainReport,
) -> CliResult<()> {
    let name = method.name();
    let ckpt = Checkpoint {
        train_seeds: seeds,
        model,
    };
    write_json(
        &ctx.path(&format!("{name}_checkpoint.json")),
        &Envelope::new(&ctx.config, ckpt),
    )?;
    write_text(
        &ctx.path(&format!("{name}_train_report.csv")),
        &report.to_csv(),
    )?;
    let summary = TrainSummary {
        method,
        train_seeds: seeds,
        stop_reason: report.stop_reason,
        epochs_run: report.epochs.len(),
        final_train_success: report.final_success(),
        solver_calls: report.solver_calls,
        report,
    };
    write_json(
        &ctx.path(&format!("{name}_train_report.json")),
        &Envelope::new(&ctx.config, summary),
    )
}

/// Trains the configured method(s) on the given dataset file, or on freshly
/// generated training levels.
pub fn train(ctx: &Context, data: Option<&Path>) -> CliResult<()> {
    let c = &ctx.config;
    let dataset = match data {
        Some(path) => load_dataset(path, &c.env)?,
        None => build_split(&c.env, c.data.train_seeds, Split::Train)?,
    };
    let seeds = dataset.header.seeds;
    let hp = &c.train.hyperparams;
    ctx.write_config()?;
    if matches!(c.train.method, MethodChoice::Nap | MethodChoice::Both) {
        let (model, report) = train_nap(&dataset, hp)?;
        write_training(ctx, Method::Nap, seeds, CheckpointModel::Nap(model), report)?;
    }
    if matches!(c.train.method, MethodChoice::Bc | MethodChoice::Both) {
        let (params, report) = train_bc(&dataset, hp)?;
        write_training(ctx, Method::Bc, seeds, CheckpointModel::Bc(params), report)?;
    }
    Ok(())
}

fn check_grid(ckpt_env: &GenerationConfig, env: &GenerationConfig) -> CliResult<()> {
    if (ckpt_env.height, ckpt_env.width) != (env.height, env.width) {
        return Err(CliError::Config(format!(
            "checkpoint grid {}x{} does not match env grid {}x{}",
            ckpt_env.height, ckpt_env.width, env.height, env.width
        )));
    }
    Ok(())
}

/// Evaluates a checkpoint, or the planning oracle, on the configured seeds.
pub fn eval(ctx: &Context, checkpoint: Option<&Path>, oracle: bool) -> CliResult<EvalReport> {
    let c = &ctx.config;
    let seeds = c.eval.seeds;
    let report = match (checkpoint, oracle) {
        (_, true) => evaluate(&OraclePolicy, seeds, &c.env, None, None)?,
        (Some(path), false) => {
            let ckpt = load_checkpoint(path)?;
            check_disjoint(ckpt.body.train_seeds, seeds)
                .map_err(|e| CliError::Config(e.to_string()))?;
            check_grid(&ckpt.config.env, &c.env)?;
            match &ckpt.body.model {
                CheckpointModel::Nap(model) => {
                    let policy = NapPolicy {
                        model,
                        nap_star: c.eval.nap_star,
                        extend_horizon: c.eval.extend_horizon,
                    };
                    evaluate(
                        &policy,
                        seeds,
                        &c.env,
                        Some(model.horizon()),
                        Some(model.goal_mode),
                    )?
                }
                CheckpointModel::Bc(params) => {
                    evaluate(&BcPolicy { params }, seeds, &c.env, None, None)?
                }
            }
        }
        (None, false) => {
            return Err(CliError::Config(
                "eval needs --checkpoint or --oracle".into(),
            ))
        }
    };
    ctx.write_config()?;
    write_text(&ctx.path("eval.csv"), &report.to_csv())?;
    write_json(&ctx.path("eval.json"), &Envelope::new(c, report.clone()))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LevelCellKey {
    env: GenerationConfig,
    hyperparams: Hyperparams,
    train_seeds: SeedRange,
    eval_seeds: SeedRange,
    method: Method,
    restart: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HorizonCellKey {
    env: GenerationConfig,
    hyperparams: Hyperparams,
    train_seeds: SeedRange,
    eval_seeds: SeedRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellRecord<K> {
    key: K,
    success_rate: Option<f64>,
    error: Option<String>,
    exit_code: Option<i32>,
}

/// Runs a cell unless a successful record for the same key exists.
fn cached_cell<K, F>(ctx: &Context, key: K, compute: F) -> CliResult<CellRecord<K>>
where
    K: Serialize + for<'de> Deserialize<'de> + Clone,
    F: FnOnce() -> CliResult<f64>,
{
    let path = ctx.path(&format!("cells/{}.json", content_hash(&key)));
    if path.exists() {
        let record: CellRecord<K> = read_json(&path)?;
        if record.success_rate.is_some() {
            return Ok(record);
        }
    }
    let record = match compute() {
        Ok(rate) => CellRecord {
            key,
            success_rate: Some(rate),
            error: None,
            exit_code: None,
        },
        Err(e) => CellRecord {
            key,
            success_rate: None,
            error: Some(e.to_string()),
            exit_code: Some(e.exit_code()),
        },
    };
    write_json(&path, &record)?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTable {
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonTable {
    pub rows: Vec<HorizonRow>,
    pub failed_horizons: Vec<usize>,
}

/// Level-count or horizon sweep. Each cell is stored under the hash of its
/// inputs, so an interrupted sweep resumes where it stopped.
pub fn sweep(ctx: &Context) -> CliResult<()> {
    let c = &ctx.config;
    ctx.write_config()?;
    let mut failures = Vec::new();
    match c.sweep.kind {
        SweepKind::Levels => {
            let spec = LevelSweepSpec {
                config: c.env.clone(),
                level_counts: c.sweep.level_counts.clone(),
                train_start: c.data.train_seeds.start,
                eval_seeds: c.eval.seeds,
                hyperparams: c.train.hyperparams.clone(),
                restarts: c.sweep.restarts,
            };
            spec.validate()
                .map_err(|e| CliError::Config(e.to_string()))?;
            let mut rows = Vec::new();
            for &levels in &spec.level_counts {
                for method in [Method::Nap, Method::Bc] {
                    let mut cell = Vec::new();
                    for restart in 0..spec.restarts {
                        let key = LevelCellKey {
                            env: spec.config.clone(),
                            hyperparams: spec.hyperparams.clone(),
                            train_seeds: spec.train_seeds(levels),
                            eval_seeds: spec.eval_seeds,
                            method,
                            restart,
                        };
                        let record = cached_cell(ctx, key, || {
                            run_level_cell(&spec, method, levels, restart).map_err(CliError::from)
                        })?;
                        failures.extend(record.exit_code);
                        cell.push(SweepRow {
                            method,
                            levels,
                            restart: Some(restart),
                            success_rate: record.success_rate,
                            error: record.error,
                        });
                    }
                    let mean = mean_row(method, levels, &cell);
                    rows.extend(cell);
                    rows.push(mean);
                }
            }
            write_text(&ctx.path("sweep_levels.csv"), &sweep_rows_to_csv(&rows))?;
            write_json(
                &ctx.path("sweep_levels.json"),
                &Envelope::new(c, LevelTable { rows }),
            )?;
        }
        SweepKind::Horizon => {
            check_disjoint(c.data.train_seeds, c.eval.seeds)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let mut rows = Vec::new();
            let mut failed_horizons = Vec::new();
            let mut dataset = None;
            for &horizon in &c.sweep.horizons {
                let hp = Hyperparams {
                    horizon,
                    ..c.train.hyperparams.clone()
                };
                let key = HorizonCellKey {
                    env: c.env.clone(),
                    hyperparams: hp.clone(),
                    train_seeds: c.data.train_seeds,
                    eval_seeds: c.eval.seeds,
                };
                let record = cached_cell(ctx, key, || {
                    if dataset.is_none() {
                        dataset = Some(build_split(&c.env, c.data.train_seeds, Split::Train)?);
                    }
                    let (model, _) = train_nap(dataset.as_ref().expect("built above"), &hp)?;
                    let row = sweep_horizon(&[model], c.eval.seeds, &c.env)?;
                    Ok(row[0].success_rate)
                })?;
                match record.success_rate {
                    Some(success_rate) => rows.push(HorizonRow {
                        horizon,
                        success_rate,
                    }),
                    None => {
                        failures.extend(record.exit_code);
                        failed_horizons.push(horizon);
                    }
                }
            }
            write_text(&ctx.path("sweep_horizon.csv"), &horizon_rows_to_csv(&rows))?;
            write_json(
                &ctx.path("sweep_horizon.json"),
                &Envelope::new(
                    c,
                    HorizonTable {
                        rows,
                        failed_horizons,
                    },
                ),
            )?;
        }
    }
    match failures.first() {
        None => Ok(()),
        Some(&code) => Err(CliError::SweepCells {
            failed: failures.len(),
            first_code: code,
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectSummary {
    pub level: LevelSpec,
    pub t: usize,
    pub horizon: usize,
    pub start: usize,
    pub goal: usize,
    pub plan_vertices: Vec<usize>,
    pub extended: bool,
}

/// `step,row,c0,..` grid dump of a `T × |V|` tensor.
pub fn grid_csv(values: &CostTensor, width: usize) -> String {
    let height = values.num_vertices() / width;
    let mut out = String::from("step,row");
    for c in 0..width {
        out.push_str(&format!(",c{c}"));
    }
    out.push('\n');
    for k in 0..values.horizon() {
        for r in 0..height {
            out.push_str(&format!("{k},{r}"));
            for c in 0..width {
                out.push_str(&format!(",{}", values.get(k, r * width + c)));
            }
            out.push('\n');
        }
    }
    out
}

/// Predicted costs, plan and true costs at time `t` of a level's expert
/// rollout.
pub fn inspect(
    ctx: &Context,
    checkpoint: Option<&Path>,
    oracle: bool,
    level_seed: u64,
    t: usize,
) -> CliResult<InspectSummary> {
    let c = &ctx.config;
    let level = generate_level(level_seed, &c.env)?;
    let graph = level.graph();
    let traj = expert_trajectory(&level)?;
    let t = t.min(traj.len().saturating_sub(1));
    let mut state = reset(Arc::new(level.clone()));
    for &a in &traj.actions()[..t] {
        state = step(&state, a)?;
    }

    let (predicted, start, goal, plan, extended) = if oracle {
        let horizon = c.train.hyperparams.horizon;
        let costs = ground_truth_costs(&level, t, horizon)?;
        let needed = graph.hop_distance(state.agent, level.jewel) + 1;
        let extended = needed > horizon;
        let solve_on = if extended {
            costs.extend_last_row(needed)
        } else {
            costs.clone()
        };
        let plan = solve_tdsp(&graph, &solve_on, state.agent, level.jewel)?;
        (costs, state.agent, level.jewel, plan, extended)
    } else {
        let path = checkpoint
            .ok_or_else(|| CliError::Config("inspect needs --checkpoint or --oracle".into()))?;
        let ckpt = load_checkpoint(path)?;
        check_grid(&ckpt.config.env, &c.env)?;
        let CheckpointModel::Nap(model) = &ckpt.body.model else {
            return Err(CliError::Checkpoint(format!(
                "{}: has no cost network",
                path.display()
            )));
        };
        let obs = observe(&state);
        let (costs, _) = cost_net_forward(&model.cost, &obs)?;
        let d = nap_act(model, &obs, &graph, None, true)?;
        let plan = d
            .plan
            .ok_or_else(|| CliError::Checkpoint("no plan for the predicted endpoints".into()))?;
        (costs, d.start, d.goal, plan, d.extended)
    };
    let truth = ground_truth_costs(&level, t, predicted.horizon())?;
    write_text(
        &ctx.path("costs_predicted.csv"),
        &grid_csv(&predicted, level.width),
    )?;
    write_text(&ctx.path("costs_truth.csv"), &grid_csv(&truth, level.width))?;
    write_text(
        &ctx.path("plan.csv"),
        &grid_csv(&plan.to_tensor(), level.width),
    )?;
    let summary = InspectSummary {
        level,
        t,
        horizon: predicted.horizon(),
        start,
        goal,
        plan_vertices: plan.vertex_sequence()?,
        extended,
    };
    ctx.write_config()?;
    write_text(
        &ctx.path("inspect.json"),
        &to_json(&Envelope::new(c, summary.clone())),
    )?;
    Ok(summary)
}
