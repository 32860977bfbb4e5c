//! Command-line pipeline. Each subcommand reads the experiment config, runs
//! one stage and writes its artifacts plus `config.resolved.toml` into the
//! output directory.
//!
//! JSON artifacts carry `{"version", "config", "data"}`; CSV artifacts hold
//! only their columns and rely on the resolved-config file next to them.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::index::sample;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bounds::{divergence_proxy, estimate_errors, random_toy, verify_bound_toy, BoundReport, ToyReport};
use crate::config::{ExperimentConfig, VERSION};
use crate::corrective::{synthesize_gain, FeedbackGain};
use crate::datagen::{
    build_dataset, collect_rollouts, fit_mnd, safe_fraction, sample_mnd, sample_ud, DatasetRow, MndModel,
    Provenance,
};
use crate::dynamics::SystemState;
use crate::embedding::{loo_knn_accuracy, run_tsne};
use crate::error::{Error, Result};
use crate::region::{region_grid, SafeRegionModel};
use crate::rng::{task_rng, DOMAIN_EVAL};
use crate::safety::{SafetyOracle, StateRanges};
use crate::srl::{
    train, Controller, EpisodeRecord, EpisodeTrace, LearningMetrics, PolicySnapshot, RecoveryResult, TerminationCause,
    TrainSetup, UpdateRow,
};

pub const LOO_NEIGHBORS: usize = 5;
pub const HISTOGRAM_BINS: usize = 40;
pub const STATE_COLUMNS: [&str; 6] = ["theta1", "theta2", "theta3", "dtheta1", "dtheta2", "dtheta3"];

#[derive(Debug, Parser)]
#[command(name = "srlab", version = VERSION, about = "Safe-region learning lab for a three-link inverted pendulum")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML experiment config; defaults apply to anything it leaves out.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set dataset.alpha=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Shorthand for `--set dataset.alpha=..`.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Shorthand for `--set pendulum.delta=..`.
    #[arg(long)]
    pub delta: Option<f64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.set.clone();
        if let Some(a) = self.alpha {
            overrides.push(format!("dataset.alpha={a:?}"));
        }
        if let Some(d) = self.delta {
            overrides.push(format!("pendulum.delta={d:?}"));
        }
        if let Some(out) = &self.out {
            overrides.push(format!("output_dir={}", toml::Value::String(out.display().to_string())));
        }
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Random-policy rollouts, normal fit, labeled training set.
    GenData(ConfigArgs),
    /// t-SNE embedding, safety assessment and region grid.
    BuildRegion {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Policy learning for every configured seed, supervised by a region model
    /// or free when no model is given.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Predicted-safe fraction of a region model over uniform states.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        /// Also label the states on the real plant and report the confusion.
        #[arg(long)]
        label: bool,
    },
    /// Error-bound terms for a region model and logged training states.
    Bounds {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, required_unless_present = "toy")]
        model: Option<PathBuf>,
        /// Visited-state CSVs written by `train`.
        #[arg(long, num_args = 1.., required_unless_present = "toy")]
        visited: Vec<PathBuf>,
        /// Run the finite-instance verification instead.
        #[arg(long)]
        toy: bool,
    },
    /// Exact check of the bound on seeded finite instances.
    VerifyToy {
        #[arg(long, default_value_t = 100)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// gen-data, build-region, train and bounds over a grid of alpha and delta.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 1.0])]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [1.1, 1.5, 4.0])]
        deltas: Vec<f64>,
        /// Also train without supervision for every delta.
        #[arg(long)]
        baseline: bool,
    },
}

#[derive(Serialize)]
struct Envelope<'a, T> {
    version: &'a str,
    config: &'a ExperimentConfig,
    data: &'a T,
}

#[derive(Deserialize)]
struct Loaded<T> {
    data: T,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, config: &ExperimentConfig, data: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&Envelope {
        version: VERSION,
        config,
        data,
    })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str::<Loaded<T>>(&text)?.data)
}

fn write_resolved_config(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    let text = format!("# srlab {VERSION}\n{}", config.to_toml()?);
    write_file(&dir.join("config.resolved.toml"), text.as_bytes())
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn state_cells(s: &SystemState) -> Vec<String> {
    s.0.iter().map(|v| num(*v)).collect()
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("line {line}: `{field}` is not a number")))
}

fn parse_state(record: &csv::StringRecord, line: usize) -> Result<SystemState> {
    if record.len() < 6 {
        return Err(Error::Format(format!("line {line}: expected 6 state columns")));
    }
    let mut s = [0.0; 6];
    for (d, v) in s.iter_mut().enumerate() {
        *v = parse_f64(&record[d], line)?;
    }
    Ok(SystemState(s))
}

fn check_header(path: &Path, headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Format(format!(
            "{}: expected columns {}",
            path.display(),
            expected.join(",")
        )));
    }
    Ok(())
}

pub const DATASET_COLUMNS: [&str; 8] =
    ["theta1", "theta2", "theta3", "dtheta1", "dtheta2", "dtheta3", "label", "provenance"];

pub fn write_dataset(path: &Path, rows: &[DatasetRow]) -> Result<()> {
    write_csv(
        path,
        &DATASET_COLUMNS,
        rows.iter().map(|r| {
            let mut cells = state_cells(&r.state);
            cells.push(r.label.to_string());
            cells.push(r.provenance.as_str().to_string());
            cells
        }),
    )
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::io::BufReader<std::fs::File>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(std::io::BufReader::new(file)))
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRow>> {
    let mut reader = open_csv(path)?;
    check_header(path, reader.headers()?, &DATASET_COLUMNS)?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let state = parse_state(&record, line)?;
        let label = match &record[6] {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::Format(format!("line {line}: label `{other}` is not 0 or 1"))),
        };
        let provenance = match &record[7] {
            "ud" => Provenance::Ud,
            "mnd" => Provenance::Mnd,
            other => return Err(Error::Format(format!("line {line}: unknown provenance `{other}`"))),
        };
        rows.push(DatasetRow {
            state,
            label,
            provenance,
        });
    }
    Ok(rows)
}

pub fn write_states(path: &Path, states: &[SystemState]) -> Result<()> {
    write_csv(path, &STATE_COLUMNS, states.iter().map(state_cells))
}

pub fn read_states(path: &Path) -> Result<Vec<SystemState>> {
    let mut reader = open_csv(path)?;
    check_header(path, reader.headers()?, &STATE_COLUMNS)?;
    reader
        .records()
        .enumerate()
        .map(|(i, r)| parse_state(&r?, i + 2))
        .collect()
}

/// `(theta1, dtheta1)` bin counts per provenance, bin centres in the first two columns.
pub fn histogram_rows(rows: &[DatasetRow], ranges: &StateRanges, bins: usize) -> Vec<(f64, f64, usize, usize)> {
    let (lo0, hi0) = (ranges.lower[0], ranges.upper[0]);
    let (lo3, hi3) = (ranges.lower[3], ranges.upper[3]);
    let bin = |v: f64, lo: f64, hi: f64| (((v - lo) / (hi - lo) * bins as f64).floor().max(0.0) as usize).min(bins - 1);
    let mut counts = vec![[0usize; 2]; bins * bins];
    for r in rows {
        let idx = bin(r.state.theta1(), lo0, hi0) * bins + bin(r.state.dtheta1(), lo3, hi3);
        counts[idx][usize::from(r.provenance == Provenance::Mnd)] += 1;
    }
    let centre = |i: usize, lo: f64, hi: f64| lo + (i as f64 + 0.5) * (hi - lo) / bins as f64;
    (0..bins * bins)
        .map(|idx| {
            let (i, j) = (idx / bins, idx % bins);
            (centre(i, lo0, hi0), centre(j, lo3, hi3), counts[idx][0], counts[idx][1])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MndFile {
    pub mnd: MndModel,
    pub rollout_states: usize,
    pub rows: usize,
    pub ud_rows: usize,
    pub mnd_rows: usize,
    pub safe_fraction: f64,
}

fn nominal_gain(config: &ExperimentConfig) -> Result<FeedbackGain> {
    synthesize_gain(&config.nominal(), &config.lqr)
}

pub fn cmd_gen_data(config: &ExperimentConfig) -> Result<MndFile> {
    let dir = &config.output_dir;
    create_dir(dir)?;
    let gain = nominal_gain(config)?;
    let ds = build_dataset(&config.dataset, &config.nominal(), &gain, &config.sim, &config.recovery)?;
    write_dataset(&dir.join("dataset.csv"), &ds.rows)?;
    let hist = histogram_rows(&ds.rows, &config.dataset.ranges, HISTOGRAM_BINS);
    write_csv(
        &dir.join("histogram.csv"),
        &["theta1", "dtheta1", "ud", "mnd"],
        hist.iter().map(|(a, b, u, m)| vec![num(*a), num(*b), u.to_string(), m.to_string()]),
    )?;
    let (ud_rows, mnd_rows) = config.dataset.split();
    let summary = MndFile {
        mnd: ds.mnd.clone(),
        rollout_states: ds.rollout_states,
        rows: ds.rows.len(),
        ud_rows,
        mnd_rows,
        safe_fraction: ds.safe_fraction(),
    };
    write_json(&dir.join("mnd.json"), config, &summary)?;
    write_resolved_config(dir, config)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub model: SafeRegionModel,
    pub loo_accuracy: f64,
    pub loo_neighbors: usize,
    pub dataset_safe_fraction: f64,
}

pub fn load_model(path: &Path) -> Result<SafeRegionModel> {
    let file: ModelFile = read_json(path)?;
    file.model.validate()?;
    Ok(file.model)
}

pub fn cmd_build_region(config: &ExperimentConfig, dataset: &Path) -> Result<ModelFile> {
    let rows = read_dataset(dataset)?;
    if rows.is_empty() {
        return Err(Error::EmptySamples("dataset"));
    }
    let safe = rows.iter().filter(|r| r.label == 1).count();
    if safe == 0 || safe == rows.len() {
        return Err(Error::SingleClass {
            label: u8::from(safe > 0),
        });
    }
    let dir = &config.output_dir;
    create_dir(dir)?;
    let states: Vec<SystemState> = rows.iter().map(|r| r.state).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let ranges = config.dataset.ranges;
    let emb = run_tsne(&states, &labels, &ranges, &config.tsne)?;
    let loo_accuracy = loo_knn_accuracy(&emb.points, &labels, LOO_NEIGHBORS);
    let model = SafeRegionModel::new(emb, config.region.bandwidth, config.region.p_t, ranges, nominal_gain(config)?)?;

    let dim = model.embedding.output_dim();
    let y_cols: Vec<String> = (1..=dim).map(|c| format!("y{c}")).collect();
    let mut header: Vec<&str> = y_cols.iter().map(String::as_str).collect();
    header.push("label");
    write_csv(
        &dir.join("scatter.csv"),
        &header,
        model.embedding.points.iter().zip(&labels).map(|(p, l)| {
            let mut cells: Vec<String> = p.iter().map(|v| num(*v)).collect();
            cells.push(l.to_string());
            cells
        }),
    )?;
    if dim <= 2 {
        let grid = region_grid(&model, config.region.grid_resolution)?;
        header.pop();
        header.push("gamma");
        write_csv(
            &dir.join("grid.csv"),
            &header,
            grid.values.iter().enumerate().map(|(i, g)| {
                let mut cells: Vec<String> = grid.point(i).iter().map(|v| num(*v)).collect();
                cells.push(num(*g));
                cells
            }),
        )?;
    }
    write_csv(
        &dir.join("kl_trace.csv"),
        &["iteration", "kl"],
        model.embedding.kl_trace.iter().enumerate().map(|(i, kl)| vec![i.to_string(), num(*kl)]),
    )?;
    let file = ModelFile {
        model,
        loo_accuracy,
        loo_neighbors: LOO_NEIGHBORS,
        dataset_safe_fraction: safe_fraction(&rows),
    };
    write_json(&dir.join("model.json"), config, &file)?;
    write_resolved_config(dir, config)?;
    Ok(file)
}

fn cause_str(c: TerminationCause) -> &'static str {
    match c {
        TerminationCause::Horizon => "horizon",
        TerminationCause::PredictedUnsafe => "predicted_unsafe",
        TerminationCause::ConstraintViolated => "constraint_violated",
    }
}

fn recovery_str(r: RecoveryResult) -> &'static str {
    match r {
        RecoveryResult::NotTriggered => "not_triggered",
        RecoveryResult::Success => "success",
        RecoveryResult::FailureViolation => "failure_violation",
        RecoveryResult::FailureNoConvergence => "failure_no_convergence",
    }
}

pub const METRICS_COLUMNS: [&str; 9] = [
    "update",
    "env_steps",
    "mean_reward",
    "episodes",
    "activations",
    "failures",
    "violations",
    "policy_loss",
    "value_loss",
];

fn update_cells(u: &UpdateRow) -> Vec<String> {
    vec![
        u.update.to_string(),
        u.env_steps.to_string(),
        num(u.mean_reward),
        u.episodes.to_string(),
        u.activations.to_string(),
        u.failures.to_string(),
        u.violations.to_string(),
        num(u.policy_loss),
        num(u.value_loss),
    ]
}

/// Column-wise arithmetic mean over seeds, row by row.
pub fn mean_metrics(runs: &[LearningMetrics]) -> Vec<[f64; 9]> {
    let n = runs.iter().map(|m| m.updates.len()).min().unwrap_or(0);
    (0..n)
        .map(|i| {
            let mut acc = [0.0; 9];
            for m in runs {
                let u = &m.updates[i];
                let row = [
                    u.update as f64,
                    u.env_steps as f64,
                    u.mean_reward,
                    u.episodes as f64,
                    u.activations as f64,
                    u.failures as f64,
                    u.violations as f64,
                    u.policy_loss,
                    u.value_loss,
                ];
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            acc.map(|v| v / runs.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub episodes: usize,
    pub activations: usize,
    pub failures: usize,
    pub failures_violation: usize,
    pub failures_no_convergence: usize,
    pub violations: usize,
    pub recovery_success_rate: Option<f64>,
    pub supervisor_invariant_holds: bool,
    pub visited_states: usize,
    /// Steps on which the learner chose the action.
    pub learner_steps: usize,
    /// The model predicts the reset state unsafe, so no learning happened.
    pub start_rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub supervised: bool,
    pub seeds: Vec<SeedSummary>,
    /// Pooled over seeds.
    pub recovery_success_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub seed: u64,
    pub observation: String,
    pub policy: PolicySnapshot,
}

pub fn cmd_train(config: &ExperimentConfig, model: Option<&SafeRegionModel>) -> Result<TrainSummary> {
    let dir = &config.output_dir;
    create_dir(dir)?;
    let gain = match model {
        Some(m) => m.gain.clone(),
        None => nominal_gain(config)?,
    };
    let setup = TrainSetup {
        policy: &config.policy,
        model,
        params_real: config.pendulum,
        sim: config.sim,
        gain,
        recovery: config.recovery,
        ranges: config.dataset.ranges,
    };
    let mut runs = Vec::new();
    let mut seeds = Vec::new();
    for &seed in &config.run.seeds {
        let out = train(&setup, config.run.total_steps, seed)?;
        write_csv(
            &dir.join(format!("metrics_seed{seed}.csv")),
            &METRICS_COLUMNS,
            out.metrics.updates.iter().map(update_cells),
        )?;
        write_csv(
            &dir.join(format!("episodes_seed{seed}.csv")),
            &["episode", "reward", "steps", "cause", "recovery"],
            out.episodes.iter().enumerate().map(|(i, e): (usize, &EpisodeRecord)| {
                vec![
                    i.to_string(),
                    num(e.reward),
                    e.steps.to_string(),
                    cause_str(e.cause).to_string(),
                    recovery_str(e.recovery).to_string(),
                ]
            }),
        )?;
        write_states(&dir.join(format!("visited_seed{seed}.csv")), &out.visited)?;
        write_csv(
            &dir.join(format!("decisions_seed{seed}.csv")),
            &["episode", "step", "prediction", "controller"],
            out.traces.iter().enumerate().flat_map(|(e, t)| {
                t.decisions.iter().enumerate().map(move |(i, d)| {
                    vec![
                        e.to_string(),
                        i.to_string(),
                        d.prediction.map_or_else(String::new, |p| p.to_string()),
                        match d.controller {
                            Controller::Policy => "policy",
                            Controller::Corrective => "corrective",
                        }
                        .to_string(),
                    ]
                })
            }),
        )?;
        write_json(
            &dir.join(format!("policy_seed{seed}.json")),
            config,
            &PolicyFile {
                seed,
                observation: "theta1,theta2,theta3,dtheta1,dtheta2,dtheta3,sin(pi t),cos(pi t)".into(),
                policy: out.policy.snapshot(),
            },
        )?;
        let m = &out.metrics;
        seeds.push(SeedSummary {
            seed,
            episodes: m.episodes,
            activations: m.activations,
            failures: m.failures,
            failures_violation: m.failures_violation,
            failures_no_convergence: m.failures_no_convergence,
            violations: m.violations,
            recovery_success_rate: m.recovery_success_rate(),
            supervisor_invariant_holds: out.traces.iter().all(EpisodeTrace::supervisor_invariant_holds),
            visited_states: out.visited.len(),
            learner_steps: m.updates.last().map_or(0, |u| u.env_steps),
            start_rejected: out.start_rejected,
        });
        runs.push(out.metrics);
    }
    write_csv(
        &dir.join("metrics_mean.csv"),
        &METRICS_COLUMNS,
        mean_metrics(&runs).iter().map(|row| row.iter().map(|v| num(*v)).collect()),
    )?;
    let activations: usize = seeds.iter().map(|s| s.activations).sum();
    let failures: usize = seeds.iter().map(|s| s.failures).sum();
    let summary = TrainSummary {
        supervised: model.is_some(),
        seeds,
        recovery_success_rate: (activations > 0).then(|| (activations - failures) as f64 / activations as f64),
    };
    write_json(&dir.join("train_summary.json"), config, &summary)?;
    write_resolved_config(dir, config)?;
    Ok(summary)
}

pub fn eval_states(config: &ExperimentConfig) -> Vec<SystemState> {
    sample_ud(
        config.run.eval_samples,
        &config.dataset.ranges,
        &mut task_rng(config.run.eval_seed, DOMAIN_EVAL, 0),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub eval_seed: u64,
    pub predicted_safe_fraction: f64,
    /// Against the real plant, when labeling was requested.
    pub real_safe_fraction: Option<f64>,
    pub fp_rate: Option<f64>,
    pub fn_rate: Option<f64>,
}

pub fn cmd_eval(config: &ExperimentConfig, model: &SafeRegionModel, label: bool) -> Result<EvalReport> {
    let dir = &config.output_dir;
    create_dir(dir)?;
    let states = eval_states(config);
    let predictions: Vec<u8> = states.iter().map(|s| model.predict(s)).collect();
    let n = states.len().max(1) as f64;
    let mut report = EvalReport {
        samples: states.len(),
        eval_seed: config.run.eval_seed,
        predicted_safe_fraction: predictions.iter().filter(|p| **p == 1).count() as f64 / n,
        real_safe_fraction: None,
        fp_rate: None,
        fn_rate: None,
    };
    if label {
        let oracle = SafetyOracle::new(config.pendulum, model.gain.clone(), config.sim, config.recovery, model.ranges)?;
        let (mut safe, mut fp, mut fneg) = (0, 0, 0);
        for (s, p) in states.iter().zip(&predictions) {
            let l = oracle.label(s);
            safe += usize::from(l);
            fp += usize::from(*p == 1 && l == 0);
            fneg += usize::from(*p == 0 && l == 1);
        }
        report.real_safe_fraction = Some(safe as f64 / n);
        report.fp_rate = Some(fp as f64 / n);
        report.fn_rate = Some(fneg as f64 / n);
    }
    write_json(&dir.join("eval.json"), config, &report)?;
    write_resolved_config(dir, config)?;
    Ok(report)
}

/// Draws from the training distribution: the uniform and normal parts in the
/// dataset's proportions.
pub fn training_distribution_samples(config: &ExperimentConfig, count: usize) -> Result<Vec<SystemState>> {
    let spec = &config.dataset;
    let rollouts = collect_rollouts(&config.nominal(), &config.sim, spec.rollout_episodes, spec.rollout_steps, spec.seed)?;
    let mnd = fit_mnd(&rollouts)?;
    let ud = ((spec.alpha * count as f64 + 0.5).floor() as usize).min(count);
    let mut out = sample_ud(ud, &spec.ranges, &mut task_rng(config.run.eval_seed, DOMAIN_EVAL, 2));
    out.extend(sample_mnd(
        &mnd,
        count - ud,
        &spec.ranges,
        &mut task_rng(config.run.eval_seed, DOMAIN_EVAL, 3),
    )?);
    Ok(out)
}

pub fn subsample(states: &[SystemState], count: usize, seed: u64) -> Vec<SystemState> {
    if states.len() <= count {
        return states.to_vec();
    }
    let mut idx = sample(&mut task_rng(seed, DOMAIN_EVAL, 1), states.len(), count).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| states[i]).collect()
}

pub fn cmd_bounds(config: &ExperimentConfig, model: &SafeRegionModel, visited: &[SystemState]) -> Result<BoundReport> {
    if visited.is_empty() {
        return Err(Error::EmptySamples("visited states"));
    }
    let dir = &config.output_dir;
    create_dir(dir)?;
    let n = config.run.bound_samples;
    let samples_d = subsample(visited, n, config.run.eval_seed);
    let samples_dn = training_distribution_samples(config, n)?;
    let oracle = |params| SafetyOracle::new(params, model.gain.clone(), config.sim, config.recovery, model.ranges);
    let real = oracle(config.pendulum)?;
    let nominal = oracle(config.nominal())?;
    let est = estimate_errors(
        |x: &SystemState| model.predict(x),
        &samples_d,
        &samples_dn,
        |x| real.label(x),
        |x| nominal.label(x),
    )?;
    let proxy = divergence_proxy(&samples_d, &samples_dn, &model.ranges, config.run.eval_seed)?;
    let report = BoundReport::new(&est, proxy, config.run.eval_seed);
    write_json(&dir.join("bounds.json"), config, &report)?;
    write_resolved_config(dir, config)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySweep {
    pub first_seed: u64,
    pub count: u64,
    pub all_hold: bool,
    pub reports: Vec<ToyReport>,
}

/// Verifies `count` seeded instances; fails if any inequality is violated.
pub fn cmd_verify_toy(first_seed: u64, count: u64, out: &Path) -> Result<ToySweep> {
    create_dir(out)?;
    let reports = (first_seed..first_seed + count)
        .map(|s| verify_bound_toy(&random_toy(s)))
        .collect::<Result<Vec<_>>>()?;
    let failed: Vec<u64> = reports
        .iter()
        .zip(first_seed..)
        .filter(|(r, _)| !(r.bound_holds && r.bound_e1_holds && r.bound_e2_holds))
        .map(|(_, s)| s)
        .collect();
    let sweep = ToySweep {
        first_seed,
        count,
        all_hold: failed.is_empty(),
        reports,
    };
    let mut text = serde_json::to_string_pretty(&serde_json::json!({ "version": VERSION, "data": &sweep }))?;
    text.push('\n');
    write_file(&out.join("toy_report.json"), text.as_bytes())?;
    if !failed.is_empty() {
        return Err(Error::Verification(format!("bound violated on toy seeds {failed:?}")));
    }
    Ok(sweep)
}

fn tag(v: f64) -> String {
    format!("{v}").replace('.', "p")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    /// `None` for the unsupervised baseline.
    pub alpha: Option<f64>,
    pub delta: f64,
    pub dir: PathBuf,
    pub recovery_success_rate: Option<f64>,
    pub violations: usize,
    pub learner_steps: usize,
    /// Seeds whose model rejected the reset state.
    pub start_rejected: usize,
    /// Bound report skipped when no seed ever let the learner act.
    pub bound_rhs_holds: Option<bool>,
}

pub fn cmd_sweep(base: &ExperimentConfig, alphas: &[f64], deltas: &[f64], baseline: bool) -> Result<Vec<SweepCell>> {
    let root = base.output_dir.clone();
    let mut cells = Vec::new();
    let cell = |alpha, delta, dir: &Path, s: &TrainSummary| SweepCell {
        alpha,
        delta,
        dir: dir.to_path_buf(),
        recovery_success_rate: s.recovery_success_rate,
        violations: s.seeds.iter().map(|x| x.violations).sum(),
        learner_steps: s.seeds.iter().map(|x| x.learner_steps).sum(),
        start_rejected: s.seeds.iter().filter(|x| x.start_rejected).count(),
        bound_rhs_holds: None,
    };
    for &alpha in alphas {
        let mut cfg = base.clone();
        cfg.dataset.alpha = alpha;
        cfg.output_dir = root.join(format!("alpha{}", tag(alpha)));
        cfg.validate()?;
        cmd_gen_data(&cfg)?;
        let built = cmd_build_region(&cfg, &cfg.output_dir.join("dataset.csv"))?;
        for &delta in deltas {
            let mut run = cfg.clone();
            run.pendulum.delta = delta;
            run.output_dir = cfg.output_dir.join(format!("delta{}", tag(delta)));
            run.validate()?;
            let summary = cmd_train(&run, Some(&built.model))?;
            let mut c = cell(Some(alpha), delta, &run.output_dir, &summary);
            if c.learner_steps > 0 {
                let mut visited = Vec::new();
                for seed in &run.run.seeds {
                    visited.extend(read_states(&run.output_dir.join(format!("visited_seed{seed}.csv")))?);
                }
                c.bound_rhs_holds = Some(cmd_bounds(&run, &built.model, &visited)?.rhs_holds);
            }
            cells.push(c);
        }
    }
    if baseline {
        for &delta in deltas {
            let mut run = base.clone();
            run.pendulum.delta = delta;
            run.output_dir = root.join(format!("free_delta{}", tag(delta)));
            run.validate()?;
            let summary = cmd_train(&run, None)?;
            cells.push(cell(None, delta, &run.output_dir, &summary));
        }
    }
    write_json(&root.join("sweep_summary.json"), base, &cells)?;
    Ok(cells)
}

fn print_summary<T: Serialize>(value: &T) -> Result<()> {
    let line = serde_json::to_string(value)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{line}").map_err(|e| Error::io("<stdout>", e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => {
            let s = cmd_gen_data(&args.resolve()?)?;
            print_summary(&serde_json::json!({
                "rows": s.rows, "ud_rows": s.ud_rows, "mnd_rows": s.mnd_rows, "safe_fraction": s.safe_fraction
            }))
        }
        Command::BuildRegion { cfg, dataset } => {
            let f = cmd_build_region(&cfg.resolve()?, &dataset)?;
            print_summary(&serde_json::json!({
                "loo_accuracy": f.loo_accuracy, "final_kl": f.model.embedding.final_kl,
                "gamma_bandwidth": f.model.gamma_bandwidth
            }))
        }
        Command::Train { cfg, model } => {
            let config = cfg.resolve()?;
            let model = model.as_deref().map(load_model).transpose()?;
            print_summary(&cmd_train(&config, model.as_ref())?)
        }
        Command::Eval { cfg, model, label } => {
            let config = cfg.resolve()?;
            print_summary(&cmd_eval(&config, &load_model(&model)?, label)?)
        }
        Command::Bounds { cfg, model, visited, toy } => {
            let config = cfg.resolve()?;
            if toy {
                let s = cmd_verify_toy(0, 100, &config.output_dir)?;
                return print_summary(&serde_json::json!({ "count": s.count, "all_hold": s.all_hold }));
            }
            let model = load_model(model.as_deref().ok_or(Error::InvalidParameter("--model is required".into()))?)?;
            let mut states = Vec::new();
            for path in &visited {
                states.extend(read_states(path)?);
            }
            let report = cmd_bounds(&config, &model, &states)?;
            print_summary(&serde_json::json!({ "inequality": report.inequality }))
        }
        Command::VerifyToy { count, seed, out } => {
            let s = cmd_verify_toy(seed, count, &out)?;
            print_summary(&serde_json::json!({ "count": s.count, "all_hold": s.all_hold }))
        }
        Command::Sweep {
            cfg,
            alphas,
            deltas,
            baseline,
        } => print_summary(&cmd_sweep(&cfg.resolve()?, &alphas, &deltas, baseline)?),
    }
}

/// One-line JSON error for stderr.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}
