//! Runs, sweeps and per-policy summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bound::{
    estimate_gradient_variance, estimate_smoothness, optimality_gap_bound, BoundParams,
    BoundTrajectory,
};
use crate::error::{Error, Result};
use crate::fedft::data::Dataset;
use crate::fedft::model::{device_gradient, SplitModel};
use crate::fedft::training::{RoundTrace, Trainer};
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::{write_bound, write_metrics, BoundRow, MetricsRow};
use crate::scheduler::Policy;

pub fn run_id(policy: Policy, seed: u64) -> String {
    format!("{policy}-s{seed}")
}

/// Bound curve of one run, over the rounds that scheduled at least one
/// device.
#[derive(Debug, Clone, PartialEq)]
pub struct RunBound {
    pub params: BoundParams,
    /// Initial loss minus the running-minimum loss of the run.
    pub initial_gap: f64,
    pub rounds: Vec<usize>,
    pub trajectory: BoundTrajectory,
}

impl RunBound {
    pub fn rows(&self) -> Vec<BoundRow> {
        let tr = &self.trajectory;
        self.rounds
            .iter()
            .enumerate()
            .map(|(i, &t)| BoundRow {
                t,
                n: tr.n[i],
                varsigma: tr.varsigma[i],
                weight_product: tr.weight_products[i],
                cumulative_bound: tr.cumulative[i],
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub run_id: String,
    pub policy: Policy,
    pub seed: u64,
    pub traces: Vec<RoundTrace>,
    /// `None` with fewer than two devices or when no round scheduled anyone.
    pub bound: Option<RunBound>,
}

impl RunResult {
    pub fn rows(&self) -> Vec<MetricsRow> {
        self.traces
            .iter()
            .map(|t| MetricsRow::from_trace(&self.run_id, self.seed, self.policy, t))
            .collect()
    }
}

/// Parameters and gradient of the global objective, both flattened as
/// adapter entries followed by every head.
fn global_probe(model: &SplitModel, shards: &[Dataset]) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = shards.len() as f64;
    let mut params = model.adapter.flatten();
    let mut adapter_grad = vec![0.0; params.len()];
    let mut head_grads = Vec::new();
    for (i, shard) in shards.iter().enumerate() {
        let g = device_gradient(model, i, shard)?;
        for (acc, v) in adapter_grad.iter_mut().zip(g.adapter.flatten()) {
            *acc += v / k;
        }
        head_grads.extend(g.head.flatten().into_iter().map(|v| v / k));
        params.extend(model.heads[i].flatten());
    }
    adapter_grad.extend(head_grads);
    Ok((params, adapter_grad))
}

/// Largest per-entry variance of minibatch gradients over all devices.
fn minibatch_variance(
    model: &SplitModel,
    shards: &[Dataset],
    batch_size: usize,
    draws: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for (k, shard) in shards.iter().enumerate() {
        let samples = (0..draws)
            .map(|_| {
                let idx = rand::seq::index::sample(rng, shard.len(), batch_size).into_vec();
                let g = device_gradient(model, k, &shard.select(&idx))?;
                let mut flat = g.adapter.flatten();
                flat.extend(g.head.flatten());
                Ok(flat)
            })
            .collect::<Result<Vec<_>>>()?;
        worst = worst.max(estimate_gradient_variance(&samples)?);
    }
    Ok(worst)
}

const PROBE_STREAM: u64 = 0xB0;

/// One training run plus its estimate-parameterized bound curve.
pub fn execute(cfg: &ExperimentConfig, policy: Policy, seed: u64) -> Result<RunResult> {
    let spec = cfg.run_spec(policy, seed);
    let mut trainer = Trainer::new(spec)?;
    let initial_loss = trainer.train_loss()?;

    let mut probe_params = Vec::new();
    let mut probe_grads = Vec::new();
    let (p, g) = global_probe(trainer.model(), trainer.shards())?;
    probe_params.push(p);
    probe_grads.push(g);

    let mut traces = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let trace = trainer.step()?;
        if trace.t % cfg.bound.probe_every == 0 || trace.t == cfg.rounds {
            let (p, g) = global_probe(trainer.model(), trainer.shards())?;
            probe_params.push(p);
            probe_grads.push(g);
        }
        traces.push(trace);
    }

    let bound = if cfg.channel.num_devices >= 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(PROBE_STREAM);
        let phi2 = minibatch_variance(
            trainer.model(),
            trainer.shards(),
            cfg.model.batch_size,
            cfg.bound.variance_batches,
            &mut rng,
        )?;
        let smoothness = estimate_smoothness(&probe_params, &probe_grads)?.max(f64::MIN_POSITIVE);
        let f_star = traces
            .iter()
            .map(|t| t.train_loss)
            .fold(initial_loss, f64::min);
        let model = trainer.model();
        let params = BoundParams {
            smoothness,
            learning_rate: cfg.model.learning_rate.max(f64::MIN_POSITIVE),
            pl_constant: cfg.bound.pl_constant,
            grad_variance: phi2,
            adapter_elements: model.adapter.len(),
            task_elements: model.heads[0].len(),
            num_devices: cfg.channel.num_devices,
        };
        let (rounds, history): (Vec<usize>, Vec<usize>) = traces
            .iter()
            .filter(|t| t.n > 0)
            .map(|t| (t.t, t.n))
            .unzip();
        if history.is_empty() {
            None
        } else {
            let initial_gap = initial_loss - f_star;
            Some(RunBound {
                trajectory: optimality_gap_bound(&history, &params, initial_gap)?,
                params,
                initial_gap,
                rounds,
            })
        }
    } else {
        None
    };

    Ok(RunResult {
        run_id: run_id(policy, seed),
        policy,
        seed,
        traces,
        bound,
    })
}

/// Every configured policy for every configured seed, sequentially.
pub fn execute_all(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &policy in &cfg.policies {
        for &seed in &cfg.seeds {
            out.push(execute(cfg, policy, seed)?);
        }
    }
    Ok(out)
}

/// Writes `metrics.csv` and `bound/<run_id>.csv` under `dir`.
pub fn write_outputs(dir: &Path, results: &[RunResult]) -> Result<()> {
    let bound_dir = dir.join("bound");
    fs::create_dir_all(&bound_dir).map_err(|e| Error::io(&bound_dir, e))?;
    let rows: Vec<MetricsRow> = results.iter().flat_map(|r| r.rows()).collect();
    write_metrics(&dir.join("metrics.csv"), &rows)?;
    for r in results {
        if let Some(b) = &r.bound {
            write_bound(&bound_dir.join(format!("{}.csv", r.run_id)), &b.rows())?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySummary {
    pub policy: Policy,
    pub runs: usize,
    pub final_loss_mean: f64,
    pub final_loss_std: f64,
    pub final_accuracy_mean: f64,
    pub final_accuracy_std: f64,
    pub mean_n: f64,
    pub mean_delay_s: f64,
    pub wall_us_mean: f64,
    pub wall_us_p50: f64,
    pub wall_us_p90: f64,
    pub wall_us_max: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Nearest-rank quantile of an ascending slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Per-policy summary; final values come from the last round of each run.
pub fn summarize(rows: &[MetricsRow]) -> Vec<PolicySummary> {
    let mut by_policy: BTreeMap<Policy, Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        by_policy.entry(r.policy).or_default().push(r);
    }
    by_policy
        .into_iter()
        .map(|(policy, rows)| {
            let mut finals: BTreeMap<&str, &MetricsRow> = BTreeMap::new();
            for r in &rows {
                let e = finals.entry(r.run_id.as_str()).or_insert(r);
                if r.t > e.t {
                    *e = r;
                }
            }
            let losses: Vec<f64> = finals.values().map(|r| r.train_loss).collect();
            let accs: Vec<f64> = finals.values().map(|r| r.test_accuracy).collect();
            let (final_loss_mean, final_loss_std) = mean_std(&losses);
            let (final_accuracy_mean, final_accuracy_std) = mean_std(&accs);
            let count = rows.len() as f64;
            let mut walls: Vec<f64> = rows.iter().map(|r| r.scheduler_wall_us).collect();
            walls.sort_by(f64::total_cmp);
            PolicySummary {
                policy,
                runs: finals.len(),
                final_loss_mean,
                final_loss_std,
                final_accuracy_mean,
                final_accuracy_std,
                mean_n: rows.iter().map(|r| r.n as f64).sum::<f64>() / count,
                mean_delay_s: rows.iter().map(|r| r.delay_s).sum::<f64>() / count,
                wall_us_mean: walls.iter().sum::<f64>() / count,
                wall_us_p50: quantile(&walls, 0.5),
                wall_us_p90: quantile(&walls, 0.9),
                wall_us_max: *walls.last().expect("policy group is nonempty"),
            }
        })
        .collect()
}

/// Fixed-width table of summaries.
pub struct SummaryTable<'a>(pub &'a [PolicySummary]);

impl fmt::Display for SummaryTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>4} {:>17} {:>17} {:>7} {:>9} {:>10}",
            "policy", "runs", "final loss", "final acc", "mean N", "mean D s", "sched us"
        )?;
        for s in self.0 {
            writeln!(
                f,
                "{:<8} {:>4} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4} {:>7.2} {:>9.4} {:>10.1}",
                s.policy.as_str(),
                s.runs,
                s.final_loss_mean,
                s.final_loss_std,
                s.final_accuracy_mean,
                s.final_accuracy_std,
                s.mean_n,
                s.mean_delay_s,
                s.wall_us_mean
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub results: Vec<RunResult>,
    pub summaries: Vec<PolicySummary>,
}

/// Executes the experiment and writes its CSV files. Nothing is written if
/// any run fails.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    let results = execute_all(cfg)?;
    write_outputs(&cfg.output_dir, &results)?;
    let rows: Vec<MetricsRow> = results.iter().flat_map(|r| r.rows()).collect();
    Ok(RunReport {
        output_dir: cfg.output_dir.clone(),
        summaries: summarize(&rows),
        results,
    })
}

/// Loads, validates and runs a config file.
pub fn run_file(path: &Path) -> Result<RunReport> {
    run(&ExperimentConfig::load(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Absolute round budget in seconds.
    DelayBudget,
    /// Multiplier on the config's own budget.
    DelayScale,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::DelayBudget => "delay_budget",
            SweepParam::DelayScale => "delay_scale",
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delay_budget" => Ok(SweepParam::DelayBudget),
            "delay_scale" => Ok(SweepParam::DelayScale),
            other => Err(Error::Config(format!(
                "unknown sweep parameter '{other}' (expected delay_budget or delay_scale)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: f64,
    /// Resolved round budget, seconds.
    pub delay_budget: f64,
    pub output_dir: PathBuf,
    pub summaries: Vec<PolicySummary>,
}

/// The config for one sweep value.
pub fn sweep_config(base: &ExperimentConfig, param: SweepParam, value: f64) -> ExperimentConfig {
    let mut cfg = base.clone();
    let budget = match param {
        SweepParam::DelayBudget => value,
        SweepParam::DelayScale => base.delay_budget() * value,
    };
    cfg.scheduler.delay_budget_seconds = Some(budget);
    cfg.output_dir = base.output_dir.join(format!("{}={value}", param.as_str()));
    cfg
}

/// One full run set per value, each under its own subdirectory, plus
/// `sweep_summary.csv` in the base output directory.
pub fn sweep(
    base: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    base.validate()?;
    let configs: Vec<ExperimentConfig> = values
        .iter()
        .map(|&v| sweep_config(base, param, v))
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let mut points = Vec::with_capacity(values.len());
    for (cfg, &value) in configs.iter().zip(values) {
        let report = run(cfg)?;
        points.push(SweepPoint {
            value,
            delay_budget: cfg.delay_budget(),
            output_dir: report.output_dir,
            summaries: report.summaries,
        });
    }
    write_sweep_summary(&base.output_dir.join("sweep_summary.csv"), param, &points)?;
    Ok(points)
}

pub const SWEEP_COLUMNS: [&str; 12] = [
    "param",
    "value",
    "delay_budget_s",
    "policy",
    "mean_n",
    "final_loss_mean",
    "final_accuracy_mean",
    "final_accuracy_std",
    "wall_us_mean",
    "wall_us_p50",
    "wall_us_p90",
    "wall_us_max",
];

fn write_sweep_summary(path: &Path, param: SweepParam, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_COLUMNS)?;
    for p in points {
        for s in &p.summaries {
            w.write_record([
                param.as_str().to_string(),
                p.value.to_string(),
                p.delay_budget.to_string(),
                s.policy.to_string(),
                s.mean_n.to_string(),
                s.final_loss_mean.to_string(),
                s.final_accuracy_mean.to_string(),
                s.final_accuracy_std.to_string(),
                s.wall_us_mean.to_string(),
                s.wall_us_p50.to_string(),
                s.wall_us_p90.to_string(),
                s.wall_us_max.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
