//! The four subcommands. Each takes a resolved config and writes its
//! artifacts under the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cograd_core::data::{load_csv, MultiTaskDataset};
use cograd_core::gradmod::{
    approx_hvp, hvp_agreement, transfer_exact, transfer_first_order, StrategyConfig, StrategyKind,
    MAX_EXACT_HVP_PARAMS,
};
use cograd_core::model::{Checkpoint, SharedBottomNet};
use cograd_core::tensor::{default_hvp_eps, finite_diff_hvp, DenseMatrix, ParamVector};
use cograd_core::trainer::{
    evaluate_dataset, probe_harmonization, train, train_with_callback, ProbeConfig, ProbeReport,
    Schedule, TrainError,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Splits};
use crate::CliError;

fn runtime(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{context}: {e}"))
}

fn train_error(context: &str, e: TrainError) -> CliError {
    match e {
        TrainError::Config(_) => CliError::Config(format!("{context}: {e}")),
        e => runtime(context, e),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| runtime("json", e))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| runtime("thread pool", e))
}

fn metric_name(ds: &MultiTaskDataset) -> &'static str {
    if ds.group_ids().is_some() {
        "gauc"
    } else {
        "auc"
    }
}

/// Written as `summary.json` in every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: String,
    pub seed: u64,
    pub metric: String,
    pub test_metrics: Vec<f64>,
    pub val_metrics: Vec<f64>,
    pub final_train_losses: Vec<f64>,
    pub steps: usize,
    pub wall_time_secs: f64,
    pub run_config: cograd_core::trainer::TrainConfig,
    pub config: ExperimentConfig,
}

/// One row of `comparison.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: String,
    pub task: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
    /// Difference of means against the `sum` strategy; empty without one.
    pub delta_vs_sum: Option<f64>,
    /// The same difference relative to the `sum` mean, in percent.
    pub delta_pct_vs_sum: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub runs: Vec<RunSummary>,
    pub comparison: Vec<ComparisonRow>,
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_one(
    cfg: &ExperimentConfig,
    splits: &Splits,
    strategy: &StrategyConfig,
    seed: u64,
    shared_widths: Option<&[usize]>,
    dir: Option<&Path>,
) -> Result<(RunSummary, SharedBottomNet), CliError> {
    let label = format!("run {}/{seed}", strategy.label());
    let start = Instant::now();
    let net = cfg.init_model(splits.train.num_features(), seed, shared_widths)?;
    let run_cfg = cfg.run_config(strategy, seed);
    let (net, log) = train(net, &splits.train, Some(&splits.val), &run_cfg)
        .map_err(|e| train_error(&label, e))?;
    let test_metrics = evaluate_dataset(&net, &splits.test).map_err(|e| runtime(&label, e))?;
    let val_metrics = evaluate_dataset(&net, &splits.val).map_err(|e| runtime(&label, e))?;
    let summary = RunSummary {
        strategy: strategy.label(),
        seed,
        metric: metric_name(&splits.test).to_string(),
        test_metrics,
        val_metrics,
        final_train_losses: log.steps.last().map(|r| r.losses.clone()).unwrap_or_default(),
        steps: log.steps.last().map_or(0, |r| r.step),
        wall_time_secs: start.elapsed().as_secs_f64(),
        run_config: run_cfg,
        config: cfg.clone(),
    };
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("checkpoint.json"), &net.to_checkpoint())?;
        let csv_err = |e| runtime(&label, e);
        log.write_steps_csv(dir.join("steps.csv")).map_err(csv_err)?;
        log.write_evals_csv(dir.join("evals.csv")).map_err(csv_err)?;
        log.write_transference_csv(dir.join("transference.csv"))
            .map_err(csv_err)?;
        write_json(&dir.join("summary.json"), &summary)?;
    }
    Ok((summary, net))
}

/// Directory of one run.
pub fn run_dir(cfg: &ExperimentConfig, strategy: &StrategyConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join(strategy.label()).join(seed.to_string())
}

fn comparison(runs: &[RunSummary], strategies: &[StrategyConfig], num_tasks: usize) -> Vec<ComparisonRow> {
    let sum_label = strategies
        .iter()
        .find(|s| s.kind == StrategyKind::Sum)
        .map(StrategyConfig::label);
    let stats = |label: &str, task: usize| {
        let v: Vec<f64> = runs
            .iter()
            .filter(|r| r.strategy == label)
            .map(|r| r.test_metrics[task])
            .collect();
        (mean_std(&v), v.len())
    };
    let metric = runs.first().map_or("auc".to_string(), |r| r.metric.clone());
    let mut rows = Vec::new();
    for s in strategies {
        let label = s.label();
        for task in 0..num_tasks {
            let ((mean, std), n) = stats(&label, task);
            let base = sum_label.as_deref().map(|l| stats(l, task).0 .0);
            rows.push(ComparisonRow {
                strategy: label.clone(),
                task,
                metric: metric.clone(),
                mean,
                std,
                n_seeds: n,
                delta_vs_sum: base.map(|b| mean - b),
                delta_pct_vs_sum: base.map(|b| 100.0 * (mean - b) / b),
            });
        }
    }
    rows
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| runtime("csv", e))?;
    for r in rows {
        w.serialize(r).map_err(|e| runtime("csv", e))?;
    }
    w.flush()?;
    Ok(())
}

/// Trains every strategy for every seed, then writes `comparison.csv`.
pub fn cmd_train(cfg: &ExperimentConfig, jobs: usize) -> Result<StudyReport, CliError> {
    let splits = cfg.splits()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let runs: Vec<(&StrategyConfig, u64)> = cfg
        .strategies
        .iter()
        .flat_map(|s| cfg.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let results: Vec<Result<RunSummary, CliError>> = pool(jobs)?.install(|| {
        runs.par_iter()
            .map(|&(s, seed)| {
                run_one(cfg, &splits, s, seed, None, Some(&run_dir(cfg, s, seed))).map(|r| r.0)
            })
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let comparison = comparison(&runs, &cfg.strategies, cfg.num_tasks());
    write_csv_rows(&cfg.output_dir.join("comparison.csv"), &comparison)?;
    Ok(StudyReport { runs, comparison })
}

/// One row of `approx_report.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxRow {
    pub step: usize,
    pub source_task: usize,
    pub target_task: usize,
    /// Cosine between the finite-difference `H_target g_source` and its
    /// squared-gradient surrogate.
    pub hvp_cosine: f64,
    /// `‖surrogate‖ / ‖finite difference‖`.
    pub hvp_norm_ratio: f64,
    pub gamma: f64,
    /// `|exact − first-order|` transference at `gamma`.
    pub gap: f64,
    /// The same at `gamma / 2`.
    pub gap_half_gamma: f64,
    pub gap_ratio: f64,
}

fn total_steps(schedule: Schedule, n: usize, batch_size: usize) -> usize {
    match schedule {
        Schedule::Steps(s) => s,
        Schedule::Epochs(e) => e * n.div_ceil(batch_size),
    }
}

/// Checks the squared-gradient Hessian surrogate and first-order
/// transference against finite differences at checkpoints of one run of the
/// first strategy and seed. Writes `approx_report.csv`.
pub fn cmd_validate_approx(cfg: &ExperimentConfig) -> Result<Vec<ApproxRow>, CliError> {
    let splits = cfg.splits()?;
    let seed = cfg.seeds[0];
    let net = cfg.init_model(splits.train.num_features(), seed, None)?;
    if net.num_theta_params() > MAX_EXACT_HVP_PARAMS {
        return Err(CliError::Config(format!(
            "model.shared_widths: {} shared parameters exceed the finite-difference budget of {MAX_EXACT_HVP_PARAMS}",
            net.num_theta_params()
        )));
    }
    let settings = &cfg.validate_approx;
    let run_cfg = cfg.run_config(&cfg.strategies[0], seed);
    let total = total_steps(run_cfg.schedule, splits.train.len(), run_cfg.batch_size);
    let marks: Vec<usize> = (1..=settings.checkpoints)
        .map(|k| (k * total).div_ceil(settings.checkpoints))
        .collect();
    let mut snapshots: Vec<(usize, SharedBottomNet)> = Vec::new();
    if marks.contains(&0) {
        snapshots.push((0, net.clone()));
    }
    train_with_callback(net, &splits.train, None, &run_cfg, |step, n| {
        if marks.contains(&step) {
            snapshots.push((step, n.clone()));
        }
        Ok(())
    })
    .map_err(|e| train_error("validate-approx", e))?;

    let rows: Vec<usize> = (0..settings.rows.min(splits.train.len())).collect();
    let probe = splits.train.select_rows(&rows);
    let x: &DenseMatrix = probe.features();
    let targets: Vec<Vec<f64>> = (0..probe.num_tasks()).map(|t| probe.targets(t)).collect();
    let mut report = Vec::new();
    for (step, net) in &snapshots {
        let theta = net.theta();
        let grad = |t: usize, th: &ParamVector| {
            net.task_grad_at(th, x, &targets[t], t)
                .map_err(|e| runtime("gradient", e))
        };
        let loss = |t: usize, th: &ParamVector| net.task_loss_at(th, x, &targets[t], t).unwrap_or(f64::NAN);
        let grads = (0..net.num_tasks())
            .map(|t| grad(t, &theta))
            .collect::<Result<Vec<_>, _>>()?;
        for i in 0..net.num_tasks() {
            for j in (0..net.num_tasks()).filter(|&j| j != i) {
                let fd = finite_diff_hvp(
                    |th| grad(j, th).unwrap_or_else(|_| th.with_values(vec![f64::NAN; th.len()]).expect("layout")),
                    &theta,
                    &grads[i],
                    default_hvp_eps(&theta),
                )
                .map_err(|e| runtime("hvp", e))?;
                let approx = approx_hvp(&grads[j], &grads[i], settings.lambda)
                    .map_err(|e| runtime("hvp", e))?;
                let (hvp_cosine, hvp_norm_ratio) = hvp_agreement(&fd, &approx);
                let gap = |gamma: f64| -> Result<f64, CliError> {
                    let exact = transfer_exact(|th| loss(j, th), &theta, &grads[i], gamma)
                        .map_err(|e| runtime("transference", e))?;
                    let first = transfer_first_order(&grads[i], &grads[j], gamma)
                        .map_err(|e| runtime("transference", e))?;
                    Ok((exact - first).abs())
                };
                let g_full = gap(settings.gamma)?;
                let g_half = gap(settings.gamma / 2.0)?;
                report.push(ApproxRow {
                    step: *step,
                    source_task: i,
                    target_task: j,
                    hvp_cosine,
                    hvp_norm_ratio,
                    gamma: settings.gamma,
                    gap: g_full,
                    gap_half_gamma: g_half,
                    gap_ratio: g_full / g_half,
                });
            }
        }
    }
    fs::create_dir_all(&cfg.output_dir)?;
    write_csv_rows(&cfg.output_dir.join("approx_report.csv"), &report)?;
    Ok(report)
}

/// Written as `probe_summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub general_share: f64,
    pub band: f64,
    pub trunk_width: usize,
    pub iterations: Vec<usize>,
    pub differences: Vec<f64>,
    pub importances: Vec<Vec<f64>>,
    pub probe_config: ProbeConfig,
}

/// Where the probe data come from.
pub enum ProbeData<'a> {
    /// An experiment config; its training split is probed with its probe settings.
    Config(&'a ExperimentConfig),
    Csv {
        path: &'a Path,
        has_group_column: bool,
        probe: ProbeConfig,
    },
}

/// Fits the frozen-trunk probes for a saved checkpoint and writes
/// `probe_histogram.csv` and `probe_summary.json` into `out_dir`.
pub fn cmd_probe(checkpoint: &Path, data: ProbeData<'_>, out_dir: &Path) -> Result<ProbeReport, CliError> {
    let text = fs::read_to_string(checkpoint)
        .map_err(|e| CliError::Config(format!("{}: {e}", checkpoint.display())))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", checkpoint.display())))?;
    let net = SharedBottomNet::from_checkpoint(&ckpt)
        .map_err(|e| CliError::Config(format!("{}: {e}", checkpoint.display())))?;
    let (ds, probe_cfg) = match data {
        ProbeData::Config(cfg) => (cfg.splits()?.train, cfg.probe.clone()),
        ProbeData::Csv {
            path,
            has_group_column,
            probe,
        } => (
            load_csv(path, net.num_tasks(), has_group_column)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
            probe,
        ),
    };
    if ds.num_tasks() != net.num_tasks() || ds.num_features() != net.input_dim() {
        return Err(CliError::Config(format!(
            "data has {} tasks and {} features, checkpoint expects {} and {}",
            ds.num_tasks(),
            ds.num_features(),
            net.num_tasks(),
            net.input_dim()
        )));
    }
    let report = probe_harmonization(&net, &ds, &probe_cfg).map_err(|e| match e {
        TrainError::Probe(_) => CliError::Config(format!("probe: {e}")),
        e => runtime("probe", e),
    })?;
    fs::create_dir_all(out_dir)?;
    report
        .write_histogram_csv(out_dir.join("probe_histogram.csv"))
        .map_err(|e| runtime("probe", e))?;
    write_json(
        &out_dir.join("probe_summary.json"),
        &ProbeSummary {
            general_share: report.general_share,
            band: probe_cfg.band,
            trunk_width: net.trunk_width(),
            iterations: report.iterations.clone(),
            differences: report.differences.clone(),
            importances: report.importances.clone(),
            probe_config: probe_cfg,
        },
    )?;
    Ok(report)
}

/// One row of `capacity.csv`: a strategy at one trunk width, averaged over
/// seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityRow {
    pub strategy: String,
    pub first_width: usize,
    pub theta_params: usize,
    pub n_seeds: usize,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Mean minus the same strategy's base-width mean.
    pub deltas_vs_base: Vec<f64>,
}

fn write_capacity_csv(path: &Path, rows: &[CapacityRow], num_tasks: usize) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| runtime("csv", e))?;
    let mut header = vec![
        "strategy".to_string(),
        "first_width".into(),
        "theta_params".into(),
        "n_seeds".into(),
    ];
    for t in 0..num_tasks {
        header.extend([format!("mean_{t}"), format!("std_{t}"), format!("delta_{t}")]);
    }
    w.write_record(&header).map_err(|e| runtime("csv", e))?;
    for r in rows {
        let mut rec = vec![
            r.strategy.clone(),
            r.first_width.to_string(),
            r.theta_params.to_string(),
            r.n_seeds.to_string(),
        ];
        for t in 0..num_tasks {
            rec.extend([r.means[t].to_string(), r.stds[t].to_string(), r.deltas_vs_base[t].to_string()]);
        }
        w.write_record(&rec).map_err(|e| runtime("csv", e))?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every strategy at the configured widths and with the first shared
/// layer doubled. Writes `capacity.csv` with two rows per strategy.
pub fn cmd_capacity_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<CapacityRow>, CliError> {
    let splits = cfg.splits()?;
    let base = cfg.model.shared_widths.clone();
    let mut doubled = base.clone();
    doubled[0] *= 2;
    let widths = [base, doubled];
    let runs: Vec<(usize, &StrategyConfig, u64)> = cfg
        .strategies
        .iter()
        .flat_map(|s| (0..2).flat_map(move |w| cfg.seeds.iter().map(move |&seed| (w, s, seed))))
        .collect();
    let results: Vec<Result<(RunSummary, usize), CliError>> = pool(jobs)?.install(|| {
        runs.par_iter()
            .map(|&(w, s, seed)| {
                run_one(cfg, &splits, s, seed, Some(&widths[w]), None)
                    .map(|(summary, net)| (summary, net.num_theta_params()))
            })
            .collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let num_tasks = cfg.num_tasks();
    let mut rows = Vec::new();
    for (k, s) in cfg.strategies.iter().enumerate() {
        let per_width: Vec<(Vec<f64>, Vec<f64>, usize, usize)> = (0..2)
            .map(|w| {
                let chunk: Vec<&(RunSummary, usize)> = results
                    .iter()
                    .zip(&runs)
                    .filter(|(_, r)| r.0 == w && std::ptr::eq(r.1, &cfg.strategies[k]))
                    .map(|(x, _)| x)
                    .collect();
                let (means, stds) = (0..num_tasks)
                    .map(|t| mean_std(&chunk.iter().map(|c| c.0.test_metrics[t]).collect::<Vec<_>>()))
                    .unzip();
                (means, stds, chunk[0].1, chunk.len())
            })
            .collect();
        for (w, (means, stds, params, n)) in per_width.iter().enumerate() {
            rows.push(CapacityRow {
                strategy: s.label(),
                first_width: widths[w][0],
                theta_params: *params,
                n_seeds: *n,
                deltas_vs_base: means.iter().zip(&per_width[0].0).map(|(m, b)| m - b).collect(),
                means: means.clone(),
                stds: stds.clone(),
            });
        }
    }
    fs::create_dir_all(&cfg.output_dir)?;
    write_capacity_csv(&cfg.output_dir.join("capacity.csv"), &rows, num_tasks)?;
    Ok(rows)
}
