//! Multi-task datasets: synthetic generation with a task-relatedness knob,
//! CSV ingestion/export, contiguous splits and (optionally shuffled) batching.
//!
//! Row order is treated as time order throughout; nothing here reorders rows
//! except [`batches`] with an explicit shuffle seed.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::DenseMatrix;

/// Logit slope applied to `wᵀx` by the synthetic generator.
pub const SYNTHETIC_SLOPE: f64 = 3.0;

/// Largest allowed gap between requested and realised positive rate.
pub const RATE_TOLERANCE: f64 = 0.02;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Features plus one 0/1 label column per task, in timestamp order.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskDataset {
    features: DenseMatrix,
    labels: Vec<Vec<u8>>,
    group_ids: Option<Vec<String>>,
}

impl MultiTaskDataset {
    /// `labels` holds one column per task, each of length `features.rows()`.
    pub fn new(
        features: DenseMatrix,
        labels: Vec<Vec<u8>>,
        group_ids: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.is_empty() {
            return Err(DataError::Invalid("at least one label column required".into()));
        }
        for (t, col) in labels.iter().enumerate() {
            if col.len() != n {
                return Err(DataError::Invalid(format!(
                    "label column {t} has {} rows, features have {n}",
                    col.len()
                )));
            }
            if let Some(i) = col.iter().position(|&y| y > 1) {
                return Err(DataError::Invalid(format!(
                    "label column {t} row {i} is {}, expected 0 or 1",
                    col[i]
                )));
            }
        }
        if let Some(g) = &group_ids {
            if g.len() != n {
                return Err(DataError::Invalid(format!(
                    "{} group ids for {n} rows",
                    g.len()
                )));
            }
        }
        if !features.is_finite() {
            return Err(DataError::Invalid("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            group_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_tasks(&self) -> usize {
        self.labels.len()
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn labels(&self, task: usize) -> &[u8] {
        &self.labels[task]
    }

    pub fn group_ids(&self) -> Option<&[String]> {
        self.group_ids.as_deref()
    }

    pub fn positive_rate(&self, task: usize) -> f64 {
        let col = &self.labels[task];
        if col.is_empty() {
            return 0.0;
        }
        col.iter().map(|&y| f64::from(y)).sum::<f64>() / col.len() as f64
    }

    /// Rows at `indices`, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: self
                .labels
                .iter()
                .map(|col| indices.iter().map(|&i| col[i]).collect())
                .collect(),
            group_ids: self
                .group_ids
                .as_ref()
                .map(|g| indices.iter().map(|&i| g[i].clone()).collect()),
        }
    }

    /// Keeps only the listed label columns, in the listed order.
    pub fn select_tasks(&self, tasks: &[usize]) -> Result<Self> {
        if let Some(&t) = tasks.iter().find(|&&t| t >= self.num_tasks()) {
            return Err(DataError::Config(format!(
                "task {t} out of range for {} tasks",
                self.num_tasks()
            )));
        }
        Self::new(
            self.features.clone(),
            tasks.iter().map(|&t| self.labels[t].clone()).collect(),
            self.group_ids.clone(),
        )
    }

    /// Appends `other`'s rows after this dataset's rows.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.num_tasks() != other.num_tasks()
            || self.group_ids.is_some() != other.group_ids.is_some()
        {
            return Err(DataError::Invalid("datasets have different schemas".into()));
        }
        let features = self
            .features
            .vstack(&other.features)
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        let labels = self
            .labels
            .iter()
            .zip(&other.labels)
            .map(|(a, b)| a.iter().chain(b).copied().collect())
            .collect();
        let group_ids = match (&self.group_ids, &other.group_ids) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).cloned().collect()),
            _ => None,
        };
        Self::new(features, labels, group_ids)
    }

    /// Labels of one task as `f64` targets.
    pub fn targets(&self, task: usize) -> Vec<f64> {
        self.labels[task].iter().map(|&y| f64::from(y)).collect()
    }

    /// Writes `[group,]x0..x{d-1},y0..y{T-1}` with a header row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = Vec::new();
        if self.group_ids.is_some() {
            header.push("group".to_string());
        }
        header.extend((0..self.num_features()).map(|k| format!("x{k}")));
        header.extend((0..self.num_tasks()).map(|t| format!("y{t}")));
        w.write_record(&header)?;
        for r in 0..self.len() {
            let mut rec = Vec::with_capacity(header.len());
            if let Some(g) = &self.group_ids {
                rec.push(g[r].clone());
            }
            rec.extend(self.features.row(r).iter().map(|v| v.to_string()));
            rec.extend(self.labels.iter().map(|col| col[r].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads `[group,]features...,labels...` with a header row. Feature count is
/// inferred from the header.
pub fn load_csv(
    path: impl AsRef<Path>,
    n_tasks: usize,
    has_group_column: bool,
) -> Result<MultiTaskDataset> {
    if n_tasks == 0 {
        return Err(DataError::Config("n_tasks must be positive".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let width = reader.headers()?.len();
    let lead = usize::from(has_group_column);
    if width < lead + n_tasks + 1 {
        return Err(DataError::Parse {
            line: 1,
            message: format!(
                "header has {width} columns; need at least one feature plus {n_tasks} label columns"
            ),
        });
    }
    let d = width - lead - n_tasks;
    let mut features = Vec::new();
    let mut labels: Vec<Vec<u8>> = vec![Vec::new(); n_tasks];
    let mut groups = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(DataError::Parse {
                line,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        if has_group_column {
            groups.push(record[0].to_string());
        }
        for k in 0..d {
            let raw = record[lead + k].trim();
            let v: f64 = raw.parse().map_err(|_| DataError::Parse {
                line,
                message: format!("feature column {k}: `{raw}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    line,
                    message: format!("feature column {k} is not finite"),
                });
            }
            features.push(v);
        }
        for (t, col) in labels.iter_mut().enumerate() {
            let raw = record[lead + d + t].trim();
            let y = match raw {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(DataError::Parse {
                        line,
                        message: format!("label column {t}: `{other}` is not 0 or 1"),
                    })
                }
            };
            col.push(y);
        }
    }
    let n = labels[0].len();
    let features =
        DenseMatrix::new(n, d, features).map_err(|e| DataError::Invalid(e.to_string()))?;
    MultiTaskDataset::new(features, labels, has_group_column.then_some(groups))
}

/// Contiguous train/validation/test split. Train and validation sizes are
/// floored; the remainder goes to test.
pub fn split(
    ds: &MultiTaskDataset,
    proportions: [f64; 3],
) -> Result<(MultiTaskDataset, MultiTaskDataset, MultiTaskDataset)> {
    if proportions.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(DataError::Config(format!(
            "split proportions must be positive, got {proportions:?}"
        )));
    }
    let total: f64 = proportions.iter().sum();
    let n = ds.len();
    let n_train = (n as f64 * proportions[0] / total).floor() as usize;
    let n_val = (n as f64 * proportions[1] / total).floor() as usize;
    let n_test = n - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(DataError::Config(format!(
            "split of {n} rows leaves an empty part ({n_train}/{n_val}/{n_test})"
        )));
    }
    let range = |a: usize, b: usize| (a..b).collect::<Vec<_>>();
    Ok((
        ds.select_rows(&range(0, n_train)),
        ds.select_rows(&range(n_train, n_train + n_val)),
        ds.select_rows(&range(n_train + n_val, n)),
    ))
}

/// One mini-batch.
#[derive(Debug, Clone)]
pub struct MultiTaskBatch {
    pub rows: Vec<usize>,
    pub features: DenseMatrix,
    pub labels: Vec<Vec<u8>>,
}

impl MultiTaskBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn targets(&self) -> Vec<Vec<f64>> {
        self.labels
            .iter()
            .map(|c| c.iter().map(|&y| f64::from(y)).collect())
            .collect()
    }
}

/// Row indices of each batch of one epoch. The last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// One epoch of batches.
pub fn batches(
    ds: &MultiTaskDataset,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Vec<MultiTaskBatch> {
    batch_indices(ds.len(), batch_size, shuffle_seed)
        .into_iter()
        .map(|rows| make_batch(ds, rows))
        .collect()
}

pub fn make_batch(ds: &MultiTaskDataset, rows: Vec<usize>) -> MultiTaskBatch {
    MultiTaskBatch {
        features: ds.features.select_rows(&rows),
        labels: ds
            .labels
            .iter()
            .map(|col| rows.iter().map(|&i| col[i]).collect())
            .collect(),
        rows,
    }
}

/// Settings for [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskConfig {
    pub n_samples: usize,
    pub n_features: usize,
    /// Angle between consecutive task weight vectors, degrees in `[0, 90]`.
    pub task_angle_deg: f64,
    /// Target positive fraction per task; its length sets the task count.
    pub positive_rates: Vec<f64>,
    #[serde(default)]
    pub label_noise: f64,
    pub seed: u64,
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(DataError::Config("n_samples must be positive".into()));
        }
        if self.n_features < 2 {
            return Err(DataError::Config("n_features must be at least 2".into()));
        }
        if !(0.0..=90.0).contains(&self.task_angle_deg) {
            return Err(DataError::Config(format!(
                "task_angle_deg {} outside [0, 90]",
                self.task_angle_deg
            )));
        }
        if self.positive_rates.is_empty() {
            return Err(DataError::Config("positive_rates must not be empty".into()));
        }
        if let Some(p) = self.positive_rates.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
            return Err(DataError::Config(format!("positive rate {p} outside (0, 1)")));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(DataError::Config(format!(
                "label_noise {} outside [0, 0.5)",
                self.label_noise
            )));
        }
        Ok(())
    }
}

/// Unit vector along the all-ones direction and a unit vector orthogonal to
/// it (alternating signs, Gram–Schmidt against the first).
fn base_directions(d: usize) -> (Vec<f64>, Vec<f64>) {
    let w1: Vec<f64> = vec![1.0 / (d as f64).sqrt(); d];
    let mut w2: Vec<f64> = (0..d).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let proj: f64 = w1.iter().zip(&w2).map(|(a, b)| a * b).sum();
    for (b, a) in w2.iter_mut().zip(&w1) {
        *b -= proj * a;
    }
    let norm = w2.iter().map(|v| v * v).sum::<f64>().sqrt();
    for b in &mut w2 {
        *b /= norm;
    }
    (w1, w2)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn rate_at(bias: f64, margins: &[f64], uniforms: &[f64]) -> f64 {
    let hits = margins
        .iter()
        .zip(uniforms)
        .filter(|(&m, &u)| u < sigmoid(SYNTHETIC_SLOPE * m + bias))
        .count();
    hits as f64 / margins.len() as f64
}

/// Bias that makes the empirical positive rate match `target`.
fn solve_bias(target: f64, margins: &[f64], uniforms: &[f64]) -> Result<f64> {
    let (mut lo, mut hi) = (-60.0, 60.0);
    if rate_at(lo, margins, uniforms) > target || rate_at(hi, margins, uniforms) < target {
        return Err(DataError::Generation(format!(
            "cannot bracket positive rate {target}"
        )));
    }
    let resolution = 0.5 / margins.len() as f64;
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let r = rate_at(mid, margins, uniforms);
        if (r - target).abs() <= resolution {
            break;
        }
        if r < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let achieved = rate_at(mid, margins, uniforms);
    if (achieved - target).abs() > RATE_TOLERANCE {
        return Err(DataError::Generation(format!(
            "positive rate {achieved:.4} misses target {target}"
        )));
    }
    Ok(mid)
}

/// Draws correlated binary tasks over Gaussian features.
///
/// Task `t` has weight `cos(tρ)·w₁ + sin(tρ)·w⊥`, so with two tasks the
/// weights are exactly `ρ` apart. Labels are Bernoulli draws from
/// `σ(3·wₜᵀx + bₜ)` with `bₜ` bisected to hit the requested positive rate.
/// All tasks share the same per-row uniform draws (labels and noise flips),
/// so identical generating processes yield identical label columns.
pub fn generate_synthetic(config: &SyntheticTaskConfig) -> Result<MultiTaskDataset> {
    config.validate()?;
    let n = config.n_samples;
    let d = config.n_features;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let features: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    let uniforms: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let flips: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let (w1, w_perp) = base_directions(d);
    let rho = config.task_angle_deg.to_radians();

    let mut labels = Vec::with_capacity(config.positive_rates.len());
    for (t, &target) in config.positive_rates.iter().enumerate() {
        let angle = rho * t as f64;
        let w: Vec<f64> = w1
            .iter()
            .zip(&w_perp)
            .map(|(a, b)| angle.cos() * a + angle.sin() * b)
            .collect();
        let margins: Vec<f64> = features
            .chunks(d)
            .map(|x| x.iter().zip(&w).map(|(a, b)| a * b).sum())
            .collect();
        let bias = solve_bias(target, &margins, &uniforms)?;
        let col: Vec<u8> = margins
            .iter()
            .zip(&uniforms)
            .zip(&flips)
            .map(|((&m, &u), &f)| {
                let y = u8::from(u < sigmoid(SYNTHETIC_SLOPE * m + bias));
                if f < config.label_noise {
                    1 - y
                } else {
                    y
                }
            })
            .collect();
        labels.push(col);
    }
    let features = DenseMatrix::new(n, d, features).map_err(|e| DataError::Invalid(e.to_string()))?;
    MultiTaskDataset::new(features, labels, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn cfg(n: usize, angle: f64, rates: Vec<f64>, noise: f64, seed: u64) -> SyntheticTaskConfig {
        SyntheticTaskConfig {
            n_samples: n,
            n_features: 8,
            task_angle_deg: angle,
            positive_rates: rates,
            label_noise: noise,
            seed,
        }
    }

    fn tiny(n: usize) -> MultiTaskDataset {
        let features = DenseMatrix::new(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        let labels = vec![(0..n).map(|i| (i % 2) as u8).collect()];
        MultiTaskDataset::new(features, labels, None).unwrap()
    }

    #[test]
    fn synthetic_is_deterministic() {
        let c = cfg(500, 30.0, vec![0.5, 0.1], 0.05, 3);
        assert_eq!(generate_synthetic(&c).unwrap(), generate_synthetic(&c).unwrap());
        let other = SyntheticTaskConfig { seed: 4, ..c.clone() };
        assert_ne!(generate_synthetic(&c).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn synthetic_hits_positive_rates() {
        let ds = generate_synthetic(&cfg(20_000, 45.0, vec![0.5, 0.02], 0.0, 1)).unwrap();
        let (r0, r1) = (ds.positive_rate(0), ds.positive_rate(1));
        assert!((0.48..=0.52).contains(&r0), "{r0}");
        assert!((0.015..=0.025).contains(&r1), "{r1}");
    }

    #[test]
    fn zero_angle_gives_identical_columns() {
        let ds = generate_synthetic(&cfg(2_000, 0.0, vec![0.3, 0.3], 0.0, 9)).unwrap();
        assert_eq!(ds.labels(0), ds.labels(1));
    }

    #[test]
    fn synthetic_rejects_bad_config() {
        assert!(generate_synthetic(&cfg(100, 91.0, vec![0.5], 0.0, 0)).is_err());
        assert!(generate_synthetic(&cfg(100, 10.0, vec![1.0], 0.0, 0)).is_err());
        assert!(generate_synthetic(&cfg(100, 10.0, vec![0.5], 0.5, 0)).is_err());
        assert!(generate_synthetic(&cfg(0, 10.0, vec![0.5], 0.0, 0)).is_err());
    }

    #[test]
    fn unreachable_rate_is_a_generation_error() {
        // a single row can only realise rates 0 or 1
        let err = solve_bias(0.3, &[0.0], &[0.5]).unwrap_err();
        assert!(matches!(err, DataError::Generation(_)));
    }

    fn label_correlation(ds: &MultiTaskDataset) -> f64 {
        let a: Vec<f64> = ds.targets(0);
        let b: Vec<f64> = ds.targets(1);
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n;
        cov / (va * vb).sqrt()
    }

    #[test]
    fn label_correlation_decreases_with_angle() {
        let mean_corr = |angle: f64| {
            (0..20u64)
                .map(|s| {
                    label_correlation(
                        &generate_synthetic(&cfg(2_000, angle, vec![0.4, 0.2], 0.05, s)).unwrap(),
                    )
                })
                .sum::<f64>()
                / 20.0
        };
        let (c0, c45, c90) = (mean_corr(0.0), mean_corr(45.0), mean_corr(90.0));
        assert!(c0 >= c45 && c45 >= c90, "{c0} {c45} {c90}");
    }

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_small_csv() {
        let f = write("a,b,click,buy\n1.5,-2,1,0\n0.25,3e-1,0,0\n");
        let ds = load_csv(f.path(), 2, false).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_features(), 2);
        assert_eq!(ds.features().row(0), &[1.5, -2.0]);
        assert_eq!(ds.features().row(1), &[0.25, 0.3]);
        assert_eq!(ds.labels(0), &[1, 0]);
        assert_eq!(ds.labels(1), &[0, 0]);
        assert!(ds.group_ids().is_none());
    }

    #[test]
    fn load_csv_with_groups() {
        let f = write("user,x,y\nu1,1,1\nu2,2,0\n");
        let ds = load_csv(f.path(), 1, true).unwrap();
        assert_eq!(ds.group_ids().unwrap(), &["u1".to_string(), "u2".to_string()]);
    }

    #[test]
    fn load_csv_errors_name_the_line() {
        let f = write("a,b,y0,y1\n1,2,0,1\n1,2,2,0\n");
        let msg = load_csv(f.path(), 2, false).unwrap_err().to_string();
        assert!(msg.starts_with("line 3:"), "{msg}");
        let f = write("a,b,y0\n1,oops,0\n");
        let msg = load_csv(f.path(), 1, false).unwrap_err().to_string();
        assert!(msg.starts_with("line 2:"), "{msg}");
        let f = write("a,b,y0\n1,2,0\n1,2\n");
        let msg = load_csv(f.path(), 1, false).unwrap_err().to_string();
        assert!(msg.starts_with("line 3:"), "{msg}");
    }

    #[test]
    fn csv_round_trip() {
        let ds = generate_synthetic(&cfg(50, 20.0, vec![0.5, 0.2], 0.1, 2)).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        ds.write_csv(f.path()).unwrap();
        let back = load_csv(f.path(), 2, false).unwrap();
        assert_eq!(back, ds);
        let g = tempfile::NamedTempFile::new().unwrap();
        back.write_csv(g.path()).unwrap();
        assert_eq!(
            std::fs::read_to_string(f.path()).unwrap(),
            std::fs::read_to_string(g.path()).unwrap()
        );
    }

    #[test]
    fn split_sizes() {
        let sizes = |n| {
            let (a, b, c) = split(&tiny(n), [4.0, 1.0, 1.0]).unwrap();
            (a.len(), b.len(), c.len())
        };
        assert_eq!(sizes(600), (400, 100, 100));
        assert_eq!(sizes(601), (400, 100, 101));
        assert!(split(&tiny(3), [4.0, 1.0, 1.0]).is_err());
        assert!(split(&tiny(60), [4.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn split_is_a_contiguous_partition() {
        let ds = tiny(601);
        let (a, b, c) = split(&ds, [4.0, 1.0, 1.0]).unwrap();
        assert_eq!(a.concat(&b).unwrap().concat(&c).unwrap(), ds);
    }

    #[test]
    fn batch_sizes_and_order() {
        let ds = tiny(10);
        let b = batches(&ds, 4, None);
        assert_eq!(b.iter().map(MultiTaskBatch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let rows: Vec<usize> = b.iter().flat_map(|x| x.rows.clone()).collect();
        assert_eq!(rows, (0..10).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn shuffled_batches_cover_every_row_once(n in 1usize..200, bs in 1usize..50, seed: u64) {
            let mut rows: Vec<usize> = batch_indices(n, bs, Some(seed)).concat();
            prop_assert_eq!(batch_indices(n, bs, Some(seed)), batch_indices(n, bs, Some(seed)));
            rows.sort_unstable();
            prop_assert_eq!(rows, (0..n).collect::<Vec<_>>());
        }
    }
}
