//! Accuracy reports, the end-to-end experiment pipeline, and k-shot sweeps.
//!
//! Confusion matrices hold raw counts, rows indexed by the true class and
//! columns by the predicted class. Row-normalized views are computed on
//! demand for presentation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{kshot_sample, split, Dataset, Domain, SplitSpec, Standardizer};
use crate::dml::{train_dml, DmlConfig, DmlInputs, DmlMode, TrainedDml};
use crate::error::{Error, Result};
use crate::gan::{synthesize_features, train_wcgan, GanConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub label_space: Vec<String>,
    pub overall_accuracy: f64,
    /// `None` for classes without test records.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

impl EvalReport {
    /// Build a report from true and predicted label indices.
    pub fn from_predictions(
        label_space: &[String],
        truth: &[usize],
        predicted: &[usize],
        mode: &str,
    ) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Input(format!(
                "{} true labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        if truth.is_empty() {
            return Err(Error::Input("cannot evaluate an empty test set".into()));
        }
        let n = label_space.len();
        if let Some(&bad) = truth.iter().chain(predicted).find(|&&y| y >= n) {
            return Err(Error::Input(format!("label index {bad} outside {n} classes")));
        }
        let mut confusion = vec![vec![0u64; n]; n];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        let mut report = Self {
            mode: mode.into(),
            label_space: label_space.to_vec(),
            overall_accuracy: 0.0,
            per_class_accuracy: Vec::new(),
            confusion,
            seeds: Vec::new(),
            config_hash: String::new(),
        };
        report.overall_accuracy = report.trace() as f64 / report.total() as f64;
        report.per_class_accuracy = report.count_accuracies();
        Ok(report)
    }

    pub fn with_provenance(mut self, seeds: Vec<u64>, config_hash: &str) -> Self {
        self.seeds = seeds;
        self.config_hash = config_hash.into();
        self
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    fn count_accuracies(&self) -> Vec<Option<f64>> {
        self.row_sums()
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s > 0).then(|| self.confusion[i][i] as f64 / s as f64))
            .collect()
    }

    /// Confusion rows scaled to sum to 1 (all-zero rows stay zero).
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.confusion
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }
}

/// Evaluate a trained model's real-label predictions on a real aerial test set.
pub fn evaluate(model: &TrainedDml, test: &Dataset) -> Result<EvalReport> {
    test.require_domain(Domain::RealAerial, "test set")?;
    if test.label_space() != model.real_labels {
        return Err(Error::Config(
            "test label space does not match the model's real label space".into(),
        ));
    }
    let pred = model.classify(test.features().view())?;
    EvalReport::from_predictions(
        &model.real_labels,
        &test.label_indices(),
        &pred.labels,
        model.mode.as_str(),
    )
}

/// Mean accuracies and summed confusion counts of reports sharing a label
/// space and mode.
pub fn average_reports(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Input("cannot average zero reports".into()))?;
    for r in reports {
        if r.label_space != first.label_space {
            return Err(Error::Config("reports have different label spaces".into()));
        }
        if r.mode != first.mode {
            return Err(Error::Config(format!(
                "reports mix modes {} and {}",
                first.mode, r.mode
            )));
        }
    }
    let n = reports.len() as f64;
    let k = first.label_space.len();
    let mut confusion = vec![vec![0u64; k]; k];
    for r in reports {
        for (row, src) in confusion.iter_mut().zip(&r.confusion) {
            for (c, s) in row.iter_mut().zip(src) {
                *c += s;
            }
        }
    }
    let per_class_accuracy = (0..k)
        .map(|i| {
            let vals: Vec<f64> = reports.iter().filter_map(|r| r.per_class_accuracy[i]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    let mut seeds: Vec<u64> = reports.iter().flat_map(|r| r.seeds.iter().copied()).collect();
    seeds.sort_unstable();
    seeds.dedup();
    Ok(EvalReport {
        mode: first.mode.clone(),
        label_space: first.label_space.clone(),
        overall_accuracy: reports.iter().map(|r| r.overall_accuracy).sum::<f64>() / n,
        per_class_accuracy,
        confusion,
        seeds,
        config_hash: first.config_hash.clone(),
    })
}

/// One row per class plus an overall row.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("label,accuracy,correct,count\n");
    for (i, label) in report.label_space.iter().enumerate() {
        let acc = report.per_class_accuracy[i].map(|a| a.to_string()).unwrap_or_default();
        let count: u64 = report.confusion[i].iter().sum();
        let _ = writeln!(out, "{label},{acc},{},{count}", report.confusion[i][i]);
    }
    let _ = writeln!(
        out,
        "overall,{},{},{}",
        report.overall_accuracy,
        report.trace(),
        report.total()
    );
    out
}

/// Human-readable summary with a row-normalized confusion matrix in percent.
pub fn report_text(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "mode: {}", report.mode);
    let seeds: Vec<String> = report.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(out, "seeds: {}", if seeds.is_empty() { "-".into() } else { seeds.join(",") });
    if !report.config_hash.is_empty() {
        let _ = writeln!(out, "config: {}", report.config_hash);
    }
    let _ = writeln!(out, "overall accuracy: {:.2}%", 100.0 * report.overall_accuracy);
    let _ = writeln!(out, "\nper-class accuracy:");
    let width = report.label_space.iter().map(String::len).max().unwrap_or(0);
    for (label, acc) in report.label_space.iter().zip(&report.per_class_accuracy) {
        match acc {
            Some(a) => {
                let _ = writeln!(out, "  {label:<width$}  {:6.2}%", 100.0 * a);
            }
            None => {
                let _ = writeln!(out, "  {label:<width$}       -");
            }
        }
    }
    let _ = writeln!(out, "\nconfusion (row-normalized %, rows = true class):");
    let _ = write!(out, "  {:<width$}", "");
    for j in 0..report.label_space.len() {
        let _ = write!(out, " {j:>6}");
    }
    out.push('\n');
    for (i, row) in report.row_normalized().iter().enumerate() {
        let _ = write!(out, "  {:<width$}", report.label_space[i]);
        for v in row {
            let _ = write!(out, " {:>6.1}", 100.0 * v);
        }
        let _ = writeln!(out, "  [{i}]");
    }
    out
}

pub fn write_report(report: &EvalReport, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
    let dir = dir.as_ref();
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv, report_csv(report)).map_err(|e| Error::io(&csv, e))?;
    let txt = dir.join(format!("{stem}.txt"));
    std::fs::write(&txt, report_text(report)).map_err(|e| Error::io(&txt, e))
}

/// Benchmark-level inputs shared by every pipeline run.
#[derive(Debug, Clone, Copy)]
pub struct PipelineData<'a> {
    pub ground: &'a Dataset,
    pub real_aerial: &'a Dataset,
    pub games: Option<&'a Dataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub split: SplitSpec,
    pub gan: GanConfig,
    pub dml: DmlConfig,
    /// Generated records per ground record.
    pub per_record: usize,
    /// Standardize every feature dimension with statistics of the training
    /// ground, k-shot aerial and game records.
    pub standardize: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            split: SplitSpec::default(),
            gan: GanConfig::default(),
            dml: DmlConfig::default(),
            per_record: 1,
            standardize: false,
        }
    }
}

/// Seed-dependent sub-seeds of one pipeline run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineSeeds {
    pub split: u64,
    pub kshot: u64,
    pub gan: u64,
    pub synthesize: u64,
    pub dml: u64,
}

impl PipelineSeeds {
    pub fn new(seed: u64) -> Self {
        Self {
            split: rng::derive_seed(seed, 0),
            kshot: rng::derive_seed(seed, 1),
            gan: rng::derive_seed(seed, 2),
            synthesize: rng::derive_seed(seed, 3),
            dml: rng::derive_seed(seed, 4),
        }
    }
}

/// Train/val/test split of the real aerial set for one seed.
pub fn pipeline_split(data: &PipelineData<'_>, config: &PipelineConfig, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let spec = SplitSpec {
        seed: PipelineSeeds::new(seed).split,
        ..config.split
    };
    split(data.real_aerial, &spec)
}

/// Split, sample k shots, synthesize features if any mode needs them, train
/// every requested mode, and evaluate each on the held-out test split.
///
/// A games-plus-generated run reuses the games-mode network of the same seed
/// as its warm start when games mode is also requested.
pub fn run_pipeline(
    data: &PipelineData<'_>,
    config: &PipelineConfig,
    modes: &[DmlMode],
    k: usize,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    let seeds = PipelineSeeds::new(seed);
    let (train, val, test) = pipeline_split(data, config, seed)?;
    let few = kshot_sample(&train, k, seeds.kshot)?;
    let (ground, few, val, test, games) = if config.standardize {
        let mut fit_on = vec![data.ground, &few];
        fit_on.extend(data.games);
        let s = Standardizer::fit(&fit_on)?;
        let games = data.games.map(|g| s.apply(g)).transpose()?;
        (s.apply(data.ground)?, s.apply(&few)?, s.apply(&val)?, s.apply(&test)?, games)
    } else {
        (data.ground.clone(), few, val, test, data.games.cloned())
    };
    let ground = &ground;
    let generated = if modes
        .iter()
        .any(|m| matches!(m, DmlMode::Generated | DmlMode::GamesPlusGenerated))
    {
        let gan = train_wcgan(ground, &few, &config.gan, seeds.gan)?;
        Some(synthesize_features(&gan.generator, ground, config.per_record, seeds.synthesize)?)
    } else {
        None
    };
    let mut games_net = None;
    let mut reports = Vec::with_capacity(modes.len());
    for &mode in modes {
        let inputs = DmlInputs {
            real: &few,
            val: &val,
            games: games.as_ref(),
            generated: generated.as_ref(),
            warm_start: if mode == DmlMode::GamesPlusGenerated { games_net.as_ref() } else { None },
        };
        let inputs = match mode {
            DmlMode::Baseline => DmlInputs {
                games: None,
                generated: None,
                ..inputs
            },
            _ => inputs,
        };
        let trained = train_dml(mode, &inputs, &config.dml, seeds.dml)?;
        reports.push(evaluate(&trained, &test)?.with_provenance(vec![seed], ""));
        if mode == DmlMode::Games {
            games_net = Some(trained.net);
        }
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KShotPoint {
    pub k: usize,
    pub mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub std: f64,
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KShotCurve {
    pub mode: DmlMode,
    pub points: Vec<KShotPoint>,
}

impl KShotCurve {
    pub fn at(&self, k: usize) -> Option<&KShotPoint> {
        self.points.iter().find(|p| p.k == k)
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Number of worker threads: `FEWSHOT_DML_THREADS` if set, else the
/// available parallelism.
pub fn thread_budget() -> usize {
    std::env::var("FEWSHOT_DML_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Map `f` over `items` on up to `threads` scoped threads; results keep the
/// input order.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Run the pipeline for every `(k, seed)` cell and aggregate one curve per
/// mode. Every k is checked against every seed's training split before any
/// training starts.
pub fn kshot_sweep(
    data: &PipelineData<'_>,
    config: &PipelineConfig,
    modes: &[DmlMode],
    ks: &[usize],
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<KShotCurve>> {
    if ks.is_empty() || seeds.is_empty() || modes.is_empty() {
        return Err(Error::Input("a sweep needs at least one k, seed and mode".into()));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks[0] == 0 {
        return Err(Error::Input("k must be positive".into()));
    }
    let max_k = ks[ks.len() - 1];
    for &seed in seeds {
        let (train, _, _) = pipeline_split(data, config, seed)?;
        let smallest = train.class_counts().into_iter().min().unwrap_or(0);
        if max_k > smallest {
            return Err(Error::Dataset(format!(
                "k = {max_k} exceeds the smallest training class ({smallest} records) for seed {seed}"
            )));
        }
    }
    let cells: Vec<(usize, u64)> = ks
        .iter()
        .flat_map(|&k| seeds.iter().map(move |&s| (k, s)))
        .collect();
    let results = parallel_map(&cells, threads, |&(k, seed)| run_pipeline(data, config, modes, k, seed));
    let mut by_cell = Vec::with_capacity(results.len());
    for (r, &(k, seed)) in results.into_iter().zip(&cells) {
        by_cell.push(r.map_err(|e| Error::Training(format!("k = {k}, seed {seed}: {e}")))?);
    }
    Ok(modes
        .iter()
        .enumerate()
        .map(|(m, &mode)| KShotCurve {
            mode,
            points: ks
                .iter()
                .enumerate()
                .map(|(ki, &k)| {
                    let accuracies: Vec<f64> = (0..seeds.len())
                        .map(|si| by_cell[ki * seeds.len() + si][m].overall_accuracy)
                        .collect();
                    let (mean, std) = mean_std(&accuracies);
                    KShotPoint { k, mean, std, accuracies }
                })
                .collect(),
        })
        .collect())
}

pub fn curve_csv(curve: &KShotCurve) -> String {
    let mut out = String::from("k,mean,std,mode\n");
    for p in &curve.points {
        let _ = writeln!(out, "{},{},{},{}", p.k, p.mean, p.std, curve.mode);
    }
    out
}

/// Whitespace-separated columns, one block per mode separated by two blank
/// lines, as gnuplot's `index` expects.
pub fn curves_gnuplot(curves: &[KShotCurve]) -> String {
    let mut out = String::new();
    for (i, c) in curves.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        let _ = writeln!(out, "# {}\n# k mean std", c.mode);
        for p in &c.points {
            let _ = writeln!(out, "{} {} {}", p.k, p.mean, p.std);
        }
    }
    out
}
