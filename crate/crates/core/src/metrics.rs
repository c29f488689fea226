//! Evaluation and experiment reports.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{Dataset, ExampleId, FeatureVector, Featurizer};
use crate::engine::{EngineError, Ensemble, Sisa, SisaConfig, Trained, TrainingSet};
use crate::learner::{argmax, HeadMode, LearnerError, ModelParams};
use crate::partition::{make_plan, PartitionError, PartitionStrategy};
use crate::requests::{sample_requests, RequestDistribution, RequestError};
use crate::store::{CheckpointStore, StoreError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("test set is empty")]
    EmptyTest,
    #[error("invalid experiment grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Requests(#[from] RequestError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Anything that maps a feature vector to a class index.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    fn classify(&self, x: &FeatureVector) -> Result<usize, LearnerError>;
}

impl Classifier for ModelParams {
    fn num_classes(&self) -> usize {
        self.dims.num_classes
    }

    fn classify(&self, x: &FeatureVector) -> Result<usize, LearnerError> {
        Ok(argmax(&self.predict_proba(x)?))
    }
}

impl Classifier for Ensemble {
    fn num_classes(&self) -> usize {
        Ensemble::num_classes(self)
    }

    fn classify(&self, x: &FeatureVector) -> Result<usize, LearnerError> {
        Ok(self.predict(x)?.0)
    }
}

/// Featurized test examples.
#[derive(Debug, Clone)]
pub struct TestSet {
    items: Vec<(FeatureVector, usize)>,
}

impl TestSet {
    pub fn new(ds: &Dataset, featurizer: &Featurizer) -> Self {
        TestSet { items: ds.examples().iter().map(|ex| (featurizer.featurize(ex), ex.label)).collect() }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub support: u64,
    pub correct: u64,
    pub predicted: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigEcho {
    pub shards: usize,
    pub slices: usize,
    pub mode: HeadMode,
    pub distribution: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub correct: u64,
    pub n_test: u64,
    pub per_class: Vec<ClassCounts>,
    pub config: ConfigEcho,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.n_test as f64
    }

    /// Flat `key = value` lines.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let c = &self.config;
        writeln!(w, "shards = {}", c.shards)?;
        writeln!(w, "slices = {}", c.slices)?;
        writeln!(w, "mode = {}", c.mode)?;
        writeln!(w, "distribution = {}", c.distribution)?;
        writeln!(w, "seed = {}", c.seed)?;
        writeln!(w, "n_test = {}", self.n_test)?;
        writeln!(w, "correct = {}", self.correct)?;
        writeln!(w, "accuracy = {:.6}", self.accuracy())?;
        for (k, cc) in self.per_class.iter().enumerate() {
            writeln!(w, "class.{k} = support {} correct {} predicted {}", cc.support, cc.correct, cc.predicted)?;
        }
        Ok(())
    }
}

pub fn evaluate<C: Classifier + ?Sized>(model: &C, test: &TestSet, config: ConfigEcho) -> Result<EvalReport, MetricsError> {
    if test.is_empty() {
        return Err(MetricsError::EmptyTest);
    }
    let mut per_class = vec![ClassCounts::default(); model.num_classes()];
    let mut correct = 0u64;
    for (x, label) in &test.items {
        let pred = model.classify(x)?;
        per_class[*label].support += 1;
        per_class[pred].predicted += 1;
        if pred == *label {
            per_class[*label].correct += 1;
            correct += 1;
        }
    }
    Ok(EvalReport { correct, n_test: test.len() as u64, per_class, config })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentGrid {
    pub modes: Vec<HeadMode>,
    pub slices: Vec<usize>,
    /// Request counts after which accuracy is measured; the stream runs to the largest.
    pub request_counts: Vec<usize>,
    pub distributions: Vec<RequestDistribution>,
    pub seeds: Vec<u64>,
    pub include_baseline: bool,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let empty = [
            ("modes", self.modes.is_empty()),
            ("slices", self.slices.is_empty()),
            ("request_counts", self.request_counts.is_empty()),
            ("distributions", self.distributions.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(MetricsError::Grid(format!("{name} is empty")));
        }
        if self.slices.contains(&0) || self.request_counts.contains(&0) {
            return Err(MetricsError::Grid("slice and request counts must be positive".into()));
        }
        for d in &self.distributions {
            d.validate()?;
        }
        Ok(())
    }
}

/// Settings shared by every cell of an experiment.
#[derive(Debug, Clone)]
pub struct ExperimentSetup {
    pub dataset_name: String,
    pub shards: usize,
    pub strategy: PartitionStrategy,
    /// Mode and seed are overridden per cell.
    pub base: SisaConfig,
    pub featurizer: Featurizer,
    /// Checkpoints go under here; a temporary directory is used otherwise.
    pub work_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub mode: HeadMode,
    pub slices: usize,
    pub distribution: String,
    pub seed: u64,
    pub request_index: usize,
    pub correct: u64,
    pub n_test: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrainRow {
    pub mode: HeadMode,
    pub slices: usize,
    pub distribution: String,
    pub seed: u64,
    pub request_index: usize,
    pub cumulative_steps: u64,
    pub incremental_steps: u64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRow {
    pub mode: HeadMode,
    pub slices: usize,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRow {
    pub mode: HeadMode,
    pub seed: u64,
    pub n_train: usize,
    pub correct: u64,
    pub n_test: u64,
    pub gradient_steps: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentReport {
    pub dataset: String,
    pub accuracy: Vec<AccuracyRow>,
    pub retrain: Vec<RetrainRow>,
    pub memory: Vec<MemoryRow>,
    pub baseline: Vec<BaselineRow>,
}

fn ratio(correct: u64, n: u64) -> String {
    format!("{:.6}", correct as f64 / n as f64)
}

impl ExperimentReport {
    /// Writes `accuracy.csv`, `retrain.csv`, `memory.csv` and `baseline.csv`.
    pub fn write_csvs(&self, dir: &Path) -> Result<(), MetricsError> {
        std::fs::create_dir_all(dir)?;
        let d = self.dataset.as_str();

        let mut w = csv::Writer::from_path(dir.join("accuracy.csv"))?;
        w.write_record(["dataset", "mode", "R", "distribution", "seed", "request_index", "accuracy", "correct", "n_test"])?;
        for r in &self.accuracy {
            w.write_record([
                d.to_string(),
                r.mode.to_string(),
                r.slices.to_string(),
                r.distribution.clone(),
                r.seed.to_string(),
                r.request_index.to_string(),
                ratio(r.correct, r.n_test),
                r.correct.to_string(),
                r.n_test.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("retrain.csv"))?;
        w.write_record([
            "dataset", "mode", "R", "distribution", "seed", "request_index", "cumulative_steps", "incremental_steps", "wall_ms",
        ])?;
        for r in &self.retrain {
            w.write_record([
                d.to_string(),
                r.mode.to_string(),
                r.slices.to_string(),
                r.distribution.clone(),
                r.seed.to_string(),
                r.request_index.to_string(),
                r.cumulative_steps.to_string(),
                r.incremental_steps.to_string(),
                r.wall_ms.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("memory.csv"))?;
        w.write_record(["mode", "R", "total_bytes"])?;
        for r in &self.memory {
            w.write_record([r.mode.to_string(), r.slices.to_string(), r.total_bytes.to_string()])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("baseline.csv"))?;
        w.write_record(["dataset", "mode", "seed", "n_train", "accuracy", "correct", "n_test", "gradient_steps"])?;
        for r in &self.baseline {
            w.write_record([
                d.to_string(),
                r.mode.to_string(),
                r.seed.to_string(),
                r.n_train.to_string(),
                ratio(r.correct, r.n_test),
                r.correct.to_string(),
                r.n_test.to_string(),
                r.gradient_steps.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn work_root(setup: &ExperimentSetup) -> Result<(Option<tempfile::TempDir>, PathBuf), MetricsError> {
    match &setup.work_dir {
        Some(p) => {
            std::fs::create_dir_all(p)?;
            Ok((None, p.clone()))
        }
        None => {
            let t = tempfile::tempdir()?;
            let p = t.path().to_path_buf();
            Ok((Some(t), p))
        }
    }
}

fn fresh_store(path: &Path) -> Result<CheckpointStore, MetricsError> {
    if path.exists() {
        std::fs::remove_dir_all(path)?;
    }
    Ok(CheckpointStore::open(path)?)
}

/// Copy of every checkpoint in `src` into a fresh store at `dst`.
fn fork_store(src: &CheckpointStore, dst: &Path) -> Result<CheckpointStore, MetricsError> {
    let store = fresh_store(dst)?;
    for (s, r) in src.keys() {
        std::fs::copy(src.path_for(s, r), store.path_for(s, r))?;
    }
    Ok(CheckpointStore::open(dst)?)
}

fn cell_engine(setup: &ExperimentSetup, mode: HeadMode, seed: u64) -> Result<Sisa, MetricsError> {
    let mut cfg = setup.base.clone();
    cfg.mode = mode;
    cfg.train.global_seed = seed;
    Ok(Sisa::new(cfg)?)
}

/// Stream `ids` through `unlearn` one at a time; returns per-request
/// (incremental steps, wall ms), calling `after(k, state)` after request `k`.
fn stream_requests(
    sisa: &Sisa,
    state: &mut Trained,
    data: &TrainingSet,
    store: &CheckpointStore,
    ids: &[ExampleId],
    mut after: impl FnMut(usize, &Trained) -> Result<(), MetricsError>,
) -> Result<Vec<(u64, u64)>, MetricsError> {
    let mut out = Vec::with_capacity(ids.len());
    for (k, id) in ids.iter().enumerate() {
        let ledger = sisa.unlearn(state, data, store, &[*id])?;
        out.push((ledger.gradient_steps, ledger.wall_clock_ms));
        after(k + 1, state)?;
    }
    Ok(out)
}

/// Train, stream requests, unlearn and evaluate for every grid cell.
pub fn run_experiment(
    grid: &ExperimentGrid,
    setup: &ExperimentSetup,
    train: &Dataset,
    test: &Dataset,
) -> Result<ExperimentReport, MetricsError> {
    grid.validate()?;
    if test.is_empty() {
        return Err(MetricsError::EmptyTest);
    }
    let testset = TestSet::new(test, &setup.featurizer);
    let checkpoints: BTreeSet<usize> = grid.request_counts.iter().copied().collect();
    let max_requests = *checkpoints.iter().next_back().unwrap();
    let (_guard, root) = work_root(setup)?;
    let mut report = ExperimentReport { dataset: setup.dataset_name.clone(), ..Default::default() };
    let mut memory_seen = BTreeSet::new();

    for &mode in &grid.modes {
        for &seed in &grid.seeds {
            let sisa = cell_engine(setup, mode, seed)?;
            let data = sisa.prepare(train, &setup.featurizer);
            let echo = |slices: usize, distribution: &str| ConfigEcho {
                shards: setup.shards,
                slices,
                mode,
                distribution: distribution.to_string(),
                seed,
            };
            if grid.include_baseline {
                let (model, ledger) = sisa.baseline_train(&data)?;
                let rep = evaluate(&model, &testset, echo(1, "none"))?;
                report.baseline.push(BaselineRow {
                    mode,
                    seed,
                    n_train: data.len(),
                    correct: rep.correct,
                    n_test: rep.n_test,
                    gradient_steps: ledger.gradient_steps,
                });
            }
            for &slices in &grid.slices {
                let plan = make_plan(&train.ids(), setup.shards, slices, &setup.strategy, seed)?;
                let base_store = fresh_store(&root.join("trained"))?;
                let (trained, _) = sisa.train_all(&plan, &data, &base_store)?;
                if memory_seen.insert((mode, slices)) {
                    report.memory.push(MemoryRow { mode, slices, total_bytes: base_store.total_bytes() });
                }
                let start = evaluate(&trained.ensemble, &testset, echo(slices, "none"))?;
                for dist in &grid.distributions {
                    let name = dist.name();
                    report.accuracy.push(AccuracyRow {
                        mode,
                        slices,
                        distribution: name.to_string(),
                        seed,
                        request_index: 0,
                        correct: start.correct,
                        n_test: start.n_test,
                    });
                    let stream = sample_requests(&plan, *dist, max_requests, seed)?;
                    let store = fork_store(&base_store, &root.join("cell"))?;
                    let mut state = trained.clone();
                    let mut acc_rows = Vec::new();
                    let costs = stream_requests(&sisa, &mut state, &data, &store, &stream.ids, |k, st| {
                        if checkpoints.contains(&k) {
                            let rep = evaluate(&st.ensemble, &testset, echo(slices, name))?;
                            acc_rows.push(AccuracyRow {
                                mode,
                                slices,
                                distribution: name.to_string(),
                                seed,
                                request_index: k,
                                correct: rep.correct,
                                n_test: rep.n_test,
                            });
                        }
                        Ok(())
                    })?;
                    report.accuracy.extend(acc_rows);
                    let mut cumulative = 0;
                    for (k, (steps, wall)) in costs.into_iter().enumerate() {
                        cumulative += steps;
                        report.retrain.push(RetrainRow {
                            mode,
                            slices,
                            distribution: name.to_string(),
                            seed,
                            request_index: k + 1,
                            cumulative_steps: cumulative,
                            incremental_steps: steps,
                            wall_ms: wall,
                        });
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Mean, sample standard deviation and normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanCi {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

const Z_TWO_SIDED_95: f64 = 1.959_963_984_540_054;
const Z_ONE_SIDED_95: f64 = 1.644_853_626_951_472_2;

pub fn mean_ci(values: &[f64]) -> MeanCi {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let half = Z_TWO_SIDED_95 * sd / (n as f64).sqrt();
    MeanCi { n, mean, sd, lo: mean - half, hi: mean + half }
}

/// One-sided paired test at 95%: is `a` smaller than `b` on average?
pub fn paired_less(a: &[f64], b: &[f64]) -> bool {
    assert_eq!(a.len(), b.len());
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let ci = mean_ci(&d);
    ci.mean - Z_ONE_SIDED_95 * ci.sd / (ci.n as f64).sqrt() > 0.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionSummary {
    pub distribution: RequestDistribution,
    /// Total retraining steps over the stream, one entry per seed.
    pub cumulative: Vec<f64>,
    /// Mean incremental steps at each request index, across seeds.
    pub incremental_by_request: Vec<f64>,
    pub ci: MeanCi,
}

impl DistributionSummary {
    pub fn first_half_mean(&self) -> f64 {
        let h = self.incremental_by_request.len() / 2;
        self.incremental_by_request[..h].iter().sum::<f64>() / h as f64
    }

    pub fn second_half_mean(&self) -> f64 {
        let v = &self.incremental_by_request;
        let h = v.len() / 2;
        v[h..].iter().sum::<f64>() / (v.len() - h) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionComparison {
    pub slices: usize,
    pub n_requests: usize,
    pub seeds: Vec<u64>,
    pub summaries: Vec<DistributionSummary>,
}

impl DistributionComparison {
    pub fn get(&self, name: &str) -> Option<&DistributionSummary> {
        self.summaries.iter().find(|s| s.distribution.name() == name)
    }

    /// Inverse Pareto < uniform < Pareto, each step a paired one-sided test
    /// at 95%. `None` unless all three were run.
    pub fn ordering_holds(&self) -> Option<bool> {
        let ip = self.get("inverse-pareto")?;
        let u = self.get("uniform")?;
        let p = self.get("pareto")?;
        Some(paired_less(&ip.cumulative, &u.cumulative) && paired_less(&u.cumulative, &p.cumulative))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MetricsError> {
        let ordering = match self.ordering_holds() {
            Some(b) => b.to_string(),
            None => "n/a".to_string(),
        };
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "distribution",
            "R",
            "requests",
            "seeds",
            "mean_cumulative_steps",
            "sd",
            "ci95_low",
            "ci95_high",
            "first_half_incremental",
            "second_half_incremental",
            "ordering_holds",
        ])?;
        for s in &self.summaries {
            w.write_record([
                s.distribution.name().to_string(),
                self.slices.to_string(),
                self.n_requests.to_string(),
                s.ci.n.to_string(),
                format!("{:.3}", s.ci.mean),
                format!("{:.3}", s.ci.sd),
                format!("{:.3}", s.ci.lo),
                format!("{:.3}", s.ci.hi),
                format!("{:.3}", s.first_half_mean()),
                format!("{:.3}", s.second_half_mean()),
                ordering.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Retraining cost of `n_requests` single-id requests under each
/// distribution, from the same trained state per seed.
pub fn compare_distributions(
    setup: &ExperimentSetup,
    train: &Dataset,
    slices: usize,
    n_requests: usize,
    seeds: &[u64],
    distributions: &[RequestDistribution],
) -> Result<DistributionComparison, MetricsError> {
    if seeds.len() < 2 {
        return Err(MetricsError::Grid("need at least two seeds".into()));
    }
    if n_requests < 2 || distributions.is_empty() {
        return Err(MetricsError::Grid("need at least two requests and one distribution".into()));
    }
    let (_guard, root) = work_root(setup)?;
    let mut cumulative = vec![Vec::with_capacity(seeds.len()); distributions.len()];
    let mut incremental = vec![vec![0.0; n_requests]; distributions.len()];
    for &seed in seeds {
        let sisa = cell_engine(setup, setup.base.mode, seed)?;
        let data = sisa.prepare(train, &setup.featurizer);
        let plan = make_plan(&train.ids(), setup.shards, slices, &setup.strategy, seed)?;
        let base_store = fresh_store(&root.join("trained"))?;
        let (trained, _) = sisa.train_all(&plan, &data, &base_store)?;
        for (d, dist) in distributions.iter().enumerate() {
            let stream = sample_requests(&plan, *dist, n_requests, seed)?;
            let store = fork_store(&base_store, &root.join("cell"))?;
            let mut state = trained.clone();
            let costs = stream_requests(&sisa, &mut state, &data, &store, &stream.ids, |_, _| Ok(()))?;
            cumulative[d].push(costs.iter().map(|c| c.0 as f64).sum());
            for (k, c) in costs.iter().enumerate() {
                incremental[d][k] += c.0 as f64 / seeds.len() as f64;
            }
        }
    }
    let summaries = distributions
        .iter()
        .zip(cumulative)
        .zip(incremental)
        .map(|((dist, cum), inc)| DistributionSummary {
            distribution: *dist,
            ci: mean_ci(&cum),
            cumulative: cum,
            incremental_by_request: inc,
        })
        .collect();
    Ok(DistributionComparison { slices, n_requests, seeds: seeds.to_vec(), summaries })
}
