//! Subcommand implementations.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sisa_core::data::{load_glue_tsv, split_train_test, synth_generate, Dataset, Featurizer, SynthSpec, TaskSchema};
use sisa_core::engine::{CostLedger, Ensemble, Sisa, SisaConfig, Trained};
use sisa_core::learner::{Backbone, HeadMode, ModelDims, TrainConfig};
use sisa_core::metrics::{
    compare_distributions, evaluate, run_experiment, ConfigEcho, ExperimentGrid, ExperimentSetup, TestSet,
};
use sisa_core::partition::{make_plan, PartitionPlan, PartitionStrategy};
use sisa_core::requests::{sample_requests, RequestDistribution, RequestStream};
use sisa_core::store::{
    read_backbone_file, read_checkpoint_file, write_atomic, write_backbone_file, CheckpointStore,
};

use crate::config::{parse_list, RunConfig};
use crate::failure::Failure;
use crate::rundir::RunDir;

fn schema_for(cfg: &RunConfig) -> Result<TaskSchema, Failure> {
    if cfg.dataset == "synthetic" {
        return Ok(TaskSchema::synthetic(cfg.synth_classes));
    }
    TaskSchema::by_name(&cfg.task).ok_or_else(|| Failure::Usage(format!("unknown task `{}`", cfg.task)))
}

fn featurizer(cfg: &RunConfig) -> Result<Featurizer, Failure> {
    Featurizer::new(cfg.hash_dim, cfg.token_cap).map_err(|e| Failure::Usage(e.to_string()))
}

fn engine_config(cfg: &RunConfig, num_classes: usize) -> Result<SisaConfig, Failure> {
    let dims = ModelDims::new(cfg.hash_dim, cfg.hidden, num_classes)?;
    let train = TrainConfig {
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch,
        epochs: cfg.epochs,
        global_seed: cfg.seed,
    };
    let mut sc = SisaConfig::new(dims, cfg.head_mode(), train);
    sc.slice_mode = cfg.slice_mode;
    sc.vote = cfg.vote;
    sc.workers = cfg.workers;
    sc.record_wall_clock = cfg.wall_clock;
    Ok(sc)
}

fn read_split(dir: &RunDir, cfg: &RunConfig, path: PathBuf) -> Result<Dataset, Failure> {
    if !path.exists() {
        return Err(Failure::State(format!(
            "{} has no ingested data; run `sisa ingest` first",
            dir.root().display()
        )));
    }
    let f = File::open(&path)?;
    Ok(Dataset::read_records(schema_for(cfg)?, BufReader::new(f))?)
}

fn save_config(dir: &RunDir, cfg: &RunConfig) -> Result<(), Failure> {
    write_atomic(&dir.config_path(), cfg.render().as_bytes())?;
    Ok(())
}

fn write_with<F>(path: &Path, f: F) -> Result<(), Failure>
where
    F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)?;
    Ok(())
}

pub fn ingest(dir: &RunDir, cfg: &RunConfig) -> Result<(), Failure> {
    let _lock = dir.lock(true)?;
    let schema = schema_for(cfg)?;
    let (ds, skipped) = if cfg.dataset == "synthetic" {
        let spec = SynthSpec {
            num_classes: cfg.synth_classes,
            vocab_size: cfg.synth_vocab,
            tokens_per_example: cfg.synth_tokens,
            n: cfg.synth_n,
            separation: cfg.synth_separation,
            seed: cfg.seed,
        };
        (synth_generate(&spec)?, 0)
    } else {
        load_glue_tsv(Path::new(&cfg.dataset), &schema, cfg.limit)?
    };
    let (train, test) = split_train_test(&ds, cfg.test_fraction, cfg.seed)?;
    write_with(&dir.train_path(), |w| train.write_records(w).map_err(std::io::Error::other))?;
    write_with(&dir.test_path(), |w| test.write_records(w).map_err(std::io::Error::other))?;
    save_config(dir, cfg)?;
    println!(
        "ingested {} examples ({} skipped): {} train, {} test",
        ds.len(),
        skipped,
        train.len(),
        test.len()
    );
    Ok(())
}

fn strategy(cfg: &RunConfig) -> Result<PartitionStrategy, Failure> {
    match cfg.strategy.as_str() {
        "uniform" => Ok(PartitionStrategy::UniformRandom),
        "sequential" => Ok(PartitionStrategy::Sequential),
        _ => {
            let path = cfg.risk_file.as_ref().ok_or_else(|| Failure::Usage("strategy `risk` needs `risk_file`".into()))?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Data(format!("cannot read risk file {}: {e}", path.display())))?;
            let mut scores = HashMap::new();
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let bad = || Failure::Data(format!("{}:{}: expected `id<TAB>score`", path.display(), n + 1));
                let (id, score) = line.split_once('\t').ok_or_else(bad)?;
                scores.insert(id.trim().parse().map_err(|_| bad())?, score.trim().parse().map_err(|_| bad())?);
            }
            Ok(PartitionStrategy::RiskProfiled(scores))
        }
    }
}

fn save_models(dir: &RunDir, store: &CheckpointStore, plan: &PartitionPlan) -> Result<(), Failure> {
    std::fs::create_dir_all(dir.models())?;
    let last = (plan.num_slices() - 1) as u32;
    for s in 0..plan.num_shards() {
        let bytes = std::fs::read(store.path_for(s as u32, last))?;
        write_atomic(&dir.model_path(s), &bytes)?;
    }
    Ok(())
}

fn append_ledger(dir: &RunDir, ledger: &CostLedger) -> Result<(), Failure> {
    let path = dir.ledger_path();
    let header = !path.exists();
    let f = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
    let mut w = BufWriter::new(f);
    ledger.write_csv(&mut w, header)?;
    w.flush()?;
    Ok(())
}

pub fn train(dir: &RunDir, cfg: &RunConfig) -> Result<(), Failure> {
    let _lock = dir.lock(false)?;
    let train = read_split(dir, cfg, dir.train_path())?.head_fraction(cfg.data_fraction);
    let sisa = Sisa::new(engine_config(cfg, train.schema().num_classes())?)?;
    let plan = make_plan(&train.ids(), cfg.shards, cfg.slices, &strategy(cfg)?, cfg.seed)?;
    let data = sisa.prepare(&train, &featurizer(cfg)?);

    let store = CheckpointStore::open(dir.checkpoints())?;
    store.clear()?;
    if dir.models().exists() {
        std::fs::remove_dir_all(dir.models())?;
    }
    if dir.ledger_path().exists() {
        std::fs::remove_file(dir.ledger_path())?;
    }
    write_backbone_file(&dir.backbone_path(), sisa.backbone())?;
    write_with(&dir.plan_path(), |w| plan.write_tsv(w))?;

    let (_, ledger) = sisa.train_all(&plan, &data, &store)?;
    save_models(dir, &store, &plan)?;
    append_ledger(dir, &ledger)?;
    save_config(dir, cfg)?;
    println!(
        "trained {} shards x {} slices on {} examples: {} gradient steps, {} checkpoint bytes",
        cfg.shards,
        cfg.slices,
        train.len(),
        ledger.gradient_steps,
        store.total_bytes()
    );
    Ok(())
}

fn read_plan(dir: &RunDir, cfg: &RunConfig) -> Result<PartitionPlan, Failure> {
    let path = dir.plan_path();
    if !path.exists() {
        return Err(Failure::State(format!("{} has no plan; run `sisa train` first", dir.root().display())));
    }
    PartitionPlan::read_tsv(BufReader::new(File::open(&path)?), cfg.shards, cfg.slices)
        .map_err(|e| Failure::State(format!("{}: {e}", path.display())))
}

pub fn request(dir: &RunDir, cfg: &RunConfig, out: Option<PathBuf>) -> Result<(), Failure> {
    let _lock = dir.lock(false)?;
    let plan = read_plan(dir, cfg)?;
    let dist = cfg.request_distribution().map_err(Failure::Usage)?;
    let stream = sample_requests(&plan, dist, cfg.requests, cfg.seed)?;
    let out = out.unwrap_or_else(|| dir.requests_path());
    write_with(&out, |w| stream.write(w))?;
    println!("wrote {} {} requests to {}", stream.ids.len(), dist.name(), out.display());
    Ok(())
}

/// Engine with the stored backbone, which must match the configured seed.
fn load_engine(dir: &RunDir, cfg: &RunConfig, num_classes: usize) -> Result<Sisa, Failure> {
    let sc = engine_config(cfg, num_classes)?;
    let backbone = read_backbone_file(&dir.backbone_path())?;
    if backbone != Backbone::generate(sc.dims, cfg.seed) {
        return Err(Failure::State(
            "stored backbone does not match the configured seed and dims; retrain or restore the config".into(),
        ));
    }
    Ok(Sisa::with_backbone(sc, Arc::new(backbone))?)
}

fn require_models(dir: &RunDir, cfg: &RunConfig) -> Result<(), Failure> {
    let present = (0..cfg.shards).all(|s| dir.model_path(s).exists());
    if !present {
        return Err(Failure::State(format!(
            "no models found in {}; run `sisa train` first",
            dir.models().display()
        )));
    }
    Ok(())
}

fn load_ensemble(dir: &RunDir, cfg: &RunConfig, sisa: &Sisa) -> Result<Ensemble, Failure> {
    let models = (0..cfg.shards)
        .map(|s| {
            let cp = read_checkpoint_file(&dir.model_path(s))?;
            if cp.shard as usize != s {
                return Err(Failure::State(format!("{} holds shard {}", dir.model_path(s).display(), cp.shard)));
            }
            Ok(sisa.params_from_checkpoint(&cp)?)
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    Ok(Ensemble::new(models, cfg.vote)?)
}

pub fn unlearn(dir: &RunDir, cfg: &RunConfig, requests: Option<PathBuf>) -> Result<(), Failure> {
    let _lock = dir.lock(false)?;
    require_models(dir, cfg)?;
    let req_path = requests.unwrap_or_else(|| dir.requests_path());
    let f = File::open(&req_path).map_err(|e| Failure::Data(format!("cannot read requests {}: {e}", req_path.display())))?;
    let stream = RequestStream::read(BufReader::new(f))?;

    let plan = read_plan(dir, cfg)?;
    let mut seen = HashSet::new();
    let dup: Vec<u64> = stream.ids.iter().copied().filter(|id| !seen.insert(*id)).collect();
    if !dup.is_empty() {
        return Err(Failure::Data(format!("request stream repeats ids {dup:?}")));
    }
    let mut missing: Vec<u64> = stream.ids.iter().copied().filter(|id| !plan.contains(*id)).collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        return Err(Failure::Data(format!("ids not found in plan: {missing:?}")));
    }

    let all = read_split(dir, cfg, dir.train_path())?;
    let live: HashSet<u64> = plan.ordered_ids().into_iter().collect();
    let absent: HashSet<u64> = all.ids().into_iter().filter(|id| !live.contains(id)).collect();
    let sisa = load_engine(dir, cfg, all.schema().num_classes())?;
    let data = sisa.prepare(&all.without(&absent), &featurizer(cfg)?);
    let store = CheckpointStore::open(dir.checkpoints())?;
    let mut state = Trained { ensemble: load_ensemble(dir, cfg, &sisa)?, plan };

    let mut total = CostLedger::default();
    for id in &stream.ids {
        let ledger = sisa.unlearn(&mut state, &data, &store, &[*id])?;
        write_with(&dir.plan_path(), |w| state.plan.write_tsv(w))?;
        append_ledger(dir, &ledger)?;
        total.merge(ledger);
    }
    save_models(dir, &store, &state.plan)?;
    let gone: HashSet<u64> = stream.ids.iter().copied().collect();
    let kept = all.without(&gone);
    write_with(&dir.train_path(), |w| kept.write_records(w).map_err(std::io::Error::other))?;
    println!(
        "unlearned {} ids with {} retraining gradient steps ({} events)",
        stream.ids.len(),
        total.gradient_steps,
        total.events.len()
    );
    Ok(())
}

pub fn eval(dir: &RunDir, cfg: &RunConfig) -> Result<(), Failure> {
    require_models(dir, cfg)?;
    let _lock = dir.lock(false)?;
    let test = read_split(dir, cfg, dir.test_path())?;
    let sisa = load_engine(dir, cfg, test.schema().num_classes())?;
    let ensemble = load_ensemble(dir, cfg, &sisa)?;
    let echo = ConfigEcho {
        shards: cfg.shards,
        slices: cfg.slices,
        mode: cfg.head_mode(),
        distribution: cfg.distribution.clone(),
        seed: cfg.seed,
    };
    let report = evaluate(&ensemble, &TestSet::new(&test, &featurizer(cfg)?), echo)?;
    std::fs::create_dir_all(dir.reports())?;
    let path = dir.reports().join("eval.txt");
    write_with(&path, |w| report.write(w))?;
    println!("accuracy {}/{} = {:.6} -> {}", report.correct, report.n_test, report.accuracy(), path.display());
    Ok(())
}

fn grid(cfg: &RunConfig) -> Result<ExperimentGrid, Failure> {
    let modes = if cfg.sim_modes.trim().is_empty() {
        vec![cfg.head_mode()]
    } else {
        parse_list::<HeadMode>("sim_modes", &cfg.sim_modes).map_err(Failure::Usage)?
    };
    let distributions = cfg
        .sim_distributions
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|d| RequestDistribution::parse(d, cfg.pareto_m, cfg.pareto_a))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(ExperimentGrid {
        modes,
        slices: parse_list("sim_slices", &cfg.sim_slices).map_err(Failure::Usage)?,
        request_counts: parse_list("sim_requests", &cfg.sim_requests).map_err(Failure::Usage)?,
        distributions,
        seeds: parse_list("sim_seeds", &cfg.sim_seeds).map_err(Failure::Usage)?,
        include_baseline: cfg.sim_baseline,
    })
}

pub fn simulate(dir: &RunDir, cfg: &RunConfig) -> Result<(), Failure> {
    let _lock = dir.lock(false)?;
    let grid = grid(cfg)?;
    let train = read_split(dir, cfg, dir.train_path())?.head_fraction(cfg.data_fraction);
    let test = read_split(dir, cfg, dir.test_path())?;
    let work = dir.root().join("sim-work");
    let setup = ExperimentSetup {
        dataset_name: if cfg.dataset == "synthetic" { "synthetic".into() } else { cfg.task.clone() },
        shards: cfg.shards,
        strategy: strategy(cfg)?,
        base: engine_config(cfg, train.schema().num_classes())?,
        featurizer: featurizer(cfg)?,
        work_dir: Some(work.clone()),
    };
    let report = run_experiment(&grid, &setup, &train, &test)?;
    let reports = dir.reports();
    report.write_csvs(&reports)?;
    if cfg.sim_compare {
        let dists = [
            RequestDistribution::InversePareto { m: cfg.pareto_m, a: cfg.pareto_a },
            RequestDistribution::Uniform,
            RequestDistribution::Pareto { m: cfg.pareto_m, a: cfg.pareto_a },
        ];
        let cmp = compare_distributions(&setup, &train, cfg.slices, cfg.requests, &grid.seeds, &dists)?;
        write_with(&reports.join("distributions.csv"), |w| cmp.write_csv(w).map_err(std::io::Error::other))?;
    }
    if work.exists() {
        std::fs::remove_dir_all(&work)?;
    }
    if !report.baseline.is_empty() {
        let mean = report.baseline.iter().map(|r| r.correct as f64 / r.n_test as f64).sum::<f64>()
            / report.baseline.len() as f64;
        println!("mean baseline accuracy over {} runs: {mean:.6}", report.baseline.len());
    }
    println!(
        "simulated {} training examples (data_fraction {}): reports in {}",
        train.len(),
        cfg.data_fraction,
        reports.display()
    );
    Ok(())
}

pub fn report(dir: &RunDir, _cfg: &RunConfig) -> Result<(), Failure> {
    let _lock = dir.lock(false)?;
    let ledger_path = dir.ledger_path();
    if !ledger_path.exists() {
        return Err(Failure::State(format!("no ledger in {}; run `sisa train` first", dir.root().display())));
    }
    let ledger = CostLedger::read_csv(BufReader::new(File::open(&ledger_path)?))
        .map_err(|e| Failure::State(format!("{}: {e}", ledger_path.display())))?;
    let mut by_kind: BTreeMap<String, (u64, u64, u64, u64)> = BTreeMap::new();
    for e in &ledger.events {
        let row = by_kind.entry(e.kind.to_string()).or_default();
        row.0 += 1;
        row.1 += e.gradient_steps;
        row.2 += e.examples;
        row.3 += e.wall_ms;
    }
    let reports = dir.reports();
    std::fs::create_dir_all(&reports)?;
    write_with(&reports.join("ledger_summary.csv"), |w| {
        writeln!(w, "event,events,gradient_steps,examples,wall_ms")?;
        for (k, (n, steps, ex, ms)) in &by_kind {
            writeln!(w, "{k},{n},{steps},{ex},{ms}")?;
        }
        Ok(())
    })?;
    let store = CheckpointStore::open(dir.checkpoints())?;
    write_with(&reports.join("storage.csv"), |w| {
        writeln!(w, "mode,checkpoints,total_bytes")?;
        for (mode, usage) in store.storage_report() {
            writeln!(w, "{mode},{},{}", usage.checkpoints, usage.total_bytes)?;
        }
        Ok(())
    })?;
    for (k, (n, steps, _, _)) in &by_kind {
        println!("{k}: {n} events, {steps} gradient steps");
    }
    println!("checkpoint bytes: {}", store.total_bytes());
    Ok(())
}
