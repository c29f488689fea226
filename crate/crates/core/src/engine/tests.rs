use super::*;
use crate::data::{synth_generate, SynthSpec};
use crate::partition::{make_plan, PartitionStrategy};
use std::collections::BTreeMap;

fn dims() -> ModelDims {
    ModelDims::new(256, 32, 2).unwrap()
}

fn engine(mode: HeadMode, slice_mode: SliceMode) -> Sisa {
    let train = TrainConfig { learning_rate: 0.05, batch_size: 4, epochs: 2, global_seed: 11 };
    let mut cfg = SisaConfig::new(dims(), mode, train);
    cfg.slice_mode = slice_mode;
    cfg.record_wall_clock = false;
    Sisa::new(cfg).unwrap()
}

fn dataset(n: usize) -> Dataset {
    let spec = SynthSpec { num_classes: 2, vocab_size: 60, tokens_per_example: 8, n, separation: 0.8, seed: 5 };
    synth_generate(&spec).unwrap()
}

struct Fixture {
    sisa: Sisa,
    data: TrainingSet,
    plan: PartitionPlan,
    _dir: tempfile::TempDir,
    store: CheckpointStore,
}

fn fixture(mode: HeadMode, slice_mode: SliceMode, n: usize, shards: usize, slices: usize) -> Fixture {
    let sisa = engine(mode, slice_mode);
    let ds = dataset(n);
    let data = sisa.prepare(&ds, &Featurizer::new(256, 64).unwrap());
    let plan = make_plan(&ds.ids(), shards, slices, &PartitionStrategy::UniformRandom, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = CheckpointStore::open(dir.path()).unwrap();
    Fixture { sisa, data, plan, _dir: dir, store }
}

fn snapshot(store: &CheckpointStore) -> BTreeMap<(u32, u32), Vec<u8>> {
    store.keys().into_iter().map(|(s, r)| ((s, r), std::fs::read(store.path_for(s, r)).unwrap())).collect()
}


#[test]
fn train_all_writes_every_checkpoint_and_counts_steps() {
    let f = fixture(HeadMode::FcOnly, SliceMode::PerSlice, 120, 3, 4);
    let (trained, ledger) = f.sisa.train_all(&f.plan, &f.data, &f.store).unwrap();
    assert_eq!(trained.ensemble.len(), 3);
    assert_eq!(f.store.keys().len(), 12);
    let cfg = &f.sisa.config().train;
    let expected: u64 = (0..3)
        .flat_map(|s| (0..4).map(move |r| (s, r)))
        .map(|(s, r)| cfg.steps_for(f.plan.slice(s, r).len()))
        .sum();
    assert_eq!(ledger.gradient_steps, expected);
    assert_eq!(ledger.examples_processed, 2 * 120);
    assert_eq!(ledger.events.len(), 3);
    assert!(ledger.events.iter().all(|e| e.kind == EventKind::Train && e.slice_from == 0 && e.slice_to == 3));
}

#[test]
fn rollback_touches_only_the_affected_suffix() {
    let f = fixture(HeadMode::FcOnly, SliceMode::PerSlice, 120, 3, 4);
    let (mut trained, _) = f.sisa.train_all(&f.plan, &f.data, &f.store).unwrap();
    let before = snapshot(&f.store);
    let victim = f.plan.slice(1, 2)[3];
    let ledger = f.sisa.unlearn(&mut trained, &f.data, &f.store, &[victim]).unwrap();
    let after = snapshot(&f.store);
    for (&(s, r), bytes) in &before {
        let same = after[&(s, r)] == *bytes;
        assert_eq!(same, !(s == 1 && r >= 2), "shard {s} slice {r}");
    }
    assert_eq!(ledger.events.len(), 1);
    let e = &ledger.events[0];
    assert_eq!((e.kind, e.shard, e.slice_from, e.slice_to), (EventKind::Unlearn, Some(1), 2, 3));
    assert!(!trained.plan.contains(victim));
}

#[test]
fn unlearned_shard_matches_training_from_scratch_without_the_id() {
    for mode in [HeadMode::FcOnly, HeadMode::Full, HeadMode::Adapter { bottleneck: 4 }] {
        for slice_mode in [SliceMode::PerSlice, SliceMode::Cumulative] {
            let f = fixture(mode, slice_mode, 96, 2, 3);
            let (mut trained, _) = f.sisa.train_all(&f.plan, &f.data, &f.store).unwrap();
            let victims = [f.plan.slice(0, 1)[0], f.plan.slice(0, 2)[1], f.plan.slice(1, 0)[2]];
            f.sisa.unlearn(&mut trained, &f.data, &f.store, &victims).unwrap();

            let dir = tempfile::tempdir().unwrap();
            let fresh_store = CheckpointStore::open(dir.path()).unwrap();
            let (fresh, _) = f.sisa.train_all(&trained.plan, &f.data, &fresh_store).unwrap();
            for s in 0..2 {
                assert_eq!(
                    trained.ensemble.models[s].trainable_payload(),
                    fresh.ensemble.models[s].trainable_payload(),
                    "{mode} {slice_mode} shard {s}"
                );
            }
            assert_eq!(snapshot(&f.store), snapshot(&fresh_store), "{mode} {slice_mode}");
        }
    }
}

#[test]
fn unknown_id_changes_nothing() {
    let f = fixture(HeadMode::FcOnly, SliceMode::PerSlice, 60, 2, 3);
    let (mut trained, _) = f.sisa.train_all(&f.plan, &f.data, &f.store).unwrap();
    let before = snapshot(&f.store);
    let plan_before = trained.plan.clone();
    let present = f.plan.slice(0, 0)[0];
    let err = f.sisa.unlearn(&mut trained, &f.data, &f.store, &[present, 10_000]).unwrap_err();
    assert!(matches!(err, EngineError::Partition(PartitionError::NotFound(ref v)) if v == &vec![10_000]));
    assert_eq!(trained.plan, plan_before);
    assert_eq!(snapshot(&f.store), before);
    assert!(matches!(f.sisa.unlearn(&mut trained, &f.data, &f.store, &[]), Err(EngineError::NoRequests)));
}

#[test]
fn rollback_cost_shrinks_with_later_slices() {
    let f = fixture(HeadMode::FcOnly, SliceMode::PerSlice, 160, 1, 4);
    let (trained, _) = f.sisa.train_all(&f.plan, &f.data, &f.store).unwrap();
    let cfg = &f.sisa.config().train;
    let mut costs = Vec::new();
    for r in 0..4 {
        let mut state = trained.clone();
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::open(dir.path()).unwrap();
        for (s, r2) in f.store.keys() {
            store.put(&f.store.get(s, r2).unwrap()).unwrap();
        }
        let victim = f.plan.slice(0, r)[0];
        let ledger = f.sisa.unlearn(&mut state, &f.data, &store, &[victim]).unwrap();
        let expected: u64 = (r..4).map(|k| cfg.steps_for(state.plan.slice(0, k).len())).sum();
        assert_eq!(ledger.gradient_steps, expected);
        costs.push(ledger.gradient_steps);
    }
    assert!(costs.windows(2).all(|w| w[0] > w[1]), "{costs:?}");
}

#[test]
fn cumulative_mode_replays_prefix() {
    let f = fixture(HeadMode::FcOnly, SliceMode::Cumulative, 80, 1, 4);
    let (_, ledger) = f.sisa.train_all(&f.plan, &f.data, &f.store).unwrap();
    let cfg = &f.sisa.config().train;
    let expected: u64 = (0..4).map(|r| cfg.steps_for(20 * (r + 1))).sum();
    assert_eq!(ledger.gradient_steps, expected);
    assert_eq!(ledger.examples_processed, 2 * (20 + 40 + 60 + 80));
}

#[test]
fn emptied_slice_carries_previous_parameters_forward() {
    let f = fixture(HeadMode::FcOnly, SliceMode::PerSlice, 8, 1, 4);
    let (mut trained, _) = f.sisa.train_all(&f.plan, &f.data, &f.store).unwrap();
    let doomed = f.plan.slice(0, 3).to_vec();
    let ledger = f.sisa.unlearn(&mut trained, &f.data, &f.store, &doomed).unwrap();
    assert_eq!(ledger.gradient_steps, 0);
    assert_eq!(f.store.get(0, 3).unwrap().payload, f.store.get(0, 2).unwrap().payload);
    assert_eq!(trained.ensemble.models[0].trainable_payload(), f.store.get(0, 2).unwrap().payload);
}

#[test]
fn workers_do_not_change_results() {
    let f = fixture(HeadMode::FcOnly, SliceMode::PerSlice, 120, 4, 2);
    let (a, la) = f.sisa.train_all(&f.plan, &f.data, &f.store).unwrap();
    let mut cfg = f.sisa.config().clone();
    cfg.workers = 3;
    let par = Sisa::new(cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = CheckpointStore::open(dir.path()).unwrap();
    let (b, lb) = par.train_all(&f.plan, &f.data, &store).unwrap();
    assert_eq!(la, lb);
    for s in 0..4 {
        assert_eq!(a.ensemble.models[s].trainable_payload(), b.ensemble.models[s].trainable_payload());
    }
    assert_eq!(snapshot(&f.store), snapshot(&store));
}

#[test]
fn reload_from_store_matches_memory_and_detects_staleness() {
    let f = fixture(HeadMode::Adapter { bottleneck: 4 }, SliceMode::PerSlice, 60, 2, 3);
    let (trained, _) = f.sisa.train_all(&f.plan, &f.data, &f.store).unwrap();
    let loaded = f.sisa.load_trained(&f.plan, &f.store).unwrap();
    for s in 0..2 {
        assert_eq!(loaded.ensemble.models[s].trainable_payload(), trained.ensemble.models[s].trainable_payload());
    }
    let (smaller, _) = f.plan.remove(&[f.plan.slice(1, 0)[0]]).unwrap();
    assert!(matches!(f.sisa.load_trained(&smaller, &f.store), Err(EngineError::StaleCheckpoint { shard: 1, slice: 2 })));
}

#[test]
fn single_shard_single_slice_equals_baseline() {
    let sisa = engine(HeadMode::FcOnly, SliceMode::PerSlice);
    let ds = dataset(50);
    let data = sisa.prepare(&ds, &Featurizer::new(256, 64).unwrap());
    let plan = make_plan(&ds.ids(), 1, 1, &PartitionStrategy::Sequential, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = CheckpointStore::open(dir.path()).unwrap();
    let (trained, l1) = sisa.train_all(&plan, &data, &store).unwrap();
    let (base, l2) = sisa.baseline_train(&data).unwrap();
    assert_eq!(trained.ensemble.models[0].trainable_payload(), base.trainable_payload());
    assert_eq!(l1.gradient_steps, l2.gradient_steps);
    assert_eq!(l2.events[0].kind, EventKind::BaselineTrain);
    assert_eq!(l2.events[0].shard, None);
}

#[test]
fn baseline_unlearn_retrains_without_ids() {
    let sisa = engine(HeadMode::FcOnly, SliceMode::PerSlice);
    let ds = dataset(40);
    let data = sisa.prepare(&ds, &Featurizer::new(256, 64).unwrap());
    let (model, rest, ledger) = sisa.baseline_unlearn(&data, &[3, 7]).unwrap();
    assert_eq!(rest.len(), 38);
    assert!(rest.get(3).is_none() && rest.get(7).is_none());
    let (direct, _) = sisa.baseline_train(&rest).unwrap();
    assert_eq!(model.trainable_payload(), direct.trainable_payload());
    assert_eq!(ledger.gradient_steps, sisa.config().train.steps_for(38));
    assert!(matches!(sisa.baseline_unlearn(&data, &[]), Err(EngineError::NoRequests)));
    assert!(matches!(sisa.baseline_unlearn(&data, &[99]), Err(EngineError::Partition(PartitionError::NotFound(_)))));
}

#[test]
fn slice_mode_parse() {
    assert_eq!("per-slice".parse::<SliceMode>().unwrap(), SliceMode::PerSlice);
    assert_eq!("cumulative".parse::<SliceMode>().unwrap(), SliceMode::Cumulative);
    assert!("both".parse::<SliceMode>().is_err());
}
