//! Sharded, sliced training and exact unlearning.

pub mod ensemble;
pub mod ledger;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{Dataset, ExampleId, FeatureVector, Featurizer};
use crate::learner::{train_steps, Backbone, HeadMode, LearnerError, ModelDims, ModelParams, Sample, TrainConfig};
use crate::partition::{PartitionError, PartitionPlan};
use crate::seed::SeedKey;
use crate::store::{digest_ids, Checkpoint, CheckpointStore, StoreError};

pub use ensemble::{majority_vote, Ensemble, VoteDetail, VoteRule};
pub use ledger::{CostLedger, EventKind, LedgerEvent};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("no ids to unlearn")]
    NoRequests,
    #[error("id {0} is in the plan but not in the training set")]
    UnknownId(ExampleId),
    #[error("checkpoint for shard {shard} slice {slice} does not match the current plan")]
    StaleCheckpoint { shard: usize, slice: usize },
    #[error("checkpoint mode {found} does not match configured mode {expected}")]
    ModeMismatch { expected: HeadMode, found: HeadMode },
    #[error("invalid engine config: {0}")]
    Config(String),
}

/// What each slice's training step sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SliceMode {
    /// Only the examples of slice `r`.
    #[default]
    PerSlice,
    /// Slices `0..=r` together, in slice order.
    Cumulative,
}

impl fmt::Display for SliceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SliceMode::PerSlice => "per-slice",
            SliceMode::Cumulative => "cumulative",
        })
    }
}

impl FromStr for SliceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-slice" | "per_slice" => Ok(SliceMode::PerSlice),
            "cumulative" => Ok(SliceMode::Cumulative),
            other => Err(format!("unknown slice mode `{other}` (expected per-slice or cumulative)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SisaConfig {
    pub dims: ModelDims,
    pub mode: HeadMode,
    pub train: TrainConfig,
    pub slice_mode: SliceMode,
    pub vote: VoteRule,
    /// Shards trained concurrently. Results never depend on this.
    pub workers: usize,
    /// When false, ledger events record 0 ms so ledgers are byte-stable.
    pub record_wall_clock: bool,
}

impl SisaConfig {
    pub fn new(dims: ModelDims, mode: HeadMode, train: TrainConfig) -> Self {
        SisaConfig {
            dims,
            mode,
            train,
            slice_mode: SliceMode::default(),
            vote: VoteRule::default(),
            workers: 1,
            record_wall_clock: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainItem {
    pub x: FeatureVector,
    pub label: usize,
    /// Backbone activations, present when the backbone is frozen.
    pub hidden: Option<Vec<f64>>,
}

/// Featurized training examples keyed by id, in dataset order.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    order: Vec<ExampleId>,
    items: HashMap<ExampleId, TrainItem>,
}

impl TrainingSet {
    pub fn new(ds: &Dataset, featurizer: &Featurizer, cache: Option<&Backbone>) -> Self {
        let built: Vec<(ExampleId, TrainItem)> = ds
            .examples()
            .par_iter()
            .map(|ex| {
                let x = featurizer.featurize(ex);
                let hidden = cache.map(|b| b.hidden_activations(&x));
                (ex.id, TrainItem { x, label: ex.label, hidden })
            })
            .collect();
        let order = built.iter().map(|(id, _)| *id).collect();
        TrainingSet { order, items: built.into_iter().collect() }
    }

    pub fn ids(&self) -> &[ExampleId] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn get(&self, id: ExampleId) -> Option<&TrainItem> {
        self.items.get(&id)
    }

    pub fn samples(&self, ids: &[ExampleId]) -> Result<Vec<Sample<'_>>, EngineError> {
        ids.iter()
            .map(|id| {
                let it = self.items.get(id).ok_or(EngineError::UnknownId(*id))?;
                Ok(Sample { x: &it.x, label: it.label, hidden: it.hidden.as_deref() })
            })
            .collect()
    }

    pub fn without(&self, ids: &HashSet<ExampleId>) -> TrainingSet {
        let order: Vec<ExampleId> = self.order.iter().copied().filter(|id| !ids.contains(id)).collect();
        let items = order.iter().map(|id| (*id, self.items[id].clone())).collect();
        TrainingSet { order, items }
    }
}

/// A trained ensemble together with the plan it was trained on.
#[derive(Debug, Clone)]
pub struct Trained {
    pub plan: PartitionPlan,
    pub ensemble: Ensemble,
}

pub struct Sisa {
    cfg: SisaConfig,
    backbone: Arc<Backbone>,
}

impl Sisa {
    pub fn new(cfg: SisaConfig) -> Result<Self, EngineError> {
        let backbone = Arc::new(Backbone::generate(cfg.dims, cfg.train.global_seed));
        Sisa::with_backbone(cfg, backbone)
    }

    pub fn with_backbone(cfg: SisaConfig, backbone: Arc<Backbone>) -> Result<Self, EngineError> {
        cfg.dims.validate()?;
        crate::learner::validate_mode(cfg.dims, cfg.mode)?;
        cfg.train.validate()?;
        if cfg.workers == 0 {
            return Err(EngineError::Config("workers must be >= 1".into()));
        }
        if backbone.input_dim != cfg.dims.input_dim || backbone.hidden != cfg.dims.hidden {
            return Err(EngineError::Config("backbone does not match dims".into()));
        }
        Ok(Sisa { cfg, backbone })
    }

    pub fn config(&self) -> &SisaConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    /// Featurize `ds`, caching backbone activations when the backbone is frozen.
    pub fn prepare(&self, ds: &Dataset, featurizer: &Featurizer) -> TrainingSet {
        let cache = self.cfg.mode.frozen_backbone().then(|| self.backbone.as_ref());
        TrainingSet::new(ds, featurizer, cache)
    }

    pub fn init_shard(&self, shard: usize) -> Result<ModelParams, EngineError> {
        Ok(ModelParams::init_with_backbone(
            self.backbone.clone(),
            self.cfg.dims,
            self.cfg.mode,
            self.cfg.train.global_seed,
            shard as u32,
        )?)
    }

    fn slice_key(&self, shard: usize, slice: usize) -> SeedKey {
        SeedKey::new(self.cfg.train.global_seed).tag("slice").with(shard as u64).with(slice as u64)
    }

    fn step_ids(&self, plan: &PartitionPlan, shard: usize, slice: usize) -> Vec<ExampleId> {
        match self.cfg.slice_mode {
            SliceMode::PerSlice => plan.slice(shard, slice).to_vec(),
            SliceMode::Cumulative => (0..=slice).flat_map(|r| plan.slice(shard, r).iter().copied()).collect(),
        }
    }

    fn trained_digest(plan: &PartitionPlan, shard: usize, slice: usize) -> u64 {
        digest_ids((0..=slice).flat_map(|r| plan.slice(shard, r).iter().copied()))
    }

    /// Parameters from a stored checkpoint.
    pub fn params_from_checkpoint(&self, cp: &Checkpoint) -> Result<ModelParams, EngineError> {
        if cp.mode != self.cfg.mode {
            return Err(EngineError::ModeMismatch { expected: self.cfg.mode, found: cp.mode });
        }
        let mut p = self.init_shard(cp.shard as usize)?;
        p.load_trainable(&cp.payload)?;
        Ok(p)
    }

    fn restore(&self, store: &CheckpointStore, plan: &PartitionPlan, shard: usize, slice: usize) -> Result<ModelParams, EngineError> {
        let cp = store.get(shard as u32, slice as u32)?;
        if cp.trained_id_digest != Self::trained_digest(plan, shard, slice) {
            return Err(EngineError::StaleCheckpoint { shard, slice });
        }
        self.params_from_checkpoint(&cp)
    }

    /// Train slices `from..R` of one shard, starting from the checkpoint
    /// after slice `from - 1` (or fresh init), overwriting checkpoints.
    fn run_from(
        &self,
        plan: &PartitionPlan,
        data: &TrainingSet,
        store: &CheckpointStore,
        shard: usize,
        from: usize,
        kind: EventKind,
    ) -> Result<(ModelParams, LedgerEvent), EngineError> {
        let start = Instant::now();
        let mut params = if from == 0 { self.init_shard(shard)? } else { self.restore(store, plan, shard, from - 1)? };
        let mut steps = 0u64;
        let mut examples = 0u64;
        let last = plan.num_slices() - 1;
        for r in from..=last {
            let ids = self.step_ids(plan, shard, r);
            if !ids.is_empty() {
                let samples = data.samples(&ids)?;
                let out = train_steps(&params, &samples, &self.cfg.train, &self.slice_key(shard, r))?;
                params = out.params;
                steps += out.steps;
                examples += (self.cfg.train.epochs * ids.len()) as u64;
            }
            store.put(&Checkpoint {
                shard: shard as u32,
                slice: r as u32,
                mode: self.cfg.mode,
                payload: params.trainable_payload(),
                trained_id_digest: Self::trained_digest(plan, shard, r),
            })?;
        }
        let event = LedgerEvent {
            kind,
            shard: Some(shard),
            slice_from: from,
            slice_to: last,
            gradient_steps: steps,
            examples,
            wall_ms: self.elapsed(start),
        };
        Ok((params, event))
    }

    fn elapsed(&self, start: Instant) -> u64 {
        if self.cfg.record_wall_clock {
            start.elapsed().as_millis() as u64
        } else {
            0
        }
    }

    /// Run `jobs` (shard, first slice) with up to `workers` threads; results
    /// come back in job order.
    fn run_jobs(
        &self,
        plan: &PartitionPlan,
        data: &TrainingSet,
        store: &CheckpointStore,
        jobs: &[(usize, usize)],
        kind: EventKind,
    ) -> Result<Vec<(ModelParams, LedgerEvent)>, EngineError> {
        let run = |&(s, r): &(usize, usize)| self.run_from(plan, data, store, s, r, kind);
        if self.cfg.workers <= 1 || jobs.len() <= 1 {
            return jobs.iter().map(run).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.workers)
            .build()
            .map_err(|e| EngineError::Config(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    }

    pub fn train_shard(
        &self,
        plan: &PartitionPlan,
        data: &TrainingSet,
        store: &CheckpointStore,
        shard: usize,
    ) -> Result<(ModelParams, LedgerEvent), EngineError> {
        self.run_from(plan, data, store, shard, 0, EventKind::Train)
    }

    pub fn train_all(
        &self,
        plan: &PartitionPlan,
        data: &TrainingSet,
        store: &CheckpointStore,
    ) -> Result<(Trained, CostLedger), EngineError> {
        for id in plan.ordered_ids() {
            if data.get(id).is_none() {
                return Err(EngineError::UnknownId(id));
            }
        }
        let jobs: Vec<(usize, usize)> = (0..plan.num_shards()).map(|s| (s, 0)).collect();
        let results = self.run_jobs(plan, data, store, &jobs, EventKind::Train)?;
        let mut ledger = CostLedger::default();
        let mut models = Vec::with_capacity(results.len());
        for (params, event) in results {
            ledger.record(event);
            models.push(params);
        }
        let ensemble = Ensemble::new(models, self.cfg.vote)?;
        Ok((Trained { plan: plan.clone(), ensemble }, ledger))
    }

    /// Remove `ids` and retrain each affected shard from its earliest
    /// affected slice. Unknown ids fail before anything changes.
    pub fn unlearn(
        &self,
        state: &mut Trained,
        data: &TrainingSet,
        store: &CheckpointStore,
        ids: &[ExampleId],
    ) -> Result<CostLedger, EngineError> {
        if ids.is_empty() {
            return Err(EngineError::NoRequests);
        }
        let (next, affected) = state.plan.remove(ids)?;
        let jobs: Vec<(usize, usize)> = affected.into_iter().collect();
        let results = self.run_jobs(&next, data, store, &jobs, EventKind::Unlearn)?;
        let mut ledger = CostLedger::default();
        for ((shard, _), (params, event)) in jobs.iter().zip(results) {
            state.ensemble.models[*shard] = params;
            ledger.record(event);
        }
        state.plan = next;
        Ok(ledger)
    }

    /// The ensemble as of the last slice of every shard.
    pub fn load_trained(&self, plan: &PartitionPlan, store: &CheckpointStore) -> Result<Trained, EngineError> {
        let last = plan.num_slices() - 1;
        let models = (0..plan.num_shards())
            .map(|s| self.restore(store, plan, s, last))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Trained { plan: plan.clone(), ensemble: Ensemble::new(models, self.cfg.vote)? })
    }

    /// One model on all of `data` in dataset order, with the streams of shard
    /// 0, slice 0.
    pub fn baseline_train(&self, data: &TrainingSet) -> Result<(ModelParams, CostLedger), EngineError> {
        self.baseline(data, EventKind::BaselineTrain)
    }

    /// Retrain the baseline from scratch without `ids`.
    pub fn baseline_unlearn(
        &self,
        data: &TrainingSet,
        ids: &[ExampleId],
    ) -> Result<(ModelParams, TrainingSet, CostLedger), EngineError> {
        if ids.is_empty() {
            return Err(EngineError::NoRequests);
        }
        let mut missing: Vec<ExampleId> = ids.iter().copied().filter(|id| data.get(*id).is_none()).collect();
        if !missing.is_empty() {
            missing.sort_unstable();
            missing.dedup();
            return Err(PartitionError::NotFound(missing).into());
        }
        let rest = data.without(&ids.iter().copied().collect());
        let (params, ledger) = self.baseline(&rest, EventKind::BaselineUnlearn)?;
        Ok((params, rest, ledger))
    }

    fn baseline(&self, data: &TrainingSet, kind: EventKind) -> Result<(ModelParams, CostLedger), EngineError> {
        let start = Instant::now();
        let init = self.init_shard(0)?;
        let samples = data.samples(data.ids())?;
        let out = train_steps(&init, &samples, &self.cfg.train, &self.slice_key(0, 0))?;
        let mut ledger = CostLedger::default();
        ledger.record(LedgerEvent {
            kind,
            shard: None,
            slice_from: 0,
            slice_to: 0,
            gradient_steps: out.steps,
            examples: (self.cfg.train.epochs * data.len()) as u64,
            wall_ms: self.elapsed(start),
        });
        Ok((out.params, ledger))
    }
}

#[cfg(test)]
mod tests;
