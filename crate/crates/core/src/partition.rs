//! Shard/slice assignment of training ids and deletion bookkeeping.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::data::ExampleId;
use crate::seed::SeedKey;

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("shard and slice counts must be positive (got S={shards}, R={slices})")]
    ZeroCount { shards: usize, slices: usize },
    #[error("{ids} ids cannot fill {shards} shards x {slices} slices")]
    TooFewIds { ids: usize, shards: usize, slices: usize },
    #[error("duplicate id {0} in input")]
    DuplicateId(ExampleId),
    #[error("risk score missing for id {0}")]
    MissingRisk(ExampleId),
    #[error("risk score for id {0} is not finite")]
    NonFiniteRisk(ExampleId),
    #[error("ids not found in plan: {0:?}")]
    NotFound(Vec<ExampleId>),
    #[error("plan file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PartitionStrategy {
    /// Seeded permutation, then contiguous dealing.
    UniformRandom,
    /// Input order, contiguous dealing.
    Sequential,
    /// Shard membership as in `UniformRandom`; within a shard ids are sorted
    /// by ascending risk (ties by id) so the riskiest land in the last slices.
    RiskProfiled(HashMap<ExampleId, f64>),
}

impl PartitionStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            PartitionStrategy::UniformRandom => "uniform",
            PartitionStrategy::Sequential => "sequential",
            PartitionStrategy::RiskProfiled(_) => "risk",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Location {
    pub shard: usize,
    pub slice: usize,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    num_shards: usize,
    num_slices: usize,
    /// `slices[s][r]` is the ordered id list of slice `r` in shard `s`.
    slices: Vec<Vec<Vec<ExampleId>>>,
    index: HashMap<ExampleId, Location>,
}

/// Sizes for dealing `n` items into `k` parts; the first `n % k` parts get one extra.
fn part_sizes(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

fn deal<T: Clone>(items: &[T], k: usize) -> Vec<Vec<T>> {
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for size in part_sizes(items.len(), k) {
        out.push(items[start..start + size].to_vec());
        start += size;
    }
    out
}

/// Assign `ids` to `num_shards x num_slices` slices.
pub fn make_plan(
    ids: &[ExampleId],
    num_shards: usize,
    num_slices: usize,
    strategy: &PartitionStrategy,
    seed: u64,
) -> Result<PartitionPlan, PartitionError> {
    if num_shards == 0 || num_slices == 0 {
        return Err(PartitionError::ZeroCount { shards: num_shards, slices: num_slices });
    }
    if ids.len() < num_shards * num_slices {
        return Err(PartitionError::TooFewIds { ids: ids.len(), shards: num_shards, slices: num_slices });
    }
    let mut seen = HashSet::with_capacity(ids.len());
    for &id in ids {
        if !seen.insert(id) {
            return Err(PartitionError::DuplicateId(id));
        }
    }

    let mut order = ids.to_vec();
    if !matches!(strategy, PartitionStrategy::Sequential) {
        SeedKey::new(seed).tag("plan").rng().shuffle(&mut order);
    }
    let mut shards = deal(&order, num_shards);

    if let PartitionStrategy::RiskProfiled(scores) = strategy {
        for &id in &order {
            match scores.get(&id) {
                None => return Err(PartitionError::MissingRisk(id)),
                Some(s) if !s.is_finite() => return Err(PartitionError::NonFiniteRisk(id)),
                _ => {}
            }
        }
        for shard in &mut shards {
            shard.sort_by(|a, b| scores[a].total_cmp(&scores[b]).then(a.cmp(b)));
        }
    }

    let slices = shards.iter().map(|shard| deal(shard, num_slices)).collect();
    Ok(PartitionPlan::from_slices(num_shards, num_slices, slices))
}

impl PartitionPlan {
    fn from_slices(num_shards: usize, num_slices: usize, slices: Vec<Vec<Vec<ExampleId>>>) -> Self {
        let mut plan = PartitionPlan { num_shards, num_slices, slices, index: HashMap::new() };
        for s in 0..num_shards {
            for r in 0..num_slices {
                plan.reindex_slice(s, r);
            }
        }
        plan
    }

    fn reindex_slice(&mut self, shard: usize, slice: usize) {
        for (position, &id) in self.slices[shard][slice].iter().enumerate() {
            self.index.insert(id, Location { shard, slice, position });
        }
    }

    pub fn num_shards(&self) -> usize {
        self.num_shards
    }

    pub fn num_slices(&self) -> usize {
        self.num_slices
    }

    pub fn slice(&self, shard: usize, slice: usize) -> &[ExampleId] {
        &self.slices[shard][slice]
    }

    pub fn shard_len(&self, shard: usize) -> usize {
        self.slices[shard].iter().map(Vec::len).sum()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, id: ExampleId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn locate(&self, id: ExampleId) -> Result<Location, PartitionError> {
        self.index.get(&id).copied().ok_or(PartitionError::NotFound(vec![id]))
    }

    /// Live ids in `(shard, slice, position)` order.
    pub fn ordered_ids(&self) -> Vec<ExampleId> {
        self.slices.iter().flatten().flatten().copied().collect()
    }

    /// Remove `ids`. Returns the new plan and, for each shard that lost an
    /// id, the lowest slice index it lost one from. Survivors keep their
    /// relative order; nothing is rebalanced. Fails without changes if any
    /// id is absent.
    pub fn remove(&self, ids: &[ExampleId]) -> Result<(PartitionPlan, BTreeMap<usize, usize>), PartitionError> {
        let mut missing: Vec<ExampleId> = ids.iter().copied().filter(|id| !self.contains(*id)).collect();
        if !missing.is_empty() {
            missing.sort_unstable();
            missing.dedup();
            return Err(PartitionError::NotFound(missing));
        }
        let doomed: HashSet<ExampleId> = ids.iter().copied().collect();
        let mut affected: BTreeMap<usize, usize> = BTreeMap::new();
        let mut touched: HashSet<(usize, usize)> = HashSet::new();
        for id in &doomed {
            let loc = self.index[id];
            touched.insert((loc.shard, loc.slice));
            affected
                .entry(loc.shard)
                .and_modify(|r| *r = (*r).min(loc.slice))
                .or_insert(loc.slice);
        }
        let mut next = self.clone();
        for id in &doomed {
            next.index.remove(id);
        }
        for &(s, r) in &touched {
            next.slices[s][r].retain(|id| !doomed.contains(id));
            next.reindex_slice(s, r);
        }
        Ok((next, affected))
    }

    /// One `id<TAB>shard<TAB>slice<TAB>position` line per id, sorted by location.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (s, shard) in self.slices.iter().enumerate() {
            for (r, slice) in shard.iter().enumerate() {
                for (p, id) in slice.iter().enumerate() {
                    writeln!(w, "{id}\t{s}\t{r}\t{p}")?;
                }
            }
        }
        Ok(())
    }

    /// Inverse of [`Self::write_tsv`]. The shard and slice counts are not in
    /// the file, since slices may be empty after deletions.
    pub fn read_tsv<R: BufRead>(r: R, num_shards: usize, num_slices: usize) -> Result<Self, PartitionError> {
        if num_shards == 0 || num_slices == 0 {
            return Err(PartitionError::ZeroCount { shards: num_shards, slices: num_slices });
        }
        let mut slices = vec![vec![Vec::new(); num_slices]; num_shards];
        let mut seen = HashSet::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| PartitionError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: &str| PartitionError::Parse { line: n + 1, msg: msg.to_string() };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(err("expected 4 tab-separated fields"));
            }
            let parse = |s: &str| s.parse::<u64>().map_err(|_| err("bad integer"));
            let (id, s, r, p) = (parse(f[0])?, parse(f[1])? as usize, parse(f[2])? as usize, parse(f[3])? as usize);
            if s >= num_shards || r >= num_slices {
                return Err(err("shard or slice out of range"));
            }
            if p != slices[s][r].len() {
                return Err(err("positions must be contiguous and sorted"));
            }
            if !seen.insert(id) {
                return Err(PartitionError::DuplicateId(id));
            }
            slices[s][r].push(id);
        }
        Ok(PartitionPlan::from_slices(num_shards, num_slices, slices))
    }
}
