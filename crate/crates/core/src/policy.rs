//! Per-head cache policies selectable by name.
//!
//! A policy decides, for one offloaded KV head and one decode step, which
//! token rows feed attention and what that costs in transferred bytes,
//! retrieval work and bookkeeping. `similarity` is the query-similarity cache;
//! `lru` and `lfu` are block caches over true-query top-k; `prefetch_only`
//! speculatively fetches the approximate-query top-k every step.

use std::collections::BTreeMap;
use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::attention::{HeadTensor, RowSource};
use crate::baseline_caches::{BlockCacheState, Eviction, MgmtStats};
use crate::error::{Error, Result};
use crate::pipeline::{SyncMode, TransferEngine};
use crate::retrieval::Retriever;
use crate::similarity_cache::{merge_group_indices, Decision, ForceMode, HeadCache, HeadCacheSnapshot};

/// How a policy drives the transfer pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyProfile {
    pub engine: TransferEngine,
    pub sync: SyncMode,
    /// Host-blocking synchronization events per layer with offloaded heads.
    pub sync_events_per_layer: u32,
    pub prefetch: bool,
}

/// Inputs for one offloaded head at one step. `keys`/`values` hold the host
/// rows visible to retrieval, i.e. every token before the current one.
#[derive(Debug, Clone, Copy)]
pub struct HeadContext<'a> {
    pub step: u64,
    pub keys: &'a HeadTensor,
    pub values: &'a HeadTensor,
    pub retriever: &'a dyn Retriever,
    /// One per query head of the group.
    pub true_queries: &'a [Vec<f64>],
    pub approx_queries: &'a [Vec<f64>],
    pub weights: &'a [f64],
    pub tau: f64,
    pub k: usize,
    pub row_bytes: u64,
}

impl HeadContext<'_> {
    /// Group top-k over the visible rows as ranked by the retriever.
    pub fn retrieve(&self, queries: &[Vec<f64>]) -> Result<Vec<usize>> {
        let scores = queries
            .iter()
            .map(|q| self.retriever.scores(q, self.keys))
            .collect::<Result<Vec<_>>>()?;
        merge_group_indices(&scores, self.k)
    }

    fn gather(&self, tokens: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let k = self.keys.gather(tokens)?;
        let v = self.values.gather(tokens)?;
        Ok((k.as_slice().to_vec(), v.as_slice().to_vec()))
    }
}

/// What one head did in one step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadOutcome {
    /// Token rows selected for attention, ascending.
    pub tokens: Vec<usize>,
    pub hits: u64,
    pub misses: u64,
    pub transfer_bytes: u64,
    pub retrieved_tokens: u64,
    pub mgmt: MgmtStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySnapshot {
    Similarity(HeadCacheSnapshot),
    Block {
        resident_blocks: Vec<usize>,
        lookups: u64,
        hits: u64,
        evictions: u64,
    },
    Stateless,
}

pub trait CachePolicy: Send + Debug {
    fn name(&self) -> &'static str;

    fn profile(&self) -> PolicyProfile;

    /// Prefill-time population from the step-0 true queries. Not counted as
    /// decode traffic.
    fn initialize(&mut self, ctx: &HeadContext<'_>) -> Result<()>;

    fn select(&mut self, ctx: &HeadContext<'_>, force: ForceMode) -> Result<HeadOutcome>;

    /// Device-resident copies of the selected rows, if the policy keeps them.
    fn resident_rows(&self) -> Option<RowSource<'_>>;

    fn snapshot(&self) -> PolicySnapshot;
}

/// Construction parameters shared by every policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyParams {
    pub k: usize,
    pub head_dim: usize,
    pub block_size: usize,
    /// Block-cache capacity as a multiple of the blocks needed for `k` tokens.
    pub block_capacity_factor: usize,
    pub row_bytes: u64,
}

#[derive(Debug)]
pub struct SimilarityPolicy {
    cache: HeadCache,
}

impl SimilarityPolicy {
    pub fn new(p: &PolicyParams) -> Self {
        Self {
            cache: HeadCache::new(p.k, p.head_dim),
        }
    }

    pub fn cache(&self) -> &HeadCache {
        &self.cache
    }
}

impl CachePolicy for SimilarityPolicy {
    fn name(&self) -> &'static str {
        "similarity"
    }

    fn profile(&self) -> PolicyProfile {
        PolicyProfile {
            engine: TransferEngine::ZeroCopy,
            sync: SyncMode::GpuCentric,
            sync_events_per_layer: 1,
            prefetch: true,
        }
    }

    fn initialize(&mut self, ctx: &HeadContext<'_>) -> Result<()> {
        let tokens = ctx.retrieve(ctx.true_queries)?;
        let (k, v) = ctx.gather(&tokens)?;
        self.cache.initialize(ctx.true_queries, &tokens, &k, &v)
    }

    fn select(&mut self, ctx: &HeadContext<'_>, force: ForceMode) -> Result<HeadOutcome> {
        let r = self.cache.lookup(ctx.approx_queries, ctx.weights, ctx.tau, force)?;
        if r.decision == Decision::Hit {
            return Ok(HeadOutcome {
                tokens: self.cache.entry().tokens().to_vec(),
                hits: 1,
                ..Default::default()
            });
        }
        let tokens = ctx.retrieve(ctx.approx_queries)?;
        let (k, v) = ctx.gather(&tokens)?;
        self.cache.update_entry(ctx.step, &tokens, &k, &v)?;
        Ok(HeadOutcome {
            transfer_bytes: tokens.len() as u64 * ctx.row_bytes,
            retrieved_tokens: ctx.keys.rows() as u64,
            tokens,
            misses: 1,
            hits: 0,
            mgmt: MgmtStats {
                label_updates: 1,
                ..Default::default()
            },
        })
    }

    fn resident_rows(&self) -> Option<RowSource<'_>> {
        Some(self.cache.entry().rows())
    }

    fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot::Similarity(self.cache.snapshot())
    }
}

#[derive(Debug)]
pub struct BlockPolicy {
    state: BlockCacheState,
}

impl BlockPolicy {
    pub fn new(eviction: Eviction, p: &PolicyParams) -> Result<Self> {
        let blocks = p.k.div_ceil(p.block_size).max(1);
        let capacity = blocks * p.block_capacity_factor.max(1);
        let block_bytes = p.block_size as u64 * p.row_bytes;
        Ok(Self {
            state: BlockCacheState::new(eviction, p.block_size, capacity, block_bytes)?,
        })
    }

    pub fn state(&self) -> &BlockCacheState {
        &self.state
    }
}

impl CachePolicy for BlockPolicy {
    fn name(&self) -> &'static str {
        match self.state.eviction() {
            Eviction::Lru => "lru",
            Eviction::Lfu => "lfu",
        }
    }

    fn profile(&self) -> PolicyProfile {
        let sync_events_per_layer = match self.state.eviction() {
            Eviction::Lru => 2,
            Eviction::Lfu => 3,
        };
        PolicyProfile {
            engine: TransferEngine::GatherCopy,
            sync: SyncMode::CpuCentric,
            sync_events_per_layer,
            prefetch: false,
        }
    }

    fn initialize(&mut self, ctx: &HeadContext<'_>) -> Result<()> {
        let tokens = ctx.retrieve(ctx.true_queries)?;
        self.state.access(&tokens)?;
        Ok(())
    }

    fn select(&mut self, ctx: &HeadContext<'_>, _force: ForceMode) -> Result<HeadOutcome> {
        let tokens = ctx.retrieve(ctx.true_queries)?;
        let before = self.state.counters();
        let plan = self.state.access(&tokens)?;
        let after = self.state.counters();
        let merge_bytes = after.buffer_merge_bytes - before.buffer_merge_bytes;
        Ok(HeadOutcome {
            tokens,
            hits: plan.hits.len() as u64,
            misses: plan.misses.len() as u64,
            transfer_bytes: merge_bytes,
            retrieved_tokens: ctx.keys.rows() as u64,
            mgmt: MgmtStats {
                accessed_blocks: plan.accessed() as u64,
                merge_bytes,
                label_updates: 0,
            },
        })
    }

    fn resident_rows(&self) -> Option<RowSource<'_>> {
        None
    }

    fn snapshot(&self) -> PolicySnapshot {
        let c = self.state.counters();
        PolicySnapshot::Block {
            resident_blocks: self.state.blocks(),
            lookups: c.lookups,
            hits: c.hits,
            evictions: c.evictions,
        }
    }
}

#[derive(Debug, Default)]
pub struct PrefetchOnlyPolicy;

impl CachePolicy for PrefetchOnlyPolicy {
    fn name(&self) -> &'static str {
        "prefetch_only"
    }

    fn profile(&self) -> PolicyProfile {
        PolicyProfile {
            engine: TransferEngine::GatherCopy,
            sync: SyncMode::CpuCentric,
            sync_events_per_layer: 5,
            prefetch: true,
        }
    }

    fn initialize(&mut self, _ctx: &HeadContext<'_>) -> Result<()> {
        Ok(())
    }

    fn select(&mut self, ctx: &HeadContext<'_>, _force: ForceMode) -> Result<HeadOutcome> {
        let tokens = ctx.retrieve(ctx.approx_queries)?;
        Ok(HeadOutcome {
            transfer_bytes: tokens.len() as u64 * ctx.row_bytes,
            retrieved_tokens: ctx.keys.rows() as u64,
            tokens,
            misses: 1,
            ..Default::default()
        })
    }

    fn resident_rows(&self) -> Option<RowSource<'_>> {
        None
    }

    fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot::Stateless
    }
}

pub type PolicyFactory = fn(&PolicyParams) -> Result<Box<dyn CachePolicy>>;

/// Name-keyed policy constructors.
#[derive(Clone)]
pub struct PolicyRegistry {
    entries: BTreeMap<&'static str, PolicyFactory>,
}

impl PolicyRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, factory: PolicyFactory) {
        self.entries.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn build(&self, name: &str, params: &PolicyParams) -> Result<Box<dyn CachePolicy>> {
        let f = self.entries.get(name).ok_or_else(|| Error::Unknown {
            kind: "policy",
            name: name.to_string(),
            known: self.names().join(", "),
        })?;
        f(params)
    }
}

impl Default for PolicyRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("similarity", |p| Ok(Box::new(SimilarityPolicy::new(p))));
        r.register("lru", |p| Ok(Box::new(BlockPolicy::new(Eviction::Lru, p)?)));
        r.register("lfu", |p| Ok(Box::new(BlockPolicy::new(Eviction::Lfu, p)?)));
        r.register("prefetch_only", |_| Ok(Box::new(PrefetchOnlyPolicy)));
        r
    }
}
