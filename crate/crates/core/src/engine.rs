//! Decode orchestrator over a tiered KV store.
//!
//! Per step and layer: offloaded heads run their cache policy on the
//! approximate query over the rows visible before this token, persistent heads
//! retrieve with the true query, the new token's KV is appended everywhere,
//! and each query head attends over its selected rows plus the sink/recent
//! buffer. Transfer and event counts feed the pipeline model; an exact top-k
//! oracle over the same inputs measures output error.

use serde::{Deserialize, Serialize};

use crate::attention::{hybrid_attention, streaming_indices, topk_attention, HeadTensor, ModelShape, RowSource};
use crate::baseline_caches::{MgmtStats, DEFAULT_BLOCK_SIZE};
use crate::error::{Error, Result};
use crate::head_profile::{HeadProfile, PartitionPlan, Placement};
use crate::pipeline::{schedule_layer, CostModel, LayerPlan, PipelineMode, PipelineTimeline};
use crate::policy::{CachePolicy, HeadContext, PolicyParams, PolicyProfile, PolicyRegistry, PolicySnapshot};
use crate::retrieval::{self, Retriever, RetrieverSpec};
use crate::similarity_cache::{merge_group_indices, CacheFootprint, ForceMode, SinkRecentBuffer};
use crate::stats::relative_l2;
use crate::workload::{Prompt, StepInput, Workload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Host,
    DevicePersistent,
}

#[derive(Debug, Clone)]
pub struct StoredHead {
    pub keys: HeadTensor,
    pub values: HeadTensor,
    pub tier: Tier,
    pub retriever: Box<dyn Retriever>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierBytes {
    pub host: u64,
    pub device_persistent: u64,
    pub metadata: u64,
}

/// Per `(layer, kv_head)` KV rows, tier tag and retrieval metadata.
#[derive(Debug, Clone)]
pub struct TieredKVStore {
    shape: ModelShape,
    heads: Vec<Vec<StoredHead>>,
}

impl TieredKVStore {
    pub fn build(shape: &ModelShape, prompt: &Prompt, plan: &PartitionPlan, spec: &RetrieverSpec) -> Result<Self> {
        let mut heads = Vec::with_capacity(shape.num_layers);
        for l in 0..shape.num_layers {
            let mut layer = Vec::with_capacity(shape.num_kv_heads);
            for h in 0..shape.num_kv_heads {
                let keys = prompt.keys[l][h].clone();
                let values = prompt.values[l][h].clone();
                let retriever = retrieval::encode(&keys, spec)?;
                let tier = if plan.is_persistent(l, h) {
                    Tier::DevicePersistent
                } else {
                    Tier::Host
                };
                layer.push(StoredHead {
                    keys,
                    values,
                    tier,
                    retriever,
                });
            }
            heads.push(layer);
        }
        Ok(Self { shape: *shape, heads })
    }

    pub fn head(&self, layer: usize, kv_head: usize) -> &StoredHead {
        &self.heads[layer][kv_head]
    }

    pub fn rows(&self) -> usize {
        self.heads[0][0].keys.rows()
    }

    fn append(&mut self, layer: usize, kv_head: usize, key: &[f64], value: &[f64]) -> Result<()> {
        let h = &mut self.heads[layer][kv_head];
        h.keys.push_row(key)?;
        h.values.push_row(value)?;
        h.retriever.append(key)
    }

    pub fn tier_bytes(&self) -> TierBytes {
        let row = self.shape.kv_row_bytes();
        let mut t = TierBytes::default();
        for h in self.heads.iter().flatten() {
            let bytes = h.keys.rows() as u64 * row;
            match h.tier {
                Tier::Host => t.host += bytes,
                Tier::DevicePersistent => t.device_persistent += bytes,
            }
            t.metadata += h.retriever.metadata_bytes();
        }
        t
    }
}

/// One host-to-device copy request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRequest {
    pub layer: usize,
    pub kv_head: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub policy: String,
    pub topk_ratio: f64,
    pub sink_tokens: usize,
    pub recent_tokens: usize,
    pub retriever: RetrieverSpec,
    pub force: ForceMode,
    pub cost: CostModel,
    pub block_size: usize,
    pub block_capacity_factor: usize,
    /// Compare every output against the exact top-k oracle.
    pub measure_error: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            policy: "similarity".into(),
            topk_ratio: 0.10,
            sink_tokens: crate::attention::DEFAULT_SINK_TOKENS,
            recent_tokens: crate::attention::DEFAULT_RECENT_TOKENS,
            retriever: RetrieverSpec::default(),
            force: ForceMode::None,
            cost: CostModel::default(),
            block_size: DEFAULT_BLOCK_SIZE,
            block_capacity_factor: 3,
            measure_error: true,
        }
    }
}

/// Constant per-step top-k size for a prompt of `n_prompt` tokens.
pub fn topk_size(topk_ratio: f64, n_prompt: usize) -> Result<usize> {
    if !(topk_ratio > 0.0 && topk_ratio <= 1.0) {
        return Err(Error::config(format!("topk_ratio {topk_ratio} outside (0, 1]")));
    }
    if n_prompt == 0 {
        return Err(Error::config("empty prompt"));
    }
    Ok(((topk_ratio * n_prompt as f64).ceil() as usize).clamp(1, n_prompt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub layer: usize,
    pub kv_head: usize,
    pub tier: Tier,
    pub hits: u64,
    pub misses: u64,
    pub transfer_bytes: u64,
    pub persistent_served_bytes: u64,
    pub error_sum: f64,
    pub error_max: f64,
    pub error_count: u64,
}

impl HeadMetrics {
    pub fn hit_ratio(&self) -> Option<f64> {
        let total = self.hits + self.misses;
        (total > 0).then(|| self.hits as f64 / total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeMetrics {
    pub steps: usize,
    pub heads: Vec<HeadMetrics>,
    /// Per-step transfer bytes, summed over heads.
    pub step_transfer_bytes: Vec<u64>,
    pub timeline: PipelineTimeline,
}

impl DecodeMetrics {
    pub fn hits(&self) -> u64 {
        self.heads.iter().map(|h| h.hits).sum()
    }

    pub fn misses(&self) -> u64 {
        self.heads.iter().map(|h| h.misses).sum()
    }

    pub fn hit_ratio(&self) -> Option<f64> {
        let total = self.hits() + self.misses();
        (total > 0).then(|| self.hits() as f64 / total as f64)
    }

    pub fn transfer_bytes(&self) -> u64 {
        self.heads.iter().map(|h| h.transfer_bytes).sum()
    }

    pub fn persistent_served_bytes(&self) -> u64 {
        self.heads.iter().map(|h| h.persistent_served_bytes).sum()
    }

    pub fn mean_error(&self) -> Option<f64> {
        let n: u64 = self.heads.iter().map(|h| h.error_count).sum();
        (n > 0).then(|| self.heads.iter().map(|h| h.error_sum).sum::<f64>() / n as f64)
    }

    pub fn max_error(&self) -> Option<f64> {
        self.heads
            .iter()
            .filter(|h| h.error_count > 0)
            .map(|h| h.error_max)
            .reduce(f64::max)
    }
}

/// Attention outputs of one step, `[layer][q_head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub outputs: Vec<Vec<Vec<f64>>>,
    /// Exact top-k oracle outputs, when error measurement is on.
    pub oracle: Option<Vec<Vec<Vec<f64>>>>,
    pub transfers: Vec<TransferRequest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCacheState {
    pub layer: usize,
    pub kv_head: usize,
    pub tier: Tier,
    pub placement: Placement,
    pub policy: Option<PolicySnapshot>,
}

pub struct Engine {
    config: EngineConfig,
    shape: ModelShape,
    profile: HeadProfile,
    k: usize,
    store: TieredKVStore,
    buffers: Vec<Vec<SinkRecentBuffer>>,
    policies: Vec<Vec<Option<Box<dyn CachePolicy>>>>,
    policy_profile: PolicyProfile,
    step: u64,
    metrics: DecodeMetrics,
}

/// Exact merged top-k of the true queries over rows `[0, visible)`, joined with
/// the sink/recent window over `keys.rows()` tokens.
pub fn oracle_indices(
    queries: &[Vec<f64>],
    keys: &HeadTensor,
    visible: usize,
    k: usize,
    sink: usize,
    recent: usize,
) -> Result<Vec<usize>> {
    let scores: Vec<Vec<f64>> = queries
        .iter()
        .map(|q| (0..visible).map(|i| crate::attention::dot(q, keys.row(i))).collect())
        .collect();
    let mut idx = merge_group_indices(&scores, k)?;
    idx.extend(streaming_indices(keys.rows(), sink, recent).0);
    idx.sort_unstable();
    idx.dedup();
    Ok(idx)
}

impl Engine {
    /// Encodes metadata, assigns tiers and seeds every cache from the step-0
    /// true queries.
    pub fn prefill(
        config: EngineConfig,
        shape: &ModelShape,
        profile: &HeadProfile,
        plan: &PartitionPlan,
        prompt: &Prompt,
    ) -> Result<Self> {
        shape.validate()?;
        profile.validate(shape)?;
        if plan.layers.len() != shape.num_layers {
            return Err(Error::config(format!(
                "plan covers {} layers, model has {}",
                plan.layers.len(),
                shape.num_layers
            )));
        }
        for lp in &plan.layers {
            if lp.persistent_heads.iter().any(|&h| h >= shape.num_kv_heads) {
                return Err(Error::config(format!("plan names a KV head beyond {}", shape.num_kv_heads)));
            }
        }
        config.cost.validate()?;
        if config.block_size == 0 {
            return Err(Error::config("block_size must be >= 1"));
        }
        let n = prompt.len();
        let k = topk_size(config.topk_ratio, n)?;
        let registry = PolicyRegistry::default();
        let params = PolicyParams {
            k,
            head_dim: shape.head_dim,
            block_size: config.block_size,
            block_capacity_factor: config.block_capacity_factor,
            row_bytes: shape.kv_row_bytes(),
        };
        let policy_profile = registry.build(&config.policy, &params)?.profile();
        let store = TieredKVStore::build(shape, prompt, plan, &config.retriever)?;

        let mut profile = profile.clone();
        profile.apply_plan(plan);
        let mut buffers = Vec::with_capacity(shape.num_layers);
        let mut policies = Vec::with_capacity(shape.num_layers);
        let mut heads = Vec::new();
        for l in 0..shape.num_layers {
            let mut lb = Vec::with_capacity(shape.num_kv_heads);
            let mut lp = Vec::with_capacity(shape.num_kv_heads);
            for h in 0..shape.num_kv_heads {
                let stored = store.head(l, h);
                let mut buf = SinkRecentBuffer::new(config.sink_tokens, config.recent_tokens, shape.head_dim);
                for i in 0..n {
                    buf.advance(stored.keys.row(i), stored.values.row(i))?;
                }
                lb.push(buf);
                let policy = if stored.tier == Tier::Host {
                    let mut p = registry.build(&config.policy, &params)?;
                    let group = shape.group(h);
                    let queries = &prompt.queries[l][group];
                    let ctx = HeadContext {
                        step: 0,
                        keys: &stored.keys,
                        values: &stored.values,
                        retriever: stored.retriever.as_ref(),
                        true_queries: queries,
                        approx_queries: queries,
                        weights: &profile.record(l, h).q_importance,
                        tau: profile.record(l, h).tau,
                        k,
                        row_bytes: shape.kv_row_bytes(),
                    };
                    p.initialize(&ctx)?;
                    Some(p)
                } else {
                    None
                };
                lp.push(policy);
                heads.push(HeadMetrics {
                    layer: l,
                    kv_head: h,
                    tier: stored.tier,
                    hits: 0,
                    misses: 0,
                    transfer_bytes: 0,
                    persistent_served_bytes: 0,
                    error_sum: 0.0,
                    error_max: 0.0,
                    error_count: 0,
                });
            }
            buffers.push(lb);
            policies.push(lp);
        }
        Ok(Self {
            config,
            shape: *shape,
            profile,
            k,
            store,
            buffers,
            policies,
            policy_profile,
            step: 0,
            metrics: DecodeMetrics {
                steps: 0,
                heads,
                step_transfer_bytes: Vec::new(),
                timeline: PipelineTimeline::new(shape.num_layers),
            },
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn store(&self) -> &TieredKVStore {
        &self.store
    }

    pub fn profile(&self) -> &HeadProfile {
        &self.profile
    }

    pub fn metrics(&self) -> &DecodeMetrics {
        &self.metrics
    }

    pub fn policy_profile(&self) -> PolicyProfile {
        self.policy_profile
    }

    pub fn pipeline_mode(&self) -> PipelineMode {
        PipelineMode {
            sync: self.policy_profile.sync,
            prefetch: self.policy_profile.prefetch,
        }
    }

    pub fn cache_state(&self) -> Vec<HeadCacheState> {
        let mut out = Vec::new();
        for l in 0..self.shape.num_layers {
            for h in 0..self.shape.num_kv_heads {
                out.push(HeadCacheState {
                    layer: l,
                    kv_head: h,
                    tier: self.store.head(l, h).tier,
                    placement: self.profile.record(l, h).placement,
                    policy: self.policies[l][h].as_ref().map(|p| p.snapshot()),
                });
            }
        }
        out
    }

    /// Device bytes the offloaded heads currently hold: resident top-k rows,
    /// sink/recent buffers, and one label row per query head of every layer.
    pub fn cache_footprint(&self) -> CacheFootprint {
        let row = self.shape.kv_row_bytes();
        let mut kv_rows = 0u64;
        let mut sink_recent = 0u64;
        for l in 0..self.shape.num_layers {
            for h in 0..self.shape.num_kv_heads {
                if self.store.head(l, h).tier != Tier::Host {
                    continue;
                }
                if let Some(rows) = self.policies[l][h].as_ref().and_then(|p| p.resident_rows()) {
                    kv_rows += rows.tokens.len() as u64 * row;
                }
                sink_recent += self.buffers[l][h].len() as u64 * row;
            }
        }
        let s = &self.shape;
        CacheFootprint {
            kv_rows,
            sink_recent,
            labels: (s.num_layers * s.num_q_heads * s.head_dim * s.bytes_per_element) as u64,
        }
    }

    fn issue(&self, req: TransferRequest) -> Result<TransferRequest> {
        if self.store.head(req.layer, req.kv_head).tier == Tier::DevicePersistent {
            return Err(Error::Invariant(format!(
                "transfer request for persistent head ({}, {})",
                req.layer, req.kv_head
            )));
        }
        Ok(req)
    }

    pub fn decode_step(&mut self, input: &StepInput) -> Result<StepOutput> {
        let shape = self.shape;
        self.step += 1;
        let step = self.step;
        let row_bytes = shape.kv_row_bytes();
        let (sink, recent) = (self.config.sink_tokens, self.config.recent_tokens);
        let mut outputs = Vec::with_capacity(shape.num_layers);
        let mut oracle_out = self.config.measure_error.then(Vec::new);
        let mut transfers = Vec::new();
        let mut scheduled = Vec::with_capacity(shape.num_layers);
        let mut step_bytes = 0u64;

        for l in 0..shape.num_layers {
            let visible = self.store.head(l, 0).keys.rows();
            let mut plan = LayerPlan {
                engine: self.policy_profile.engine,
                ..LayerPlan::idle(l)
            };
            let mut mgmt = MgmtStats::default();
            let mut offloaded = false;
            let mut selected: Vec<Vec<usize>> = Vec::with_capacity(shape.num_kv_heads);
            for h in 0..shape.num_kv_heads {
                let group = shape.group(h);
                let stored = self.store.head(l, h);
                let metric_idx = l * shape.num_kv_heads + h;
                if stored.tier == Tier::DevicePersistent {
                    let queries = &input.true_queries[l][group];
                    let scores = queries
                        .iter()
                        .map(|q| stored.retriever.scores(q, &stored.keys))
                        .collect::<Result<Vec<_>>>()?;
                    selected.push(merge_group_indices(&scores, self.k)?);
                    plan.retrieved_tokens += visible as u64;
                    self.metrics.heads[metric_idx].persistent_served_bytes += self.k as u64 * row_bytes;
                    continue;
                }
                offloaded = true;
                let record = self.profile.record(l, h);
                let ctx = HeadContext {
                    step,
                    keys: &stored.keys,
                    values: &stored.values,
                    retriever: stored.retriever.as_ref(),
                    true_queries: &input.true_queries[l][group.clone()],
                    approx_queries: &input.approx_queries[l][group],
                    weights: &record.q_importance,
                    tau: record.tau,
                    k: self.k,
                    row_bytes,
                };
                let policy = self.policies[l][h]
                    .as_mut()
                    .ok_or_else(|| Error::Invariant(format!("host head ({l}, {h}) has no policy")))?;
                let out = policy.select(&ctx, self.config.force)?;
                if out.transfer_bytes > 0 {
                    transfers.push(self.issue(TransferRequest {
                        layer: l,
                        kv_head: h,
                        bytes: out.transfer_bytes,
                    })?);
                }
                let m = &mut self.metrics.heads[metric_idx];
                m.hits += out.hits;
                m.misses += out.misses;
                m.transfer_bytes += out.transfer_bytes;
                plan.transfer_bytes += out.transfer_bytes;
                plan.retrieved_tokens += out.retrieved_tokens;
                mgmt += out.mgmt;
                step_bytes += out.transfer_bytes;
                selected.push(out.tokens);
            }
            plan.mgmt = mgmt;
            if offloaded {
                plan.sync_events = self.policy_profile.sync_events_per_layer;
            }
            scheduled.push(schedule_layer(&plan, &self.config.cost, self.pipeline_mode())?);

            for h in 0..shape.num_kv_heads {
                self.store.append(l, h, &input.keys[l][h], &input.values[l][h])?;
                self.buffers[l][h].advance(&input.keys[l][h], &input.values[l][h])?;
            }

            let mut layer_out = vec![Vec::new(); shape.num_q_heads];
            let mut layer_oracle = vec![Vec::new(); shape.num_q_heads];
            for h in 0..shape.num_kv_heads {
                let stored = self.store.head(l, h);
                let window = self.buffers[l][h].materialize();
                let gathered;
                let primary = match self.policies[l][h].as_ref().and_then(|p| p.resident_rows()) {
                    Some(rows) => rows,
                    None => {
                        gathered = (
                            stored.keys.gather(&selected[h])?,
                            stored.values.gather(&selected[h])?,
                        );
                        RowSource {
                            tokens: &selected[h],
                            keys: gathered.0.as_slice(),
                            values: gathered.1.as_slice(),
                        }
                    }
                };
                let group = shape.group(h);
                let oracle_idx = if oracle_out.is_some() {
                    Some(oracle_indices(
                        &input.true_queries[l][group.clone()],
                        &stored.keys,
                        visible,
                        self.k,
                        sink,
                        recent,
                    )?)
                } else {
                    None
                };
                for qh in group {
                    let q = &input.true_queries[l][qh];
                    let out = hybrid_attention(q, &[primary, window.view()])?.values;
                    if let Some(idx) = &oracle_idx {
                        let exact = topk_attention(q, &stored.keys, &stored.values, idx)?.values;
                        let err = relative_l2(&out, &exact)?;
                        let m = &mut self.metrics.heads[l * shape.num_kv_heads + h];
                        m.error_sum += err;
                        m.error_max = m.error_max.max(err);
                        m.error_count += 1;
                        layer_oracle[qh] = exact;
                    }
                    layer_out[qh] = out;
                }
            }
            outputs.push(layer_out);
            if let Some(o) = oracle_out.as_mut() {
                o.push(layer_oracle);
            }
        }
        self.metrics.timeline.push_step(&scheduled)?;
        self.metrics.step_transfer_bytes.push(step_bytes);
        self.metrics.steps += 1;
        Ok(StepOutput {
            outputs,
            oracle: oracle_out,
            transfers,
        })
    }
}

/// Prefill plus every step of `workload`; returns the engine for inspection
/// and the per-step outputs when `keep_outputs` is set.
pub fn run_workload(
    config: EngineConfig,
    profile: &HeadProfile,
    plan: &PartitionPlan,
    workload: &Workload,
    keep_outputs: bool,
) -> Result<(Engine, Vec<StepOutput>)> {
    workload.validate()?;
    let mut engine = Engine::prefill(config, &workload.shape, profile, plan, &workload.prompt)?;
    let mut outputs = Vec::new();
    for step in &workload.steps {
        let out = engine.decode_step(step)?;
        if keep_outputs {
            outputs.push(out);
        }
    }
    Ok((engine, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head_profile::ThresholdParams;
    use crate::retrieval::RetrieverVariant;
    use crate::synthetic::{SyntheticModel, SyntheticParams};

    fn setup(sigma: f64, drift: f64) -> (Workload, HeadProfile) {
        let shape = ModelShape::new(2, 4, 2, 8).unwrap();
        let m = SyntheticModel::new(
            shape,
            SyntheticParams {
                d_model: 32,
                sigma,
                layer_drift: drift,
                ..Default::default()
            },
        )
        .unwrap();
        let w = m.workload(64, 6).unwrap();
        let sim = vec![vec![0.9; 4]; 2];
        let profile = HeadProfile::build(&shape, m.planted_importance(), &sim, ThresholdParams::default()).unwrap();
        (w, profile)
    }

    fn exact_config(policy: &str) -> EngineConfig {
        EngineConfig {
            policy: policy.into(),
            retriever: RetrieverSpec {
                variant: RetrieverVariant::Exact,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn topk_size_rounds_up() {
        assert_eq!(topk_size(0.1, 1000).unwrap(), 100);
        assert_eq!(topk_size(0.1, 1001).unwrap(), 101);
        assert!(topk_size(0.0, 10).is_err());
    }

    #[test]
    fn all_persistent_never_transfers() {
        let (w, profile) = setup(0.05, 0.1);
        let plan = PartitionPlan::all_persistent(&w.shape, 0);
        let (engine, _) = run_workload(exact_config("similarity"), &profile, &plan, &w, false).unwrap();
        assert_eq!(engine.store().tier_bytes().host, 0);
        assert_eq!(engine.metrics().transfer_bytes(), 0);
    }

    #[test]
    fn always_miss_zero_drift_matches_oracle() {
        let (w, profile) = setup(0.05, 0.0);
        let plan = PartitionPlan::first_layer_only(&w.shape, 0);
        let cfg = EngineConfig {
            force: ForceMode::AlwaysMiss,
            ..exact_config("similarity")
        };
        let (_, outs) = run_workload(cfg, &profile, &plan, &w, true).unwrap();
        for o in outs {
            assert_eq!(o.outputs, o.oracle.unwrap());
        }
    }

    #[test]
    fn persistent_transfer_request_is_rejected() {
        let (w, profile) = setup(0.05, 0.1);
        let plan = PartitionPlan::first_layer_only(&w.shape, 0);
        let engine = Engine::prefill(exact_config("lru"), &w.shape, &profile, &plan, &w.prompt).unwrap();
        let err = engine
            .issue(TransferRequest {
                layer: 0,
                kv_head: 0,
                bytes: 1,
            })
            .unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn every_policy_runs() {
        let (w, profile) = setup(0.05, 0.1);
        let plan = PartitionPlan::first_layer_only(&w.shape, 0);
        for name in PolicyRegistry::default().names() {
            let (engine, _) = run_workload(exact_config(name), &profile, &plan, &w, false).unwrap();
            assert_eq!(engine.metrics().steps, 6);
            assert_eq!(engine.store().rows(), 70);
        }
    }
}
