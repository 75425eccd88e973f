//! Head-wise query-similarity cache.
//!
//! Each offloaded KV head keeps one query label per query head in its group
//! and one cache entry holding the top-k rows chosen for that label. A lookup
//! compares the incoming queries against the labels; the KV head hits when the
//! importance-weighted harmonic aggregate of the per-query-head cosines reaches
//! the head's threshold. A miss replaces the labels in the same call and arms a
//! single whole-entry replacement.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::attention::{cosine_similarity, top_k_by_score, ModelShape, RowSource};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissReason {
    /// No label yet (initial step) or a label was degenerate.
    InvalidLabel,
    BelowThreshold,
    /// Some query head had cosine <= 0 against its label.
    NonPositiveSimilarity,
    Forced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Hit,
    Miss(MissReason),
}

impl Decision {
    pub fn is_hit(self) -> bool {
        matches!(self, Decision::Hit)
    }
}

/// Test-and-control override used by the oracle modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForceMode {
    #[default]
    None,
    AlwaysMiss,
    AlwaysHit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LookupResult {
    pub decision: Decision,
    /// `None` when aggregation was bypassed.
    pub aggregated: Option<f64>,
    pub similarities: Vec<f64>,
}

/// Importance-weighted harmonic mean `sum(w) / sum(w / sim)`.
///
/// Returns `None` if any similarity is non-positive. All-zero weights fall
/// back to equal weights.
pub fn aggregate_similarity(weights: &[f64], sims: &[f64]) -> Option<f64> {
    debug_assert_eq!(weights.len(), sims.len());
    if sims.is_empty() || sims.iter().any(|&s| s <= 0.0) {
        return None;
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        let denom: f64 = sims.iter().map(|s| 1.0 / s).sum();
        return Some(sims.len() as f64 / denom);
    }
    let denom: f64 = weights.iter().zip(sims).map(|(w, s)| w / s).sum();
    Some(total / denom)
}

/// Stored queries (one per query head of the group).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryLabel {
    queries: Vec<Vec<f64>>,
    valid: bool,
}

impl QueryLabel {
    pub fn set(&mut self, queries: &[Vec<f64>]) {
        self.valid = !queries.is_empty()
            && queries
                .iter()
                .all(|q| q.iter().all(|x| x.is_finite()) && q.iter().any(|&x| x != 0.0));
        self.queries = queries.to_vec();
    }

    pub fn is_valid(&self) -> bool {
        self.valid
    }

    pub fn queries(&self) -> &[Vec<f64>] {
        &self.queries
    }
}

/// Cached top-k rows of one KV head.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    capacity: usize,
    head_dim: usize,
    tokens: Vec<usize>,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl CacheEntry {
    pub fn new(capacity: usize, head_dim: usize) -> Self {
        Self {
            capacity,
            head_dim,
            tokens: Vec::new(),
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn keys(&self) -> &[f64] {
        &self.keys
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn rows(&self) -> RowSource<'_> {
        RowSource {
            tokens: &self.tokens,
            keys: &self.keys,
            values: &self.values,
        }
    }

    fn replace(&mut self, tokens: &[usize], keys: &[f64], values: &[f64]) -> Result<()> {
        if tokens.len() > self.capacity {
            return Err(Error::Contract(format!(
                "{} rows exceed entry capacity {}",
                tokens.len(),
                self.capacity
            )));
        }
        if keys.len() != tokens.len() * self.head_dim || values.len() != tokens.len() * self.head_dim {
            return Err(Error::shape("entry rows do not match token count"));
        }
        let mut sorted = tokens.to_vec();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("duplicate token in cache entry".into()));
        }
        self.tokens.clear();
        self.tokens.extend_from_slice(tokens);
        self.keys.clear();
        self.keys.extend_from_slice(keys);
        self.values.clear();
        self.values.extend_from_slice(values);
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadCacheStats {
    pub hit_count: u64,
    pub miss_count: u64,
    pub last_update_step: Option<u64>,
    pub similarity_history: Vec<f64>,
}

/// Debug dump record for one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCacheSnapshot {
    pub hit_count: u64,
    pub miss_count: u64,
    pub last_update_step: Option<u64>,
    pub similarity_history_len: usize,
}

/// Label plus entry for one offloaded KV head.
#[derive(Debug, Clone)]
pub struct HeadCache {
    label: QueryLabel,
    entry: CacheEntry,
    pending_update: bool,
    stats: HeadCacheStats,
}

impl HeadCache {
    pub fn new(capacity: usize, head_dim: usize) -> Self {
        Self {
            label: QueryLabel::default(),
            entry: CacheEntry::new(capacity, head_dim),
            pending_update: false,
            stats: HeadCacheStats::default(),
        }
    }

    pub fn label(&self) -> &QueryLabel {
        &self.label
    }

    pub fn entry(&self) -> &CacheEntry {
        &self.entry
    }

    pub fn stats(&self) -> &HeadCacheStats {
        &self.stats
    }

    pub fn snapshot(&self) -> HeadCacheSnapshot {
        HeadCacheSnapshot {
            hit_count: self.stats.hit_count,
            miss_count: self.stats.miss_count,
            last_update_step: self.stats.last_update_step,
            similarity_history_len: self.stats.similarity_history.len(),
        }
    }

    /// Whether the last lookup missed and the entry still awaits its rows.
    pub fn awaiting_update(&self) -> bool {
        self.pending_update
    }

    /// Step-0 population from the true queries; not counted as a hit or miss.
    pub fn initialize(
        &mut self,
        queries: &[Vec<f64>],
        tokens: &[usize],
        keys: &[f64],
        values: &[f64],
    ) -> Result<()> {
        self.label.set(queries);
        self.entry.replace(tokens, keys, values)?;
        self.pending_update = false;
        self.stats.last_update_step = Some(0);
        Ok(())
    }

    /// Hit test against the stored labels, fused with the label update on miss.
    pub fn lookup(
        &mut self,
        queries: &[Vec<f64>],
        weights: &[f64],
        tau: f64,
        force: ForceMode,
    ) -> Result<LookupResult> {
        if queries.is_empty() || queries.len() != weights.len() {
            return Err(Error::shape(format!(
                "{} queries with {} weights",
                queries.len(),
                weights.len()
            )));
        }
        let result = if !self.label.is_valid() || self.label.queries.len() != queries.len() {
            LookupResult {
                decision: Decision::Miss(MissReason::InvalidLabel),
                aggregated: None,
                similarities: Vec::new(),
            }
        } else {
            let mut similarities = Vec::with_capacity(queries.len());
            let mut degenerate = false;
            for (q, l) in queries.iter().zip(&self.label.queries) {
                let s = cosine_similarity(q, l)?;
                degenerate |= s.degenerate;
                similarities.push(s.value);
            }
            let aggregated = aggregate_similarity(weights, &similarities);
            let decision = match (force, aggregated) {
                (ForceMode::AlwaysMiss, _) => Decision::Miss(MissReason::Forced),
                (ForceMode::AlwaysHit, _) => Decision::Hit,
                // cos >= -1 always, so a threshold of -1 admits everything.
                _ if tau <= -1.0 => Decision::Hit,
                _ if degenerate => Decision::Miss(MissReason::InvalidLabel),
                (_, None) => Decision::Miss(MissReason::NonPositiveSimilarity),
                (_, Some(s)) if s >= tau => Decision::Hit,
                (_, Some(_)) => Decision::Miss(MissReason::BelowThreshold),
            };
            if let Some(s) = aggregated {
                self.stats.similarity_history.push(s);
            }
            LookupResult {
                decision,
                aggregated,
                similarities,
            }
        };
        match result.decision {
            Decision::Hit => {
                self.stats.hit_count += 1;
                self.pending_update = false;
            }
            Decision::Miss(_) => {
                self.stats.miss_count += 1;
                self.label.set(queries);
                self.pending_update = true;
            }
        }
        Ok(result)
    }

    /// Replaces the whole entry after a miss. Rows are written in place.
    pub fn update_entry(&mut self, step: u64, tokens: &[usize], keys: &[f64], values: &[f64]) -> Result<()> {
        if !self.pending_update {
            return Err(Error::Contract("entry update without a preceding miss".into()));
        }
        self.entry.replace(tokens, keys, values)?;
        self.pending_update = false;
        self.stats.last_update_step = Some(step);
        Ok(())
    }
}

/// KV-head index set from per-query-head scores: each index is ranked by its
/// best score across the group, truncated to `k`.
pub fn merge_group_indices(scores: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    let first = scores.first().ok_or_else(|| Error::arg("no query heads"))?;
    let mut best = first.clone();
    for s in &scores[1..] {
        if s.len() != best.len() {
            return Err(Error::shape("score rows differ in length"));
        }
        for (b, x) in best.iter_mut().zip(s) {
            *b = b.max(*x);
        }
    }
    top_k_by_score(&best, k)
}

/// Always-resident sink prefix plus a ring of the most recent tokens.
#[derive(Debug, Clone)]
pub struct SinkRecentBuffer {
    sink_count: usize,
    recent_count: usize,
    head_dim: usize,
    sink_keys: Vec<f64>,
    sink_values: Vec<f64>,
    /// Token position, K row, V row; front is oldest.
    recent: VecDeque<(usize, Vec<f64>, Vec<f64>)>,
    next_token: usize,
}

impl SinkRecentBuffer {
    pub fn new(sink_count: usize, recent_count: usize, head_dim: usize) -> Self {
        Self {
            sink_count,
            recent_count,
            head_dim,
            sink_keys: Vec::new(),
            sink_values: Vec::new(),
            recent: VecDeque::with_capacity(recent_count + 1),
            next_token: 0,
        }
    }

    /// Tokens seen so far.
    pub fn sequence_len(&self) -> usize {
        self.next_token
    }

    pub fn sink_len(&self) -> usize {
        self.sink_keys.len() / self.head_dim
    }

    pub fn len(&self) -> usize {
        self.sink_len() + self.recent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sink_rows(&self) -> (&[f64], &[f64]) {
        (&self.sink_keys, &self.sink_values)
    }

    pub fn recent_tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.recent.iter().map(|r| r.0)
    }

    pub fn tokens(&self) -> Vec<usize> {
        (0..self.sink_len()).chain(self.recent_tokens()).collect()
    }

    /// Appends the next token's rows, sliding the recent window by one.
    pub fn advance(&mut self, key: &[f64], value: &[f64]) -> Result<()> {
        if key.len() != self.head_dim || value.len() != self.head_dim {
            return Err(Error::shape("buffer row width"));
        }
        let t = self.next_token;
        self.next_token += 1;
        if t < self.sink_count {
            self.sink_keys.extend_from_slice(key);
            self.sink_values.extend_from_slice(value);
            return Ok(());
        }
        if self.recent_count == 0 {
            return Ok(());
        }
        if self.recent.len() == self.recent_count {
            self.recent.pop_front();
        }
        self.recent.push_back((t, key.to_vec(), value.to_vec()));
        Ok(())
    }

    /// Contiguous copy usable as an attention row source.
    pub fn materialize(&self) -> OwnedRows {
        let mut rows = OwnedRows {
            tokens: (0..self.sink_len()).collect(),
            keys: self.sink_keys.clone(),
            values: self.sink_values.clone(),
        };
        for (t, k, v) in &self.recent {
            rows.tokens.push(*t);
            rows.keys.extend_from_slice(k);
            rows.values.extend_from_slice(v);
        }
        rows
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OwnedRows {
    pub tokens: Vec<usize>,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

impl OwnedRows {
    pub fn view(&self) -> RowSource<'_> {
        RowSource {
            tokens: &self.tokens,
            keys: &self.keys,
            values: &self.values,
        }
    }
}

/// Device bytes held by the similarity cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheFootprint {
    pub kv_rows: u64,
    pub sink_recent: u64,
    pub labels: u64,
}

impl CacheFootprint {
    pub fn total(&self) -> u64 {
        self.kv_rows + self.sink_recent + self.labels
    }
}

/// `offloaded_heads * 2*k*d_k*width` for entries, the same per buffered
/// sink/recent token, and `h_q*d_k*width` of labels per layer.
pub fn cache_bytes(shape: &ModelShape, offloaded_heads: usize, k: usize, buffered_tokens: usize) -> CacheFootprint {
    let row = shape.kv_row_bytes();
    CacheFootprint {
        kv_rows: offloaded_heads as u64 * k as u64 * row,
        sink_recent: offloaded_heads as u64 * buffered_tokens as u64 * row,
        labels: (shape.num_layers * shape.num_q_heads * shape.head_dim * shape.bytes_per_element) as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn aggregation_hand_values() {
        assert!(close(aggregate_similarity(&[0.3, 0.7], &[0.9, 0.9]).unwrap(), 0.9, 1e-15));
        assert!(close(aggregate_similarity(&[1.0, 1.0], &[0.5, 1.0]).unwrap(), 2.0 / 3.0, 1e-15));
        assert!(close(aggregate_similarity(&[0.9, 0.1], &[0.5, 1.0]).unwrap(), 1.0 / 1.9, 1e-15));
        assert_eq!(aggregate_similarity(&[1.0, 1.0], &[0.5, 0.0]), None);
        assert_eq!(aggregate_similarity(&[1.0, 1.0], &[0.5, -0.2]), None);
        assert!(close(aggregate_similarity(&[0.0, 0.0], &[0.5, 1.0]).unwrap(), 2.0 / 3.0, 1e-15));
    }

    #[test]
    fn first_lookup_is_invalid_label_miss() {
        let mut c = HeadCache::new(2, 2);
        let r = c.lookup(&[vec![1.0, 0.0]], &[1.0], -1.0, ForceMode::None).unwrap();
        assert_eq!(r.decision, Decision::Miss(MissReason::InvalidLabel));
        assert!(c.awaiting_update());
        assert!(c.label().is_valid());
    }

    #[test]
    fn miss_update_then_self_lookup_hits() {
        let mut c = HeadCache::new(2, 2);
        c.initialize(&[vec![0.0, 1.0]], &[0], &[1.0, 1.0], &[2.0, 2.0]).unwrap();
        let q = vec![vec![1.0, 0.0]];
        let r = c.lookup(&q, &[1.0], 0.8, ForceMode::None).unwrap();
        assert_eq!(r.decision, Decision::Miss(MissReason::NonPositiveSimilarity));
        c.update_entry(1, &[3, 1], &[0.0; 4], &[0.0; 4]).unwrap();
        let r = c.lookup(&q, &[1.0], 0.8, ForceMode::None).unwrap();
        assert_eq!(r.decision, Decision::Hit);
        assert_eq!(r.aggregated, Some(1.0));
        assert_eq!(c.entry().tokens(), &[3, 1]);
    }

    #[test]
    fn update_without_miss_is_rejected() {
        let mut c = HeadCache::new(2, 1);
        c.initialize(&[vec![1.0]], &[0], &[1.0], &[1.0]).unwrap();
        c.lookup(&[vec![2.0]], &[1.0], 0.5, ForceMode::None).unwrap();
        assert!(matches!(c.update_entry(1, &[1], &[1.0], &[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn update_over_capacity_is_rejected() {
        let mut c = HeadCache::new(1, 1);
        c.lookup(&[vec![1.0]], &[1.0], 0.5, ForceMode::None).unwrap();
        assert!(c.update_entry(1, &[0, 1], &[1.0, 1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn tau_minus_one_always_hits() {
        let mut c = HeadCache::new(1, 2);
        c.initialize(&[vec![1.0, 0.0]], &[0], &[0.0; 2], &[0.0; 2]).unwrap();
        let r = c.lookup(&[vec![-1.0, 0.0]], &[1.0], -1.0, ForceMode::None).unwrap();
        assert!(r.decision.is_hit());
    }

    #[test]
    fn forced_modes() {
        let mut c = HeadCache::new(1, 1);
        c.initialize(&[vec![1.0]], &[0], &[0.0], &[0.0]).unwrap();
        let r = c.lookup(&[vec![1.0]], &[1.0], -1.0, ForceMode::AlwaysMiss).unwrap();
        assert_eq!(r.decision, Decision::Miss(MissReason::Forced));
        c.update_entry(1, &[0], &[0.0], &[0.0]).unwrap();
        let r = c.lookup(&[vec![-1.0]], &[1.0], 0.99, ForceMode::AlwaysHit).unwrap();
        assert!(r.decision.is_hit());
    }

    #[test]
    fn merge_uses_best_score() {
        let s = vec![vec![5.0, 1.0, 0.0, 3.0], vec![0.0, 4.0, 6.0, 0.0]];
        assert_eq!(merge_group_indices(&s, 2).unwrap(), vec![0, 2]);
        assert_eq!(merge_group_indices(&s, 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn buffer_window_after_100_steps() {
        let mut b = SinkRecentBuffer::new(4, 64, 1);
        for t in 0..100 {
            b.advance(&[t as f64], &[t as f64]).unwrap();
        }
        let tokens = b.tokens();
        assert_eq!(&tokens[..4], &[0, 1, 2, 3]);
        assert_eq!(tokens[4..].to_vec(), (36..100).collect::<Vec<_>>());
        assert_eq!(b.len(), 68);
    }

    #[test]
    fn short_sequence_buffer_holds_everything() {
        let mut b = SinkRecentBuffer::new(4, 64, 1);
        for t in 0..50 {
            b.advance(&[t as f64], &[0.0]).unwrap();
        }
        assert_eq!(b.tokens(), (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn sink_rows_never_change() {
        let mut b = SinkRecentBuffer::new(4, 8, 2);
        for t in 0..4 {
            b.advance(&[t as f64, 1.0], &[0.0, t as f64]).unwrap();
        }
        let before = (b.sink_rows().0.to_vec(), b.sink_rows().1.to_vec());
        for t in 4..1000 {
            b.advance(&[t as f64, 2.0], &[3.0, t as f64]).unwrap();
        }
        assert_eq!((b.sink_rows().0.to_vec(), b.sink_rows().1.to_vec()), before);
    }

    #[test]
    fn footprint_closed_form() {
        let shape = ModelShape { num_layers: 1, num_q_heads: 1, num_kv_heads: 1, head_dim: 128, bytes_per_element: 2 };
        let f = cache_bytes(&shape, 1, 1000, 0);
        assert_eq!(f.kv_rows, 512_000);
        assert_eq!(cache_bytes(&shape, 2, 1000, 0).kv_rows, 2 * f.kv_rows);
        let z = cache_bytes(&shape, 3, 0, 68);
        assert_eq!(z.kv_rows, 0);
        assert_eq!(z.total(), z.labels + z.sink_recent);
        assert_eq!(z.labels, 128 * 2);
    }
}
