//! Head importance, reuse thresholds, reuse difficulty and the
//! prefetch/persist partition.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::attention::{cosine_similarity, ModelShape};
use crate::error::{Error, Result};

pub const DEFAULT_ETA: f64 = 0.8;
pub const DEFAULT_POWER: f64 = 3.0;
pub const DEFAULT_EPSILON: f64 = 0.1;

/// Reuse threshold `cos(s^p * acos(eta) + (1 - s^p) * pi)`.
pub fn compute_threshold(importance: f64, eta: f64, power: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&importance) {
        return Err(Error::arg(format!("importance {importance} outside [0, 1]")));
    }
    if !(eta > -1.0 && eta <= 1.0) {
        return Err(Error::arg(format!("eta {eta} outside (-1, 1]")));
    }
    if !(power >= 1.0) || !power.is_finite() {
        return Err(Error::arg(format!("power {power} must be >= 1")));
    }
    let lambda = importance.powf(power);
    if lambda == 1.0 {
        return Ok(eta);
    }
    let theta_max = eta.acos();
    Ok((lambda * theta_max + (1.0 - lambda) * PI).cos())
}

/// Reuse difficulty `tau - (s_hat - epsilon)`; positive means the head rarely hits.
pub fn compute_difficulty(tau: f64, s_hat: f64, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::arg(format!("epsilon {epsilon} must be > 0")));
    }
    Ok(tau - (s_hat - epsilon))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceFit {
    pub alpha: f64,
    /// Full and streaming outputs coincide on every sample.
    pub degenerate: bool,
}

/// Least-squares blend weight of `target ~ alpha * full + (1 - alpha) * stream`,
/// projected onto `[0, 1]`. Each slice entry is one sample output vector.
pub fn fit_importance(full: &[Vec<f64>], stream: &[Vec<f64>], target: &[Vec<f64>]) -> Result<ImportanceFit> {
    if full.is_empty() || full.len() != stream.len() || full.len() != target.len() {
        return Err(Error::shape("fit_importance needs matched, nonempty samples"));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for ((f, s), t) in full.iter().zip(stream).zip(target) {
        if f.len() != s.len() || f.len() != t.len() {
            return Err(Error::shape("sample widths differ"));
        }
        for ((f, s), t) in f.iter().zip(s).zip(t) {
            let diff = f - s;
            num += (t - s) * diff;
            den += diff * diff;
        }
    }
    if den == 0.0 {
        return Ok(ImportanceFit {
            alpha: 0.0,
            degenerate: true,
        });
    }
    Ok(ImportanceFit {
        alpha: (num / den).clamp(0.0, 1.0),
        degenerate: false,
    })
}

/// `steps x query heads x d_k` queries from one sequence.
pub type QuerySequence = Vec<Vec<Vec<f64>>>;

/// Mean adjacent-step cosine per query head, pooled over all sequences.
pub fn profile_similarity(sequences: &[QuerySequence]) -> Result<Vec<f64>> {
    let heads = sequences
        .first()
        .and_then(|s| s.first())
        .map(Vec::len)
        .ok_or_else(|| Error::arg("empty query trace"))?;
    let mut sum = vec![0.0; heads];
    let mut pairs = 0usize;
    for seq in sequences {
        if seq.len() < 2 {
            return Err(Error::arg("each profiled sequence needs at least two steps"));
        }
        for w in seq.windows(2) {
            if w[0].len() != heads || w[1].len() != heads {
                return Err(Error::shape("head count changes within trace"));
            }
            for (h, acc) in sum.iter_mut().enumerate() {
                *acc += cosine_similarity(&w[0][h], &w[1][h])?.value;
            }
            pairs += 1;
        }
    }
    Ok(sum.into_iter().map(|s| s / pairs as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Offloaded,
    Persistent,
}

/// One KV head's profile record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadRecord {
    pub q_importance: Vec<f64>,
    pub kv_importance: f64,
    pub s_hat: f64,
    pub tau: f64,
    #[serde(rename = "D")]
    pub difficulty: f64,
    pub placement: Placement,
}

/// Profile file contents: one array per layer, one record per KV head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HeadProfile {
    pub layers: Vec<Vec<HeadRecord>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdParams {
    pub eta: f64,
    pub power: f64,
    pub epsilon: f64,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        Self {
            eta: DEFAULT_ETA,
            power: DEFAULT_POWER,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl HeadProfile {
    /// Reduces per-query-head inputs to KV-head records: importance is the
    /// group maximum, similarity the group minimum.
    pub fn build(
        shape: &ModelShape,
        q_importance: &[Vec<f64>],
        q_similarity: &[Vec<f64>],
        params: ThresholdParams,
    ) -> Result<Self> {
        if q_importance.len() != shape.num_layers || q_similarity.len() != shape.num_layers {
            return Err(Error::shape("per-layer inputs do not match num_layers"));
        }
        let mut layers = Vec::with_capacity(shape.num_layers);
        for (imp, sim) in q_importance.iter().zip(q_similarity) {
            if imp.len() != shape.num_q_heads || sim.len() != shape.num_q_heads {
                return Err(Error::shape("per-head inputs do not match num_q_heads"));
            }
            let mut records = Vec::with_capacity(shape.num_kv_heads);
            for kv in 0..shape.num_kv_heads {
                let g = shape.group(kv);
                let q_importance = imp[g.clone()].to_vec();
                let kv_importance = q_importance.iter().copied().fold(0.0, f64::max);
                let s_hat = sim[g].iter().copied().fold(f64::INFINITY, f64::min);
                let tau = compute_threshold(kv_importance, params.eta, params.power)?;
                let difficulty = compute_difficulty(tau, s_hat, params.epsilon)?;
                records.push(HeadRecord {
                    q_importance,
                    kv_importance,
                    s_hat,
                    tau,
                    difficulty,
                    placement: Placement::Offloaded,
                });
            }
            layers.push(records);
        }
        Ok(Self { layers })
    }

    pub fn record(&self, layer: usize, kv_head: usize) -> &HeadRecord {
        &self.layers[layer][kv_head]
    }

    /// Checks geometry against `shape`.
    pub fn validate(&self, shape: &ModelShape) -> Result<()> {
        if self.layers.len() != shape.num_layers {
            return Err(Error::config(format!(
                "profile has {} layers, model has {}",
                self.layers.len(),
                shape.num_layers
            )));
        }
        for layer in &self.layers {
            if layer.len() != shape.num_kv_heads {
                return Err(Error::config("profile KV head count mismatch"));
            }
            for r in layer {
                if r.q_importance.len() != shape.group_size() {
                    return Err(Error::config("profile group size mismatch"));
                }
                if r.q_importance.iter().any(|s| !(0.0..=1.0).contains(s)) {
                    return Err(Error::config("importance outside [0, 1]"));
                }
            }
        }
        Ok(())
    }

    pub fn apply_plan(&mut self, plan: &PartitionPlan) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (h, r) in layer.iter_mut().enumerate() {
                r.placement = if plan.is_persistent(l, h) {
                    Placement::Persistent
                } else {
                    Placement::Offloaded
                };
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionInputs {
    /// Per-layer compute time, seconds.
    pub t_comp: f64,
    /// Peak host-to-device bandwidth, bytes/s.
    pub pcie_bandwidth: f64,
    /// Top-k KV bytes of one head.
    pub mem_head: f64,
    /// Full KV bytes of one head at the maximum decode length.
    pub full_head_bytes: u64,
    pub hbm_budget: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPartition {
    pub layer: usize,
    pub n_difficult: usize,
    pub n_persist: usize,
    pub persistent_heads: Vec<usize>,
    /// Heads the formula selected but the HBM budget could not hold.
    pub dropped_heads: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub prefetchable_heads: usize,
    pub layers: Vec<LayerPartition>,
    pub hbm_budget: Option<u64>,
    pub persistent_bytes: u64,
    pub shortfall_heads: usize,
    pub shortfall_bytes: u64,
}

impl PartitionPlan {
    pub fn is_persistent(&self, layer: usize, kv_head: usize) -> bool {
        self.layers
            .get(layer)
            .is_some_and(|l| l.persistent_heads.contains(&kv_head))
    }

    /// Plan with every head of every layer persistent.
    pub fn all_persistent(shape: &ModelShape, full_head_bytes: u64) -> Self {
        Self::uniform(shape, full_head_bytes, true)
    }

    /// Plan with only the first layer persistent.
    pub fn first_layer_only(shape: &ModelShape, full_head_bytes: u64) -> Self {
        Self::uniform(shape, full_head_bytes, false)
    }

    fn uniform(shape: &ModelShape, full_head_bytes: u64, all: bool) -> Self {
        let layers: Vec<LayerPartition> = (0..shape.num_layers)
            .map(|l| {
                let heads = if all || l == 0 {
                    (0..shape.num_kv_heads).collect()
                } else {
                    Vec::new()
                };
                LayerPartition {
                    layer: l,
                    n_difficult: 0,
                    n_persist: heads.len(),
                    persistent_heads: heads,
                    dropped_heads: Vec::new(),
                }
            })
            .collect();
        let count: usize = layers.iter().map(|l| l.persistent_heads.len()).sum();
        Self {
            prefetchable_heads: 0,
            layers,
            hbm_budget: None,
            persistent_bytes: count as u64 * full_head_bytes,
            shortfall_heads: 0,
            shortfall_bytes: 0,
        }
    }
}

/// `floor(t_comp * bandwidth / mem_head)`: heads whose top-k transfer fits in
/// one compute window.
pub fn prefetchable_heads(t_comp: f64, pcie_bandwidth: f64, mem_head: f64) -> Result<usize> {
    if !(t_comp > 0.0 && pcie_bandwidth > 0.0 && mem_head > 0.0) {
        return Err(Error::arg("t_comp, bandwidth and mem_head must be positive"));
    }
    let x = t_comp * pcie_bandwidth / mem_head;
    // Absorb representation error such as 1e-3 * 2e10 / 2e6 = 9.999...
    Ok((x * (1.0 + 1e-12)).floor() as usize)
}

pub fn plan_partition(profile: &HeadProfile, inputs: &PartitionInputs) -> Result<PartitionPlan> {
    let n_p = prefetchable_heads(inputs.t_comp, inputs.pcie_bandwidth, inputs.mem_head)?;
    let mut layers = Vec::with_capacity(profile.layers.len());
    for (l, records) in profile.layers.iter().enumerate() {
        let n_difficult = records.iter().filter(|r| r.difficulty > 0.0).count();
        let persistent_heads: Vec<usize> = if l == 0 {
            (0..records.len()).collect()
        } else {
            let n_persist = n_difficult.saturating_sub(n_p);
            let mut order: Vec<usize> = (0..records.len()).collect();
            order.sort_by(|&a, &b| {
                records[b]
                    .difficulty
                    .total_cmp(&records[a].difficulty)
                    .then(a.cmp(&b))
            });
            let mut chosen = order[..n_persist].to_vec();
            chosen.sort_unstable();
            chosen
        };
        layers.push(LayerPartition {
            layer: l,
            n_difficult,
            n_persist: persistent_heads.len(),
            persistent_heads,
            dropped_heads: Vec::new(),
        });
    }

    let head_bytes = inputs.full_head_bytes;
    let layer0 = layers.first().map_or(0, |l| l.persistent_heads.len()) as u64 * head_bytes;
    let mut total: u64 = layers.iter().map(|l| l.persistent_heads.len() as u64).sum::<u64>() * head_bytes;
    let mut shortfall_heads = 0;
    if let Some(budget) = inputs.hbm_budget {
        if budget < layer0 {
            return Err(Error::config(format!(
                "HBM budget {budget} B cannot hold the first layer ({layer0} B)"
            )));
        }
        if total > budget {
            // Candidates ordered by ascending difficulty; ties drop the later head first.
            let mut candidates: Vec<(usize, usize)> = layers
                .iter()
                .skip(1)
                .flat_map(|lp| lp.persistent_heads.iter().map(move |&h| (lp.layer, h)))
                .collect();
            candidates.sort_by(|a, b| {
                let da = profile.layers[a.0][a.1].difficulty;
                let db = profile.layers[b.0][b.1].difficulty;
                da.total_cmp(&db).then(b.cmp(a))
            });
            for (l, h) in candidates {
                if total <= budget {
                    break;
                }
                let lp = &mut layers[l];
                lp.persistent_heads.retain(|&x| x != h);
                lp.dropped_heads.push(h);
                lp.n_persist -= 1;
                total -= head_bytes;
                shortfall_heads += 1;
            }
            for lp in &mut layers {
                lp.dropped_heads.sort_unstable();
            }
        }
    }
    Ok(PartitionPlan {
        prefetchable_heads: n_p,
        layers,
        hbm_budget: inputs.hbm_budget,
        persistent_bytes: total,
        shortfall_heads,
        shortfall_bytes: shortfall_heads as u64 * head_bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(d: f64) -> HeadRecord {
        HeadRecord {
            q_importance: vec![0.5],
            kv_importance: 0.5,
            s_hat: 0.5,
            tau: 0.0,
            difficulty: d,
            placement: Placement::Offloaded,
        }
    }

    fn inputs(n_p_numerator: f64, budget: Option<u64>) -> PartitionInputs {
        PartitionInputs {
            t_comp: n_p_numerator,
            pcie_bandwidth: 1.0,
            mem_head: 1.0,
            full_head_bytes: 100,
            hbm_budget: budget,
        }
    }

    #[test]
    fn threshold_endpoints() {
        assert_eq!(compute_threshold(1.0, 0.8, 3.0).unwrap(), 0.8);
        assert!((compute_threshold(0.0, 0.8, 3.0).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_domain_errors() {
        assert!(compute_threshold(1.1, 0.8, 3.0).is_err());
        assert!(compute_threshold(0.5, -1.0, 3.0).is_err());
        assert!(compute_threshold(0.5, 0.8, 0.5).is_err());
        assert!(compute_difficulty(0.1, 0.1, 0.0).is_err());
    }

    #[test]
    fn difficulty_substitution() {
        assert!((compute_difficulty(0.8, 0.7, 0.1).unwrap() - 0.2).abs() < 1e-15);
        assert!(compute_difficulty(0.3, 0.4, 0.1).unwrap().abs() < 1e-15);
    }

    #[test]
    fn fit_degenerate_when_full_equals_stream() {
        let a = vec![vec![1.0, 2.0]];
        let f = fit_importance(&a, &a, &[vec![0.0, 0.0]]).unwrap();
        assert!(f.degenerate);
        assert_eq!(f.alpha, 0.0);
    }

    #[test]
    fn fit_clamps_to_unit_interval() {
        let full = vec![vec![1.0]];
        let stream = vec![vec![0.0]];
        assert_eq!(fit_importance(&full, &stream, &[vec![2.0]]).unwrap().alpha, 1.0);
        assert_eq!(fit_importance(&full, &stream, &[vec![-1.0]]).unwrap().alpha, 0.0);
    }

    #[test]
    fn profile_rejects_single_step() {
        let seq: QuerySequence = vec![vec![vec![1.0]]];
        assert!(profile_similarity(&[seq]).is_err());
    }

    #[test]
    fn prefetchable_dimensional_example() {
        assert_eq!(prefetchable_heads(1e-3, 2e10, 2e6).unwrap(), 10);
        assert!(prefetchable_heads(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn persistent_heads_are_the_most_difficult() {
        let ds = [0.3, 0.9, -0.1, 0.5, 0.2, 0.8, 0.1, 0.4, 0.05, 0.6, 0.7, 0.15, 0.01];
        let profile = HeadProfile {
            layers: vec![vec![record(-1.0); 13], ds.iter().map(|&d| record(d)).collect()],
        };
        let plan = plan_partition(&profile, &inputs(10.0, None)).unwrap();
        let l1 = &plan.layers[1];
        assert_eq!(l1.n_difficult, 12);
        assert_eq!(l1.n_persist, 2);
        assert_eq!(l1.persistent_heads, vec![1, 5]);
        assert_eq!(plan.layers[0].persistent_heads.len(), 13);
    }

    #[test]
    fn budget_drops_least_difficult_first() {
        let profile = HeadProfile {
            layers: vec![
                vec![record(0.0); 2],
                vec![record(0.9), record(0.2), record(0.5)],
                vec![record(0.3), record(0.8), record(-0.5)],
            ],
        };
        let plan = plan_partition(&profile, &inputs(0.5, Some(500))).unwrap();
        assert_eq!(plan.prefetchable_heads, 0);
        assert_eq!(plan.layers[1].persistent_heads, vec![0, 2]);
        assert_eq!(plan.layers[1].dropped_heads, vec![1]);
        assert_eq!(plan.layers[2].persistent_heads, vec![1]);
        assert_eq!(plan.layers[2].dropped_heads, vec![0]);
        assert_eq!(plan.persistent_bytes, 500);
        assert_eq!(plan.shortfall_heads, 2);
        assert_eq!(plan.shortfall_bytes, 200);
        let err = plan_partition(&profile, &inputs(0.5, Some(150))).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn build_reduces_groups() {
        let shape = ModelShape { num_layers: 1, num_q_heads: 4, num_kv_heads: 2, head_dim: 4, bytes_per_element: 2 };
        let p = HeadProfile::build(
            &shape,
            &[vec![0.1, 1.0, 0.0, 0.2]],
            &[vec![0.9, 0.5, 0.7, 0.8]],
            ThresholdParams::default(),
        )
        .unwrap();
        assert_eq!(p.layers[0][0].kv_importance, 1.0);
        assert_eq!(p.layers[0][0].tau, 0.8);
        assert_eq!(p.layers[0][0].s_hat, 0.5);
        assert_eq!(p.layers[0][1].s_hat, 0.7);
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.starts_with("[[{"));
        assert!(json.contains("\"D\":"));
        let back: HeadProfile = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }
}
