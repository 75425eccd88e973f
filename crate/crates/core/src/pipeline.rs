//! Closed-form per-layer latency model of the decode pipeline.
//!
//! A layer costs its compute window plus whatever transfer is left exposed,
//! serialized cache management, top-k retrieval, and one bubble per
//! host-blocking synchronization event. With prefetching, layer `l`'s transfer
//! runs under layer `l-1`'s compute window; layer 0 is never prefetched.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::baseline_caches::{policy_cost, ManagementCosts, MgmtStats};
use crate::error::{Error, Result};

/// Peak achieved by a zero-copy engine on PCIe 4.0 x16, bytes/s.
pub const DEFAULT_PCIE_PEAK_BW: f64 = 2.121e10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferEngine {
    /// Rows go straight from host memory to their device destination.
    ZeroCopy,
    /// Rows are gathered into a staging buffer on the host first.
    GatherCopy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    CpuCentric,
    GpuCentric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub pcie_peak_bw: f64,
    /// Fraction of peak reached by gather-then-copy. Visually estimated.
    pub gather_efficiency: f64,
    pub sync_bubble_cpu_centric: f64,
    pub sync_bubble_gpu_centric: f64,
    /// Per-layer compute time, seconds.
    pub t_comp: f64,
    /// Retrieval time per scanned token per head, seconds.
    pub retrieval_per_token_s: f64,
    pub management: ManagementCosts,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            pcie_peak_bw: DEFAULT_PCIE_PEAK_BW,
            gather_efficiency: 0.5,
            sync_bubble_cpu_centric: 5e-5,
            sync_bubble_gpu_centric: 0.0,
            t_comp: 1e-4,
            retrieval_per_token_s: 2e-9,
            management: ManagementCosts::default(),
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            self.sync_bubble_cpu_centric,
            self.sync_bubble_gpu_centric,
            self.t_comp,
            self.retrieval_per_token_s,
        ];
        if nonneg.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::config("cost model times must be finite and >= 0"));
        }
        if !(self.pcie_peak_bw.is_finite() && self.pcie_peak_bw > 0.0) {
            return Err(Error::config("pcie_peak_bw must be > 0"));
        }
        if !(self.gather_efficiency > 0.0 && self.gather_efficiency <= 1.0) {
            return Err(Error::config("gather_efficiency must be in (0, 1]"));
        }
        self.management.validate()
    }

    pub fn sync_bubble(&self, mode: SyncMode) -> f64 {
        match mode {
            SyncMode::CpuCentric => self.sync_bubble_cpu_centric,
            SyncMode::GpuCentric => self.sync_bubble_gpu_centric,
        }
    }
}

/// Seconds to move `bytes` host-to-device.
pub fn transfer_time(bytes: u64, engine: TransferEngine, cost: &CostModel) -> f64 {
    let bw = match engine {
        TransferEngine::ZeroCopy => cost.pcie_peak_bw,
        TransferEngine::GatherCopy => cost.pcie_peak_bw * cost.gather_efficiency,
    };
    bytes as f64 / bw
}

/// What one layer asks of the pipeline in one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer: usize,
    pub transfer_bytes: u64,
    pub engine: TransferEngine,
    /// Tokens scanned by top-k retrieval, summed over heads.
    pub retrieved_tokens: u64,
    pub mgmt: MgmtStats,
    pub sync_events: u32,
}

impl LayerPlan {
    pub fn idle(layer: usize) -> Self {
        Self {
            layer,
            transfer_bytes: 0,
            engine: TransferEngine::ZeroCopy,
            retrieved_tokens: 0,
            mgmt: MgmtStats::default(),
            sync_events: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineMode {
    pub sync: SyncMode,
    pub prefetch: bool,
}

/// Interval lengths for one layer, seconds. `transfer_s` is the exposed part.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerTimeline {
    pub layer: usize,
    pub compute_s: f64,
    pub transfer_s: f64,
    pub hidden_s: f64,
    pub mgmt_s: f64,
    pub sync_s: f64,
    pub retrieval_s: f64,
    pub total_s: f64,
}

impl LayerTimeline {
    fn accumulate(&mut self, o: &LayerTimeline) {
        self.compute_s += o.compute_s;
        self.transfer_s += o.transfer_s;
        self.hidden_s += o.hidden_s;
        self.mgmt_s += o.mgmt_s;
        self.sync_s += o.sync_s;
        self.retrieval_s += o.retrieval_s;
        self.total_s += o.total_s;
    }

    fn scaled(&self, f: f64) -> LayerTimeline {
        LayerTimeline {
            layer: self.layer,
            compute_s: self.compute_s * f,
            transfer_s: self.transfer_s * f,
            hidden_s: self.hidden_s * f,
            mgmt_s: self.mgmt_s * f,
            sync_s: self.sync_s * f,
            retrieval_s: self.retrieval_s * f,
            total_s: self.total_s * f,
        }
    }
}

pub fn schedule_layer(plan: &LayerPlan, cost: &CostModel, mode: PipelineMode) -> Result<LayerTimeline> {
    if !(cost.t_comp >= 0.0) {
        return Err(Error::Model(format!("negative compute window {}", cost.t_comp)));
    }
    let transfer = transfer_time(plan.transfer_bytes, plan.engine, cost);
    let window = if mode.prefetch && plan.layer > 0 {
        cost.t_comp
    } else {
        0.0
    };
    let hidden = transfer.min(window);
    let exposed = transfer - hidden;
    let mgmt = policy_cost(&plan.mgmt, &cost.management);
    let sync = cost.sync_bubble(mode.sync) * f64::from(plan.sync_events);
    let retrieval = cost.retrieval_per_token_s * plan.retrieved_tokens as f64;
    let parts = [cost.t_comp, exposed, mgmt, sync, retrieval];
    if parts.iter().any(|x| *x < 0.0 || !x.is_finite()) {
        return Err(Error::Model("negative or non-finite interval".into()));
    }
    Ok(LayerTimeline {
        layer: plan.layer,
        compute_s: cost.t_comp,
        transfer_s: exposed,
        hidden_s: hidden,
        mgmt_s: mgmt,
        sync_s: sync,
        retrieval_s: retrieval,
        total_s: parts.iter().sum(),
    })
}

/// Share of total time per category, in percent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    #[serde(rename = "Compute")]
    pub compute: f64,
    #[serde(rename = "Top-k retrieval")]
    pub retrieval: f64,
    #[serde(rename = "Cache management")]
    pub cache_management: f64,
    #[serde(rename = "Host data transfer")]
    pub host_data_transfer: f64,
    #[serde(rename = "Control and synchronization")]
    pub synchronization: f64,
}

/// Accumulated timeline across steps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineTimeline {
    pub steps: usize,
    /// Per layer, summed over steps.
    pub layers: Vec<LayerTimeline>,
    /// Per step, summed over layers.
    pub step_totals: Vec<f64>,
}

impl PipelineTimeline {
    pub fn new(num_layers: usize) -> Self {
        Self {
            steps: 0,
            layers: (0..num_layers)
                .map(|layer| LayerTimeline {
                    layer,
                    ..Default::default()
                })
                .collect(),
            step_totals: Vec::new(),
        }
    }

    /// Adds one decode step worth of scheduled layers.
    pub fn push_step(&mut self, layers: &[LayerTimeline]) -> Result<()> {
        if layers.len() != self.layers.len() {
            return Err(Error::shape("step covers a different number of layers"));
        }
        let mut total = 0.0;
        for (acc, l) in self.layers.iter_mut().zip(layers) {
            acc.accumulate(l);
            total += l.total_s;
        }
        self.step_totals.push(total);
        self.steps += 1;
        Ok(())
    }

    pub fn totals(&self) -> LayerTimeline {
        let mut t = LayerTimeline::default();
        for l in &self.layers {
            t.accumulate(l);
        }
        t
    }

    /// Per-layer averages per step.
    pub fn per_step_layers(&self) -> Vec<LayerTimeline> {
        let f = if self.steps == 0 { 0.0 } else { 1.0 / self.steps as f64 };
        self.layers.iter().map(|l| l.scaled(f)).collect()
    }

    pub fn mean_step_latency(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.totals().total_s / self.steps as f64
        }
    }

    pub fn breakdown(&self) -> Breakdown {
        let t = self.totals();
        if t.total_s <= 0.0 {
            return Breakdown::default();
        }
        let pct = |x: f64| 100.0 * x / t.total_s;
        Breakdown {
            compute: pct(t.compute_s),
            retrieval: pct(t.retrieval_s),
            cache_management: pct(t.mgmt_s),
            host_data_transfer: pct(t.transfer_s),
            synchronization: pct(t.sync_s),
        }
    }

    /// Per-layer, per-step mean breakdown as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,compute_s,transfer_s,hidden_s,mgmt_s,sync_s,retrieval_s,total_s\n");
        if self.steps == 0 {
            return out;
        }
        for l in self.per_step_layers() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                l.layer, l.compute_s, l.transfer_s, l.hidden_s, l.mgmt_s, l.sync_s, l.retrieval_s, l.total_s
            );
        }
        out
    }
}

/// JSON form of a breakdown report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownReport {
    pub steps: usize,
    pub layers: Vec<LayerTimeline>,
    pub mean_step_latency_s: f64,
    pub breakdown: Breakdown,
}

impl From<&PipelineTimeline> for BreakdownReport {
    fn from(t: &PipelineTimeline) -> Self {
        Self {
            steps: t.steps,
            layers: t.per_step_layers(),
            mean_step_latency_s: t.mean_step_latency(),
            breakdown: t.breakdown(),
        }
    }
}

/// Schedules every layer of every step and accumulates the timeline.
pub fn run_breakdown(step_plans: &[Vec<LayerPlan>], cost: &CostModel, mode: PipelineMode) -> Result<PipelineTimeline> {
    let layers = step_plans.first().map_or(0, Vec::len);
    let mut timeline = PipelineTimeline::new(layers);
    for plans in step_plans {
        let scheduled = plans
            .iter()
            .map(|p| schedule_layer(p, cost, mode))
            .collect::<Result<Vec<_>>>()?;
        timeline.push_step(&scheduled)?;
    }
    Ok(timeline)
}
