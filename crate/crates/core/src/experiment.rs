//! Experiment grid runner and report files.
//!
//! Every `(policy, sigma, topk_ratio, seed)` cell is profiled, planned and
//! decoded independently; cells run on a worker pool and are reported in grid
//! order, so outputs do not depend on the worker count. Each invocation
//! writes a fresh numbered run directory.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::ModelShape;
use crate::config::RunConfig;
use crate::engine::{run_workload, topk_size, EngineConfig, HeadCacheState};
use crate::error::{Error, Result};
use crate::head_profile::{plan_partition, profile_similarity, HeadProfile, PartitionInputs, PartitionPlan};
use crate::pipeline::{Breakdown, BreakdownReport};
use crate::retrieval::RetrieverSpec;
use crate::rng::derive_seed;
use crate::synthetic::{SyntheticModel, SyntheticParams};
use crate::trace;
use crate::workload::Workload;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub policy: String,
    pub sigma: f64,
    pub topk_ratio: f64,
    pub seed: u64,
}

impl Cell {
    /// Directory-safe identifier.
    pub fn id(&self) -> String {
        format!("{}-sigma{}-k{}-seed{}", self.policy, self.sigma, self.topk_ratio, self.seed)
    }
}

/// Grid cells in policy, sigma, ratio, seed order.
pub fn grid(cfg: &RunConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for policy in &cfg.policies {
        for &sigma in &cfg.sigmas {
            for &topk_ratio in &cfg.topk_ratios {
                for &seed in &cfg.seeds {
                    cells.push(Cell {
                        policy: policy.clone(),
                        sigma,
                        topk_ratio,
                        seed,
                    });
                }
            }
        }
    }
    cells
}

/// Inputs for one cell: decode workload, per-head profile and placement plan.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub workload: Workload,
    pub profile: HeadProfile,
    pub plan: PartitionPlan,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("invalid {what} {}: {e}", path.display())))
}

pub fn synthetic_model(cfg: &RunConfig, sigma: f64, seed: u64) -> Result<SyntheticModel> {
    SyntheticModel::new(
        cfg.shape,
        SyntheticParams {
            d_model: cfg.d_model,
            sigma,
            layer_drift: cfg.layer_drift,
            high_importance_fraction: cfg.high_importance_fraction,
            seed,
        },
    )
}

/// Workload for one `(sigma, seed)`: the trace when configured, else synthetic.
pub fn load_workload(cfg: &RunConfig, sigma: f64, seed: u64) -> Result<(Workload, Option<SyntheticModel>)> {
    match &cfg.trace {
        Some(path) => {
            let mut w = trace::read_trace(path)?;
            w.steps.truncate(cfg.steps);
            Ok((w, None))
        }
        None => {
            let m = synthetic_model(cfg, sigma, seed)?;
            Ok((m.workload(cfg.n_prompt, cfg.steps)?, Some(m)))
        }
    }
}

/// Profile from the configured file, or computed from importance and
/// profiled similarity.
pub fn build_profile(cfg: &RunConfig, workload: &Workload, model: Option<&SyntheticModel>) -> Result<HeadProfile> {
    if let Some(path) = &cfg.profile {
        let p: HeadProfile = read_json(path, "profile")?;
        p.validate(&workload.shape)?;
        return Ok(p);
    }
    let importance: Vec<Vec<f64>> = match (&cfg.importance, model) {
        (Some(path), _) => read_json(path, "importance file")?,
        (None, Some(m)) => m.fit_importance(
            &workload.prompt,
            cfg.importance_samples,
            cfg.sink_tokens,
            cfg.recent_tokens,
        )?,
        (None, None) => {
            return Err(Error::Argument(
                "trace input needs an importance file or a precomputed profile".into(),
            ))
        }
    };
    let similarity = match model {
        Some(m) => m.profile_similarity(cfg.profile_sequences, cfg.profile_steps)?,
        None => workload
            .query_sequences()
            .into_iter()
            .map(|seq| profile_similarity(&[seq]))
            .collect::<Result<Vec<_>>>()?,
    };
    let p = HeadProfile::build(&workload.shape, &importance, &similarity, cfg.thresholds())
        .map_err(|e| Error::config(format!("importance does not fit the model: {e}")))?;
    p.validate(&workload.shape)?;
    Ok(p)
}

pub fn partition_inputs(cfg: &RunConfig, workload: &Workload, topk_ratio: f64) -> Result<PartitionInputs> {
    partition_inputs_for(cfg, &workload.shape, workload.prompt.len(), workload.steps.len(), topk_ratio)
}

/// Planner inputs for a prompt of `n_prompt` tokens decoded for `steps` steps.
pub fn partition_inputs_for(
    cfg: &RunConfig,
    shape: &ModelShape,
    n_prompt: usize,
    steps: usize,
    topk_ratio: f64,
) -> Result<PartitionInputs> {
    let k = topk_size(topk_ratio, n_prompt)?;
    let row = shape.kv_row_bytes();
    Ok(PartitionInputs {
        t_comp: cfg.cost.t_comp,
        pcie_bandwidth: cfg.cost.pcie_peak_bw,
        mem_head: (k as u64 * row) as f64,
        full_head_bytes: (n_prompt + steps) as u64 * row,
        hbm_budget: cfg.hbm_budget,
    })
}

pub fn prepare(cfg: &RunConfig, sigma: f64, topk_ratio: f64, seed: u64) -> Result<Prepared> {
    let (workload, model) = load_workload(cfg, sigma, seed)?;
    let profile = build_profile(cfg, &workload, model.as_ref())?;
    let plan = match &cfg.plan {
        Some(path) => read_json(path, "plan")?,
        None => plan_partition(&profile, &partition_inputs(cfg, &workload, topk_ratio)?)?,
    };
    Ok(Prepared {
        workload,
        profile,
        plan,
    })
}

pub fn engine_config(cfg: &RunConfig, cell: &Cell) -> EngineConfig {
    EngineConfig {
        policy: cell.policy.clone(),
        topk_ratio: cell.topk_ratio,
        sink_tokens: cfg.sink_tokens,
        recent_tokens: cfg.recent_tokens,
        retriever: RetrieverSpec {
            variant: cfg.retriever,
            hash_bits: cfg.hash_bits,
            seed: derive_seed(cell.seed, &[0x5151]),
        },
        force: cfg.force,
        cost: cfg.cost,
        block_size: cfg.block_size,
        block_capacity_factor: cfg.block_capacity_factor,
        measure_error: cfg.measure_error,
    }
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub policy: String,
    pub sigma: f64,
    pub topk_ratio: f64,
    pub seed: u64,
    pub steps: usize,
    pub k: usize,
    pub hit_ratio: Option<f64>,
    pub hits: u64,
    pub misses: u64,
    pub transfer_bytes: u64,
    pub persistent_served_bytes: u64,
    pub host_bytes: u64,
    pub persistent_bytes: u64,
    pub persistent_heads: usize,
    pub mean_step_latency_s: f64,
    pub compute_pct: f64,
    pub retrieval_pct: f64,
    pub mgmt_pct: f64,
    pub transfer_pct: f64,
    pub sync_pct: f64,
    pub mean_output_error: Option<f64>,
    pub max_output_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub summary: CellSummary,
    pub breakdown: BreakdownReport,
    #[serde(skip)]
    pub breakdown_csv: String,
    #[serde(skip)]
    pub cache_state: Vec<HeadCacheState>,
    #[serde(skip)]
    pub profile: Option<HeadProfile>,
    #[serde(skip)]
    pub plan: Option<PartitionPlan>,
}

pub fn run_cell(cfg: &RunConfig, cell: &Cell) -> Result<CellResult> {
    let prepared = prepare(cfg, cell.sigma, cell.topk_ratio, cell.seed)?;
    run_prepared(cfg, cell, prepared)
}

pub fn run_prepared(cfg: &RunConfig, cell: &Cell, prepared: Prepared) -> Result<CellResult> {
    let (engine, _) = run_workload(
        engine_config(cfg, cell),
        &prepared.profile,
        &prepared.plan,
        &prepared.workload,
        false,
    )?;
    let m = engine.metrics();
    let tiers = engine.store().tier_bytes();
    let breakdown = BreakdownReport::from(&m.timeline);
    let Breakdown {
        compute,
        retrieval,
        cache_management,
        host_data_transfer,
        synchronization,
    } = breakdown.breakdown;
    let summary = CellSummary {
        policy: cell.policy.clone(),
        sigma: cell.sigma,
        topk_ratio: cell.topk_ratio,
        seed: cell.seed,
        steps: m.steps,
        k: engine.k(),
        hit_ratio: m.hit_ratio(),
        hits: m.hits(),
        misses: m.misses(),
        transfer_bytes: m.transfer_bytes(),
        persistent_served_bytes: m.persistent_served_bytes(),
        host_bytes: tiers.host,
        persistent_bytes: tiers.device_persistent,
        persistent_heads: prepared.plan.layers.iter().map(|l| l.persistent_heads.len()).sum(),
        mean_step_latency_s: breakdown.mean_step_latency_s,
        compute_pct: compute,
        retrieval_pct: retrieval,
        mgmt_pct: cache_management,
        transfer_pct: host_data_transfer,
        sync_pct: synchronization,
        mean_output_error: m.mean_error(),
        max_output_error: m.max_error(),
    };
    Ok(CellResult {
        cell: cell.clone(),
        summary,
        breakdown_csv: m.timeline.to_csv(),
        breakdown,
        cache_state: engine.cache_state(),
        profile: Some(engine.profile().clone()),
        plan: Some(prepared.plan),
    })
}

/// Runs every cell, in parallel when more than one worker is allowed. Cells
/// that differ only in policy share one prepared workload.
pub fn run_grid(cfg: &RunConfig) -> Result<Vec<CellResult>> {
    cfg.validate()?;
    let cells = grid(cfg);
    let mut groups: Vec<(Cell, Vec<usize>)> = Vec::new();
    for (i, c) in cells.iter().enumerate() {
        let same = |g: &Cell| g.sigma == c.sigma && g.topk_ratio == c.topk_ratio && g.seed == c.seed;
        match groups.iter_mut().find(|(g, _)| same(g)) {
            Some((_, members)) => members.push(i),
            None => groups.push((c.clone(), vec![i])),
        }
    }
    let run = || {
        groups
            .par_iter()
            .map(|(key, members)| {
                let prepared = prepare(cfg, key.sigma, key.topk_ratio, key.seed)?;
                members
                    .iter()
                    .map(|&i| Ok((i, run_prepared(cfg, &cells[i], prepared.clone())?)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()
    };
    let grouped = match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config(format!("worker pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let mut indexed: Vec<(usize, CellResult)> = grouped.into_iter().flatten().collect();
    indexed.sort_by_key(|(i, _)| *i);
    Ok(indexed.into_iter().map(|(_, r)| r).collect())
}

/// Config as written to a run directory: execution-only fields cleared.
pub fn effective_config(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        workers: None,
        out_dir: None,
        ..cfg.clone()
    }
}

pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let json = serde_json::to_string(&effective_config(cfg))?;
    Ok(hex::encode(Sha256::digest(json.as_bytes())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub cells: usize,
    pub files: Vec<String>,
}

/// Creates the next `run-NNNN` directory under `root`.
pub fn next_run_dir(root: &Path) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    let mut last = 0u32;
    for entry in fs::read_dir(root)? {
        let name = entry?.file_name();
        if let Some(n) = name.to_str().and_then(|s| s.strip_prefix("run-")).and_then(|s| s.parse::<u32>().ok()) {
            last = last.max(n);
        }
    }
    let dir = root.join(format!("run-{:04}", last + 1));
    fs::create_dir(&dir)?;
    Ok(dir)
}

pub fn summary_csv(results: &[CellResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        w.serialize(&r.summary)
            .map_err(|e| Error::Invariant(format!("summary row: {e}")))?;
    }
    if results.is_empty() {
        return Ok(String::new());
    }
    let bytes = w.into_inner().map_err(|e| Error::Invariant(format!("summary flush: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Invariant(e.to_string()))
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub results: Vec<CellResult>,
}

fn write(dir: &Path, rel: &str, contents: &str, files: &mut Vec<String>) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    files.push(rel.to_string());
    Ok(())
}

/// Runs the grid and writes a new run directory under the configured output root.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutput> {
    let results = run_grid(cfg)?;
    let dir = next_run_dir(&cfg.resolved_out_dir())?;
    let mut files = Vec::new();
    write(&dir, CONFIG_FILE, &effective_config(cfg).to_json()?, &mut files)?;
    write(&dir, SUMMARY_FILE, &summary_csv(&results)?, &mut files)?;
    write(&dir, REPORT_FILE, &serde_json::to_string_pretty(&results)?, &mut files)?;
    for r in &results {
        let base = format!("cells/{}", r.cell.id());
        write(&dir, &format!("{base}/breakdown.csv"), &r.breakdown_csv, &mut files)?;
        write(
            &dir,
            &format!("{base}/breakdown.json"),
            &serde_json::to_string_pretty(&r.breakdown)?,
            &mut files,
        )?;
        write(
            &dir,
            &format!("{base}/cache_state.json"),
            &serde_json::to_string_pretty(&r.cache_state)?,
            &mut files,
        )?;
        if let Some(p) = &r.profile {
            write(&dir, &format!("{base}/profile.json"), &serde_json::to_string_pretty(p)?, &mut files)?;
        }
        if let Some(p) = &r.plan {
            write(&dir, &format!("{base}/plan.json"), &serde_json::to_string_pretty(p)?, &mut files)?;
        }
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: config_hash(cfg)?,
        cells: results.len(),
        files,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    log::info!("wrote {} cells to {}", results.len(), dir.display());
    Ok(RunOutput { dir, results })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            shape: crate::attention::ModelShape::new(2, 4, 2, 8).unwrap(),
            n_prompt: 64,
            steps: 4,
            d_model: 32,
            profile_sequences: 2,
            profile_steps: 3,
            ..Default::default()
        }
    }

    #[test]
    fn grid_order_and_ids() {
        let cfg = RunConfig {
            policies: vec!["lru".into(), "similarity".into()],
            seeds: vec![1, 2],
            ..small()
        };
        let cells = grid(&cfg);
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[1].id(), "lru-sigma0.05-k0.1-seed2");
        assert_eq!(cells[2].policy, "similarity");
    }

    #[test]
    fn run_dirs_are_numbered() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(next_run_dir(tmp.path()).unwrap().ends_with("run-0001"));
        assert!(next_run_dir(tmp.path()).unwrap().ends_with("run-0002"));
    }

    #[test]
    fn one_cell_one_row() {
        let results = run_grid(&small()).unwrap();
        let csv = summary_csv(&results).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("policy,sigma,topk_ratio,seed,steps,k,hit_ratio"));
    }

    #[test]
    fn hash_ignores_execution_fields() {
        let a = small();
        let b = RunConfig {
            workers: Some(3),
            out_dir: Some("/elsewhere".into()),
            ..small()
        };
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    }
}
