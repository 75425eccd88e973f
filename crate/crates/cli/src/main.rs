//! `kvlab`: profile heads, plan placement, run experiment grids, render reports.
//!
//! Exit status: 0 success, 2 usage, 3 configuration, 4 runtime failure.

mod table;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kvlab::config::{RunConfig, OUT_DIR_ENV};
use kvlab::experiment::{
    self, build_profile, load_workload, partition_inputs_for, CellResult, CellSummary, REPORT_FILE, SUMMARY_FILE,
};
use kvlab::head_profile::{plan_partition, HeadProfile, PartitionPlan};
use kvlab::pipeline::BreakdownReport;
use kvlab::retrieval::RetrieverVariant;
use kvlab::similarity_cache::ForceMode;
use kvlab::Error;

#[derive(Parser)]
#[command(name = "kvlab", version, about = "KV-cache offloading lab with head-wise similarity caching")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Profile per-head importance and similarity, write the head profile JSON.
    Profile(ProfileArgs),
    /// Partition heads into persistent and offloaded tiers from a profile.
    Plan(PlanArgs),
    /// Run the policy x sigma x top-k x seed grid and write a run directory.
    Run(RunArgs),
    /// Render a run directory, summary CSV, report JSON or breakdown JSON as a table.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ForceArg {
    None,
    AlwaysMiss,
    AlwaysHit,
}

impl From<ForceArg> for ForceMode {
    fn from(f: ForceArg) -> Self {
        match f {
            ForceArg::None => ForceMode::None,
            ForceArg::AlwaysMiss => ForceMode::AlwaysMiss,
            ForceArg::AlwaysHit => ForceMode::AlwaysHit,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RetrieverArg {
    Exact,
    SignHash,
}

impl From<RetrieverArg> for RetrieverVariant {
    fn from(r: RetrieverArg) -> Self {
        match r {
            RetrieverArg::Exact => RetrieverVariant::Exact,
            RetrieverArg::SignHash => RetrieverVariant::SignHash,
        }
    }
}

/// Options shared by every subcommand that reads a run configuration.
/// Each flag overrides the matching config-file field.
#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    n_prompt: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    power: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    sink: Option<usize>,
    #[arg(long)]
    recent: Option<usize>,
    /// Per-layer compute time in seconds.
    #[arg(long)]
    t_comp: Option<f64>,
    /// Host-to-device bandwidth in bytes per second.
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Device bytes available for persistent heads.
    #[arg(long)]
    hbm_budget: Option<u64>,
    /// Recorded trace replacing the synthetic model.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Per-query-head importance JSON, `[layer][q_head]`.
    #[arg(long)]
    importance: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Walk noise; defaults to the first configured sigma.
    #[arg(long)]
    sigma: Option<f64>,
    /// Seed; defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output profile path.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Head profile written by `kvlab profile`.
    #[arg(long)]
    profile: PathBuf,
    /// Top-k ratio; defaults to the first configured ratio.
    #[arg(long)]
    topk_ratio: Option<f64>,
    /// Output plan path.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Cache policy; repeat for several.
    #[arg(long = "policy")]
    policies: Vec<String>,
    #[arg(long = "sigma")]
    sigmas: Vec<f64>,
    #[arg(long = "topk-ratio")]
    topk_ratios: Vec<f64>,
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, value_enum)]
    force_mode: Option<ForceArg>,
    #[arg(long, value_enum)]
    retriever: Option<RetrieverArg>,
    #[arg(long)]
    hash_bits: Option<usize>,
    /// Skip the exact-attention oracle and error columns.
    #[arg(long)]
    no_error: bool,
    #[arg(long)]
    workers: Option<usize>,
    /// Root for numbered run directories.
    #[arg(long, env = OUT_DIR_ENV)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory or a summary.csv, report.json or breakdown.json file.
    path: PathBuf,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Usage(_) => 2,
        Failure::Core(e) if e.is_config() || matches!(e, Error::Trace(_)) => 3,
        Failure::Core(_) => 4,
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_config(a: &ConfigArgs) -> CliResult<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            require_file(path, "config file")?;
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    set!(a.steps, cfg.steps);
    set!(a.n_prompt, cfg.n_prompt);
    set!(a.d_model, cfg.d_model);
    set!(a.eta, cfg.eta);
    set!(a.power, cfg.power);
    set!(a.epsilon, cfg.epsilon);
    set!(a.sink, cfg.sink_tokens);
    set!(a.recent, cfg.recent_tokens);
    set!(a.t_comp, cfg.cost.t_comp);
    set!(a.bandwidth, cfg.cost.pcie_peak_bw);
    if a.hbm_budget.is_some() {
        cfg.hbm_budget = a.hbm_budget;
    }
    if a.trace.is_some() {
        cfg.trace = a.trace.clone();
    }
    if a.importance.is_some() {
        cfg.importance = a.importance.clone();
    }
    for (p, what) in [(&cfg.trace, "trace"), (&cfg.importance, "importance file")] {
        if let Some(p) = p {
            require_file(p, what)?;
        }
    }
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

fn cmd_profile(a: ProfileArgs) -> CliResult<()> {
    let cfg = load_config(&a.common)?;
    if cfg.trace.is_some() && cfg.importance.is_none() {
        return Err(Failure::Usage("profiling a trace needs --importance".into()));
    }
    let cfg = RunConfig { profile: None, ..cfg };
    cfg.validate()?;
    let sigma = a.sigma.unwrap_or(cfg.sigmas[0]);
    let seed = a.seed.unwrap_or(cfg.seeds[0]);
    let (workload, model) = load_workload(&cfg, sigma, seed)?;
    let profile = build_profile(&cfg, &workload, model.as_ref())?;
    write_json(&a.out, &profile)?;
    log::info!("wrote profile to {}", a.out.display());
    Ok(())
}

fn cmd_plan(a: PlanArgs) -> CliResult<()> {
    require_file(&a.profile, "profile")?;
    let cfg = load_config(&a.common)?;
    cfg.validate()?;
    let (shape, n_prompt, steps) = match &cfg.trace {
        Some(path) => {
            let w = kvlab::trace::read_trace(path)?;
            let steps = w.steps.len().min(cfg.steps);
            (w.shape, w.prompt.len(), steps)
        }
        None => (cfg.shape, cfg.n_prompt, cfg.steps),
    };
    let text = fs::read_to_string(&a.profile).map_err(Error::from)?;
    let mut profile: HeadProfile =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid profile: {e}")))?;
    profile.validate(&shape)?;
    let ratio = a.topk_ratio.unwrap_or(cfg.topk_ratios[0]);
    let inputs = partition_inputs_for(&cfg, &shape, n_prompt, steps, ratio)?;
    let plan: PartitionPlan = plan_partition(&profile, &inputs)?;
    profile.apply_plan(&plan);
    print!("{}", table::plan_table(&plan));
    println!(
        "persistent bytes {}  shortfall heads {}  shortfall bytes {}",
        plan.persistent_bytes, plan.shortfall_heads, plan.shortfall_bytes
    );
    write_json(&a.out, &plan)?;
    Ok(())
}

fn cmd_run(a: RunArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    if !a.policies.is_empty() {
        cfg.policies = a.policies;
    }
    if !a.sigmas.is_empty() {
        cfg.sigmas = a.sigmas;
    }
    if !a.topk_ratios.is_empty() {
        cfg.topk_ratios = a.topk_ratios;
    }
    if !a.seeds.is_empty() {
        cfg.seeds = a.seeds;
    }
    if a.profile.is_some() {
        cfg.profile = a.profile;
    }
    if a.plan.is_some() {
        cfg.plan = a.plan;
    }
    for (p, what) in [(&cfg.profile, "profile"), (&cfg.plan, "plan")] {
        if let Some(p) = p {
            require_file(p, what)?;
        }
    }
    if cfg.trace.is_some() && cfg.importance.is_none() && cfg.profile.is_none() {
        return Err(Failure::Usage("a trace run needs --importance or --profile".into()));
    }
    if let Some(f) = a.force_mode {
        cfg.force = f.into();
    }
    if let Some(r) = a.retriever {
        cfg.retriever = r.into();
    }
    if let Some(b) = a.hash_bits {
        cfg.hash_bits = b;
    }
    if a.no_error {
        cfg.measure_error = false;
    }
    if a.workers.is_some() {
        cfg.workers = a.workers;
    }
    if a.out_dir.is_some() {
        cfg.out_dir = a.out_dir;
    }
    let out = experiment::run_experiment(&cfg)?;
    let rows: Vec<CellSummary> = out.results.iter().map(|r| r.summary.clone()).collect();
    print!("{}", table::summary_sections(&rows));
    println!("\nrun directory: {}", out.dir.display());
    Ok(())
}

fn read_summary_csv(path: &Path) -> CliResult<Vec<CellSummary>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    reader
        .deserialize()
        .collect::<Result<Vec<CellSummary>, _>>()
        .map_err(|e| Failure::Core(Error::Config(format!("invalid summary {}: {e}", path.display()))))
}

fn cmd_report(a: ReportArgs) -> CliResult<()> {
    let path = if a.path.is_dir() { a.path.join(SUMMARY_FILE) } else { a.path.clone() };
    require_file(&path, "report input")?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if !is_json {
        print!("{}", table::summary_sections(&read_summary_csv(&path)?));
        return Ok(());
    }
    let text = fs::read_to_string(&path).map_err(Error::from)?;
    if let Ok(results) = serde_json::from_str::<Vec<CellResult>>(&text) {
        let rows: Vec<CellSummary> = results.into_iter().map(|r| r.summary).collect();
        print!("{}", table::summary_sections(&rows));
    } else if let Ok(report) = serde_json::from_str::<BreakdownReport>(&text) {
        print!("{}", table::breakdown_table(&report));
    } else {
        return Err(Failure::Core(Error::Config(format!(
            "{} is neither a {REPORT_FILE} nor a breakdown report",
            path.display()
        ))));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    let result = match cli.command {
        Command::Profile(a) => cmd_profile(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(msg) => eprintln!("kvlab: {msg}"),
                Failure::Core(e) => eprintln!("kvlab: {e}"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}
