//! Plain-text tables for terminal output.

use kvlab::experiment::CellSummary;
use kvlab::head_profile::PartitionPlan;
use kvlab::pipeline::BreakdownReport;

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(String::len).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            parts.join("  ").trim_end().to_string()
        };
        let mut out = line(&self.header);
        out.push('\n');
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

fn opt(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.digits$}"))
}

/// Summary rows grouped into one section per policy, in first-seen order.
pub fn summary_sections(rows: &[CellSummary]) -> String {
    let mut policies: Vec<&str> = Vec::new();
    for r in rows {
        if !policies.contains(&r.policy.as_str()) {
            policies.push(&r.policy);
        }
    }
    let mut out = String::new();
    for p in policies {
        let mut t = Table::new(&[
            "sigma", "k_ratio", "seed", "steps", "hit_ratio", "transfer_B", "latency_us", "mgmt_%", "sync_%",
            "mean_err",
        ]);
        for r in rows.iter().filter(|r| r.policy == p) {
            t.row(vec![
                r.sigma.to_string(),
                r.topk_ratio.to_string(),
                r.seed.to_string(),
                r.steps.to_string(),
                opt(r.hit_ratio, 3),
                r.transfer_bytes.to_string(),
                format!("{:.1}", r.mean_step_latency_s * 1e6),
                format!("{:.1}", r.mgmt_pct),
                format!("{:.1}", r.sync_pct),
                opt(r.mean_output_error, 4),
            ]);
        }
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&format!("== {p} ==\n"));
        out.push_str(&t.render());
    }
    out
}

pub fn plan_table(plan: &PartitionPlan) -> String {
    let mut t = Table::new(&["layer", "N_d", "N_p", "N_persist", "persistent", "dropped"]);
    let list = |v: &[usize]| {
        if v.is_empty() {
            "-".to_string()
        } else {
            v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        }
    };
    for l in &plan.layers {
        t.row(vec![
            l.layer.to_string(),
            l.n_difficult.to_string(),
            plan.prefetchable_heads.to_string(),
            l.n_persist.to_string(),
            list(&l.persistent_heads),
            list(&l.dropped_heads),
        ]);
    }
    t.render()
}

pub fn breakdown_table(report: &BreakdownReport) -> String {
    let b = &report.breakdown;
    let mut t = Table::new(&["component", "share_%"]);
    for (name, v) in [
        ("compute", b.compute),
        ("top-k retrieval", b.retrieval),
        ("cache management", b.cache_management),
        ("host data transfer", b.host_data_transfer),
        ("control and synchronization", b.synchronization),
    ] {
        t.row(vec![name.into(), format!("{v:.2}")]);
    }
    let mut per_layer = Table::new(&[
        "layer", "total_us", "compute_us", "exposed_xfer_us", "hidden_xfer_us", "mgmt_us", "sync_us", "retrieval_us",
    ]);
    let us = |s: f64| format!("{:.2}", s * 1e6);
    for l in &report.layers {
        per_layer.row(vec![
            l.layer.to_string(),
            us(l.total_s),
            us(l.compute_s),
            us(l.transfer_s),
            us(l.hidden_s),
            us(l.mgmt_s),
            us(l.sync_s),
            us(l.retrieval_s),
        ]);
    }
    format!(
        "steps {}  mean step latency {:.1} us\n{}\nmean per-step cost by layer\n{}",
        report.steps,
        report.mean_step_latency_s * 1e6,
        t.render(),
        per_layer.render()
    )
}
