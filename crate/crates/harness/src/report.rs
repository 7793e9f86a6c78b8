//! Plot-data extraction from a results table.
//!
//! Every report is a tab-separated table whose first four columns are
//! `x, y, group, error`; some kinds append extra identifying columns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use hetres_core::energy::{min_cost_frontier, DEFAULT_FRONTIER_BINS};
use hetres_core::taskbench::Tier;

use crate::results::{ResultRow, ResultsTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Profile,
    Scatter,
    Tiers,
    Frontier,
    OverlapCdf,
}

impl ReportKind {
    pub const ALL: [ReportKind; 5] =
        [ReportKind::Profile, ReportKind::Scatter, ReportKind::Tiers, ReportKind::Frontier, ReportKind::OverlapCdf];

    pub fn name(&self) -> &'static str {
        match self {
            ReportKind::Profile => "profile",
            ReportKind::Scatter => "scatter",
            ReportKind::Tiers => "tiers",
            ReportKind::Frontier => "frontier",
            ReportKind::OverlapCdf => "overlap-cdf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotData {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl PlotData {
    fn new(extra: &[&str]) -> Self {
        let columns = ["x", "y", "group", "error"].iter().chain(extra).map(|s| s.to_string()).collect();
        Self { columns, rows: Vec::new() }
    }

    fn push(&mut self, x: f64, y: f64, group: String, error: Option<f64>, extra: Vec<String>) {
        let mut row = vec![x.to_string(), y.to_string(), group, error.map(|e| e.to_string()).unwrap_or_default()];
        row.extend(extra);
        self.rows.push(row);
    }

    pub fn to_tsv(&self) -> String {
        let mut s = self.columns.join("\t");
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.join("\t"));
        }
        s
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_tsv())
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Mean and 95% normal-approximation half-width.
pub fn mean_ci(v: &[f64]) -> (f64, f64) {
    let (m, sd) = mean_sd(v);
    (m, 1.96 * sd / (v.len() as f64).sqrt())
}

fn scored(table: &ResultsTable) -> impl Iterator<Item = (&ResultRow, f64)> {
    table.ok_rows().filter_map(|r| r.score_mean.map(|s| (r, s)))
}

/// Key of a task, with the shift compared bitwise.
type TaskKey = (usize, u64, u32);

fn task_key(r: &ResultRow) -> TaskKey {
    (r.k.unwrap_or(0), r.delta.unwrap_or(0.0).to_bits(), r.d.unwrap_or(0))
}

fn ordered(v: f64) -> i64 {
    // Total order on floats for map keys.
    let b = v.to_bits() as i64;
    b ^ (((b >> 63) as u64) >> 1) as i64
}

pub fn build(table: &ResultsTable, kind: ReportKind, axis: &str) -> PlotData {
    match kind {
        ReportKind::Profile => profile(table),
        ReportKind::Scatter => scatter(table),
        ReportKind::Tiers => tiers(table, axis),
        ReportKind::Frontier => frontier(table),
        ReportKind::OverlapCdf => overlap_cdf(table),
    }
}

/// Score against shift per (h, k, d), averaged over networks.
pub fn profile(table: &ResultsTable) -> PlotData {
    let mut groups: BTreeMap<(i64, usize, u32, i64), (f64, f64, Vec<f64>)> = BTreeMap::new();
    for (r, s) in scored(table) {
        let (k, d, delta) = (r.k.unwrap_or(0), r.d.unwrap_or(0), r.delta.unwrap_or(0.0));
        groups.entry((ordered(r.h), k, d, ordered(delta))).or_insert_with(|| (r.h, delta, Vec::new())).2.push(s);
    }
    let mut out = PlotData::new(&["h", "k", "d"]);
    for ((_, k, d, _), (h, delta, v)) in groups {
        let (m, ci) = mean_ci(&v);
        out.push(delta, m, format!("h={h} k={k} d={d}"), Some(ci), vec![h.to_string(), k.to_string(), d.to_string()]);
    }
    out
}

/// Identity of a network apart from `h` and the profile, which does not
/// affect homogeneous networks.
fn hom_key(r: &ResultRow) -> String {
    format!("{}|{}|{}|{}|{}|{}|{}|{}|{}", r.model.name(), r.n, r.j, r.ju, r.jn, r.p, r.f, r.sigma0, r.replicate)
}

/// One (homogeneous, heterogeneous) score pair per task and per `h > 0`,
/// averaged over replicates that have a homogeneous partner.
pub fn scatter(table: &ResultsTable) -> PlotData {
    let mut hom: BTreeMap<(String, TaskKey), f64> = BTreeMap::new();
    for (r, s) in scored(table).filter(|(r, _)| r.h == 0.0) {
        hom.entry((hom_key(r), task_key(r))).or_insert(s);
    }
    type Group = (i64, String, TaskKey);
    let mut pairs: BTreeMap<Group, (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (r, s) in scored(table).filter(|(r, _)| r.h > 0.0) {
        if let Some(&h0) = hom.get(&(hom_key(r), task_key(r))) {
            let e = pairs.entry((ordered(r.h), r.profile.clone(), task_key(r))).or_insert_with(|| (r.h, Vec::new(), Vec::new()));
            e.1.push(h0);
            e.2.push(s);
        }
    }
    let mut out = PlotData::new(&["h", "profile", "k", "delta", "d"]);
    for ((_, profile, (k, delta, d)), (h, hs, xs)) in pairs {
        let (hm, _) = mean_sd(&hs);
        let (xm, _) = mean_sd(&xs);
        let delta = f64::from_bits(delta);
        out.push(hm, xm, format!("h={h} {profile}"), None, vec![
            h.to_string(),
            profile,
            k.to_string(),
            delta.to_string(),
            d.to_string(),
        ]);
    }
    out
}

/// Per-task means over networks, then mean ± CI over tasks, for each
/// (axis value, h, tier).
pub fn tier_summary(table: &ResultsTable, axis: &str) -> Vec<TierSummary> {
    let mut per_task: BTreeMap<(String, i64, Tier, TaskKey), (f64, Vec<f64>)> = BTreeMap::new();
    for (r, s) in scored(table) {
        let Some(tier) = r.tier.as_deref().and_then(Tier::parse) else { continue };
        let value = r.axis(axis).unwrap_or_default();
        per_task.entry((value, ordered(r.h), tier, task_key(r))).or_insert_with(|| (r.h, Vec::new())).1.push(s);
    }
    let mut groups: BTreeMap<(String, i64, Tier), (f64, Vec<f64>)> = BTreeMap::new();
    for ((value, hk, tier, _), (h, scores)) in per_task {
        let (m, _) = mean_sd(&scores);
        groups.entry((value, hk, tier)).or_insert_with(|| (h, Vec::new())).1.push(m);
    }
    groups
        .into_iter()
        .map(|((value, _, tier), (h, means))| {
            let (mean, ci) = mean_ci(&means);
            TierSummary { axis_value: value, h, tier, mean, ci, tasks: means.len() }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TierSummary {
    pub axis_value: String,
    pub h: f64,
    pub tier: Tier,
    pub mean: f64,
    /// Half-width of the 95% interval.
    pub ci: f64,
    pub tasks: usize,
}

pub fn tiers(table: &ResultsTable, axis: &str) -> PlotData {
    let mut out = PlotData::new(&[axis, "h", "tier", "tasks"]);
    for s in tier_summary(table, axis) {
        let x = s.axis_value.parse::<f64>().unwrap_or(f64::NAN);
        out.push(x, s.mean, format!("h={} {}", s.h, s.tier.name()), Some(s.ci), vec![
            s.axis_value.clone(),
            s.h.to_string(),
            s.tier.name().into(),
            s.tasks.to_string(),
        ]);
    }
    out
}

/// Per-network (mean score over tasks, total cost), one frontier per cost
/// unit.
pub fn network_records(table: &ResultsTable) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut nets: BTreeMap<usize, (String, f64, Vec<f64>)> = BTreeMap::new();
    for (r, s) in scored(table) {
        if let Some(c) = r.cost_total {
            nets.entry(r.network_id).or_insert_with(|| (r.cost_unit.clone(), c, Vec::new())).2.push(s);
        }
    }
    let mut by_unit: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (_, (unit, cost, scores)) in nets {
        by_unit.entry(unit).or_default().push((mean_sd(&scores).0, cost));
    }
    by_unit
}

pub fn frontier(table: &ResultsTable) -> PlotData {
    let mut out = PlotData::new(&["bin", "count"]);
    for (unit, records) in network_records(table) {
        for p in min_cost_frontier(&records, DEFAULT_FRONTIER_BINS) {
            out.push(p.center, p.min_cost, unit.clone(), None, vec![p.bin.to_string(), p.count.to_string()]);
        }
    }
    out
}

/// Empirical CDF of task-state overlaps per h.
pub fn overlap_cdf(table: &ResultsTable) -> PlotData {
    let mut groups: BTreeMap<i64, (f64, Vec<f64>)> = BTreeMap::new();
    for r in table.ok_rows() {
        if let Some(o) = r.overlap.filter(|o| o.is_finite()) {
            groups.entry(ordered(r.h)).or_insert_with(|| (r.h, Vec::new())).1.push(o);
        }
    }
    let mut out = PlotData::new(&[]);
    for (_, (h, mut v)) in groups {
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        for (i, o) in v.iter().enumerate() {
            out.push(*o, (i + 1) as f64 / n, format!("h={h}"), None, Vec::new());
        }
    }
    out
}
