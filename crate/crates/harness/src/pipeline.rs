//! End-to-end benchmark: build, simulate, fit, score, analyze and cost every
//! network of a run.
//!
//! States are never materialized. Each sampling step is routed by the split
//! plan into the Gram accumulator of its training region or into the shared
//! test set, so memory is `O(N² + test set)` regardless of run length.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use hetres_core::analysis::alignment_from_gram;
use hetres_core::dynamics::{
    preferred_scheme, AnomalyMonitor, StepTolerance, FALLBACK_SCHEME, RateIntegrator, RateScheme, SpikeFilter, SpikingIntegrator,
};
use hetres_core::energy::CostReport;
use hetres_core::readout::{plan_splits, score_all, DataPair, GramAccumulator, Region, ScoreRecord, SplitPlan};
use hetres_core::stimgen::{synthesize, Stimulus};
use hetres_core::taskbench::{complexity, complexity_tier, generate_task_grid, TaskSet, TaskSpec};
use hetres_core::topology::Network;
use log::{info, warn};
use rayon::prelude::*;

use crate::config::{Model, NetworkPoint, RunConfig};
use crate::costs::{li_cost, lif_cost};
use crate::results::{join_scores, ResultRow, ResultsTable, Status};

const BLOCK: usize = 512;

/// Where and how a run writes its files.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Output directory for checkpoints and the final table; `None` keeps
    /// everything in memory.
    pub out: Option<PathBuf>,
    pub resume: bool,
}

/// Everything shared read-only by the networks of a run.
pub struct Prepared {
    pub stimulus: Stimulus,
    pub tasks: TaskSet,
    /// Task complexities per network size, measured over the central samples
    /// of that size's split plan.
    pub complexity: BTreeMap<usize, Vec<f64>>,
}

fn warmup_steps(cfg: &RunConfig) -> usize {
    (cfg.dynamics.warmup / cfg.dynamics.dt).round() as usize
}

fn plan_for(cfg: &RunConfig, n: usize) -> anyhow::Result<SplitPlan> {
    let s = &cfg.split;
    Ok(plan_splits(n, cfg.dynamics.dt, s.tau_y, s.tau_u, s.trials)?)
}

/// Time of sample `l` of the recorded window.
fn sample_time(cfg: &RunConfig, l: usize) -> f64 {
    (warmup_steps(cfg) + l + 1) as f64 * cfg.dynamics.dt
}

/// Steps a network of size `n` is simulated for, warmup included.
pub fn total_steps(cfg: &RunConfig, n: usize) -> anyhow::Result<u64> {
    Ok((warmup_steps(cfg) + plan_for(cfg, n)?.total_len()) as u64)
}

fn max_shift(cfg: &RunConfig) -> f64 {
    cfg.tasks.delta_range.0.abs().max(cfg.tasks.delta_range.1.abs())
}

/// Synthesizes the stimulus once, long enough for the largest network, and
/// measures task complexities.
pub fn prepare(cfg: &RunConfig) -> anyhow::Result<Prepared> {
    cfg.validate()?;
    let tasks = generate_task_grid(&cfg.tasks)?;
    let mut sizes: Vec<usize> = cfg.network.n.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let mut longest = 0;
    for &n in &sizes {
        longest = longest.max(plan_for(cfg, n)?.total_len());
    }
    let duration = sample_time(cfg, longest) + max_shift(cfg) + 1.0;
    let dt_stim = cfg.dynamics.dt / cfg.dynamics.stim_oversample as f64;
    info!("synthesizing {} stimulus: {duration:.1} time units at dt {dt_stim}", cfg.stimulus.name());
    let stimulus = synthesize(&cfg.stimulus, duration, dt_stim, &cfg.scheme())?;
    let mut complexities = BTreeMap::new();
    for &n in &sizes {
        let plan = plan_for(cfg, n)?;
        let times = central_times(cfg, &plan);
        let c = tasks.tasks.iter().map(|t| complexity(t, &stimulus, &times)).collect::<Result<Vec<_>, _>>()?;
        complexities.insert(n, c);
    }
    Ok(Prepared { stimulus, tasks, complexity: complexities })
}

/// Times of every training and test sample.
pub fn central_times(cfg: &RunConfig, plan: &SplitPlan) -> Vec<f64> {
    let mut ranges: Vec<_> = (0..plan.trials).map(|t| plan.train_range(t)).collect();
    ranges.push(plan.test_range());
    ranges.into_iter().flatten().map(|l| sample_time(cfg, l)).collect()
}

/// Evaluates all task targets at one time, sharing the interpolation of
/// each distinct (component, shift).
struct TargetEval {
    shifts: Vec<(usize, f64)>,
    task_shift: Vec<(usize, i32)>,
    buf: Vec<f64>,
}

impl TargetEval {
    fn new(tasks: &[TaskSpec]) -> Self {
        let mut shifts: Vec<(usize, f64)> = Vec::new();
        let task_shift = tasks
            .iter()
            .map(|t| {
                let key = (t.k - 1, t.delta);
                let idx = shifts.iter().position(|s| s.0 == key.0 && s.1.to_bits() == key.1.to_bits()).unwrap_or_else(|| {
                    shifts.push(key);
                    shifts.len() - 1
                });
                (idx, t.d as i32)
            })
            .collect();
        let buf = vec![0.0; shifts.len()];
        Self { shifts, task_shift, buf }
    }

    fn push(&mut self, stim: &Stimulus, t: f64, out: &mut Vec<f64>) {
        for (b, &(k, delta)) in self.buf.iter_mut().zip(&self.shifts) {
            *b = stim.sample(t + delta, k);
        }
        out.extend(self.task_shift.iter().map(|&(i, d)| self.buf[i].powi(d)));
    }
}

/// Routes recorded states into training accumulators and the test set.
struct Collector<'a> {
    plan: &'a SplitPlan,
    stim: &'a Stimulus,
    targets: TargetEval,
    dim: usize,
    accs: Vec<GramAccumulator>,
    block_trial: usize,
    block_x: Vec<f64>,
    block_y: Vec<f64>,
    test: DataPair,
}

impl<'a> Collector<'a> {
    fn new(plan: &'a SplitPlan, stim: &'a Stimulus, tasks: &[TaskSpec]) -> Self {
        let dim = plan.n_neurons + 1;
        let nt = tasks.len();
        Self {
            plan,
            stim,
            targets: TargetEval::new(tasks),
            dim,
            accs: (0..plan.trials).map(|_| GramAccumulator::new(dim, nt)).collect(),
            block_trial: 0,
            block_x: Vec::with_capacity(BLOCK * dim),
            block_y: Vec::with_capacity(BLOCK * nt),
            test: DataPair {
                x: Vec::with_capacity(plan.n_test * dim),
                y: Vec::with_capacity(plan.n_test * nt),
                dim,
                tasks: nt,
                indices: Vec::with_capacity(plan.n_test),
            },
        }
    }

    fn flush(&mut self) {
        if !self.block_x.is_empty() {
            self.accs[self.block_trial].add_block(&self.block_x, &self.block_y);
            self.block_x.clear();
            self.block_y.clear();
        }
    }

    fn record(&mut self, l: usize, t: f64, state: &[f64]) {
        match self.plan.region_of(l) {
            Region::Train(trial) => {
                if trial != self.block_trial || self.block_x.len() >= BLOCK * self.dim {
                    self.flush();
                    self.block_trial = trial;
                }
                self.block_x.extend_from_slice(state);
                self.block_x.push(1.0);
                self.targets.push(self.stim, t, &mut self.block_y);
            }
            Region::Test => {
                self.test.x.extend_from_slice(state);
                self.test.x.push(1.0);
                self.targets.push(self.stim, t, &mut self.test.y);
                self.test.indices.push(l);
            }
            Region::Margin => {}
        }
    }

    fn finish(mut self) -> (Vec<GramAccumulator>, DataPair) {
        self.flush();
        (self.accs, self.test)
    }
}

/// Outcome of simulating one network before scoring.
struct Simulated {
    accs: Vec<GramAccumulator>,
    test: DataPair,
    scheme: String,
    anomaly: bool,
    mean_rate: Option<f64>,
    cost: CostReport,
}

fn simulate_li(
    cfg: &RunConfig,
    net: &Network,
    point: &NetworkPoint,
    plan: &SplitPlan,
    prep: &Prepared,
    scheme: RateScheme,
) -> anyhow::Result<(Vec<GramAccumulator>, DataPair, AnomalyMonitor)> {
    let dt = cfg.dynamics.dt;
    let tol = StepTolerance { rtol: cfg.dynamics.fallback_rtol, atol: cfg.dynamics.fallback_atol };
    let mut integ = RateIntegrator::new(net, Some(&prep.stimulus), dt, point.noise_seed, scheme)?.with_tolerance(tol);
    for _ in 0..warmup_steps(cfg) {
        integ.advance()?;
    }
    let mut monitor = AnomalyMonitor::default();
    let mut col = Collector::new(plan, &prep.stimulus, &prep.tasks.tasks);
    for l in 0..plan.total_len() {
        let r = integ.advance()?;
        monitor.observe(r);
        col.record(l, sample_time(cfg, l), r);
    }
    let (accs, test) = col.finish();
    Ok((accs, test, monitor))
}

fn run_li(cfg: &RunConfig, net: &Network, point: &NetworkPoint, plan: &SplitPlan, prep: &Prepared) -> anyhow::Result<Simulated> {
    let mut scheme = preferred_scheme(net, cfg.dynamics.dt);
    let mut run = simulate_li(cfg, net, point, plan, prep, scheme);
    let failed = match &run {
        Ok((_, _, m)) => m.is_anomalous(),
        Err(_) => true,
    };
    if failed {
        warn!("network {}: {scheme:?} run anomalous, reintegrating with the adaptive scheme", point.id);
        scheme = FALLBACK_SCHEME;
        run = simulate_li(cfg, net, point, plan, prep, scheme);
    }
    let (accs, test, monitor) = run?;
    let steps = (warmup_steps(cfg) + plan.total_len()) as u64;
    let cost = li_cost(cfg, &net.spec, steps);
    let scheme = match scheme {
        RateScheme::Euler => "euler",
        RateScheme::ExponentialEuler => "exp-euler",
        RateScheme::ExponentialRk => "etd2rk",
    };
    Ok(Simulated { accs, test, scheme: scheme.into(), anomaly: monitor.is_anomalous(), mean_rate: None, cost })
}

/// Integration substeps per sampling step for a spiking network.
pub fn lif_substeps(cfg: &RunConfig, net: &Network) -> usize {
    let need = (2.0 * cfg.dynamics.dt / net.tau_min()).ceil() as usize;
    need.max(cfg.dynamics.lif.substeps).max(1)
}

const MAX_LIF_SUBSTEPS: usize = 100_000;

fn run_lif(cfg: &RunConfig, net: &Network, point: &NetworkPoint, plan: &SplitPlan, prep: &Prepared) -> anyhow::Result<Simulated> {
    let dt = cfg.dynamics.dt;
    let sub = lif_substeps(cfg, net);
    if sub > MAX_LIF_SUBSTEPS {
        bail!("smallest time constant {} needs {sub} substeps per sample", net.tau_min());
    }
    let h = dt / sub as f64;
    let lif = &cfg.dynamics.lif;
    let params = lif.params().with_background_rate(lif.nu0, &net.tau)?;
    let mut integ = SpikingIntegrator::new(net, Some(&prep.stimulus), &params, h, point.noise_seed)?;
    let mut filter = SpikeFilter::new(net.n(), dt, lif.tau_phi_steps * dt);
    let mut spikes: Vec<(usize, f64)> = Vec::new();
    let mut total_spikes = 0u64;
    let mut col = Collector::new(plan, &prep.stimulus, &prep.tasks.tasks);
    let warm = warmup_steps(cfg);
    let mut step = 0u64;
    for l in 0..warm + plan.total_len() {
        spikes.clear();
        for _ in 0..sub {
            step += 1;
            let t = step as f64 * h;
            spikes.extend(integ.advance()?.iter().map(|&i| (i, t)));
        }
        total_spikes += spikes.len() as u64;
        let t_now = (l + 1) as f64 * dt;
        let state = filter.step(&spikes, t_now);
        if l >= warm {
            col.record(l - warm, t_now, state);
        }
    }
    let (accs, test) = col.finish();
    let duration = (warm + plan.total_len()) as f64 * dt;
    let nu = total_spikes as f64 / (net.n() as f64 * duration);
    let cost = lif_cost(cfg, &net.spec, nu, duration)?;
    Ok(Simulated { accs, test, scheme: format!("lif-euler/{sub}"), anomaly: false, mean_rate: Some(nu), cost })
}

/// Runs one network and returns its rows. Failures become a single error row.
pub fn run_network(cfg: &RunConfig, point: &NetworkPoint, prep: &Prepared) -> Vec<ResultRow> {
    match try_run_network(cfg, point, prep) {
        Ok(rows) => rows,
        Err(e) => {
            warn!("network {} failed: {e:#}", point.id);
            let mut row = ResultRow::for_network(point, cfg.dynamics.model);
            row.status = Status::Error;
            row.error = format!("{e:#}");
            vec![row]
        }
    }
}

fn try_run_network(cfg: &RunConfig, point: &NetworkPoint, prep: &Prepared) -> anyhow::Result<Vec<ResultRow>> {
    let net = Network::build(&point.spec).context("building network")?;
    let plan = plan_for(cfg, net.n())?;
    let sim = match cfg.dynamics.model {
        Model::Li => run_li(cfg, &net, point, &plan, prep),
        Model::Lif => run_lif(cfg, &net, point, &plan, prep),
    }
    .context("simulating")?;

    let tasks = &prep.tasks.tasks;
    let mut per_task: Vec<Vec<Result<f64, String>>> = vec![Vec::with_capacity(plan.trials); tasks.len()];
    for acc in &sim.accs {
        let sol = acc.solve(cfg.split.lambda).context("fitting readout")?;
        for (t, s) in score_all(&sol, &sim.test).into_iter().enumerate() {
            per_task[t].push(s.map_err(|e| e.to_string()));
        }
    }

    let alignment = if cfg.analysis.enabled {
        let mut merged = GramAccumulator::new(plan.n_neurons + 1, tasks.len());
        sim.accs.iter().for_each(|a| merged.merge(a));
        match alignment_from_gram(&merged, cfg.analysis.variance_target) {
            Ok(a) => Some(a),
            Err(e) => {
                warn!("network {}: analysis failed: {e}", point.id);
                None
            }
        }
    } else {
        None
    };

    let complexities = prep.complexity.get(&net.n()).context("missing complexities for network size")?;
    let mut base = ResultRow::for_network(point, cfg.dynamics.model);
    base.d_pr = alignment.as_ref().map(|a| a.participation_ratio);
    base.cost_model = sim.cost.model.clone();
    base.cost_unit = sim.cost.unit.name().into();
    base.cost_static = Some(sim.cost.static_cost);
    base.cost_dynamic = Some(sim.cost.dynamic);
    base.cost_total = Some(sim.cost.total);
    base.mean_rate = sim.mean_rate;
    base.scheme = sim.scheme.clone();
    base.anomaly = sim.anomaly;

    let rows = tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let mut row = base.clone();
            row.k = Some(task.k);
            row.delta = Some(task.delta);
            row.d = Some(task.d);
            row.complexity = Some(complexities[i]);
            row.tier = Some(complexity_tier(complexities[i]).name().into());
            row.overlap = alignment.as_ref().map(|a| a.overlaps[i]);
            match per_task[i].iter().cloned().collect::<Result<Vec<f64>, String>>() {
                Ok(scores) => {
                    row.trial_scores = join_scores(&scores);
                    let rec = ScoreRecord::from_scores(scores);
                    row.score_mean = Some(rec.mean);
                    row.score_std = Some(rec.std);
                    row.status = Status::Ok;
                }
                Err(e) => {
                    row.status = Status::TaskError;
                    row.error = e;
                }
            }
            row
        })
        .collect();
    Ok(rows)
}

fn checkpoint_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("network-{id:06}.csv"))
}

fn write_checkpoint(dir: &Path, id: usize, config: &str, rows: Vec<ResultRow>) -> anyhow::Result<()> {
    ResultsTable { config: config.into(), rows }.write(&checkpoint_path(dir, id))?;
    Ok(())
}

fn read_checkpoint(dir: &Path, point: &NetworkPoint, config: &str) -> Option<Vec<ResultRow>> {
    let table = ResultsTable::read(&checkpoint_path(dir, point.id)).ok()?;
    (table.config == config && table.rows.iter().all(|r| r.network_id == point.id)).then_some(table.rows)
}

/// Runs every network of `cfg` on a pool of `cfg.workers` threads. Rows are
/// ordered by network id, then task, so the table does not depend on the
/// worker count.
pub fn run_benchmark(cfg: &RunConfig, opts: &RunOptions) -> anyhow::Result<ResultsTable> {
    let config = cfg.results_toml();
    let points = cfg.expand();
    let ckpt_dir = match &opts.out {
        Some(out) => {
            let dir = out.join("checkpoints");
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            Some(dir)
        }
        None => None,
    };
    let mut done: BTreeMap<usize, Vec<ResultRow>> = BTreeMap::new();
    if let (true, Some(dir)) = (opts.resume, &ckpt_dir) {
        for p in &points {
            if let Some(rows) = read_checkpoint(dir, p, &config) {
                done.insert(p.id, rows);
            }
        }
        info!("resuming: {} of {} networks already complete", done.len(), points.len());
    }
    let todo: Vec<&NetworkPoint> = points.iter().filter(|p| !done.contains_key(&p.id)).collect();
    let prep = prepare(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers.max(1)).build()?;
    let fresh: Vec<(usize, Vec<ResultRow>)> = pool.install(|| {
        todo.par_iter()
            .map(|p| {
                info!("network {} (N={}, h={}, J={}, replicate {})", p.id, p.spec.n, p.spec.h, p.spec.j, p.replicate);
                let rows = run_network(cfg, p, &prep);
                if let Some(dir) = &ckpt_dir {
                    if let Err(e) = write_checkpoint(dir, p.id, &config, rows.clone()) {
                        warn!("network {}: checkpoint not written: {e:#}", p.id);
                    }
                }
                (p.id, rows)
            })
            .collect()
    });
    done.extend(fresh);
    let table = ResultsTable { config, rows: done.into_values().flatten().collect() };
    if let Some(out) = &opts.out {
        table.write(&out.join("results.csv"))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use hetres_core::taskbench::TaskGrid;

    pub(crate) fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.network.n = vec![20];
        cfg.network.h = vec![0.0];
        cfg.tasks = TaskGrid { k_set: vec![1], d_set: vec![1], delta_count: 1, delta_range: (0.0, 0.0) };
        cfg.split.tau_y = 0.5;
        cfg.split.tau_u = 0.5;
        cfg.dynamics.warmup = 1.0;
        cfg
    }

    #[test]
    fn one_network_one_task_gives_one_row() {
        // Noise-free, so recovering the input itself must be nearly exact.
        let mut cfg = tiny();
        cfg.network.jn = vec![0.0];
        let table = run_benchmark(&cfg, &RunOptions::default()).unwrap();
        assert_eq!(table.rows.len(), 1);
        let row = &table.rows[0];
        assert_eq!(row.status, Status::Ok, "{}", row.error);
        assert_eq!(row.complexity, Some(0.0));
        assert!(row.score_mean.unwrap() > 0.9, "{row:?}");
        assert_eq!(row.trials().len(), 3);
    }

    #[test]
    fn failing_network_becomes_error_row() {
        let mut cfg = tiny();
        cfg.network.h = vec![0.0, 1.0];
        cfg.network.p = vec![2.0];
        let table = run_benchmark(&cfg, &RunOptions::default()).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert!(table.rows.iter().all(|r| r.status == Status::Error && !r.error.is_empty()));
    }

    #[test]
    fn targets_share_interpolation() {
        let tasks = vec![TaskSpec::new(1, 0.5, 1), TaskSpec::new(1, 0.5, 3), TaskSpec::new(2, 0.5, 2)];
        let ev = TargetEval::new(&tasks);
        assert_eq!(ev.shifts.len(), 2);
        assert_eq!(ev.task_shift, vec![(0, 1), (0, 3), (1, 2)]);
    }
}
