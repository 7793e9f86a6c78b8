use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use hetres_core::analysis::{decorrelate_state, participation_ratio};
use hetres_core::dynamics::{preferred_scheme, simulate_li_with, simulate_lif, spikes_to_state, LiOptions, StateMatrix};
use hetres_core::stimgen::synthesize;
use hetres_core::topology::Network;
use hetres_harness::config::{Model, RunConfig};
use hetres_harness::container::{self, Dtype};
use hetres_harness::pipeline::{lif_substeps, run_benchmark, RunOptions};
use hetres_harness::report::{self, ReportKind};
use hetres_harness::results::{ResultsTable, Status};
use hetres_harness::energy_table;
use log::info;

#[derive(Parser)]
#[command(name = "hetres", version, about = "Heterogeneous reservoir benchmarks")]
struct Cli {
    /// TOML run configuration; defaults apply to anything not given.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, overriding the config.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Skip networks whose checkpoints already exist.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the configured stimulus and store it.
    Stim {
        /// Duration in rescaled time units.
        #[arg(long, default_value_t = 1000.0)]
        duration: f64,
    },
    /// Run the full benchmark over every configured network.
    Bench,
    /// Replace one network axis and run the benchmark.
    Sweep {
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Participation ratio and retained components of network states.
    Analyze {
        /// Analyze an existing state container instead of simulating.
        #[arg(long)]
        state: Option<PathBuf>,
        /// Recorded duration per network when simulating.
        #[arg(long, default_value_t = 200.0)]
        duration: f64,
        /// Storage precision of written states: f16, f32 or f64.
        #[arg(long, default_value = "f32")]
        dtype: String,
    },
    /// Static and dynamic cost of every configured network.
    Energy {
        /// Mean firing rate assumed for spiking networks (Hz); defaults to
        /// the background rate.
        #[arg(long)]
        nu: Option<f64>,
    },
    /// Plot data from a results table.
    Report {
        #[arg(long, value_parser = parse_kind)]
        kind: ReportKind,
        /// Results table; defaults to `<out>/results.csv`.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Grouping axis for tier summaries.
        #[arg(long, default_value = "N")]
        axis: String,
    },
    /// Print the effective configuration.
    Config,
}

fn parse_kind(s: &str) -> Result<ReportKind, String> {
    ReportKind::parse(s).ok_or_else(|| {
        let names: Vec<&str> = ReportKind::ALL.iter().map(|k| k.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn bench(cfg: &RunConfig, resume: bool) -> anyhow::Result<ResultsTable> {
    let out = out_dir(cfg)?;
    let table = run_benchmark(cfg, &RunOptions { out: Some(out.clone()), resume })?;
    let errors = table.rows.iter().filter(|r| r.status == Status::Error).count();
    println!(
        "{} rows from {} networks ({errors} failed) -> {}",
        table.rows.len(),
        cfg.expand().len(),
        out.join("results.csv").display()
    );
    Ok(table)
}

fn simulate_state(cfg: &RunConfig, net: &Network, noise_seed: u64, steps: usize) -> anyhow::Result<StateMatrix> {
    let dt = cfg.dynamics.dt;
    let warm = (cfg.dynamics.warmup / dt).round() as usize;
    let stim = synthesize(&cfg.stimulus, (warm + steps + 1) as f64 * dt + 1.0, dt / cfg.dynamics.stim_oversample as f64, &cfg.scheme())?;
    let x = match cfg.dynamics.model {
        Model::Li => {
            let opts = LiOptions { scheme: preferred_scheme(net, dt), ..Default::default() };
            simulate_li_with(net, Some(&stim), warm + steps, dt, noise_seed, &opts)?
        }
        Model::Lif => {
            let sub = lif_substeps(cfg, net);
            let lif = &cfg.dynamics.lif;
            let params = lif.params().with_background_rate(lif.nu0, &net.tau)?;
            let raster = simulate_lif(net, Some(&stim), &params, (warm + steps) * sub, dt / sub as f64, noise_seed)?;
            spikes_to_state(&raster, dt, lif.tau_phi_steps * dt)?
        }
    };
    Ok(x.slice(warm..warm + steps))
}

fn analyze_state(x: &StateMatrix, target: f64) -> anyhow::Result<(f64, usize, f64)> {
    let comps = decorrelate_state(x, target)?;
    Ok((participation_ratio(x)?, comps.count(), comps.decomposition.variance_captured))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Config => print!("{}", cfg.to_toml()),
        Command::Stim { duration } => {
            let out = out_dir(&cfg)?;
            let dt = cfg.dynamics.dt / cfg.dynamics.stim_oversample as f64;
            let stim = synthesize(&cfg.stimulus, *duration, dt, &cfg.scheme())?;
            let recipe = serde_json::json!({
                "generator": cfg.stimulus.name(),
                "parameters": serde_json::to_value(&cfg.stimulus)?,
                "master_seed": cfg.seed,
                "duration": duration,
            });
            let path = out.join("stimulus.hrsv");
            container::save_stimulus(&path, &stim, recipe)?;
            println!("{} stimulus: {} components x {} samples at dt {}", cfg.stimulus.name(), stim.dim(), stim.len(), stim.dt());
            println!("compound frequency {:.6} (time scale {:.6})", stim.compound_freq(), stim.time_scale());
            for (k, c) in stim.components().iter().enumerate() {
                let n = c.len() as f64;
                let mean = c.iter().sum::<f64>() / n;
                let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                println!("  u{}: peak {:.4} Hz, mean {mean:.2e}, variance {var:.8}", k + 1, stim.peak_freqs()[k]);
            }
            println!("-> {}", path.display());
        }
        Command::Bench => {
            bench(&cfg, cli.resume)?;
        }
        Command::Sweep { axis, values } => {
            let swept = cfg.with_axis(axis, values)?;
            let table = bench(&swept, cli.resume)?;
            let path = out_dir(&swept)?.join(format!("report-tiers-{axis}.tsv"));
            report::tiers(&table, axis).write(&path)?;
            println!("tier summary -> {}", path.display());
        }
        Command::Analyze { state: Some(path), .. } => {
            let x = container::load_state(path)?;
            let (pr, retained, captured) = analyze_state(&x, cfg.analysis.variance_target)?;
            println!("{}: N={} L={} d_PR={pr:.4} retained={retained} variance={captured:.6}", path.display(), x.n(), x.len());
        }
        Command::Analyze { state: None, duration, dtype } => {
            let dtype = Dtype::parse(dtype).with_context(|| format!("unknown dtype '{dtype}'"))?;
            let dir = out_dir(&cfg)?.join("states");
            std::fs::create_dir_all(&dir)?;
            let steps = (duration / cfg.dynamics.dt).round() as usize;
            println!("network_id\tN\th\tprofile\td_PR\tretained\tvariance");
            for p in cfg.expand() {
                let net = Network::build(&p.spec)?;
                let x = simulate_state(&cfg, &net, p.noise_seed, steps)?;
                let (pr, retained, captured) = analyze_state(&x, cfg.analysis.variance_target)?;
                println!("{}\t{}\t{}\t{}\t{pr:.4}\t{retained}\t{captured:.6}", p.id, p.spec.n, p.spec.h, p.spec.profile.name());
                let provenance = serde_json::json!({ "network": serde_json::to_value(&p)?, "model": cfg.dynamics.model.name() });
                container::save_state(&dir.join(format!("state-{:06}.hrsv", p.id)), &x, dtype, provenance)?;
                container::save_network(&dir.join(format!("network-{:06}.hrsv", p.id)), &net)?;
            }
            info!("states written to {}", dir.display());
        }
        Command::Energy { nu } => {
            let rows = energy_table(&cfg, *nu)?;
            let path = out_dir(&cfg)?.join("energy.csv");
            let mut w = csv::Writer::from_path(&path)?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            for r in &rows {
                println!("network {}: {} {:.6e} {} (static {:.6e}, dynamic {:.6e})", r.network_id, r.model, r.total, r.unit, r.static_cost, r.dynamic);
            }
            println!("-> {}", path.display());
        }
        Command::Report { kind, table, axis } => {
            let path = table.clone().unwrap_or_else(|| Path::new(&cfg.out).join("results.csv"));
            let t = ResultsTable::read(&path).with_context(|| format!("reading {}", path.display()))?;
            if t.rows.is_empty() {
                bail!("{} has no rows", path.display());
            }
            let data = report::build(&t, *kind, axis);
            let dest = out_dir(&cfg)?.join(format!("report-{}.tsv", kind.name()));
            data.write(&dest)?;
            println!("{} rows -> {}", data.rows.len(), dest.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
