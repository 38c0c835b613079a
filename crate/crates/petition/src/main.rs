use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use petition_core::bench::{LoadModelConfig, MANUAL_BASELINE_SECONDS};
use petition_core::corpus::CorpusConfig;
use petition_core::model::{GridSpace, NetworkSpec, Parameters, TrainConfig};
use petition_core::workflow::CaseStatus;

use petition::bench::{self, Client, SceneSource, ThroughputPlan};
use petition::corpus::{generate_corpus, stats};
use petition::manifest::load_manifest;
use petition::service::config::{ServiceConfig, DATA_DIR_ENV};
use petition::service::{self, api, Service};
use petition::training::{
    evaluate, evaluation_cases, load_checkpoint, report_jsonl, report_table, run_grid, save_checkpoint, train_manifest,
    write_grid_table,
};

#[derive(Parser)]
#[command(name = "petition", version, about = "Citizen petition triage: corpus, model, service and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic corpus tools.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Training and evaluation.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rebuild case state from the event log.
    Replay {
        #[command(flatten)]
        data: DataDir,
        /// Also check that every case's image blob exists.
        #[arg(long)]
        verify: bool,
    },
    /// Write operator decisions as a corpus manifest.
    ExportCorrections {
        #[command(flatten)]
        data: DataDir,
        /// RFC 3339 timestamp; decisions before it are skipped.
        #[arg(long, default_value = "1970-01-01T00:00:00Z")]
        since: chrono::DateTime<chrono::Utc>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Load and latency runs against a running service.
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Args)]
struct DataDir {
    /// Service configuration naming the data directory.
    #[arg(long, conflicts_with = "data_dir")]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl DataDir {
    fn resolve(&self) -> Result<PathBuf> {
        match (&self.config, &self.data_dir) {
            (Some(c), _) => Ok(ServiceConfig::load(c)?.data_dir),
            (None, Some(d)) => Ok(d.clone()),
            (None, None) => match std::env::var_os(DATA_DIR_ENV) {
                Some(d) => Ok(PathBuf::from(d)),
                None => bail!("give --config, --data-dir or {DATA_DIR_ENV}"),
            },
        }
    }
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Render a seeded corpus and its manifest.
    Generate {
        #[arg(long, default_value_t = 5712)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Class and condition counts of a manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Write an untrained, seeded reference network.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a whole manifest with one configuration (JSON TrainConfig).
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class report of a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Write the JSON lines here instead of after the table.
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
    /// Split, grid search, and keep the best checkpoint.
    Grid {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON GridSpace; the default grid otherwise.
        #[arg(long)]
        space_file: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-cell results as JSON lines.
        #[arg(long)]
        table: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Target {
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    url: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON lines here instead of before the summary.
    #[arg(long)]
    jsonl: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Per-stage latency, one case at a time.
    Stages {
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[command(flatten)]
        target: Target,
    },
    /// Open-loop Poisson load at a fixed rate.
    Throughput {
        #[arg(long, default_value_t = 500.0)]
        rate: f64,
        #[arg(long, default_value_t = 10.0)]
        minutes: f64,
        #[arg(long, default_value_t = 60)]
        grace_seconds: u64,
        #[command(flatten)]
        target: Target,
    },
    /// Rounds of load whose rate grows as latency falls below manual handling.
    Jevons {
        #[arg(long, default_value_t = 0.5)]
        elasticity: f64,
        #[arg(long, default_value_t = 5)]
        rounds: usize,
        #[arg(long, default_value_t = 500.0)]
        base_rate: f64,
        #[arg(long, default_value_t = MANUAL_BASELINE_SECONDS)]
        baseline_seconds: f64,
        #[arg(long, default_value_t = 10.0)]
        minutes: f64,
        #[arg(long, default_value_t = 60)]
        grace_seconds: u64,
        #[command(flatten)]
        target: Target,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Corpus(c) => corpus(c),
        Command::Model(m) => model(m),
        Command::Serve { config } => serve(&config),
        Command::Replay { data, verify } => replay(&data.resolve()?, verify),
        Command::ExportCorrections { data, since, out } => {
            let dir = data.resolve()?;
            let (store, _) = service::replay_dir(&dir)?;
            let n = service::export_corrections(&store, &dir.join(service::BLOB_DIR), since, &out)?;
            println!("{n} corrections written to {}", out.display());
            Ok(())
        }
        Command::Bench(b) => bench_cmd(b),
    }
}

fn corpus(cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::Generate { n, seed, out, size } => {
            let config = CorpusConfig { n_images: n, seed, image_size: size, ..Default::default() };
            let m = generate_corpus(&config, &out, |done, total| {
                if done % 500 == 0 || done == total {
                    log::info!("rendered {done}/{total}");
                }
            })?;
            print!("{}", stats(&m));
        }
        CorpusCmd::Stats { manifest, json } => {
            let m = load_manifest(&manifest)?;
            let s = stats(&m);
            if json {
                println!("{}", serde_json::to_string(&s)?);
            } else {
                print!("{s}");
            }
        }
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn model(cmd: ModelCmd) -> Result<()> {
    match cmd {
        ModelCmd::Init { out, seed } => {
            let spec = NetworkSpec::reference();
            let params = Parameters::<f32>::he_seeded(&spec, seed)?;
            save_checkpoint(&out, &spec, &params)?;
        }
        ModelCmd::Train { manifest, config, out } => {
            let config: TrainConfig = read_json(&config)?;
            let m = load_manifest(&manifest)?;
            let (network, outcome) = train_manifest(&manifest, &m, &config)?;
            save_checkpoint(&out, network.spec(), &outcome.params)?;
            for e in &outcome.history {
                println!("{}", serde_json::to_string(e)?);
            }
        }
        ModelCmd::Eval { checkpoint, manifest, jsonl } => {
            let (spec, params) = load_checkpoint(&checkpoint)?;
            let network = petition_core::model::Network::new(spec)?;
            let m = load_manifest(&manifest)?;
            let cases = evaluation_cases(&network, &manifest, &m, &Default::default())?;
            let ev = evaluate(&network, &params, &cases)?;
            print!("{}", report_table(&ev.report));
            emit_jsonl(jsonl.as_deref(), &report_jsonl(&ev.report))?;
        }
        ModelCmd::Grid { manifest, space_file, out, seed, table } => {
            let space: GridSpace = match &space_file {
                Some(p) => read_json(p)?,
                None => GridSpace::default(),
            };
            let m = load_manifest(&manifest)?;
            let run = run_grid(&manifest, &m, &space, seed, |cell| {
                eprintln!("{}", serde_json::to_string(cell).unwrap_or_default());
            })?;
            save_checkpoint(&out, run.network.spec(), &run.outcome.best_params)?;
            if let Some(t) = &table {
                write_grid_table(t, &run.outcome.table)?;
            }
            println!("train {} / validation {}", run.train_len, run.val_len);
            println!("{:>8}{:>7}{:>8}{:>10}", "lr", "batch", "epochs", "accuracy");
            for (i, c) in run.outcome.table.iter().enumerate() {
                let acc = c.accuracy.map_or("failed".to_string(), |a| format!("{a:.4}"));
                let mark = if i == run.outcome.best_index { "  *" } else { "" };
                println!("{:>8}{:>7}{:>8}{:>10}{mark}", c.config.learning_rate, c.config.batch_size, c.config.epochs, acc);
            }
            print!("{}", report_table(&run.validation.report));
        }
    }
    Ok(())
}

fn emit_jsonl(path: Option<&Path>, lines: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, lines).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{lines}"),
    }
    Ok(())
}

fn serve(config_path: &Path) -> Result<()> {
    let config = ServiceConfig::load(config_path)?;
    let bind = config.bind.clone();
    let workers = config.workers;
    let svc = Service::open(config)?;
    let handles = svc.spawn_workers(workers);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let served = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&bind).await.with_context(|| format!("binding {bind}"))?;
        let addr = listener.local_addr()?;
        println!("listening on {addr}");
        std::io::stdout().flush()?;
        api::serve(Arc::clone(&svc), listener, shutdown_signal()).await?;
        anyhow::Ok(())
    });
    svc.stop();
    for h in handles {
        let _ = h.join();
    }
    served
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    log::info!("shutting down");
}

fn replay(dir: &Path, verify: bool) -> Result<()> {
    let (store, replay) = service::replay_dir(dir)?;
    println!("events {}  cases {}  torn bytes {}", replay.records.len(), store.len(), replay.torn_bytes);
    for status in CaseStatus::ALL {
        let n = store.cases().filter(|c| c.status == status && c.failure.is_none()).count();
        println!("  {:<14}{n:>8}", format!("{status:?}"));
    }
    let failed = store.cases().filter(|c| c.failure.is_some()).count();
    println!("  {:<14}{failed:>8}", "Failed");
    println!("  {:<14}{:>8}", "to resume", store.unsettled().len());
    if verify {
        let blobs = dir.join(service::BLOB_DIR);
        let missing: Vec<&str> =
            store.cases().filter(|c| !blobs.join(&c.image_ref).is_file()).map(|c| c.id.as_str()).collect();
        if !missing.is_empty() {
            bail!("{} cases have no image blob: {}", missing.len(), missing.join(", "));
        }
        println!("verified: seq 1..={} gap-free, every case replays and has its image", store.last_seq());
    }
    Ok(())
}

fn bench_cmd(cmd: BenchCmd) -> Result<()> {
    match cmd {
        BenchCmd::Stages { n, target } => {
            let client = Client::new(&target.url);
            client.health()?;
            let mut scenes = SceneSource::new(target.seed, n.max(1))?;
            let r = bench::measure_stages(&client, n, &mut scenes)?;
            let mut lines = String::new();
            for (id, s) in &r.samples {
                lines.push_str(&serde_json::json!({ "case_id": id, "latency_ms": s }).to_string());
                lines.push('\n');
            }
            lines.push_str(&serde_json::json!({ "summary": r.summary, "efficiency_gain": r.efficiency_gain }).to_string());
            lines.push('\n');
            emit_jsonl(target.jsonl.as_deref(), &lines)?;
            print!("{}", bench::stages_table(&r));
        }
        BenchCmd::Throughput { rate, minutes, grace_seconds, target } => {
            let client = Client::new(&target.url);
            client.health()?;
            let mut scenes = SceneSource::new(target.seed, 512)?;
            let plan = ThroughputPlan {
                rate_per_hour: rate,
                duration: Duration::from_secs_f64(minutes * 60.0),
                seed: target.seed,
                grace: Duration::from_secs(grace_seconds),
            };
            let r = bench::run_throughput(&client, &plan, &mut scenes)?;
            emit_jsonl(target.jsonl.as_deref(), &format!("{}\n", serde_json::to_string(&r)?))?;
            print!("{}", bench::throughput_table(&[r]));
        }
        BenchCmd::Jevons { elasticity, rounds, base_rate, baseline_seconds, minutes, grace_seconds, target } => {
            let client = Client::new(&target.url);
            client.health()?;
            let mut scenes = SceneSource::new(target.seed, 512)?;
            let config = LoadModelConfig { base_rate, elasticity, manual_baseline_seconds: baseline_seconds, rounds };
            let (table, results) = bench::run_jevons(
                &client,
                &config,
                Duration::from_secs_f64(minutes * 60.0),
                target.seed,
                Duration::from_secs(grace_seconds),
                &mut scenes,
            )?;
            let mut lines = String::new();
            for (round, result) in table.iter().zip(&results) {
                lines.push_str(&serde_json::json!({ "round": round, "result": result }).to_string());
                lines.push('\n');
            }
            emit_jsonl(target.jsonl.as_deref(), &lines)?;
            print!("{}", bench::jevons_table(&table));
        }
    }
    Ok(())
}
