//! Operator entry point: run simulations, check distribution
//! preservation, calibrate latency models, replay traces, and generate
//! the bundled synthetic fixtures.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cospec_core::drafting::RoutingPolicy;
use cospec_core::models::TabularModel;
use cospec_core::oracle;
use cospec_core::pipeline::synthetic;
use cospec_core::pipeline::{
    self, read_workload, replay, write_trace, AffineLat, ClusterSpec, DrafterSpec, Mode, RunOutput,
    Setup, TraceEvent, VerifierSpec,
};
use cospec_core::scheduler::{calibrate, read_samples_csv, LatencyModel, SchedulerConfig};
use cospec_core::vocab::load_vocab_json;
use cospec_core::RequestId;

#[derive(Parser)]
#[command(
    name = "cospec",
    about = "Collaborative speculative inference: simulator, oracle checks, calibration",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a workload against a configured cluster and write the
    /// trace, metrics, and plot data.
    Run(RunArgs),
    /// Exhaustively check that linear verification preserves the target
    /// distribution (exit 0 iff max TVD ≤ 1e-12).
    CheckDist(CheckDistArgs),
    /// Fit the affine latency model from benchmark samples.
    Calibrate(CalibrateArgs),
    /// Recompute metrics from a persisted trace.
    Replay(ReplayArgs),
    /// Write the bundled synthetic vocabulary, models, config and
    /// workload to a directory.
    GenFixtures(GenFixturesArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    workload: PathBuf,
    /// Override the config's execution mode.
    #[arg(long)]
    mode: Option<Mode>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct CheckDistArgs {
    /// Largest vocabulary size exercised (2..=6).
    #[arg(long, default_value_t = 6)]
    vocab: usize,
    /// Largest draft length exercised (1..=3).
    #[arg(long, default_value_t = 3)]
    gamma: usize,
    /// Number of random (target, drafter) cases.
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long, default_value_t = 0x5eed)]
    seed: u64,
    /// Also run draft-tree cases (≤3 siblings, depth ≤2).
    #[arg(long, default_value_t = 0)]
    tree_trials: usize,
}

#[derive(Args)]
struct CalibrateArgs {
    /// CSV with header `b,l,tokens,ms`.
    #[arg(long)]
    samples: PathBuf,
    /// Where to write the fitted coefficients (JSON). Stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    trace: PathBuf,
}

#[derive(Args)]
struct GenFixturesArgs {
    #[arg(long, default_value = "fixtures")]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    requests: usize,
    /// Domain-specialization strength of the bundled drafters.
    #[arg(long, default_value_t = 0.8)]
    bias: f64,
}

/// Top-level config document (single JSON file).
#[derive(serde::Serialize, serde::Deserialize)]
struct ConfigFile {
    vocab: PathBuf,
    target_model: PathBuf,
    drafters: Vec<DrafterConfig>,
    verifier: VerifierConfig,
    scheduler: SchedulerConfig,
    planner: LatencyModel,
    routing: RoutingPolicy,
    #[serde(default)]
    queue_low: usize,
    #[serde(default)]
    queue_high: Option<usize>,
    mode: Mode,
    seed: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct DrafterConfig {
    model: PathBuf,
    domain: String,
    cost_per_hour: f64,
    latency: AffineLat,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct VerifierConfig {
    cost_per_hour: f64,
    latency: AffineLat,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("COSPEC_LOG")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::CheckDist(args) => cmd_check_dist(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Replay(args) => cmd_replay(args),
        Command::GenFixtures(args) => cmd_gen_fixtures(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load_setup(config_path: &Path) -> Result<(Setup, Mode, u64)> {
    let raw = read_to_string(config_path)?;
    let cfg: ConfigFile = serde_json::from_str(&raw)
        .with_context(|| format!("config parse error in {}", config_path.display()))?;
    let base = config_path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &PathBuf| {
        if p.is_absolute() {
            p.clone()
        } else {
            base.join(p)
        }
    };

    let (vocab, embeddings) = load_vocab_json(&read_to_string(&resolve(&cfg.vocab))?)
        .map_err(|e| anyhow::anyhow!("vocab file {}: {e}", cfg.vocab.display()))?;
    let target = TabularModel::from_json(&read_to_string(&resolve(&cfg.target_model))?)
        .map_err(|e| anyhow::anyhow!("target model {}: {e}", cfg.target_model.display()))?;

    let mut drafters = Vec::new();
    for d in &cfg.drafters {
        let model = TabularModel::from_json(&read_to_string(&resolve(&d.model))?)
            .map_err(|e| anyhow::anyhow!("drafter model {}: {e}", d.model.display()))?;
        drafters.push(DrafterSpec {
            model: Arc::new(model),
            domain: d.domain.clone(),
            cost_per_hour: d.cost_per_hour,
            latency: d.latency,
        });
    }

    let setup = Setup {
        vocab,
        embeddings,
        cluster: ClusterSpec {
            drafters,
            verifier: VerifierSpec {
                model: Arc::new(target),
                cost_per_hour: cfg.verifier.cost_per_hour,
                latency: cfg.verifier.latency,
            },
        },
        sched: cfg.scheduler,
        planner: cfg.planner,
        routing: cfg.routing,
        queue_low: cfg.queue_low,
        queue_high: cfg.queue_high.unwrap_or(usize::MAX),
    };
    Ok((setup, cfg.mode, cfg.seed))
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let (setup, cfg_mode, cfg_seed) = load_setup(&args.config)?;
    let mode = args.mode.unwrap_or(cfg_mode);
    let seed = args.seed.unwrap_or(cfg_seed);

    let wl_file = fs::File::open(&args.workload)
        .with_context(|| format!("cannot read {}", args.workload.display()))?;
    let workload = read_workload(BufReader::new(wl_file))
        .map_err(|e| anyhow::anyhow!("workload {}: {e}", args.workload.display()))?;

    log::info!(
        "running {} requests, mode {mode}, seed {seed}",
        workload.len()
    );
    let out = match pipeline::run(&setup, &workload, mode, seed) {
        Ok(out) => out,
        Err(e) => {
            eprintln!("run failed: {e}");
            return Ok(ExitCode::from(1));
        }
    };

    fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;
    write_outputs(&args.out, &out)?;
    println!(
        "completed {} requests, {} tokens, makespan {:.3} ms, throughput {:.3} tokens/s",
        out.metrics.requests_completed,
        out.metrics.total_tokens,
        out.metrics.makespan_ms,
        out.metrics.throughput_tokens_per_s
    );
    println!("outputs in {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn write_outputs(dir: &Path, out: &RunOutput) -> Result<()> {
    let mut trace = Vec::new();
    write_trace(&mut trace, &out.header, &out.events)?;
    fs::write(dir.join("trace.jsonl"), trace)?;

    fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&out.metrics)?,
    )?;
    fs::write(dir.join("metrics.csv"), out.metrics.to_csv())?;

    write_plot_data(dir, out)?;
    Ok(())
}

/// Per-figure plot data: batch-size scaling of latency and throughput,
/// and acceptance by request domain.
fn write_plot_data(dir: &Path, out: &RunOutput) -> Result<()> {
    use std::collections::BTreeMap;

    struct BatchAgg {
        draft_start: f64,
        draft_done: f64,
        verify_start: f64,
        b: usize,
    }
    let mut batches: BTreeMap<u64, BatchAgg> = BTreeMap::new();
    let mut req_domain: BTreeMap<RequestId, String> = BTreeMap::new();
    // (service_ms, tokens, b)
    let mut finished: Vec<(f64, u64, usize)> = Vec::new();
    let mut by_domain: BTreeMap<String, (u64, u64)> = BTreeMap::new();

    for ev in &out.events {
        match ev {
            TraceEvent::Arrival { req, domain, .. } => {
                req_domain.insert(*req, domain.clone());
            }
            TraceEvent::DraftStart { t, batch, b, .. } => {
                batches.insert(
                    *batch,
                    BatchAgg {
                        draft_start: *t,
                        draft_done: *t,
                        verify_start: *t,
                        b: *b,
                    },
                );
            }
            TraceEvent::DraftDone { t, batch } => {
                if let Some(agg) = batches.get_mut(batch) {
                    agg.draft_done = *t;
                }
            }
            TraceEvent::VerifyStart { t, batch, .. } => {
                if let Some(agg) = batches.get_mut(batch) {
                    agg.verify_start = *t;
                }
            }
            TraceEvent::VerifyDone { t, batch, outcomes } => {
                if let Some(agg) = batches.remove(batch) {
                    let service = (agg.draft_done - agg.draft_start) + (t - agg.verify_start);
                    let tokens: u64 = outcomes.iter().map(|o| o.appended as u64).sum();
                    finished.push((service, tokens, agg.b));
                }
                for o in outcomes {
                    if let Some(domain) = req_domain.get(&o.req) {
                        let e = by_domain.entry(domain.clone()).or_insert((0, 0));
                        e.0 += o.accept_len as u64;
                        e.1 += 1;
                    }
                }
            }
            _ => {}
        }
    }

    let mut by_b: BTreeMap<usize, (f64, u64, usize)> = BTreeMap::new();
    for (service, tokens, b) in finished {
        let e = by_b.entry(b).or_insert((0.0, 0, 0));
        e.0 += service;
        e.1 += tokens;
        e.2 += 1;
    }

    let mut latency = String::from("batch_size,mean_batch_service_ms,batches\n");
    let mut throughput = String::from("batch_size,tokens_per_s,batches\n");
    for (b, (service, tokens, count)) in &by_b {
        latency.push_str(&format!("{b},{},{count}\n", service / *count as f64));
        let tps = if *service > 0.0 {
            *tokens as f64 / (service / 1000.0)
        } else {
            0.0
        };
        throughput.push_str(&format!("{b},{tps},{count}\n"));
    }
    fs::write(dir.join("latency_vs_batch.csv"), latency)?;
    fs::write(dir.join("throughput_vs_batch.csv"), throughput)?;

    let mut acc = String::from("domain,mean_accept_len,verification_steps\n");
    for (domain, (accepted, steps)) in &by_domain {
        acc.push_str(&format!(
            "{domain},{},{steps}\n",
            *accepted as f64 / (*steps).max(1) as f64
        ));
    }
    fs::write(dir.join("acceptance_by_domain.csv"), acc)?;
    Ok(())
}

fn cmd_check_dist(args: CheckDistArgs) -> Result<ExitCode> {
    if !(2..=6).contains(&args.vocab) {
        bail!("--vocab must be in 2..=6, got {}", args.vocab);
    }
    if !(1..=3).contains(&args.gamma) {
        bail!("--gamma must be in 1..=3, got {}", args.gamma);
    }
    if args.trials == 0 && args.tree_trials == 0 {
        bail!("nothing to do: --trials and --tree-trials are both 0");
    }

    const TOL: f64 = 1e-12;
    let mut ok = true;

    if args.trials > 0 {
        let report = oracle::run_linear_suite(args.trials, args.vocab, args.gamma, args.seed);
        println!(
            "linear: {} cases, {} branches, max TVD {:.3e}, max mass err {:.3e}",
            report.cases, report.total_branches, report.max_tvd, report.max_mass_err
        );
        if report.max_tvd > TOL {
            eprintln!(
                "linear preservation FAILED (tolerance {TOL:e}); worst case: {}",
                report.worst_case
            );
            ok = false;
        }
    }
    if args.tree_trials > 0 {
        let report = oracle::run_tree_suite(args.tree_trials, args.vocab.min(5), 3, 2, args.seed);
        println!(
            "tree: {} cases, {} branches, max TVD {:.3e}, max mass err {:.3e}",
            report.cases, report.total_branches, report.max_tvd, report.max_mass_err
        );
        if report.max_tvd > TOL {
            eprintln!(
                "tree preservation FAILED (tolerance {TOL:e}); worst case: {}",
                report.worst_case
            );
            ok = false;
        }
    }

    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<ExitCode> {
    let file = fs::File::open(&args.samples)
        .with_context(|| format!("cannot read {}", args.samples.display()))?;
    let samples = match read_samples_csv(BufReader::new(file)) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("calibration input error: {e}");
            return Ok(ExitCode::from(1));
        }
    };
    match calibrate(&samples) {
        Ok(fit) => {
            let json = serde_json::to_string_pretty(&fit)?;
            match &args.out {
                Some(path) => {
                    fs::write(path, &json)
                        .with_context(|| format!("cannot write {}", path.display()))?;
                    println!("wrote {} (rmse {:.6} ms)", path.display(), fit.rmse);
                }
                None => {
                    let mut stdout = std::io::stdout();
                    stdout.write_all(json.as_bytes())?;
                    stdout.write_all(b"\n")?;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("calibration failed: {e}");
            Ok(ExitCode::from(1))
        }
    }
}

fn cmd_replay(args: ReplayArgs) -> Result<ExitCode> {
    let file = fs::File::open(&args.trace)
        .with_context(|| format!("cannot read {}", args.trace.display()))?;
    match replay(BufReader::new(file)) {
        Ok(metrics) => {
            println!("{}", serde_json::to_string_pretty(&metrics)?);
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("replay failed: {e}");
            Ok(ExitCode::from(1))
        }
    }
}

fn cmd_gen_fixtures(args: GenFixturesArgs) -> Result<ExitCode> {
    fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;

    let vocab = synthetic::vocabulary();
    let embeddings = synthetic::embeddings();
    let vocab_file = cospec_core::vocab::VocabFile::from_parts(&vocab, &embeddings);
    fs::write(
        args.out.join("vocab.json"),
        serde_json::to_string(&vocab_file)?,
    )?;

    fs::write(
        args.out.join("target.json"),
        synthetic::target_model().to_json(),
    )?;
    let mut drafter_cfgs = Vec::new();
    let drafter_rates = [0.12, 0.12, 0.22];
    for (d, name) in synthetic::DOMAIN_NAMES.iter().enumerate() {
        let file = format!("drafter_{name}.json");
        fs::write(
            args.out.join(&file),
            synthetic::specialized_drafter(d, args.bias).to_json(),
        )?;
        drafter_cfgs.push(DrafterConfig {
            model: PathBuf::from(&file),
            domain: (*name).into(),
            cost_per_hour: drafter_rates[d],
            latency: AffineLat {
                base: 2.0,
                per_batch: 0.1,
                per_len: 0.01,
                per_token: 0.5,
            },
        });
    }

    let setup = synthetic::three_domain_setup(args.bias);
    let config = ConfigFile {
        vocab: PathBuf::from("vocab.json"),
        target_model: PathBuf::from("target.json"),
        drafters: drafter_cfgs,
        verifier: VerifierConfig {
            cost_per_hour: setup.cluster.verifier.cost_per_hour,
            latency: setup.cluster.verifier.latency,
        },
        scheduler: setup.sched.clone(),
        planner: setup.planner,
        routing: setup.routing.clone(),
        queue_low: 0,
        queue_high: None,
        mode: Mode::Pipelined,
        seed: args.seed,
    };
    fs::write(
        args.out.join("config.json"),
        serde_json::to_string_pretty(&config)?,
    )?;

    let workload = synthetic::three_domain_workload(args.requests, 5.0, 24, args.seed);
    let mut wl = Vec::new();
    pipeline::write_workload(&mut wl, &workload)?;
    fs::write(args.out.join("workload.jsonl"), wl)?;

    // Noiseless samples from the planner coefficients, for the calibrate
    // subcommand.
    let mut csv = String::from("b,l,tokens,ms\n");
    for b in 1..=4u32 {
        for l in [8u32, 16, 32] {
            for tokens in [2u32, 4, 8] {
                let ms = 8.0 + 0.4 * b as f64 + 0.02 * l as f64 + 0.3 * tokens as f64;
                csv.push_str(&format!("{b},{l},{tokens},{ms}\n"));
            }
        }
    }
    fs::write(args.out.join("samples.csv"), csv)?;

    println!("fixtures written to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}
