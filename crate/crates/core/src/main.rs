//! Command-line front end: `hoflow verify|rate|train|sample|audit-net`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hoflow::harness::config::Regime;
use hoflow::harness::{run_pipeline, run_rate_study, run_training, run_verify, ExperimentConfig, ExperimentReport};
use hoflow::relunet::ReluNetwork;
use hoflow::trainer::TrainedFlowModel;
use hoflow::{Error, Result};

#[derive(Parser)]
#[command(name = "hoflow", version, about = "Second-order flow matching experiments and bound checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file (TOML with dotted keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Restrict to one suite (verify) or regime (rate); repeatable.
    #[arg(long, global = true)]
    suite: Vec<String>,
    /// Worker threads.
    #[arg(long, global = true, env = "HOFLOW_JOBS")]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Bound, identity and gadget suites.
    Verify,
    /// Rate ladders.
    Rate,
    /// Train the velocity and acceleration heads.
    Train,
    /// Train (or load) and sample, then compare with the target.
    Sample,
    /// Print the statistics of a serialized network or trained model.
    AuditNet { file: PathBuf },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.to_string_lossy().into_owned();
    }
    if !cli.suite.is_empty() {
        match cli.command {
            Command::Rate => {
                cfg.rate.regimes = cli
                    .suite
                    .iter()
                    .map(|s| match s.as_str() {
                        "small-t" => Ok(Regime::SmallT),
                        "large-t" => Ok(Regime::LargeT),
                        "bspline" => Ok(Regime::Bspline),
                        other => Err(Error::Config(format!("unknown regime {other:?}; known: small-t, large-t, bspline"))),
                    })
                    .collect::<Result<_>>()?;
            }
            _ => cfg.verify.suites = cli.suite.clone(),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(rep: &ExperimentReport, dir: &Path) -> Result<()> {
    rep.write(dir)?;
    for c in &rep.checks {
        println!("{:<15} {:<22} {:<40} value={:.4e} bound={:.4e}", c.verdict, c.suite, c.name, c.value, c.bound);
    }
    for f in &rep.fits {
        println!("{:<15} rate {:<17} slope={:.3} (expected {:.3}) r2={:.3}", f.verdict, f.regime, f.slope, f.expected_slope, f.r2);
    }
    for d in &rep.distances {
        println!("distance {:<8} order={} steps={:<4} W1={:.4e} W2={:.4e}", d.source, d.order, d.steps, d.w1, d.w2);
    }
    for e in &rep.errors {
        println!("ERROR {e}");
    }
    println!(
        "summary: {} pass, {} fail, {} not applicable; config {}; report in {}",
        rep.summary.pass,
        rep.summary.fail,
        rep.summary.not_applicable,
        &rep.config_hash[..12],
        dir.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    if let Command::AuditNet { file } = &cli.command {
        let text = std::fs::read_to_string(file)?;
        match ReluNetwork::from_text(&text) {
            Ok(net) => println!("{}", serde_json::to_string_pretty(&net.stats())?),
            Err(net_err) => {
                let model = TrainedFlowModel::from_text(&text)
                    .map_err(|e| Error::Config(format!("not a network ({net_err}) nor a trained model ({e})")))?;
                println!("velocity: {}", serde_json::to_string_pretty(&model.velocity_net.to_relu_network()?.stats())?);
                if let Some(a) = &model.accel_net {
                    println!("acceleration: {}", serde_json::to_string_pretty(&a.to_relu_network()?.stats())?);
                }
            }
        }
        return Ok(true);
    }
    let cfg = load_config(cli)?;
    let dir = PathBuf::from(&cfg.out);
    let rep = match cli.command {
        Command::Verify => run_verify(&cfg),
        Command::Rate => run_rate_study(&cfg),
        Command::Train | Command::Sample => {
            let (rep, model) = if matches!(cli.command, Command::Train) { run_training(&cfg) } else { run_pipeline(&cfg) };
            if let Some(m) = model {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("model.txt"), m.to_text())?;
            }
            rep
        }
        Command::AuditNet { .. } => unreachable!("handled above"),
    };
    emit(&rep, &dir)?;
    Ok(rep.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
