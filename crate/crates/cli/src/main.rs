use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mafenn_core::channel::{transmit, TransmissionRecord};
use mafenn_core::diffnet::gradcheck_suite;
use mafenn_core::equalizers::{evaluate_ser, Combine, Equalizer, EqualizerKind};
use mafenn_core::harness::{
    derive_seed, emit_game_checks, emit_plotdata, game_verify, grid_search, run_sweep, streams,
    ChannelKind, ExperimentPlan, GRID_FILE, RESULTS_FILE,
};

#[derive(Parser)]
#[command(
    name = "mafenn",
    version,
    about = "Feedback equalizer lab: train, sweep and verify"
)]
struct Cli {
    /// `key = value` plan file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Results directory.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a transmission and write it as a dataset file.
    Generate(Generate),
    /// Train one equalizer and save a checkpoint.
    Train(Train),
    /// Score a saved checkpoint on a fresh test stream.
    Evaluate(Evaluate),
    /// Run the plan's (equalizer, SNR, trial) sweep.
    Sweep,
    /// Search the plan's cycles × window × combine grid.
    Grid,
    /// Check the learning dynamics on the reference, random and saddle games.
    GameVerify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference checks of every layer and loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

#[derive(Args)]
struct Link {
    #[arg(long, default_value = "nonlinear")]
    channel: ChannelKind,
    #[arg(long, default_value_t = 20.0, allow_negative_numbers = true)]
    snr_db: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Generate {
    #[command(flatten)]
    link: Link,
    #[arg(long, default_value_t = 100_000)]
    symbols: usize,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    link: Link,
    #[arg(long, default_value = "mafenn")]
    equalizer: EqualizerKind,
    #[arg(long)]
    cycles: Option<usize>,
    #[arg(long)]
    feedback_window: Option<usize>,
    #[arg(long)]
    combine: Option<Combine>,
    #[arg(long)]
    train_symbols: Option<usize>,
    /// Extra equalizer setting, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct Evaluate {
    #[command(flatten)]
    link: Link,
    /// Checkpoint stem (without `.mafw` / `.cfg`).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test_symbols: Option<usize>,
}

fn load_plan(path: Option<&Path>) -> Result<ExperimentPlan> {
    match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentPlan::from_kv(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(ExperimentPlan::default()),
    }
}

fn link_plan(mut plan: ExperimentPlan, link: &Link) -> ExperimentPlan {
    plan.channel = link.channel;
    plan.base_seed = link.seed;
    plan.snr_db = vec![link.snr_db];
    plan
}

fn generate(out: &Path, g: &Generate) -> Result<()> {
    let seed = derive_seed(g.link.seed, "generate", g.link.snr_db, 0);
    let rec = transmit(&g.link.channel.config(g.link.snr_db, seed), g.symbols)?;
    std::fs::create_dir_all(out)?;
    let path = out.join(format!(
        "{}-snr{}-s{}.mafd",
        g.link.channel, g.link.snr_db, g.link.seed
    ));
    let mut w = BufWriter::new(File::create(&path)?);
    rec.write_to(&mut w)?;
    drop(w);
    // read back so a truncated write is caught here
    TransmissionRecord::read_from(BufReader::new(File::open(&path)?))?;
    println!("wrote {} symbols to {}", rec.len(), path.display());
    Ok(())
}

fn train(plan: ExperimentPlan, out: &Path, t: &Train) -> Result<()> {
    let mut plan = link_plan(plan, &t.link);
    if let Some(n) = t.train_symbols {
        plan.train_symbols = n;
    }
    let label = t.equalizer.to_string();
    let seed = derive_seed(plan.base_seed, &label, t.link.snr_db, 0);
    let mut config = plan.equalizer_config(t.equalizer, seed);
    if let Some(c) = t.cycles {
        config.cycles = c;
    }
    if let Some(k) = t.feedback_window {
        config.k = k;
    }
    if let Some(c) = t.combine {
        config.combine = c;
    }
    for kv in &t.set {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects key=value, got {kv:?}");
        };
        if !config.set(k.trim(), v.trim())? {
            bail!("unknown equalizer setting {k:?}");
        }
    }
    config.validate()?;
    plan.validate()?;
    let data = streams(&plan, t.link.snr_db, 0)?;
    let start = std::time::Instant::now();
    let mut eq = Equalizer::train(&config, &data.train)?;
    let val = evaluate_ser(&mut eq, &data.val)?;
    std::fs::create_dir_all(out)?;
    let (weights, sidecar) = eq.save(&out.join(&label))?;
    println!(
        "{label}: validation SER {} ({} errors / {}) after {:.1} s",
        val.ser,
        val.errors,
        val.n,
        start.elapsed().as_secs_f64()
    );
    println!("saved {} and {}", weights.display(), sidecar.display());
    Ok(())
}

fn evaluate(plan: ExperimentPlan, e: &Evaluate) -> Result<()> {
    let mut plan = link_plan(plan, &e.link);
    if let Some(n) = e.test_symbols {
        plan.test_symbols = n;
    }
    let mut eq =
        Equalizer::load(&e.model).with_context(|| format!("loading {}", e.model.display()))?;
    let data = streams(&plan, e.link.snr_db, 0)?;
    let r = evaluate_ser(&mut eq, &data.test)?;
    println!("ser,errors,n_test\n{},{},{}", r.ser, r.errors, r.n);
    Ok(())
}

fn sweep(plan: ExperimentPlan, out: &Path) -> Result<()> {
    let res = run_sweep(&plan, Some(out))?;
    let files = emit_plotdata(&res.summary, &out.join("plot"))?;
    println!("equalizer,snr_db,n,ser_mean,ser_std");
    for s in &res.summary {
        println!(
            "{},{},{},{},{}",
            s.equalizer, s.snr_db, s.n, s.ser_mean, s.ser_std
        );
    }
    println!(
        "{} rows in {}; {} plot files",
        res.rows.len(),
        out.join(RESULTS_FILE).display(),
        files.len()
    );
    Ok(())
}

fn grid(plan: ExperimentPlan, out: &Path) -> Result<()> {
    let g = grid_search(&plan, Some(out))?;
    println!("label,cycles,k,combine,val_ser_mean,test_ser_mean");
    for p in &g.points {
        println!(
            "{},{},{},{},{},{}",
            p.label, p.cycles, p.k, p.combine, p.val_ser_mean, p.test_ser_mean
        );
    }
    println!(
        "best by validation: {} (test {})",
        g.best_val.label, g.best_val.test_ser_mean
    );
    println!("best by test: {}", g.best_test.label);
    println!("rows in {}", out.join(GRID_FILE).display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let plan = || load_plan(cli.config.as_deref());
    match &cli.cmd {
        Cmd::Generate(g) => generate(&cli.out, g)?,
        Cmd::Train(t) => train(plan()?, &cli.out, t)?,
        Cmd::Evaluate(e) => evaluate(plan()?, e)?,
        Cmd::Sweep => sweep(plan()?, &cli.out)?,
        Cmd::Grid => grid(plan()?, &cli.out)?,
        Cmd::GameVerify { seed } => {
            let checks = game_verify(*seed)?;
            std::fs::create_dir_all(&cli.out)?;
            let path = cli.out.join("game_checks.csv");
            emit_game_checks(&checks, BufWriter::new(File::create(&path)?))?;
            let failed: Vec<_> = checks.iter().filter(|c| !c.pass).collect();
            for c in &failed {
                println!(
                    "FAIL {} on {}: {} (threshold {})",
                    c.check_name, c.game_id, c.value, c.threshold
                );
            }
            println!(
                "{}/{} checks pass; table in {}",
                checks.len() - failed.len(),
                checks.len(),
                path.display()
            );
            return Ok(failed.is_empty());
        }
        Cmd::Gradcheck { seeds } => {
            let mut ok = true;
            println!("case,seed,max_rel_err,tolerance,pass");
            for seed in 0..*seeds {
                for c in gradcheck_suite(seed)? {
                    println!(
                        "{},{},{:e},{:e},{}",
                        c.name,
                        c.seed,
                        c.report.max_rel_err,
                        c.tolerance,
                        c.pass()
                    );
                    ok &= c.pass();
                }
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
