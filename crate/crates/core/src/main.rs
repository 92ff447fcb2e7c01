use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use funnel_recovery::ren::{check_iqc, load_checkpoint};
use funnel_recovery::runner::{run, synth_offline, verify_trace, voltage_ratios, write_offline, RunConfig};
use funnel_recovery::Error;

#[derive(Parser, Debug)]
#[command(name = "funnel-recovery", version, about = "Online funnel recovery control with a learned disturbance model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the recovery loop and write the trace, metrics and checkpoint.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Solve the whole-epoch funnel program against the true disturbance bound.
    SynthOffline {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Check the incremental IQC certificate of a REN checkpoint.
    CheckIqc { checkpoint: PathBuf },
    /// Re-run the invariant suites on a recorded trace.
    Verify { trace: PathBuf },
}

fn load(config: &PathBuf, o: &Overrides) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(config)?;
    cfg.apply_overrides(o.seed, o.out.clone(), o.epochs)?;
    Ok(cfg)
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) | Error::Contract(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn cmd_run(config: &PathBuf, o: &Overrides) -> Result<ExitCode, Error> {
    let cfg = load(config, o)?;
    let out = run(&cfg)?;
    out.write(&cfg.out_dir, cfg.output.write_solutions)?;
    let m = &out.metrics;
    println!("steps {} epochs {}", m.steps, m.epochs);
    println!("synth ms mean {:.2} max {:.2}", m.mean_synth_ms, m.max_synth_ms);
    println!("train ms mean {:.2} max {:.2}", m.mean_train_ms, m.max_train_ms);
    let ratios = voltage_ratios(&out.rows, cfg.microgrid.epoch_steps);
    println!("voltage ratio per epoch {ratios:.4?}");
    println!("final voltage band {:.3e}", m.final_voltage_band);
    println!("final funnel sample {:.3e}", m.final_funnel_sample);
    println!("REN certified {}", m.certified);
    println!("wrote {}", cfg.out_dir.display());
    if let Some(f) = &out.failure {
        eprintln!("run truncated: {f}");
    }
    Ok(if out.flagged() || out.failure.is_some() { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn cmd_offline(config: &PathBuf, o: &Overrides) -> Result<ExitCode, Error> {
    let cfg = load(config, o)?;
    match synth_offline(&cfg) {
        Ok((out, _)) => {
            write_offline(&cfg.out_dir, &out)?;
            let k_max = out.k.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            println!("offline synthesis: ‖Δ‖∞ {:.4}, k_max {k_max:.4}, min residual {:.3e}, {:.1} ms", out.delta_inf, out.min_residual, out.solve_ms);
            println!("wrote {}", cfg.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Err(Error::Infeasible(why)) => {
            println!("offline synthesis infeasible: {why}");
            Ok(ExitCode::from(1))
        }
        Err(e) => Err(e),
    }
}

fn cmd_check_iqc(path: &PathBuf) -> Result<ExitCode, Error> {
    let (params, spec) = load_checkpoint(path)?;
    let rep = check_iqc(&params, &spec)?;
    println!("certified {} min eig {:.3e} (well-posedness {:.3e})", rep.certified, rep.min_eig, rep.min_eig_f);
    Ok(if rep.certified { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_verify(path: &PathBuf) -> Result<ExitCode, Error> {
    let rep = verify_trace(path)?;
    for (name, fails) in &rep.suites {
        println!("{} {name}", if *fails == 0 { "PASS" } else { "FAIL" });
    }
    for f in &rep.failures {
        println!("  {f}");
    }
    println!("{} rows, {} flagged", rep.rows, rep.flagged_rows);
    Ok(if rep.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match &cli.command {
        Command::Run { config, overrides } => cmd_run(config, overrides),
        Command::SynthOffline { config, overrides } => cmd_offline(config, overrides),
        Command::CheckIqc { checkpoint } => cmd_check_iqc(checkpoint),
        Command::Verify { trace } => cmd_verify(trace),
    };
    res.unwrap_or_else(|e| exit_for(&e))
}
