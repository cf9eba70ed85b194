//! `svhdr`: synthesize brackets, fuse, evaluate, train and check gradients.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use svhdr_pipeline::config::{resolve, RunConfig};
use svhdr_pipeline::{eval, fuse, gradsuite, synthesize, train, PipelineError, Result};

#[derive(Parser, Debug)]
#[command(name = "svhdr", version, about = "Photon-limited HDR bracket fusion")]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["baseline", "network"])]
    method: Option<String>,
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long, global = true, value_name = "PATH")]
    dataset: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["desk", "overfit", "paper"])]
    preset: Option<String>,
    /// Accepted for scripts; every command is deterministic.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Override any configuration key (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write augmented, cropped, simulated brackets and their ground truth.
    Synthesize,
    /// Fuse LDR exposures (shortest first) into an HDR image and a preview.
    Fuse {
        #[arg(required = true, value_name = "LDR")]
        inputs: Vec<PathBuf>,
        /// Absolute exposure factors, comma-separated, ascending.
        #[arg(long, value_delimiter = ',')]
        exposures: Option<Vec<f64>>,
    },
    /// Metric curves over illuminance: metrics.csv and curve.svg.
    Eval,
    /// Train the network; resume with --checkpoint.
    Train,
    /// Finite-difference check of every differentiable operation.
    GradCheck,
}

fn flag_pairs(cli: &Cli) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    if let Some(p) = &cli.preset {
        pairs.push(("train.preset".into(), p.clone()));
    }
    for s in &cli.set {
        let (k, v) = s.split_once('=').ok_or_else(|| PipelineError::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let path = |p: &PathBuf| p.display().to_string();
    let named = [
        ("seed", cli.seed.map(|s| s.to_string())),
        ("out", cli.out.as_ref().map(path)),
        ("method", cli.method.clone()),
        ("checkpoint", cli.checkpoint.as_ref().map(path)),
        ("dataset", cli.dataset.as_ref().map(path)),
        ("deterministic", cli.deterministic.then(|| "true".to_string())),
    ];
    pairs.extend(named.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    if let Command::Fuse { exposures: Some(t), .. } = &cli.command {
        let t: Vec<String> = t.iter().map(|x| x.to_string()).collect();
        pairs.push(("exposures".into(), t.join(",")));
    }
    Ok(pairs)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg: RunConfig = resolve(cli.config.as_deref(), std::env::vars(), &flag_pairs(cli)?)?;
    let echo = cfg.write_resolved(&cfg.out)?;
    log::info!("resolved configuration written to {}", echo.display());
    match &cli.command {
        Command::Synthesize => {
            let r = synthesize::cmd_synthesize(&cfg)?;
            println!("synthesized {} samples ({} sources skipped); manifest {}", r.samples, r.skipped, r.manifest.display());
        }
        Command::Fuse { inputs, .. } => {
            let r = fuse::cmd_fuse(&cfg, inputs)?;
            println!("wrote {} and {}", r.hdr.display(), r.preview.display());
        }
        Command::Eval => {
            let r = eval::cmd_eval(&cfg)?;
            for row in &r.rows {
                println!("lux {:<8} PSNR {:7.3} PSNR-mu {:7.3} MS-SSIM {:.4} MS-SSIM-mu {:.4}", row.lux, row.psnr, row.psnr_mu, row.ms_ssim, row.ms_ssim_mu);
            }
            println!("wrote {} and {}", r.csv.display(), r.svg.display());
        }
        Command::Train => {
            let r = train::cmd_train(&cfg)?;
            println!("trained to step {}; tonemapped MSE {:.4e}; checkpoint {}", r.steps, r.final_mse, r.final_checkpoint.display());
        }
        Command::GradCheck => {
            let rows = gradsuite::cmd_grad_check(&cfg)?;
            for r in &rows {
                println!("{:<28} {:<9} max rel err {:.3e} ({} probes)", r.name, r.tier.name(), r.max_rel_error, r.probes);
            }
            println!("all {} gradient checks passed", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
