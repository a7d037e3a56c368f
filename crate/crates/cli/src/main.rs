use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use freqmark_cli::commands::{self, Ctx, Outcome};
use freqmark_cli::config::Config;

/// Frequency-domain trigger-set watermarking for image classifiers.
///
/// Exit status: 0 on success or a verified watermark, 2 when verification fails, 1 on error.
#[derive(Parser)]
#[command(name = "freqmark", version)]
struct Cli {
    /// Work directory holding artifacts and manifests.
    #[arg(long, global = true, default_value = ".")]
    dir: PathBuf,
    /// Built-in defaults to start from (default, toy).
    #[arg(long, global = true, default_value = "default")]
    profile: String,
    /// key=value config file applied on top of the profile. A run manifest works too.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single override, e.g. --set cluster.rho=0.6. Repeatable; applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for the data-parallel sweeps. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Write the raw perturbation key to key.txt (it is never stored otherwise).
    #[arg(long, global = true)]
    export_key: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the unmarked model m0.
    TrainBaseline,
    /// Fourier heat map of m0 on the validation split.
    Heatmap,
    /// Threshold the heat map and keep the low-radius cluster as the mask.
    Cluster,
    /// Build the keyed trigger sets B1, B2 and T2.
    GenTriggers,
    /// Train the marked model m1 with B1 and B2 mixed in.
    Embed,
    /// Query a model on T2 and apply the threshold rule.
    Verify {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        triggers: Option<PathBuf>,
    },
    /// Attack the marked model or its queries, then verify, e.g. `jpeg:qf=80`,
    /// `prune:rate=0.3`, `finetune:epochs=10,fraction=0.5`, `hflip`, `lowpass:B=4`,
    /// `lowpass:B=mask`.
    Attack {
        spec: String,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        triggers: Option<PathBuf>,
    },
    /// Clean and trigger accuracy of m0, m1 and every attack in eval.attacks.
    Eval,
    /// All stages in order, ending with verify.
    Pipeline,
    /// Print the effective configuration.
    ShowConfig,
}

fn config(cli: &Cli) -> Result<Config> {
    let mut cfg = Config::profile(&cli.profile)?;
    if let Some(path) = &cli.config {
        cfg.merge_file(path)?;
    }
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Outcome> {
    let cfg = config(&cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_text());
        return Ok(Outcome::Done);
    }
    if cli.threads == 0 {
        anyhow::bail!("--threads must be at least 1");
    }
    std::fs::create_dir_all(&cli.dir).with_context(|| format!("creating {}", cli.dir.display()))?;
    let ctx = Ctx { dir: cli.dir.clone(), cfg, threads: cli.threads, export_key: cli.export_key };
    freqmark::par::with_threads(cli.threads, || match &cli.command {
        Command::TrainBaseline => commands::train_baseline(&ctx),
        Command::Heatmap => commands::heatmap(&ctx),
        Command::Cluster => commands::cluster(&ctx),
        Command::GenTriggers => commands::gen_trigger_sets(&ctx),
        Command::Embed => commands::embed(&ctx),
        Command::Verify { model, triggers } => commands::verify(&ctx, model.as_deref(), triggers.as_deref()),
        Command::Attack { spec, model, triggers } => commands::attack(&ctx, spec, model.as_deref(), triggers.as_deref()),
        Command::Eval => commands::eval(&ctx),
        Command::Pipeline => commands::pipeline(&ctx),
        Command::ShowConfig => unreachable!(),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) => ExitCode::from(outcome.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
