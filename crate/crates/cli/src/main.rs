use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hvgg::model::Architecture;
use hvgg::pipeline::{self, render_table, RunConfig};
use hvgg::Error;

/// Hierarchical patch classification pipeline.
#[derive(Parser, Debug)]
#[command(name = "hvgg", version)]
struct Cli {
    #[command(subcommand)]
    stage: Stage,
    /// Run configuration (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model family for `train`.
    #[arg(long, global = true)]
    model: Option<Family>,
    /// Overrides the root seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Stage {
    /// Generate the synthetic corpus and its manifest.
    Synth,
    /// Cut slides into resized patches and split patients.
    Patch,
    /// Drop background patches (autoencoder + 2-means).
    Filter,
    /// Stain-normalize kept patches and convert to grayscale.
    Normalize,
    /// Train every run of one model family.
    Train,
    /// Score both families on the test split.
    Evaluate,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Family {
    Flat,
    Hier,
}

impl From<Family> for Architecture {
    fn from(f: Family) -> Self {
        match f {
            Family::Flat => Architecture::Flat,
            Family::Hier => Architecture::Hierarchical,
        }
    }
}

fn run(cli: &Cli) -> hvgg::Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <file> is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    println!("config hash {}", cfg.hash());
    match cli.stage {
        Stage::Synth => {
            let s = pipeline::cmd_synth(&cfg)?;
            println!("wrote {} images; manifest {}", s.images, s.manifest.display());
            for (class, n) in &s.per_class {
                println!("  {class:<18} {n}");
            }
        }
        Stage::Patch => {
            let s = pipeline::cmd_patch(&cfg)?;
            println!("{} patches from {} slides ({} skipped)", s.patches, s.wsis, s.skipped.len());
            print!("{}", render_table(&s.table));
        }
        Stage::Filter => {
            let s = pipeline::cmd_filter(&cfg)?;
            println!("{:<18} {:>7} {:>7} {:>7}", "class", "total", "kept", "dropped");
            for c in &s.counts {
                println!("{:<18} {:>7} {:>7} {:>7}", c.fine, c.total, c.kept, c.dropped);
            }
            print!("{}", render_table(&s.table));
        }
        Stage::Normalize => {
            let s = pipeline::cmd_normalize(&cfg)?;
            let failed = s.sources.values().filter(|m| m.is_none()).count();
            println!(
                "normalized {} patches to reference {} ({} slides grayscale only); {} triplets",
                s.patches,
                s.reference,
                failed,
                s.triplets.len()
            );
        }
        Stage::Train => {
            let family = cli
                .model
                .ok_or_else(|| Error::Config("train needs --model flat|hier".into()))?;
            let s = pipeline::cmd_train(&cfg, family.into())?;
            println!("{}: {} checkpoints, log {}", s.model, s.checkpoints.len(), s.log.display());
        }
        Stage::Evaluate => {
            let s = pipeline::cmd_evaluate(&cfg)?;
            for m in &s.report.models {
                println!(
                    "{:<9} fine acc {}  coarse acc {}  cross-coarse {}",
                    m.label,
                    m.fine_accuracy.cell(),
                    m.coarse_accuracy.cell(),
                    m.cross_coarse_mass.cell()
                );
            }
            let c = &s.cross_coarse;
            println!(
                "cross-coarse mass hier - flat: {:+.4} (hier <= flat in {}/{} runs)",
                c.difference,
                c.hier_not_worse,
                c.flat.len()
            );
            for f in &s.files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
