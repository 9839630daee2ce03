use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use forge_core::pipeline::{self, Config, PipelineError, Stage, StageRun};
use forge_core::synth::{generate_fixture, SynthConfig};

#[derive(Parser)]
#[command(name = "forge", about = "Build entity-level transaction graphs from raw block files")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read block files and select the main chain.
    Parse(RunArgs),
    /// Resolve inputs and flag CoinJoin and colored-coin transactions.
    Filter(RunArgs),
    /// Merge co-spent scripts into clusters.
    Cluster(RunArgs),
    /// Attribute transfers and aggregate the edge table.
    Edges(RunArgs),
    /// Compute the node table.
    Attributes(RunArgs),
    /// Propagate address labels and coinbase tags onto clusters.
    Label(RunArgs),
    /// Derive the raw feature matrix.
    Features(RunArgs),
    /// Split labeled nodes and write neighborhood buffers.
    Sample(RunArgs),
    /// Export the graph as CSV, SQL text and binary store.
    Export(RunArgs),
    /// Run every stage in order.
    All(RunArgs),
    /// Write a synthetic fixture: blocks, labels, pools, rates and a config.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides chain.height_limit.
    #[arg(long)]
    height_limit: Option<u64>,
    /// Overrides output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rerun even when the manifest matches.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    txs: u64,
    #[arg(long)]
    blocks: Option<u64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn load(args: &RunArgs) -> Result<Config, PipelineError> {
    let mut cfg = Config::load(&args.config)?;
    if let Some(h) = args.height_limit {
        cfg.chain.height_limit = h;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = std::env::current_dir()?.join(out);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(run: &StageRun) {
    let m = &run.manifest;
    if run.skipped {
        println!("{:<10} skipped (up to date)", m.stage.as_str());
    } else if let Some(t) = &m.throughput {
        println!(
            "{:<10} {} {} in {:.2}s ({:.0}/s)",
            m.stage.as_str(),
            t.items,
            t.unit,
            t.seconds,
            t.per_second
        );
    }
}

fn run_stages(stage: Option<Stage>, args: &RunArgs) -> Result<(), PipelineError> {
    let cfg = load(args)?;
    match stage {
        Some(s) => report(&pipeline::run(s, &cfg, args.force)?),
        None => {
            for s in Stage::ALL {
                report(&pipeline::run(s, &cfg, args.force)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, args) = match cli.command {
        Command::Parse(a) => (Some(Stage::Parse), a),
        Command::Filter(a) => (Some(Stage::Filter), a),
        Command::Cluster(a) => (Some(Stage::Cluster), a),
        Command::Edges(a) => (Some(Stage::Edges), a),
        Command::Attributes(a) => (Some(Stage::Attributes), a),
        Command::Label(a) => (Some(Stage::Label), a),
        Command::Features(a) => (Some(Stage::Features), a),
        Command::Sample(a) => (Some(Stage::Sample), a),
        Command::Export(a) => (Some(Stage::Export), a),
        Command::All(a) => (None, a),
        Command::Synth(s) => {
            let mut cfg = SynthConfig::scaled(s.txs, s.seed);
            if let Some(b) = s.blocks {
                cfg.blocks = b;
            }
            return match generate_fixture(&cfg, &s.out) {
                Ok(summary) => {
                    println!(
                        "wrote {} blocks, {} transactions, {} labels to {}",
                        summary.main_chain_blocks,
                        summary.transactions,
                        summary.labels,
                        s.out.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(10)
                }
            };
        }
    };
    match run_stages(stage, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
