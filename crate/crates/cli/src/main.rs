//! `normq`: train, compress, evaluate and decode with discrete HMMs.
//!
//! ```text
//! normq synth    --hidden 32 --vocab 128 --out data
//! normq train    --corpus data/corpus.txt --heldout data/heldout.txt \
//!                --epochs 5 --chunks 20 --interval 20 --bits 8 --quantizer norm-q --out run
//! normq quantize --model run/model.nqhm --scheme norm-q --bits 4 --out q4
//! normq eval     --model run/model.nqhm --candidate q4/model.nqhm --heldout data/heldout.txt
//! normq decode   --model run/model.nqhm --keyword 7 --max-len 12 --trials 500
//! normq sweep    --corpus data/corpus.txt --bits 4,8 --intervals 1,2,5,20,50,100
//! ```
//!
//! Every output is a CSV with a fixed header in `--out` (default `.`).
//! `NORMQ_THREADS` caps the number of worker threads.

mod commands;
mod settings;

use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;

use settings::{Mode, Settings};

#[derive(Parser)]
#[command(
    name = "normq",
    version,
    about = "Norm-Q compression experiments for HMMs"
)]
struct Cli {
    #[arg(value_enum, id = "command", value_name = "MODE")]
    command: Option<Mode>,
    /// TOML file with default settings; flags override it.
    #[arg(long, global = true)]
    config: Option<std::path::PathBuf>,
    #[command(flatten)]
    settings: Settings,
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("NORMQ_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("NORMQ_THREADS={raw:?} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring worker threads")
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let file = match &cli.config {
        Some(path) => Settings::from_file(path)?,
        None => Settings::default(),
    };
    let settings = cli.settings.over(file);
    let mode = match (cli.command, settings.mode) {
        (Some(a), Some(b)) if a != b => {
            anyhow::bail!("positional mode {a:?} conflicts with --mode {b:?}")
        }
        (Some(m), _) | (None, Some(m)) => m,
        (None, None) => {
            anyhow::bail!("no mode given (synth, train, quantize, eval, decode, sweep)")
        }
    };
    match mode {
        Mode::Synth => commands::synth(&settings),
        Mode::Train => commands::train(&settings),
        Mode::Quantize => commands::quantize(&settings),
        Mode::Eval => commands::eval(&settings),
        Mode::Decode => commands::decode(&settings),
        Mode::Sweep => commands::sweep(&settings),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
