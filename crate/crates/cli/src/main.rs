use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use emoboost_core::pipeline::{Command, Overrides, Pipeline};
use emoboost_core::Error;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Synth,
    Splits,
    TrainEmoforensics,
    TrainEmoboost,
    Eval,
    Ablate,
    Report,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Synth => Command::Synth,
            Cmd::Splits => Command::Splits,
            Cmd::TrainEmoforensics => Command::TrainEmoforensics,
            Cmd::TrainEmoboost => Command::TrainEmoboost,
            Cmd::Eval => Command::Eval,
            Cmd::Ablate => Command::Ablate,
            Cmd::Report => Command::Report,
        }
    }
}

/// Emotion-consistency deepfake detection pipeline.
#[derive(Debug, Parser)]
#[command(name = "emoboost", version)]
struct Args {
    #[arg(value_enum)]
    command: Cmd,
    /// Run configuration (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Global seed; must agree with the config if both are set.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; must agree with the config if both are set.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn one_line(e: &Error) -> String {
    e.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let args = Args::parse();
    let overrides = Overrides {
        seed: args.seed,
        out: args.out,
    };
    let cmd = Command::from(args.command);
    let result = Pipeline::load(&args.config, &overrides).and_then(|p| p.run(cmd));
    match result {
        Ok(outcome) => {
            println!("{cmd}: wrote {} artifacts", outcome.outputs.len());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (kind, code) = match e {
                Error::Config(_) => ("config", 2),
                _ => ("runtime", 1),
            };
            eprintln!("error[{kind}]: {}", one_line(&e));
            ExitCode::from(code)
        }
    }
}
