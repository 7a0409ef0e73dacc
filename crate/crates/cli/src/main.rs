use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use hel_cli::{run, validate_path, Options};

/// Run a difference-in-differences, synthetic-control, model or simulation
/// spec and write its artifacts.
#[derive(Debug, Parser)]
#[command(name = "hel", version)]
struct Args {
    /// TOML run spec.
    #[arg(long)]
    spec: PathBuf,
    /// Check the spec and print every problem found, without running it.
    #[arg(long)]
    validate_only: bool,
    /// Worker threads.
    #[arg(long, env = "HEL_THREADS")]
    threads: Option<usize>,
    /// Output directory; overrides the spec's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if args.threads == Some(0) {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    if args.validate_only {
        let diags = validate_path(&args.spec, args.out.as_deref());
        if diags.is_empty() {
            println!("{}: ok", args.spec.display());
            return ExitCode::SUCCESS;
        }
        for d in &diags {
            println!("{d}");
        }
        return ExitCode::from(2);
    }
    let opts = Options { out: args.out, threads: args.threads };
    match run(&args.spec, &opts) {
        Ok(o) => {
            print!("{}", o.console);
            println!("wrote {} artifact(s) to {}", o.artifacts.len(), o.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
