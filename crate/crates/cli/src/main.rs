use std::process::ExitCode;

use clap::Parser;
use nestnet_cli::{exit, run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(v) = std::env::var("NESTNET_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("warning: NESTNET_THREADS ignored: {e}");
                }
            }
            _ => {
                eprintln!("error: NESTNET_THREADS must be a positive integer, got `{v}`");
                return ExitCode::from(exit::USAGE);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
