use std::process::ExitCode;

use clap::Parser;
use mofo_cli::{run, Cli};

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("MOFO_THREADS") else { return Ok(()) };
    let n: usize = raw.trim().parse().map_err(|_| format!("MOFO_THREADS must be a positive integer, got `{raw}`"))?;
    if n == 0 {
        return Err("MOFO_THREADS must be a positive integer, got 0".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
