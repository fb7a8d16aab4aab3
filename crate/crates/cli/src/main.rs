use std::time::{SystemTime, UNIX_EPOCH};

use clap::Parser;
use rapo_cli::{run, Cli};
use tracing::Level;

fn now() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0))
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => Level::WARN,
        1 => Level::INFO,
        _ => Level::DEBUG,
    };
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_max_level(level).init();

    let code = match run(&cli, now(), &mut std::io::stdout().lock()) {
        Ok(exit) => exit.code(),
        Err(e) => {
            eprintln!("rapo: {e}");
            e.code()
        }
    };
    std::process::exit(code);
}
