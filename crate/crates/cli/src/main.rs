mod args;
mod commands;
mod output;

use clap::Parser;

fn main() {
    let cli = args::Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = commands::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(commands::exit_code(&e));
    }
}
