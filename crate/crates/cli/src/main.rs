use clap::Parser;
use guidegate_cli::{report, run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        std::process::exit(report(&e));
    }
}
