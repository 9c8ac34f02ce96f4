use clap::Parser;
use soi_core::cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SOI_LOG", "info")).format_timestamp(None).init();
    if let Err(e) = run(Cli::parse()) {
        log::error!("{e}");
        std::process::exit(e.status.code());
    }
}
