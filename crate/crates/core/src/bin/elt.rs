use clap::Parser;
use elt_core::cli::{self, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("ELT_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Err(e) = cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(cli::exit_code(&e));
    }
}
