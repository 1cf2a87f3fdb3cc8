use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PVI_LOG", "warn")).init();
    let cli = pvi::cli::Cli::parse();
    if let Err(e) = pvi::cli::run(cli) {
        eprintln!("pvi: {e}");
        std::process::exit(e.exit_code());
    }
}
