use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = ksinv_cli::Cli::parse();
    std::process::exit(ksinv_cli::run_cli(cli));
}
