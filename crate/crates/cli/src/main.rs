use clap::Parser;
use lucent_cli::config::Cli;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    std::process::exit(lucent_cli::run(&cli));
}
