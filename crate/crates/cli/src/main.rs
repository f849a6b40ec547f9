use clap::Parser;
use odesurv_cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(m) => log::info!("{} finished in {:.2}s", m.command, m.wall_time_secs),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
