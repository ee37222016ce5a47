use clap::Parser;
use fbe_cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FBE_LOG", "error")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("fbe: {e}");
        std::process::exit(e.exit_code());
    }
}
