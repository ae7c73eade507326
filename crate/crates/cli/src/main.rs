use clap::Parser;
use ctxasr_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("ctxasr: {e}");
        std::process::exit(e.exit_code());
    }
}
