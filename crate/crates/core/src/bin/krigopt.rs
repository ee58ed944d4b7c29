use clap::Parser;
use krigopt::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
