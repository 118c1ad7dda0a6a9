use clap::Parser;
use dvps_core::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
