use clap::Parser;
use multiseq_sieve::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
