use clap::Parser;

use aptrack::cli::{run, Cli};

fn main() {
    match run(Cli::parse()) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            if !outcome.summary.ends_with('\n') {
                println!();
            }
            std::process::exit(outcome.status);
        }
        Err(e) => {
            let err = anyhow::Error::new(e).context("aptrack failed");
            eprintln!("error: {err:#}");
            std::process::exit(2);
        }
    }
}
