use clap::Parser;

use profuse::cli::{dispatch, exit_code, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(err) = dispatch(&cli) {
        eprintln!("error: {err}");
        let mut cause = std::error::Error::source(&err);
        while let Some(c) = cause {
            eprintln!("  caused by: {c}");
            cause = c.source();
        }
        std::process::exit(exit_code(&err));
    }
}
