use bsvielab::cli::{run, Cli};
use bsvielab::Error;
use clap::Parser;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let code = match e {
            Error::Convergence(_) | Error::NeverAdmissible(_) => 3,
            _ => 2,
        };
        std::process::exit(code);
    }
}
