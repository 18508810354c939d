use clap::error::ErrorKind as ClapKind;
use clap::Parser;
use mvrestore_cli::{run, Cli, CliError, ErrorKind};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ClapKind::DisplayHelp | ClapKind::DisplayVersion) => {
            print!("{e}");
            return;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            let err = CliError::new(ErrorKind::Usage, first);
            eprintln!("{}", err.line());
            std::process::exit(err.kind.exit_code());
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("{}", e.line());
        std::process::exit(e.kind.exit_code());
    }
}
