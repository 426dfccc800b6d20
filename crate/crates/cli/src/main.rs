use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    match slnet_cli::commands::run(std::env::args_os(), &mut io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("slnet: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
