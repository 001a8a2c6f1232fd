use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(magattn_cli::cli::run(std::env::args_os()))
}
