use std::process::ExitCode;

fn main() -> ExitCode {
    crener_cli::run(std::env::args_os())
}
