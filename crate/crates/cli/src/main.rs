use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(pdenet_cli::run(std::env::args()) as u8)
}
