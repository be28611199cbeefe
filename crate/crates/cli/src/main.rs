use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(arhnet_cli::run(std::env::args()) as u8)
}
