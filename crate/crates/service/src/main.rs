use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(gramsr_service::cli::run(std::env::args_os()))
}
