use std::process::ExitCode;

fn main() -> ExitCode {
    nflslam::cli::init_logging();
    ExitCode::from(nflslam::cli::main_with_args(std::env::args_os()) as u8)
}
