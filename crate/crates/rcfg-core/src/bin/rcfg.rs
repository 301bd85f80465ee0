use std::process::ExitCode;

fn main() -> ExitCode {
    rcfg_core::cli::run()
}
