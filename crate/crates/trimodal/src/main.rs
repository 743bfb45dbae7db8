//! Thin binary wrapper; every command lives in the library's `cli` module.

use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(trimodal::cli::run_from(std::env::args()) as u8)
}
