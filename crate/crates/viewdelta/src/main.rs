use clap::Parser;

fn main() -> std::process::ExitCode {
    std::process::ExitCode::from(viewdelta::cli::run(viewdelta::cli::Cli::parse()))
}
