use std::process::ExitCode;

fn main() -> ExitCode {
    promptsmith_cli::main_entry()
}
