use std::process::ExitCode;

fn main() -> ExitCode {
    face_prior::cli::main()
}
