use std::process::ExitCode;

fn main() -> ExitCode {
    let code = darbkit::cli::main_with_args(
        std::env::args_os(),
        &mut std::io::stdout(),
        &mut std::io::stderr(),
    );
    ExitCode::from(code)
}
