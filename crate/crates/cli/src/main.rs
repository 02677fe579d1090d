use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match supervit_cli::run(std::env::args_os(), &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = out.flush();
            match e {
                supervit_cli::CliError::Help(text) => {
                    let _ = write!(out, "{text}");
                    ExitCode::SUCCESS
                }
                other => {
                    eprintln!("{}", other.to_json_line());
                    ExitCode::from(other.exit_code())
                }
            }
        }
    }
}
