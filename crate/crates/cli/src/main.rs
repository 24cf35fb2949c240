use clap::Parser;

fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = simpa_cli::cli::Cli::parse();
    let mut out = std::io::stdout().lock();
    match simpa_cli::cli::run(cli, &mut out) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        // A closed downstream pipe (`simpa runs | head`) is not a failure.
        Err(e)
            if e.chain().any(|c| {
                let kind = c
                    .downcast_ref::<std::io::Error>()
                    .map(|io| io.kind())
                    .or_else(|| c.downcast_ref::<serde_json::Error>().and_then(|j| j.io_error_kind()));
                kind == Some(std::io::ErrorKind::BrokenPipe)
            }) =>
        {
            std::process::ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
