use clap::Parser;

fn main() {
    let cli = match expfunc_cli::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
                e.exit();
            }
            let err = expfunc_cli::CliError::config(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            std::process::exit(err.exit_code);
        }
    };
    std::process::exit(expfunc_cli::run(&cli));
}
