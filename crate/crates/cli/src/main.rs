use clap::Parser;

fn main() {
    let cli = ztw_cli::Cli::parse();
    if let Err(e) = ztw_cli::configure_threads().and_then(|()| ztw_cli::run(cli)) {
        eprintln!("error: {e}");
        std::process::exit(ztw_cli::exit_code(&e));
    }
}
