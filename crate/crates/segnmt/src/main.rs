use clap::Parser;

fn main() {
    let cli = segnmt::cli::Cli::parse();
    if let Err(e) = segnmt::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
