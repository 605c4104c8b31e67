use clap::Parser;

fn main() {
    let cli = acs_cli::Cli::parse();
    if let Err(e) = acs_cli::execute(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
