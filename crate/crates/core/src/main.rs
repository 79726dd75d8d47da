use clap::Parser;

fn main() {
    let cli = boxseg::cli::Cli::parse();
    if let Err(e) = boxseg::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
