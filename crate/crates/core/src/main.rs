use clap::Parser;

fn main() {
    let cli = gim::cli::Cli::parse();
    if let Err(e) = gim::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
