use clap::Parser;

fn main() {
    let cli = qa::cli::Cli::parse();
    if let Err(failure) = qa::cli::run(cli) {
        eprintln!("{}", failure.message);
        std::process::exit(failure.status);
    }
}
