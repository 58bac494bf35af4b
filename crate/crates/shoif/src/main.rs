use clap::Parser;

fn main() {
    let cli = shoif::cli::Cli::parse();
    std::process::exit(shoif::cli::run(&cli));
}
