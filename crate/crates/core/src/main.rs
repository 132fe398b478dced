use clap::Parser;

fn main() {
    let cli = shiftrec::cli::Cli::parse();
    std::process::exit(shiftrec::cli::run(cli));
}
