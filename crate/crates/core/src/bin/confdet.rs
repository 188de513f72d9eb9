use clap::Parser;

fn main() {
    let cli = confdet::cli::Cli::parse();
    std::process::exit(confdet::cli::main_with(cli));
}
