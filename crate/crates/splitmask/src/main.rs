use clap::Parser;

fn main() {
    let cli = splitmask::cli::Cli::parse();
    std::process::exit(splitmask::cli::main_with(cli));
}
