use clap::Parser;

fn main() {
    let cli = slowfast::cli::Cli::parse();
    std::process::exit(slowfast::cli::main_with(cli));
}
