use clap::Parser;

fn main() {
    let cli = srlab::cli::Cli::parse();
    if let Err(e) = srlab::cli::run(cli) {
        eprintln!("{}", srlab::cli::error_line(&e));
        std::process::exit(1);
    }
}
