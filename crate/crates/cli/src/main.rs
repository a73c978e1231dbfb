use clap::Parser;

fn main() {
    let cli = csen_cli::Cli::parse();
    let result = csen_cli::init_threads().and_then(|_| csen_cli::run(cli));
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
