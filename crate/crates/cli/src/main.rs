use clap::Parser;

fn main() {
    let cli = aset_cli::Cli::parse();
    if let Err(e) = aset_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
