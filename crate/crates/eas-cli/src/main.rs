use clap::Parser;

fn main() {
    let args = eas_cli::Args::parse();
    if let Err(err) = eas_cli::run(&args) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
