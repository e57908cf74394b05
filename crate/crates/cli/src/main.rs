use clap::Parser;

fn main() {
    let cli = dattile_cli::args::Cli::parse();
    match cli.run() {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
