use clap::Parser;

use revkl::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            let kind = if err.is_validation() { "validation" } else { "runtime" };
            let payload = serde_json::json!({ "error": err.to_string(), "kind": kind });
            eprintln!("{payload}");
            std::process::exit(if err.is_validation() { 1 } else { 2 });
        }
    }
}
