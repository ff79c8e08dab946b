use clap::Parser;
use mote_cli::{apply_thread_env, error_json, run, Cli};

fn main() {
    if let Err(e) = apply_thread_env() {
        eprintln!("{}", error_json(&e));
        std::process::exit(1);
    }
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => println!("{}", serde_json::to_string_pretty(&out).expect("output json")),
        Err(e) => {
            eprintln!("{}", error_json(&e));
            std::process::exit(1);
        }
    }
}
