//! The command-line workflow driven in process: gen, train, eval, verify.
//!
//! cargo run --release --example cli_pipeline

use clap::Parser;
use mctnet::cli::{run, Cli};

fn main() -> mctnet::Result<()> {
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/tiny.toml");
    let mut out = std::io::stdout();
    for args in [
        vec!["mctnet", "gen", "--config", config],
        vec!["mctnet", "train", "--config", config, "--epochs", "3"],
        vec!["mctnet", "eval", "--config", config, "--split", "test"],
        vec!["mctnet", "verify", "--config", config, "--cases", "10", "--coords", "10"],
    ] {
        println!("$ {}", args.join(" "));
        let ok = run(Cli::parse_from(args), &mut out)?;
        println!("-> {}", if ok { "ok" } else { "checks failed" });
    }
    Ok(())
}
