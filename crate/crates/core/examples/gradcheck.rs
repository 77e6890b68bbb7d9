//! Operator oracles plus finite-difference gradient checks, operator by
//! operator and through the whole tiny network.
//!
//! cargo run --release --example gradcheck

use mctnet::network::NetworkConfig;
use mctnet::verify::{run_suite, VerifyOptions};

fn main() -> mctnet::Result<()> {
    let opts = VerifyOptions {
        cases: 20,
        coords_per_family: 20,
        ..VerifyOptions::default()
    };
    let checks = run_suite(&NetworkConfig::tiny(), &opts)?;
    for c in &checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!("{} checks, {failed} failed", checks.len());
    Ok(())
}
