//! Writes one simulated composite dataset as CSV to stdout.
//!
//! `cargo run --example simulate_csv -- [scenario] [n] [seed]`

use excontrol::dataset::{write_csv, Schema};
use excontrol::simlab::{generate, Scenario, ScenarioConfig};

fn main() -> excontrol::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let scenario: Scenario = args.first().map_or(Ok(Scenario::I), |s| s.parse())?;
    let n = args.get(1).map_or(500, |s| s.parse().expect("n must be an integer"));
    let seed = args.get(2).map_or(1, |s| s.parse().expect("seed must be an integer"));
    let (ds, _) = generate(&ScenarioConfig::new(scenario, n), seed)?;
    write_csv(&ds, std::io::stdout().lock(), &Schema::default())
}
