//! End-to-end run of the fair protocol: one client, one node, a handful of
//! tasks. Prints the per-task table and every predicate.

use fairmarket::protocol::{run_scenario, RunReport, ScenarioConfig};

fn main() {
    let tasks = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let cfg = ScenarioConfig::sample(tasks, 10);
    let result = run_scenario(&cfg, 1).expect("sample config is valid");
    print!("{}", RunReport::from_trace(&result.records).render());
    println!("{} trace records, {} attestation-service calls", result.records.len(), result.service_calls());
}
