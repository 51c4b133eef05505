//! Run a batch of generated adversarial scenarios and tally outcomes and
//! predicate results. Pass a count to change the batch size.

use std::collections::BTreeMap;

use fairmarket::protocol::{adversarial_scenario, run_scenario};

fn main() {
    let count: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(200);
    let mut statuses: BTreeMap<String, usize> = BTreeMap::new();
    let mut failures: BTreeMap<String, usize> = BTreeMap::new();
    for seed in 0..count {
        let r = run_scenario(&adversarial_scenario(seed), seed).unwrap();
        for o in r.outcomes() {
            *statuses.entry(o.status.clone()).or_default() += 1;
        }
        for p in r.verdict.predicates.iter().filter(|p| !p.passed) {
            *failures.entry(p.name.clone()).or_default() += 1;
            println!("seed {seed}: {} failed: {}", p.name, p.detail);
        }
    }
    println!("{count} scenarios");
    for (status, n) in &statuses {
        println!("  {status:<20} {n}");
    }
    println!("predicate failures: {}", if failures.is_empty() { "none".to_string() } else { format!("{failures:?}") });
}
