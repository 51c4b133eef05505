//! Match pending tasks to free nodes by resource fit, then time the matcher
//! on larger random graphs.

use fairmarket::matching::{bench_matching, epoch_assign, ResourceSpec};

fn main() {
    let tasks = vec![
        ("render", ResourceSpec::new(4, 8)),
        ("sum", ResourceSpec::new(1, 1)),
        ("train", ResourceSpec::new(8, 16)),
        ("index", ResourceSpec::new(2, 4)),
    ];
    let nodes =
        vec![("small", ResourceSpec::new(2, 4)), ("big", ResourceSpec::new(8, 16)), ("tiny", ResourceSpec::new(1, 1))];

    let epoch = epoch_assign(tasks, nodes);
    for (task, node) in &epoch.pairs {
        println!("{task:>6} -> {node}");
    }
    println!("waiting: {:?}", epoch.pending.iter().map(|(t, _)| *t).collect::<Vec<_>>());

    for row in bench_matching(&[500, 1000, 2000], 0.85, 1, false) {
        println!("|V| {:>5}  edges {:>8}  matched {:>5}  {:.4}s", row.vertices, row.edges, row.matched, row.seconds);
    }
}
