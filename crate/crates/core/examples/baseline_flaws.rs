//! The pay-on-completion baseline next to the fair protocol, under a node
//! that withholds its output and one that aborts midway.

use fairmarket::protocol::verdict::{ATOMICITY, PROPORTIONALITY};
use fairmarket::protocol::{run_scenario, Mode, NodeBehavior, ScenarioConfig};

fn main() {
    for behavior in [NodeBehavior::WithholdOutput, NodeBehavior::AbortAtStep { step: 40 }] {
        for mode in [Mode::Baseline, Mode::Fair] {
            let mut cfg = ScenarioConfig::sample(1, 10);
            cfg.mode = mode;
            cfg.nodes[0].behavior = behavior;
            let r = run_scenario(&cfg, 1).unwrap();
            let o = r.outcomes()[0].clone();
            println!(
                "{mode:?} {behavior:?}: node earned {} of {}, client has output: {}, atomicity {}, proportionality {}",
                o.node_earned,
                o.value,
                o.client_decrypted,
                pass(r.verdict.passed(ATOMICITY)),
                pass(r.verdict.passed(PROPORTIONALITY)),
            );
        }
    }
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "VIOLATED"
    }
}
