//! Seeded scenario families for adversarial sweeps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::config::{
    ClientBehavior, ClientConfig, LinkAction, LinkPolicy, NodeBehavior, NodeConfig, Routing, ScenarioConfig, TaskConfig,
};
use super::{run_scenario, ProtocolError};
use crate::channel::{compute_promise_value, Alpha};
use crate::enclave::unlocked_index;
use crate::matching::ResourceSpec;

/// Steps the sum program takes over `words` input words.
pub fn sum_steps(words: usize) -> u64 {
    12 * words as u64 + 8
}

/// Fewest input words that keep the sum program running for `steps`.
pub fn words_for_steps(steps: u64) -> usize {
    (steps.saturating_sub(8) as usize).div_ceil(12)
}

const KINDS: [&str; 8] =
    ["dispatch", "progress", "delivery", "delivery_response", "settle", "node_lock_request", "node_lock_reply", "*"];

fn random_link<R: Rng>(rng: &mut R, nodes: &[String], action: LinkAction) -> LinkPolicy {
    let node = nodes.choose(rng).expect("at least one node").clone();
    let (from, to) = match rng.gen_range(0..3) {
        0 => (node, "*".to_string()),
        1 => ("*".to_string(), node),
        _ => ("*".to_string(), "*".to_string()),
    };
    let kind = *KINDS.choose(rng).expect("non-empty");
    let messages = if kind == "*" { Vec::new() } else { vec![kind.to_string()] };
    LinkPolicy { from, to, action, messages, probability: [0.25, 0.5, 1.0][rng.gen_range(0..3)] }
}

/// A fair-mode scenario drawn from one of the adversarial families: abort at
/// a random step, withheld output, a bad `rand_P`, promise replay, or
/// message tampering, dropping and reordering on node links.
pub fn adversarial_scenario(seed: u64) -> ScenarioConfig {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed_0fad);
    let mut cfg = ScenarioConfig::sample(0, 1);
    cfg.routing = if rng.gen_bool(0.3) { Routing::ViaBroker } else { Routing::Direct };
    cfg.response_timeout = rng.gen_range(10..=60);

    let clients = rng.gen_range(1..=2);
    let nodes = rng.gen_range(1..=3);
    let node_ids: Vec<String> = (1..=nodes).map(|i| format!("n{i}")).collect();
    cfg.clients.clear();
    cfg.nodes.clear();
    let mut total = 0;
    for c in 0..clients {
        let id = format!("client{c}");
        for _ in 0..rng.gen_range(1..=3) {
            let words = rng.gen_range(1..=8);
            let value = rng.gen_range(10..=400);
            total += value;
            cfg.tasks.push(TaskConfig {
                client: id.clone(),
                program: "sum".into(),
                input: (0..words).map(|_| rng.gen_range(-50..=50)).collect(),
                value,
                alpha: [0.0, 0.25, 0.5, 0.6, 0.9, 1.0][rng.gen_range(0..6)],
                n: rng.gen_range(1..=8),
                steps: sum_steps(words),
                resources: ResourceSpec::new(rng.gen_range(1..=2), rng.gen_range(1..=2)),
                submit_at: rng.gen_range(0..20),
            });
        }
        cfg.clients.push(ClientConfig { id, funds: 0, capacity: 0, behavior: ClientBehavior::Honest });
    }
    for c in &mut cfg.clients {
        c.capacity = total;
        c.funds = total + 10;
    }
    for id in &node_ids {
        cfg.nodes.push(NodeConfig {
            id: id.clone(),
            funds: 0,
            capacity: total,
            resources: ResourceSpec::new(2, 2),
            behavior: NodeBehavior::Honest,
            tamper_kh: None,
            tamper_program: None,
        });
    }
    cfg.broker.funds = (total + cfg.fee) * nodes as u64 + 10;

    let victim = rng.gen_range(0..nodes);
    let max_steps = cfg.tasks.iter().map(|t| t.steps).max().unwrap_or(1);
    let family = rng.gen_range(0..8);
    match family {
        0 => cfg.nodes[victim].behavior = NodeBehavior::AbortAtStep { step: rng.gen_range(0..=max_steps) },
        1 => cfg.nodes[victim].behavior = NodeBehavior::WithholdOutput,
        2 => {
            let c = rng.gen_range(0..clients);
            cfg.clients[c].behavior = ClientBehavior::BadRand;
        }
        3 => cfg.nodes[victim].behavior = NodeBehavior::ReplayPromise,
        4 => cfg.adversary.push(random_link(&mut rng, &node_ids, LinkAction::Tamper)),
        5 => cfg.adversary.push(random_link(&mut rng, &node_ids, LinkAction::Drop)),
        6 => {
            let window = rng.gen_range(1..=120);
            cfg.adversary.push(random_link(&mut rng, &node_ids, LinkAction::Reorder { window }));
        }
        _ => {
            for n in &mut cfg.nodes {
                n.behavior = [
                    NodeBehavior::Honest,
                    NodeBehavior::AbortAtStep { step: rng.gen_range(0..=max_steps) },
                    NodeBehavior::WithholdOutput,
                    NodeBehavior::HoldSecret,
                    NodeBehavior::CloseOnChain,
                    NodeBehavior::ClaimComputeOnly,
                    NodeBehavior::ReplayPromise,
                ][rng.gen_range(0..7)];
            }
            let action = [LinkAction::Drop, LinkAction::Tamper, LinkAction::Delay { ticks: 80 }][rng.gen_range(0..3)];
            cfg.adversary.push(random_link(&mut rng, &node_ids, action));
            if rng.gen_bool(0.3) {
                cfg.clients[0].behavior = ClientBehavior::Silent;
            }
        }
    }
    cfg.seed = seed;
    cfg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepPoint {
    pub abort_at: u64,
    pub counter: Option<u64>,
    /// Node-claimable value above its channel base.
    pub claimable: u64,
    /// `compute_promise_value` at the unlocked index, above base.
    pub expected: u64,
    pub conserved: bool,
}

/// Interrupt one task of `total_steps` declared steps at each of `points`
/// and report what the node can claim.
pub fn abort_sweep(
    n: usize,
    total_steps: u64,
    value: u64,
    alpha: f64,
    points: impl IntoIterator<Item = u64>,
) -> Result<Vec<SweepPoint>, ProtocolError> {
    let work = Alpha::from_f64(alpha).ok_or_else(|| ProtocolError::Config(format!("alpha {alpha} outside [0, 1]")))?;
    let mut cfg = ScenarioConfig::sample(1, n);
    let t = &mut cfg.tasks[0];
    t.input = vec![1; words_for_steps(total_steps).max(1)];
    t.steps = total_steps;
    t.value = value;
    t.alpha = alpha;
    let mut out = Vec::new();
    for abort_at in points {
        cfg.nodes[0].behavior = NodeBehavior::AbortAtStep { step: abort_at };
        let r = run_scenario(&cfg, abort_at)?;
        let o = r.outcomes()[0].clone();
        let index = o.counter.map_or(0, |c| unlocked_index(c, n, total_steps)) as u64;
        out.push(SweepPoint {
            abort_at,
            counter: o.counter,
            claimable: o.node_compute_claimable,
            expected: compute_promise_value(0, index, work.apply(value), n as u64),
            conserved: r.verdict.passed(super::verdict::CONSERVATION),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_model_matches_the_interpreter() {
        let code = crate::enclave::vm::assemble(crate::enclave::vm::SUM_PROGRAM).unwrap();
        for words in 0..6 {
            let run = crate::enclave::vm::run_metered(&code, &vec![3; words], 10_000, None);
            assert_eq!(run.steps, sum_steps(words));
        }
        assert!(sum_steps(words_for_steps(1000)) >= 1000);
    }

    #[test]
    fn generator_is_deterministic_and_valid() {
        for seed in 0..50 {
            let a = adversarial_scenario(seed);
            a.validate().unwrap();
            assert_eq!(a, adversarial_scenario(seed));
        }
    }

    #[test]
    fn short_sweep_is_proportional() {
        for p in abort_sweep(4, 100, 100, 0.6, [0, 24, 25, 50, 99, 100]).unwrap() {
            assert_eq!(p.claimable, p.expected, "{p:?}");
        }
    }
}
