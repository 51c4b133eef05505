//! Deterministic simulated network with per-link adversarial policies.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::config::{LinkAction, LinkPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fate {
    Delivered,
    Dropped,
    Tampered,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub from: String,
    pub to: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scheduled {
    pub fate: Fate,
    pub deliver_at: Option<u64>,
    pub bytes: Vec<u8>,
}

/// Event queue keyed by `(time, sequence)` plus the link policies.
pub struct SimNetwork<E> {
    queue: BTreeMap<(u64, u64), E>,
    seq: u64,
    latency: u64,
    policies: Vec<LinkPolicy>,
    nodes: Vec<String>,
    rng: ChaCha20Rng,
}

impl<E> SimNetwork<E> {
    pub fn new(latency: u64, policies: Vec<LinkPolicy>, nodes: Vec<String>, rng: ChaCha20Rng) -> Self {
        Self { queue: BTreeMap::new(), seq: 0, latency, policies, nodes, rng }
    }

    pub fn schedule(&mut self, at: u64, event: E) -> u64 {
        let seq = self.seq;
        self.seq += 1;
        self.queue.insert((at, seq), event);
        seq
    }

    pub fn pop(&mut self) -> Option<(u64, E)> {
        self.queue.pop_first().map(|((t, _), e)| (t, e))
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn clear(&mut self) {
        self.queue.clear();
    }

    fn matches(&self, p: &LinkPolicy, from: &str, to: &str, kind: &str) -> bool {
        let end = |pat: &str, id: &str| pat == "*" || pat == id;
        let touches_node = self.nodes.iter().any(|n| n == from || n == to);
        touches_node
            && end(&p.from, from)
            && end(&p.to, to)
            && (p.messages.is_empty() || p.messages.iter().any(|m| m == kind))
    }

    /// Apply link policies to a packet sent at `now`. Policies are applied in
    /// config order; the first drop wins.
    pub fn transmit(&mut self, now: u64, packet: &Packet, kind: &str) -> Scheduled {
        let mut bytes = packet.bytes.clone();
        let mut delay = self.latency;
        let mut fate = Fate::Delivered;
        let applicable: Vec<LinkPolicy> =
            self.policies.iter().filter(|p| self.matches(p, &packet.from, &packet.to, kind)).cloned().collect();
        for p in applicable {
            if p.probability < 1.0 && !self.rng.gen_bool(p.probability) {
                continue;
            }
            match p.action {
                LinkAction::Drop => return Scheduled { fate: Fate::Dropped, deliver_at: None, bytes },
                LinkAction::Delay { ticks } => delay += ticks,
                LinkAction::Reorder { window } => delay += self.rng.gen_range(0..=window),
                LinkAction::Tamper => {
                    if !bytes.is_empty() {
                        let i = self.rng.gen_range(0..bytes.len());
                        // Stays ASCII so the trace can show it as text.
                        bytes[i] ^= self.rng.gen_range(1u8..0x80);
                        fate = Fate::Tampered;
                    }
                }
            }
        }
        Scheduled { fate, deliver_at: Some(now + delay), bytes }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn policy(action: LinkAction) -> LinkPolicy {
        LinkPolicy { from: "n1".into(), to: "*".into(), action, messages: vec![], probability: 1.0 }
    }

    fn net(policies: Vec<LinkPolicy>) -> SimNetwork<u32> {
        SimNetwork::new(2, policies, vec!["n1".into()], ChaCha20Rng::seed_from_u64(1))
    }

    fn packet(from: &str) -> Packet {
        Packet { from: from.into(), to: "broker".into(), bytes: b"{\"kind\":\"x\"}".to_vec() }
    }

    #[test]
    fn queue_orders_by_time_then_sequence() {
        let mut n = net(vec![]);
        n.schedule(5, 1);
        n.schedule(3, 2);
        n.schedule(5, 3);
        assert_eq!(n.pop(), Some((3, 2)));
        assert_eq!(n.pop(), Some((5, 1)));
        assert_eq!(n.pop(), Some((5, 3)));
        assert!(n.is_empty());
    }

    #[test]
    fn policies_apply_only_to_node_links() {
        let mut n = net(vec![LinkPolicy { from: "*".into(), ..policy(LinkAction::Drop) }]);
        assert_eq!(n.transmit(0, &packet("alice"), "x").fate, Fate::Delivered);
        assert_eq!(n.transmit(0, &packet("n1"), "x").fate, Fate::Dropped);
    }

    #[test]
    fn delay_tamper_and_filters() {
        let mut n = net(vec![policy(LinkAction::Delay { ticks: 7 })]);
        assert_eq!(n.transmit(10, &packet("n1"), "x").deliver_at, Some(19));

        let mut n = net(vec![policy(LinkAction::Tamper)]);
        let s = n.transmit(0, &packet("n1"), "x");
        assert_eq!(s.fate, Fate::Tampered);
        assert_eq!(s.bytes.iter().zip(packet("n1").bytes.iter()).filter(|(a, b)| a != b).count(), 1);

        let mut n = net(vec![LinkPolicy { messages: vec!["progress".into()], ..policy(LinkAction::Drop) }]);
        assert_eq!(n.transmit(0, &packet("n1"), "delivery").fate, Fate::Delivered);
        assert_eq!(n.transmit(0, &packet("n1"), "progress").fate, Fate::Dropped);
    }

    #[test]
    fn same_seed_same_schedule() {
        let run = || {
            let mut n = net(vec![policy(LinkAction::Reorder { window: 50 })]);
            (0..20).map(|t| n.transmit(t, &packet("n1"), "x").deliver_at).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
