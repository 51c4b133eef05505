//! Fairness predicates and run reports, computed from trace records alone.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::config::Mode;
use super::message::TaskId;
use super::trace::{EnclaveEvent, TaskOutcome, TraceRecord};
use crate::channel::compute_promise_value;
use crate::crypto::{self, Digest};
use crate::enclave::unlocked_index;
use crate::ledger::{EscrowId, TxKind};

/// Kinds that ask the recipient for an answer. Of these, a client may only
/// receive `delivery`.
pub const RESPONSE_KINDS: &[&str] =
    &["lock_request", "node_lock_request", "delivery", "baseline_request", "attest_request"];

pub const CONSERVATION: &str = "ledger_conservation";
pub const MONOTONICITY: &str = "promise_monotonicity";
pub const CONFINEMENT: &str = "key_confinement";
pub const ATOMICITY: &str = "exchange_atomicity";
pub const PROPORTIONALITY: &str = "metered_proportionality";
pub const SOLVENCY: &str = "broker_solvency";
pub const OFFLINE: &str = "client_offline_tolerance";
pub const ECONOMY: &str = "attestation_economy";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predicate {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub predicates: Vec<Predicate>,
}

impl Verdict {
    pub fn all_passed(&self) -> bool {
        self.predicates.iter().all(|p| p.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Predicate> {
        self.predicates.iter().find(|p| p.name == name)
    }

    pub fn passed(&self, name: &str) -> bool {
        self.get(name).is_some_and(|p| p.passed)
    }

    fn push(&mut self, name: &str, failures: Vec<String>, ok_detail: String) {
        let passed = failures.is_empty();
        let detail = if passed {
            ok_detail
        } else {
            let more = failures.len().saturating_sub(3);
            let mut d = failures.into_iter().take(3).collect::<Vec<_>>().join("; ");
            if more > 0 {
                d.push_str(&format!("; and {more} more"));
            }
            d
        };
        self.predicates.push(Predicate { name: name.into(), passed, detail });
    }
}

/// Ledger totals recovered by replaying the transaction records.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub transactions: usize,
    pub genesis_total: u64,
    pub final_total: u64,
    pub fee_sink: u64,
    pub broker_inflow: u64,
    pub broker_outflow: u64,
    pub transactions_per_escrow: BTreeMap<u64, usize>,
}

struct Replay {
    summary: LedgerSummary,
    failures: Vec<String>,
}

fn replay_ledger(records: &[TraceRecord]) -> Replay {
    let mut failures = Vec::new();
    let (mut balances, fee, broker) = match records.first() {
        Some(TraceRecord::Header { genesis, fee, broker, .. }) => (genesis.clone(), *fee, broker.clone()),
        _ => return Replay { summary: LedgerSummary::default(), failures: vec!["no header".into()] },
    };
    let genesis_total: u64 = balances.values().sum();
    let mut open: BTreeMap<EscrowId, (String, String, u64)> = BTreeMap::new();
    let mut fee_sink = 0u64;
    let mut s = LedgerSummary { genesis_total, ..Default::default() };

    for rec in records {
        let TraceRecord::Ledger { tx, snapshot, .. } = rec else { continue };
        s.transactions += 1;
        *s.transactions_per_escrow.entry(tx.kind.escrow().0).or_default() += 1;
        if tx.fee != fee {
            failures.push(format!("tx {}: fee {} differs from {fee}", tx.index, tx.fee));
        }
        match &tx.kind {
            TxKind::OpenEscrow { escrow, payer, payee, deposit, .. } => {
                let bal = balances.entry(payer.0.clone()).or_default();
                match bal.checked_sub(deposit + fee) {
                    Some(b) => *bal = b,
                    None => failures.push(format!("tx {}: payer overdrawn", tx.index)),
                }
                fee_sink += fee;
                open.insert(*escrow, (payer.0.clone(), payee.0.clone(), *deposit));
            }
            TxKind::CloseEscrow { escrow, value, payee_credit, payer_refund, .. } => {
                let Some((payer, payee, deposit)) = open.remove(escrow) else {
                    failures.push(format!("tx {}: close of unknown or settled escrow", tx.index));
                    continue;
                };
                if *payee_credit + fee != *value || *value + *payer_refund != deposit {
                    failures.push(format!(
                        "tx {}: close splits deposit {deposit} into {payee_credit} + {payer_refund} + fee {fee} for value {value}",
                        tx.index
                    ));
                }
                *balances.entry(payee.clone()).or_default() += payee_credit;
                *balances.entry(payer.clone()).or_default() += payer_refund;
                fee_sink += fee;
                if payee == broker {
                    s.broker_inflow += value;
                }
                if payer == broker {
                    s.broker_outflow += value;
                }
            }
            TxKind::Refund { escrow, amount } => {
                let Some((payer, _, deposit)) = open.remove(escrow) else {
                    failures.push(format!("tx {}: refund of unknown or settled escrow", tx.index));
                    continue;
                };
                if amount + fee != deposit {
                    failures.push(format!("tx {}: refund {amount} + fee {fee} != deposit {deposit}", tx.index));
                }
                *balances.entry(payer).or_default() += amount;
                fee_sink += fee;
            }
        }
        let deposits: u64 = open.values().map(|(_, _, d)| d).sum();
        let total = balances.values().sum::<u64>() + deposits + fee_sink;
        let recorded: BTreeMap<String, u64> = snapshot.balances.iter().map(|(k, v)| (k.0.clone(), *v)).collect();
        let recorded_total = snapshot.balances.values().sum::<u64>() + snapshot.open_deposits + snapshot.fee_sink;
        if recorded != balances || snapshot.open_deposits != deposits || snapshot.fee_sink != fee_sink {
            failures.push(format!("tx {}: recorded snapshot disagrees with replay", tx.index));
        }
        if total != genesis_total || snapshot.total != genesis_total || recorded_total != genesis_total {
            failures.push(format!(
                "tx {}: total {total} (recorded {}) differs from genesis {genesis_total}",
                tx.index, snapshot.total
            ));
        }
        s.final_total = total;
    }
    if s.transactions == 0 {
        s.final_total = genesis_total;
    }
    s.fee_sink = fee_sink;
    Replay { summary: s, failures }
}

fn is_hex(b: u8) -> bool {
    b.is_ascii_digit() || (b'a'..=b'f').contains(&b)
}

/// Count 32-byte windows inside hex runs of `text` whose fingerprint is in
/// `fingerprints`.
pub fn scan_for_keys(text: &str, fingerprints: &BTreeSet<Digest>) -> usize {
    if fingerprints.is_empty() {
        return 0;
    }
    let bytes = text.as_bytes();
    let mut hits = 0;
    let mut i = 0;
    while i < bytes.len() {
        if !is_hex(bytes[i]) {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && is_hex(bytes[i]) {
            i += 1;
        }
        let run = &text[start..i];
        if run.len() < 64 {
            continue;
        }
        // Any byte alignment: keys can sit at any offset in a blob.
        for off in 0..2 {
            let decoded = match hex::decode(&run[off..off + (run.len() - off) / 2 * 2]) {
                Ok(d) => d,
                Err(_) => continue,
            };
            for w in decoded.windows(32) {
                let fp = crypto::hash_parts(&[b"key-audit:v1", w]);
                if fingerprints.contains(&fp) {
                    hits += 1;
                }
            }
        }
    }
    hits
}

fn outcomes(records: &[TraceRecord]) -> Vec<&TaskOutcome> {
    records
        .iter()
        .filter_map(|r| match r {
            TraceRecord::Outcome(o) => Some(o),
            _ => None,
        })
        .collect()
}

/// Evaluate every predicate over a complete trace.
pub fn evaluate(records: &[TraceRecord]) -> Verdict {
    let mut v = Verdict::default();
    let (mode, broker, clients, nodes) = match records.first() {
        Some(TraceRecord::Header { mode, broker, clients, nodes, .. }) => {
            (*mode, broker.clone(), clients.clone(), nodes.clone())
        }
        _ => (Mode::Fair, String::new(), vec![], vec![]),
    };

    let replay = replay_ledger(records);
    v.push(
        CONSERVATION,
        replay.failures,
        format!("{} transactions, total {}", replay.summary.transactions, replay.summary.genesis_total),
    );

    // Promise values never decrease within one task's round on one channel.
    // Keyed by (channel, task); entries are (sequence, value, is_delivery).
    type Rounds = BTreeMap<(u64, TaskId), Vec<(u64, u64, bool)>>;
    let mut rounds: Rounds = BTreeMap::new();
    for r in records {
        if let TraceRecord::Promise { task, promise, .. } = r {
            rounds.entry((promise.channel.0, *task)).or_default().push((
                promise.sequence,
                promise.value,
                promise.is_delivery(),
            ));
        }
    }
    let mut fails = Vec::new();
    for ((ch, task), mut ps) in rounds.clone() {
        ps.sort();
        if ps.windows(2).any(|w| w[1].1 < w[0].1) {
            fails.push(format!("channel {ch} task {task}: promise values decrease"));
        }
    }
    v.push(MONOTONICITY, fails, format!("{} rounds", rounds.len()));

    let fingerprints: BTreeSet<Digest> = records
        .iter()
        .filter_map(|r| match r {
            TraceRecord::Audit { key_fingerprints, .. } => Some(key_fingerprints.iter().copied()),
            _ => None,
        })
        .flatten()
        .collect();
    let mut exposures = 0;
    for r in records {
        if matches!(r, TraceRecord::Audit { .. }) {
            continue;
        }
        exposures += scan_for_keys(&serde_json::to_string(r).expect("record serializes"), &fingerprints);
    }
    let fails = if exposures > 0 { vec![format!("{exposures} plaintext task-key occurrences")] } else { vec![] };
    v.push(CONFINEMENT, fails, format!("{} keys scanned", fingerprints.len()));

    let outs = outcomes(records);
    let mut fails = Vec::new();
    for o in &outs {
        if o.client_decrypted && !o.node_able_full {
            fails.push(format!("task {}: client decrypted but node could not claim the full value", o.task));
        }
        // Anything above the work share can only come from the delivery promise.
        if o.node_earned > o.work_value && !o.client_decrypted {
            fails.push(format!("task {}: node claimed the delivery share but client has no output", o.task));
        }
    }
    v.push(ATOMICITY, fails, format!("{} tasks", outs.len()));

    let mut fails = Vec::new();
    for o in &outs {
        let c = o.counter.unwrap_or(0);
        let idx = unlocked_index(c, o.n, o.declared_steps) as u64;
        let entitled = compute_promise_value(0, idx, o.work_value, o.n as u64);
        if o.completed {
            if o.node_compute_claimable < o.work_value {
                fails.push(format!(
                    "task {}: completed but compute claim {} < {}",
                    o.task, o.node_compute_claimable, o.work_value
                ));
            }
        } else if o.node_compute_claimable != entitled {
            fails.push(format!(
                "task {}: interrupted at {c}, node can claim {} instead of {entitled}",
                o.task, o.node_compute_claimable
            ));
        }
    }
    v.push(PROPORTIONALITY, fails, format!("{} tasks", outs.len()));

    let s = &replay.summary;
    let fails = if s.broker_inflow < s.broker_outflow {
        vec![format!("broker receives {} but pays {}", s.broker_inflow, s.broker_outflow)]
    } else {
        vec![]
    };
    v.push(SOLVENCY, fails, format!("inflow {} >= outflow {}", s.broker_inflow, s.broker_outflow));

    let client_set: BTreeSet<&String> = clients.iter().collect();
    let mut fails = Vec::new();
    for r in records {
        if let TraceRecord::Message { to, kind, time, .. } = r {
            if client_set.contains(to) && kind != "delivery" && RESPONSE_KINDS.contains(&kind.as_str()) {
                fails.push(format!("t={time}: client {to} asked to answer `{kind}`"));
            }
        }
    }
    v.push(OFFLINE, fails, "no mid-task requests to clients".into());

    let calls = records
        .iter()
        .filter(|r| matches!(r, TraceRecord::Enclave { event: EnclaveEvent::ServiceVerification { .. }, .. }))
        .count();
    let fails = match mode {
        Mode::Fair if calls > 1 + nodes.len() => {
            vec![format!("{calls} service calls for 1 manager and {} handlers", nodes.len())]
        }
        _ => vec![],
    };
    let _ = broker;
    v.push(ECONOMY, fails, format!("{calls} service calls"));
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: TaskId,
    pub status: String,
    pub counter: Option<u64>,
    pub node_earned: u64,
    pub client_paid: u64,
    pub value: u64,
    pub client_decrypted: bool,
}

/// Summary of a run derived purely from its trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub mode: Mode,
    pub tasks: Vec<TaskRow>,
    pub ledger: LedgerSummary,
    pub service_calls: usize,
    pub verdict: Verdict,
}

impl RunReport {
    pub fn from_trace(records: &[TraceRecord]) -> Self {
        let (seed, mode) = match records.first() {
            Some(TraceRecord::Header { seed, mode, .. }) => (*seed, *mode),
            _ => (0, Mode::Fair),
        };
        let tasks = outcomes(records)
            .into_iter()
            .map(|o| TaskRow {
                task: o.task,
                status: o.status.clone(),
                counter: o.counter,
                node_earned: o.node_earned,
                client_paid: o.client_paid,
                value: o.value,
                client_decrypted: o.client_decrypted,
            })
            .collect();
        let service_calls = records
            .iter()
            .filter(|r| matches!(r, TraceRecord::Enclave { event: EnclaveEvent::ServiceVerification { .. }, .. }))
            .count();
        Self { seed, mode, tasks, ledger: replay_ledger(records).summary, service_calls, verdict: evaluate(records) }
    }

    /// Both known weaknesses of pay-on-completion escrows show up.
    pub fn baseline_flaws(&self) -> (bool, bool) {
        let unpaid_delivery = !self.verdict.passed(ATOMICITY);
        let unpaid_work = !self.verdict.passed(PROPORTIONALITY);
        (unpaid_delivery, unpaid_work)
    }

    pub fn render(&self) -> String {
        let mode = match self.mode {
            Mode::Fair => "fair",
            Mode::Baseline => "baseline",
        };
        let mut out = format!("seed {} mode {mode}\n", self.seed);
        out.push_str("task  status        steps  node_earned  client_paid  value  decrypted\n");
        for t in &self.tasks {
            out.push_str(&format!(
                "{:<5} {:<13} {:>5}  {:>11}  {:>11}  {:>5}  {}\n",
                t.task,
                t.status,
                t.counter.map_or("-".into(), |c| c.to_string()),
                t.node_earned,
                t.client_paid,
                t.value,
                t.client_decrypted
            ));
        }
        out.push_str(&format!(
            "ledger: {} txs, total {} -> {}, fees {}, broker in {} out {}\n",
            self.ledger.transactions,
            self.ledger.genesis_total,
            self.ledger.final_total,
            self.ledger.fee_sink,
            self.ledger.broker_inflow,
            self.ledger.broker_outflow
        ));
        out.push_str(&format!("attestation service calls: {}\n", self.service_calls));
        for p in &self.verdict.predicates {
            out.push_str(&format!("{} {}: {}\n", if p.passed { "PASS" } else { "FAIL" }, p.name, p.detail));
        }
        out
    }
}
