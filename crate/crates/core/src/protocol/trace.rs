//! Line-delimited JSON trace records.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::Mode;
use super::message::TaskId;
use super::network::Fate;
use crate::channel::PaymentPromise;
use crate::crypto::{self, Digest, SymmetricKey};
use crate::enclave::{EnclaveId, MeteringReport, Validity};
use crate::ledger::{EscrowId, LedgerSnapshot, LedgerTx};

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("corrupt trace: {0}")]
    Corrupt(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EnclaveEvent {
    Instantiated {
        enclave: EnclaveId,
        role: String,
        measurement: Digest,
    },
    /// One call to the attestation service.
    ServiceVerification {
        role: String,
        measurement: Digest,
        validity: Validity,
    },
    CertificateRejected {
        role: String,
        task: Option<TaskId>,
    },
    KeyReceived {
        enclave: EnclaveId,
        task: TaskId,
    },
    KeyProvisioned {
        task: TaskId,
        handler: Digest,
    },
    ProvisionRefused {
        task: TaskId,
        reason: String,
    },
    KeyReleased {
        task: TaskId,
        measurement: Digest,
    },
    ReleaseRefused {
        task: TaskId,
        reason: String,
    },
    Executed {
        task: TaskId,
        report: MeteringReport,
        termination: String,
    },
    ExecutionFailed {
        task: TaskId,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromiseRole {
    /// Client to broker.
    Client,
    /// Broker to node.
    Broker,
}

/// Per-task terminal facts, written once the scenario has fully settled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task: TaskId,
    pub client: String,
    pub node: Option<String>,
    pub status: String,
    pub value: u64,
    pub work_value: u64,
    pub n: usize,
    pub declared_steps: u64,
    /// Instruction count reported by the enclave, when it ran.
    pub counter: Option<u64>,
    pub completed: bool,
    pub client_decrypted: bool,
    pub output_correct: Option<bool>,
    /// The node held every preimage of its delivery promise at some point.
    pub node_able_full: bool,
    /// The node was paid the full task value.
    pub node_paid_full: bool,
    /// Best compute-schedule value above the round base the node could claim.
    pub node_compute_claimable: u64,
    /// What the node actually received for this task.
    pub node_earned: u64,
    /// What the client actually paid for this task.
    pub client_paid: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceRecord {
    Header {
        version: u32,
        seed: u64,
        mode: Mode,
        fee: u64,
        broker: String,
        clients: Vec<String>,
        nodes: Vec<String>,
        genesis: BTreeMap<String, u64>,
        config_digest: Digest,
    },
    Message {
        time: u64,
        from: String,
        to: String,
        kind: String,
        fate: Fate,
        #[serde(skip_serializing_if = "Option::is_none")]
        deliver_at: Option<u64>,
        payload: String,
    },
    Ledger {
        time: u64,
        tx: LedgerTx,
        snapshot: LedgerSnapshot,
    },
    Promise {
        time: u64,
        task: TaskId,
        role: PromiseRole,
        promise: PaymentPromise,
    },
    Enclave {
        time: u64,
        platform: String,
        #[serde(flatten)]
        event: EnclaveEvent,
    },
    Accusation {
        time: u64,
        task: TaskId,
        node: String,
        reason: String,
    },
    Outcome(TaskOutcome),
    /// Fingerprints of every task key, for the confinement scan.
    Audit {
        key_fingerprints: Vec<Digest>,
        channels: BTreeMap<String, EscrowId>,
    },
    End {
        records: u64,
    },
}

pub fn key_fingerprint(key: &SymmetricKey) -> Digest {
    crypto::hash_parts(&[b"key-audit:v1", key.as_bytes()])
}

pub fn write_trace<W: Write>(mut w: W, records: &[TraceRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn trace_to_string(records: &[TraceRecord]) -> String {
    let mut buf = Vec::new();
    write_trace(&mut buf, records).expect("writing to memory");
    String::from_utf8(buf).expect("json is utf-8")
}

/// Parse a trace and check its framing: a header first and an end record
/// whose count matches.
pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<TraceRecord>, TraceError> {
    let mut records = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord =
            serde_json::from_str(&line).map_err(|e| TraceError::Corrupt(format!("line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    match records.first() {
        Some(TraceRecord::Header { version, .. }) if *version == TRACE_VERSION => {}
        Some(TraceRecord::Header { version, .. }) => {
            return Err(TraceError::Corrupt(format!("unsupported version {version}")))
        }
        _ => return Err(TraceError::Corrupt("missing header".into())),
    }
    match records.last() {
        Some(TraceRecord::End { records: n }) if *n as usize == records.len() => Ok(records),
        Some(TraceRecord::End { records: n }) => {
            Err(TraceError::Corrupt(format!("end record counts {n} records, found {}", records.len())))
        }
        _ => Err(TraceError::Corrupt("truncated: no end record".into())),
    }
}
