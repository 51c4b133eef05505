//! Wire messages. Every message crosses the simulated network as bytes so
//! that adversarial links can tamper with it.

use serde::{Deserialize, Serialize};

use crate::channel::{Alpha, PaymentPromise};
use crate::crypto::{Digest, Preimage, SecureEnvelope, Signature};
use crate::enclave::{AttestationCertificate, EncryptedOutput, RemoteAttestation};
use crate::ledger::EscrowId;
use crate::matching::ResourceSpec;

pub type TaskId = u64;

/// Payment material travelling with a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxData {
    #[serde(with = "crate::crypto::hex_bytes")]
    pub encrypted_settling: Vec<u8>,
    pub locks: Vec<Digest>,
    /// `h_P`
    pub client_lock: Digest,
    /// `h_B`
    pub broker_lock: Digest,
    /// `h_C`, added by the broker at dispatch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_lock: Option<Digest>,
    pub client_channel: EscrowId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_channel: Option<EscrowId>,
    pub client_promises: Vec<PaymentPromise>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub broker_promises: Vec<PaymentPromise>,
    pub declared_steps: u64,
    pub value: u64,
    pub alpha: Alpha,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPackage {
    pub task: TaskId,
    /// Execution enclave image (wrapper, budget and guest).
    #[serde(with = "crate::crypto::hex_bytes")]
    pub program: Vec<u8>,
    #[serde(with = "crate::crypto::hex_bytes")]
    pub encrypted_input: Vec<u8>,
    pub aux: AuxData,
}

/// Baseline job: one escrow locked by `hash(data)` and a payer-signed claim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineJob {
    pub escrow: EscrowId,
    pub value: u64,
    pub lock: Digest,
    pub claim_signature: Signature,
    #[serde(with = "crate::crypto::hex_bytes")]
    pub program: Vec<u8>,
    #[serde(with = "crate::crypto::hex_bytes")]
    pub encrypted_input: Vec<u8>,
    /// `(k_P, data)` sealed to the attested enclave.
    pub secrets: SecureEnvelope,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Message {
    LockRequest {
        task: TaskId,
    },
    LockReply {
        task: TaskId,
        broker_lock: Digest,
        am_certificate: AttestationCertificate,
    },
    Submit {
        task: TaskId,
        resources: ResourceSpec,
        package: TaskPackage,
        key_envelope: SecureEnvelope,
    },
    Rejected {
        task: TaskId,
        reason: String,
    },
    NodeLockRequest {
        task: TaskId,
    },
    /// Carries the key handler's attestation so the manager can certify it.
    NodeLockReply {
        task: TaskId,
        node_lock: Digest,
        key_handler: RemoteAttestation,
    },
    Dispatch {
        task: TaskId,
        client: String,
        package: TaskPackage,
        key_envelope: SecureEnvelope,
    },
    /// Broker notice to the client: the node lock the delivery must carry.
    Dispatched {
        task: TaskId,
        node_lock: Digest,
    },
    DispatchFailed {
        task: TaskId,
        reason: String,
    },
    /// Settling data released by the enclave, passed back to the broker.
    Progress {
        task: TaskId,
        index: usize,
        preimage: Option<Preimage>,
        completed: bool,
    },
    Delivery {
        task: TaskId,
        output: EncryptedOutput,
    },
    DeliveryResponse {
        task: TaskId,
        client_secret: Preimage,
    },
    Settle {
        task: TaskId,
        client_secret: Preimage,
        node_secret: Preimage,
    },
    /// Broker notice to the client: the round is settled with these preimages.
    Settled {
        task: TaskId,
        revealed: Vec<Preimage>,
        node_secret: Option<Preimage>,
    },

    BaselineRequest {
        task: TaskId,
    },
    BaselineMatch {
        task: TaskId,
        node: String,
    },
    AttestRequest {
        task: TaskId,
        #[serde(with = "crate::crypto::hex_bytes")]
        program: Vec<u8>,
    },
    AttestReply {
        task: TaskId,
        attestation: RemoteAttestation,
    },
    BaselineSubmit {
        task: TaskId,
        job: BaselineJob,
    },
    BaselineOutput {
        task: TaskId,
        #[serde(with = "crate::crypto::hex_bytes")]
        ciphertext: Vec<u8>,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::LockRequest { .. } => "lock_request",
            Message::LockReply { .. } => "lock_reply",
            Message::Submit { .. } => "submit",
            Message::Rejected { .. } => "rejected",
            Message::NodeLockRequest { .. } => "node_lock_request",
            Message::NodeLockReply { .. } => "node_lock_reply",
            Message::Dispatch { .. } => "dispatch",
            Message::Dispatched { .. } => "dispatched",
            Message::DispatchFailed { .. } => "dispatch_failed",
            Message::Progress { .. } => "progress",
            Message::Delivery { .. } => "delivery",
            Message::DeliveryResponse { .. } => "delivery_response",
            Message::Settle { .. } => "settle",
            Message::Settled { .. } => "settled",
            Message::BaselineRequest { .. } => "baseline_request",
            Message::BaselineMatch { .. } => "baseline_match",
            Message::AttestRequest { .. } => "attest_request",
            Message::AttestReply { .. } => "attest_reply",
            Message::BaselineSubmit { .. } => "baseline_submit",
            Message::BaselineOutput { .. } => "baseline_output",
        }
    }

    /// Whether the recipient is expected to answer. Clients must only ever
    /// see such a message at delivery time.
    pub fn requires_response(&self) -> bool {
        matches!(
            self,
            Message::LockRequest { .. }
                | Message::NodeLockRequest { .. }
                | Message::Delivery { .. }
                | Message::BaselineRequest { .. }
                | Message::AttestRequest { .. }
        )
    }

    pub fn task(&self) -> TaskId {
        match self {
            Message::LockRequest { task }
            | Message::LockReply { task, .. }
            | Message::Submit { task, .. }
            | Message::Rejected { task, .. }
            | Message::NodeLockRequest { task }
            | Message::NodeLockReply { task, .. }
            | Message::Dispatch { task, .. }
            | Message::Dispatched { task, .. }
            | Message::DispatchFailed { task, .. }
            | Message::Progress { task, .. }
            | Message::Delivery { task, .. }
            | Message::DeliveryResponse { task, .. }
            | Message::Settle { task, .. }
            | Message::Settled { task, .. }
            | Message::BaselineRequest { task }
            | Message::BaselineMatch { task, .. }
            | Message::AttestRequest { task, .. }
            | Message::AttestReply { task, .. }
            | Message::BaselineSubmit { task, .. }
            | Message::BaselineOutput { task, .. } => *task,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("messages serialize")
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        serde_json::from_slice(bytes).ok()
    }
}
