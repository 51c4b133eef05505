//! Simulated trusted execution: platforms, attestation, sealing, delegated
//! key provisioning and the metered execution wrapper.

pub mod delegation;
pub mod platform;
pub mod progkt;
pub mod vm;

use thiserror::Error;

pub use delegation::{am_measurement, am_verify_cert, kh_measurement, KeyBundle, AM_CODE, KH_CODE};
pub use platform::{
    AttestationCertificate, AttestationService, EnclaveId, EnclaveInstance, EnclaveKeys, KeyId, LocalAttestation,
    Platform, PlatformId, RemoteAttestation, SealedBlob, Validity,
};
pub use progkt::{
    decrypt_output, encrypt_input, encrypt_settling, unlocked_index, verify_delivery, EncryptedOutput,
    ExecutionOutcome, ExecutionRequest, GuestProgram, MeteringReport,
};

/// Nonce purposes. The counter half of each nonce is the task id.
pub const PURPOSE_SEAL: u32 = 1;
pub const PURPOSE_INPUT: u32 = 2;
pub const PURPOSE_SETTLING: u32 = 3;
pub const PURPOSE_OUTPUT: u32 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnclaveError {
    #[error("unknown enclave {0:?}")]
    UnknownEnclave(EnclaveId),
    #[error("unknown sealed key {0:?}")]
    UnknownKey(KeyId),
    #[error("sealed data is bound to another enclave or platform")]
    SealBindingViolation,
    #[error("attestation certificate rejected")]
    CertificateInvalid,
    #[error("local attestation rejected")]
    AttestationFailed,
    #[error("secure channel message rejected")]
    ChannelRejected,
    #[error("runtime check failed: {0}")]
    CheckFailed(String),
    #[error("no task key provisioned")]
    KeyMissing,
    #[error("authentication failure decrypting {0}")]
    Decryption(&'static str),
    #[error("malformed enclave code: {0}")]
    MalformedCode(String),
}
