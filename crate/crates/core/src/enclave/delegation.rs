//! Delegated attestation: the attestation manager (AM) holds client task
//! keys and hands them to a key handler (KH) on a compute node, which in turn
//! releases them to a locally attested execution enclave.

use rand::{CryptoRng, RngCore};

use super::platform::{AttestationCertificate, EnclaveId, KeyId, LocalAttestation, Platform};
use super::EnclaveError;
use crate::crypto::{self, Digest, ExchangePublicKey, PublicKey, SecureEnvelope, SymmetricKey};

/// Code images of the two long-lived enclaves. Their hashes are the
/// measurements clients and the AM expect.
pub const AM_CODE: &[u8] = b"attestation-manager:v1\n\
receive: open client envelope; seal bundle\n\
provision: verify service certificate of key handler; check measurement; unseal; send over channel bound to handler key\n";

pub const KH_CODE: &[u8] = b"key-handler:v1\n\
receive: open manager envelope; seal bundle\n\
release: verify local report mac; check expected execution measurement; deliver key\n";

pub fn am_measurement() -> Digest {
    crypto::hash(AM_CODE)
}

pub fn kh_measurement() -> Digest {
    crypto::hash(KH_CODE)
}

/// What a client hands to the AM: the task key and the execution enclave
/// measurement it is willing to release the key to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyBundle {
    pub task: u64,
    pub key: SymmetricKey,
    pub expected_execution: Digest,
}

impl KeyBundle {
    const LEN: usize = 8 + 32 + 32;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::LEN);
        out.extend(self.task.to_be_bytes());
        out.extend(self.key.as_bytes());
        out.extend(self.expected_execution.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != Self::LEN {
            return None;
        }
        Some(Self {
            task: u64::from_be_bytes(bytes[..8].try_into().ok()?),
            key: SymmetricKey::from_bytes(bytes[8..40].try_into().ok()?),
            expected_execution: Digest::from_bytes(bytes[40..].try_into().ok()?),
        })
    }

    /// Encrypt for the AM named in a verified certificate.
    pub fn envelope_for<R: RngCore + CryptoRng + ?Sized>(&self, rng: &mut R, am: &ExchangePublicKey) -> SecureEnvelope {
        crypto::seal_to(rng, am, &self.to_bytes(), &channel_context("client-am", am))
    }
}

fn channel_context(label: &str, recipient: &ExchangePublicKey) -> Vec<u8> {
    format!("{label}:v1;recipient={recipient}").into_bytes()
}

/// Service signature, validity flag and measurement all check out.
pub fn am_verify_cert(cert: &AttestationCertificate, expected: &Digest, service_key: &PublicKey) -> bool {
    cert.accepts(service_key, expected)
}

impl Platform {
    fn receive_bundle(&mut self, id: EnclaveId, envelope: &SecureEnvelope, label: &str) -> Result<KeyId, EnclaveError> {
        let enclave = self.enclave(id)?;
        let context = channel_context(label, &enclave.keys().exchange);
        let plain = enclave.exchange_key().open(envelope, &context).map_err(|_| EnclaveError::ChannelRejected)?;
        KeyBundle::from_bytes(&plain).ok_or(EnclaveError::ChannelRejected)?;
        self.seal(id, &plain)
    }

    fn unseal_bundle(&self, id: EnclaveId, key: KeyId) -> Result<KeyBundle, EnclaveError> {
        KeyBundle::from_bytes(&self.unseal(id, key)?).ok_or(EnclaveError::SealBindingViolation)
    }

    pub fn am_receive_key(&mut self, am: EnclaveId, envelope: &SecureEnvelope) -> Result<KeyId, EnclaveError> {
        self.receive_bundle(am, envelope, "client-am")
    }

    /// Send a sealed task key to the key handler named by `cert`.
    pub fn am_provision_key(
        &mut self,
        am: EnclaveId,
        key: KeyId,
        cert: &AttestationCertificate,
        expected_kh: &Digest,
        service_key: &PublicKey,
    ) -> Result<SecureEnvelope, EnclaveError> {
        if !am_verify_cert(cert, expected_kh, service_key) {
            return Err(EnclaveError::CertificateInvalid);
        }
        let bundle = self.unseal_bundle(am, key)?;
        let recipient = cert.enclave_keys().exchange;
        Ok(self.seal_envelope(&recipient, &bundle.to_bytes(), &channel_context("am-kh", &recipient)))
    }

    pub fn kh_receive_key(&mut self, kh: EnclaveId, envelope: &SecureEnvelope) -> Result<KeyId, EnclaveError> {
        self.receive_bundle(kh, envelope, "am-kh")
    }

    pub fn kh_verify_local_att(&self, kh: EnclaveId, report: &LocalAttestation, expected: &Digest) -> bool {
        report.measurement == *expected && self.verify_local(kh, report)
    }

    /// Release the key to the enclave that produced `report`, provided it
    /// runs the code the client named.
    pub fn kh_send_key_local(
        &mut self,
        kh: EnclaveId,
        key: KeyId,
        report: &LocalAttestation,
    ) -> Result<(), EnclaveError> {
        let bundle = self.unseal_bundle(kh, key)?;
        if !self.kh_verify_local_att(kh, report, &bundle.expected_execution) {
            return Err(EnclaveError::AttestationFailed);
        }
        self.enclave_mut(report.source)?.memory.task_key = Some((bundle.task, bundle.key));
        Ok(())
    }
}
