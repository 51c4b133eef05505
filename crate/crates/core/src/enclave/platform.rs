//! Simulated trusted hardware: enclave lifecycle, attestation and sealing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::EnclaveError;
use crate::crypto::{
    self, hash, hash_parts, Digest, ExchangeKeyPair, ExchangePublicKey, KeyPair, Nonce, PublicKey, SecureEnvelope,
    Signature, SymmetricKey,
};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlatformId(pub String);

impl fmt::Display for PlatformId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PlatformId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnclaveId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeyId(pub u64);

/// Public half of an enclave's key material.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnclaveKeys {
    pub signing: PublicKey,
    pub exchange: ExchangePublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteAttestation {
    pub platform: PlatformId,
    pub measurement: Digest,
    pub enclave_keys: EnclaveKeys,
    pub signature: Signature,
}

impl RemoteAttestation {
    pub fn signed_bytes(platform: &PlatformId, measurement: &Digest, keys: &EnclaveKeys) -> Vec<u8> {
        format!(
            "remote-attestation:v1;platform={};measurement={};signing={};exchange={}",
            platform, measurement, keys.signing, keys.exchange
        )
        .into_bytes()
    }

    pub fn verify(&self, hardware_key: &PublicKey) -> bool {
        let msg = Self::signed_bytes(&self.platform, &self.measurement, &self.enclave_keys);
        crypto::verify(hardware_key, &msg, &self.signature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validity {
    Valid,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationCertificate {
    pub attestation: RemoteAttestation,
    pub validity: Validity,
    pub service_signature: Signature,
}

impl AttestationCertificate {
    pub fn signed_bytes(attestation: &RemoteAttestation, validity: Validity) -> Vec<u8> {
        let mut msg = b"attestation-certificate:v1;".to_vec();
        msg.extend(RemoteAttestation::signed_bytes(
            &attestation.platform,
            &attestation.measurement,
            &attestation.enclave_keys,
        ));
        msg.extend(format!(";hw-signature={};valid={}", attestation.signature, validity == Validity::Valid).bytes());
        msg
    }

    pub fn verify_signature(&self, service_key: &PublicKey) -> bool {
        crypto::verify(service_key, &Self::signed_bytes(&self.attestation, self.validity), &self.service_signature)
    }

    /// Signed by the service, marked valid, and for the expected code.
    pub fn accepts(&self, service_key: &PublicKey, expected_measurement: &Digest) -> bool {
        self.verify_signature(service_key)
            && self.validity == Validity::Valid
            && self.attestation.measurement == *expected_measurement
    }

    pub fn enclave_keys(&self) -> &EnclaveKeys {
        &self.attestation.enclave_keys
    }
}

/// Mock attestation service with a platform registry and revocation list.
pub struct AttestationService {
    key: KeyPair,
    platforms: BTreeMap<PlatformId, PublicKey>,
    revoked: BTreeSet<PlatformId>,
    verifications: u64,
}

impl AttestationService {
    pub fn new(key: KeyPair) -> Self {
        Self { key, platforms: BTreeMap::new(), revoked: BTreeSet::new(), verifications: 0 }
    }

    pub fn public_key(&self) -> PublicKey {
        self.key.public()
    }

    pub fn register(&mut self, platform: &Platform) {
        self.platforms.insert(platform.id().clone(), platform.hardware_key());
    }

    pub fn revoke(&mut self, platform: &PlatformId) {
        self.revoked.insert(platform.clone());
    }

    /// Number of verification requests served so far.
    pub fn verifications(&self) -> u64 {
        self.verifications
    }

    pub fn verify(&mut self, attestation: &RemoteAttestation) -> AttestationCertificate {
        self.verifications += 1;
        let genuine = self.platforms.get(&attestation.platform).is_some_and(|pk| attestation.verify(pk));
        let validity =
            if genuine && !self.revoked.contains(&attestation.platform) { Validity::Valid } else { Validity::Invalid };
        let service_signature = self.key.sign(&AttestationCertificate::signed_bytes(attestation, validity));
        AttestationCertificate { attestation: attestation.clone(), validity, service_signature }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalAttestation {
    pub measurement: Digest,
    pub source: EnclaveId,
    pub target: EnclaveId,
    pub mac: Digest,
}

impl LocalAttestation {
    fn mac_input(measurement: &Digest, source: EnclaveId, target: EnclaveId) -> Vec<u8> {
        format!("local-attestation:v1;measurement={measurement};source={};target={}", source.0, target.0).into_bytes()
    }
}

/// Sealed bytes as the host sees them on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedBlob {
    pub platform: PlatformId,
    pub measurement: Digest,
    pub nonce: Nonce,
    #[serde(with = "crate::crypto::hex_bytes")]
    pub ciphertext: Vec<u8>,
}

/// Private state held inside an enclave.
#[derive(Default)]
pub(crate) struct EnclaveMemory {
    /// Task id and key delivered over a local channel (ProgKT enclaves).
    pub task_key: Option<(u64, SymmetricKey)>,
}

pub struct EnclaveInstance {
    id: EnclaveId,
    measurement: Digest,
    code: Vec<u8>,
    signing: KeyPair,
    exchange: ExchangeKeyPair,
    sealed: BTreeMap<KeyId, SealedBlob>,
    pub(crate) memory: EnclaveMemory,
}

impl EnclaveInstance {
    pub fn id(&self) -> EnclaveId {
        self.id
    }

    pub fn measurement(&self) -> Digest {
        self.measurement
    }

    pub fn code(&self) -> &[u8] {
        &self.code
    }

    pub fn keys(&self) -> EnclaveKeys {
        EnclaveKeys { signing: self.signing.public(), exchange: self.exchange.public() }
    }

    pub(crate) fn exchange_key(&self) -> &ExchangeKeyPair {
        &self.exchange
    }
}

pub struct Platform {
    id: PlatformId,
    hardware: KeyPair,
    local_mac_key: [u8; 32],
    seal_root: [u8; 32],
    enclaves: BTreeMap<EnclaveId, EnclaveInstance>,
    rng: ChaCha20Rng,
    next_enclave: u64,
    next_key: u64,
    seal_counter: u64,
}

impl Platform {
    pub fn new<R: RngCore + ?Sized>(id: impl Into<PlatformId>, rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let mut own = ChaCha20Rng::from_seed(seed);
        let hardware = KeyPair::generate(&mut own);
        let mut local_mac_key = [0u8; 32];
        let mut seal_root = [0u8; 32];
        own.fill_bytes(&mut local_mac_key);
        own.fill_bytes(&mut seal_root);
        Self {
            id: id.into(),
            hardware,
            local_mac_key,
            seal_root,
            enclaves: BTreeMap::new(),
            rng: own,
            next_enclave: 0,
            next_key: 0,
            seal_counter: 0,
        }
    }

    pub fn id(&self) -> &PlatformId {
        &self.id
    }

    pub fn hardware_key(&self) -> PublicKey {
        self.hardware.public()
    }

    pub fn instantiate_enclave(&mut self, code: &[u8]) -> (EnclaveId, Digest) {
        let id = EnclaveId(self.next_enclave);
        self.next_enclave += 1;
        let measurement = hash(code);
        let instance = EnclaveInstance {
            id,
            measurement,
            code: code.to_vec(),
            signing: KeyPair::generate(&mut self.rng),
            exchange: ExchangeKeyPair::generate(&mut self.rng),
            sealed: BTreeMap::new(),
            memory: EnclaveMemory::default(),
        };
        self.enclaves.insert(id, instance);
        (id, measurement)
    }

    pub fn enclave(&self, id: EnclaveId) -> Result<&EnclaveInstance, EnclaveError> {
        self.enclaves.get(&id).ok_or(EnclaveError::UnknownEnclave(id))
    }

    pub(crate) fn enclave_mut(&mut self, id: EnclaveId) -> Result<&mut EnclaveInstance, EnclaveError> {
        self.enclaves.get_mut(&id).ok_or(EnclaveError::UnknownEnclave(id))
    }

    pub fn destroy_enclave(&mut self, id: EnclaveId) -> bool {
        self.enclaves.remove(&id).is_some()
    }

    pub fn remote_attest(&self, id: EnclaveId) -> Result<RemoteAttestation, EnclaveError> {
        let enclave = self.enclave(id)?;
        let keys = enclave.keys();
        let msg = RemoteAttestation::signed_bytes(&self.id, &enclave.measurement, &keys);
        Ok(RemoteAttestation {
            platform: self.id.clone(),
            measurement: enclave.measurement,
            enclave_keys: keys,
            signature: self.hardware.sign(&msg),
        })
    }

    /// Report from `source` addressed to `target` on this platform.
    pub fn local_attest(&self, source: EnclaveId, target: EnclaveId) -> Result<LocalAttestation, EnclaveError> {
        let measurement = self.enclave(source)?.measurement;
        let mac = crypto::mac(&self.local_mac_key, &LocalAttestation::mac_input(&measurement, source, target));
        Ok(LocalAttestation { measurement, source, target, mac })
    }

    /// Checked by `verifier`: MAC valid here, addressed to `verifier`, and
    /// produced by a live enclave whose measurement matches the report.
    pub fn verify_local(&self, verifier: EnclaveId, report: &LocalAttestation) -> bool {
        if report.target != verifier || !self.enclaves.contains_key(&verifier) {
            return false;
        }
        let input = LocalAttestation::mac_input(&report.measurement, report.source, report.target);
        crypto::verify_mac(&self.local_mac_key, &input, &report.mac)
            && self.enclaves.get(&report.source).is_some_and(|e| e.measurement == report.measurement)
    }

    fn seal_key(&self, measurement: &Digest) -> SymmetricKey {
        SymmetricKey::from_bytes(*hash_parts(&[b"seal", &self.seal_root, measurement.as_bytes()]).as_bytes())
    }

    fn blob_aad(platform: &PlatformId, measurement: &Digest) -> Vec<u8> {
        format!("sealed:v1;platform={platform};measurement={measurement}").into_bytes()
    }

    pub fn seal(&mut self, id: EnclaveId, secret: &[u8]) -> Result<KeyId, EnclaveError> {
        let measurement = self.enclave(id)?.measurement;
        self.seal_counter += 1;
        let nonce = Nonce::derive(self.seal_counter, super::PURPOSE_SEAL);
        let ciphertext = crypto::encrypt_with_aad(
            &self.seal_key(&measurement),
            &nonce,
            secret,
            &Self::blob_aad(&self.id, &measurement),
        );
        let blob = SealedBlob { platform: self.id.clone(), measurement, nonce, ciphertext };
        self.store_sealed(id, blob)
    }

    pub fn unseal(&self, id: EnclaveId, key: KeyId) -> Result<Vec<u8>, EnclaveError> {
        let enclave = self.enclave(id)?;
        let blob = enclave.sealed.get(&key).ok_or(EnclaveError::UnknownKey(key))?;
        // The blob header is host-controlled, so binding comes from the key
        // derivation and associated data, never from the header itself.
        let aad = Self::blob_aad(&self.id, &enclave.measurement);
        crypto::decrypt_with_aad(&self.seal_key(&enclave.measurement), &blob.nonce, &blob.ciphertext, &aad)
            .map_err(|_| EnclaveError::SealBindingViolation)
    }

    /// Copy of the sealed bytes, as the host can read them from disk.
    pub fn export_sealed(&self, id: EnclaveId, key: KeyId) -> Result<SealedBlob, EnclaveError> {
        self.enclave(id)?.sealed.get(&key).cloned().ok_or(EnclaveError::UnknownKey(key))
    }

    /// Place host-supplied sealed bytes in an enclave's store.
    pub fn store_sealed(&mut self, id: EnclaveId, blob: SealedBlob) -> Result<KeyId, EnclaveError> {
        let key = KeyId(self.next_key);
        self.next_key += 1;
        self.enclave_mut(id)?.sealed.insert(key, blob);
        Ok(key)
    }

    pub(crate) fn seal_envelope(
        &mut self,
        recipient: &ExchangePublicKey,
        plaintext: &[u8],
        context: &[u8],
    ) -> SecureEnvelope {
        crypto::seal_to(&mut self.rng, recipient, plaintext, context)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn platform(name: &str, seed: u64) -> Platform {
        Platform::new(name, &mut ChaCha20Rng::seed_from_u64(seed))
    }

    fn service(p: &[&Platform]) -> AttestationService {
        let mut ias = AttestationService::new(KeyPair::from_seed([9; 32]));
        for p in p {
            ias.register(p);
        }
        ias
    }

    #[test]
    fn measurements_follow_code() {
        let mut p = platform("p", 1);
        let (a, ma) = p.instantiate_enclave(b"code");
        let (b, mb) = p.instantiate_enclave(b"code");
        assert_eq!(ma, mb);
        assert_eq!(ma, hash(b"code"));
        assert_ne!(p.enclave(a).unwrap().keys(), p.enclave(b).unwrap().keys());
        let (_, mc) = p.instantiate_enclave(b"codf");
        assert_ne!(ma, mc);
    }

    #[test]
    fn remote_attestation_verifies_under_hardware_key() {
        let mut p = platform("p", 1);
        let (a, _) = p.instantiate_enclave(b"am");
        let (b, _) = p.instantiate_enclave(b"am");
        let att = p.remote_attest(a).unwrap();
        assert!(att.verify(&p.hardware_key()));
        let mut replay = att.clone();
        replay.enclave_keys = p.enclave(b).unwrap().keys();
        assert!(!replay.verify(&p.hardware_key()));
        assert!(matches!(p.remote_attest(EnclaveId(99)), Err(EnclaveError::UnknownEnclave(_))));
    }

    #[test]
    fn tampered_code_changes_attested_measurement() {
        let mut p = platform("p", 1);
        let mut code = b"attestation manager".to_vec();
        code[3] ^= 1;
        let (a, _) = p.instantiate_enclave(&code);
        assert_ne!(p.remote_attest(a).unwrap().measurement, hash(b"attestation manager"));
    }

    #[test]
    fn service_validity() {
        let mut p = platform("p", 1);
        let (a, m) = p.instantiate_enclave(b"kh");
        let mut ias = service(&[&p]);
        let att = p.remote_attest(a).unwrap();
        let cert = ias.verify(&att);
        assert_eq!(cert.validity, Validity::Valid);
        assert!(cert.accepts(&ias.public_key(), &m));
        assert!(!cert.accepts(&ias.public_key(), &hash(b"other")));

        let mut forged = att.clone();
        forged.signature = Signature::from_bytes([7; 64]);
        assert_eq!(ias.verify(&forged).validity, Validity::Invalid);

        ias.revoke(p.id());
        let revoked = ias.verify(&att);
        assert_eq!(revoked.validity, Validity::Invalid);
        assert!(revoked.verify_signature(&ias.public_key()));
        assert!(!revoked.accepts(&ias.public_key(), &m));
        assert_eq!(ias.verifications(), 3);

        let mut flipped = cert.clone();
        flipped.validity = Validity::Invalid;
        assert!(!flipped.verify_signature(&ias.public_key()));
    }

    #[test]
    fn unknown_platform_is_invalid() {
        let mut p = platform("p", 1);
        let (a, _) = p.instantiate_enclave(b"kh");
        let mut ias = service(&[]);
        assert_eq!(ias.verify(&p.remote_attest(a).unwrap()).validity, Validity::Invalid);
    }

    #[test]
    fn sealing_is_bound_to_enclave_and_platform() {
        let mut p = platform("p", 1);
        let (a, _) = p.instantiate_enclave(b"am");
        let key = p.seal(a, b"secret").unwrap();
        assert_eq!(p.unseal(a, key).unwrap(), b"secret");

        // Same platform, different measurement.
        let (other, _) = p.instantiate_enclave(b"not am");
        let blob = p.export_sealed(a, key).unwrap();
        let moved = p.store_sealed(other, blob.clone()).unwrap();
        assert_eq!(p.unseal(other, moved), Err(EnclaveError::SealBindingViolation));

        // Same measurement, another instance on the same platform: allowed.
        let (twin, _) = p.instantiate_enclave(b"am");
        let k = p.store_sealed(twin, blob.clone()).unwrap();
        assert_eq!(p.unseal(twin, k).unwrap(), b"secret");

        // Same measurement, different platform.
        let mut q = platform("q", 2);
        let (qa, _) = q.instantiate_enclave(b"am");
        let k = q.store_sealed(qa, blob.clone()).unwrap();
        assert_eq!(q.unseal(qa, k), Err(EnclaveError::SealBindingViolation));

        // Relabelling the header does not help either.
        let mut relabelled = blob;
        relabelled.platform = q.id().clone();
        let k = q.store_sealed(qa, relabelled).unwrap();
        assert_eq!(q.unseal(qa, k), Err(EnclaveError::SealBindingViolation));
    }

    #[test]
    fn local_attestation_is_platform_bound() {
        let mut p = platform("p", 1);
        let (kh, _) = p.instantiate_enclave(b"kh");
        let (prog, m) = p.instantiate_enclave(b"prog");
        let report = p.local_attest(prog, kh).unwrap();
        assert_eq!(report.measurement, m);
        assert!(p.verify_local(kh, &report));
        assert!(!p.verify_local(prog, &report));

        let mut lying = report.clone();
        lying.measurement = hash(b"honest prog");
        assert!(!p.verify_local(kh, &lying));

        // A report minted on another platform for the same ids.
        let mut q = platform("q", 2);
        q.instantiate_enclave(b"kh");
        q.instantiate_enclave(b"prog");
        let foreign = q.local_attest(prog, kh).unwrap();
        assert!(!p.verify_local(kh, &foreign));
    }
}
