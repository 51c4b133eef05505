//! Deterministic cryptographic primitives shared by every other module.
//!
//! Hashing is SHA-256, authenticated encryption is ChaCha20-Poly1305 with
//! 12-byte nonces, signatures are Ed25519 and the enclave secure channels use
//! an X25519 key agreement. All fixed-size values serialize as lowercase hex.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::ChaCha20Poly1305;
use ed25519_dalek::{Signer, Verifier};
use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    /// Wrong key, wrong nonce, or a modified ciphertext.
    #[error("authenticated decryption failed")]
    AuthenticationFailure,
    #[error("malformed public key")]
    MalformedKey,
}

fn serialize_hex<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&hex::encode(bytes))
}

fn deserialize_hex_array<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
    let text = String::deserialize(d)?;
    let raw = hex::decode(&text).map_err(serde::de::Error::custom)?;
    raw.try_into().map_err(|v: Vec<u8>| serde::de::Error::custom(format!("expected {N} bytes, got {}", v.len())))
}

/// Serde adapter for variable-length byte strings carried as hex.
pub mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        super::serialize_hex(bytes, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        hex::decode(text).map_err(serde::de::Error::custom)
    }
}

macro_rules! fixed_bytes {
    ($(#[$meta:meta])* $name:ident, $len:expr) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub const LEN: usize = $len;

            pub fn from_bytes(bytes: [u8; $len]) -> Self {
                Self(bytes)
            }

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(text: &str) -> Option<Self> {
                let raw = hex::decode(text).ok()?;
                Some(Self(raw.try_into().ok()?))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), &self.to_hex()[..16])
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                serialize_hex(&self.0, s)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                deserialize_hex_array::<D, $len>(d).map(Self)
            }
        }
    };
}

fixed_bytes!(
    /// A SHA-256 digest. Used for every hash-lock and every code measurement.
    Digest,
    32
);
fixed_bytes!(
    /// 256-bit symmetric key (client task keys, derived output keys).
    SymmetricKey,
    32
);
fixed_bytes!(
    /// 32-byte secret whose hash forms a lock.
    Preimage,
    32
);
fixed_bytes!(Nonce, 12);
fixed_bytes!(PublicKey, 32);
fixed_bytes!(ExchangePublicKey, 32);
fixed_bytes!(Signature, 64);

impl Preimage {
    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        Self(bytes)
    }

    /// The hash-lock this preimage opens.
    pub fn lock(&self) -> Digest {
        hash(&self.0)
    }

    pub fn opens(&self, lock: &Digest) -> bool {
        self.lock() == *lock
    }
}

impl SymmetricKey {
    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        Self(bytes)
    }
}

impl Nonce {
    /// Deterministic nonce from a per-task counter and a purpose tag.
    /// Distinct (counter, purpose) pairs never collide.
    pub fn derive(counter: u64, purpose: u32) -> Self {
        let mut bytes = [0u8; 12];
        bytes[..8].copy_from_slice(&counter.to_be_bytes());
        bytes[8..].copy_from_slice(&purpose.to_be_bytes());
        Self(bytes)
    }
}

pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// Hash of several fields, each length-prefixed so that field boundaries
/// cannot be shifted.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_be_bytes());
        hasher.update(part);
    }
    Digest(hasher.finalize().into())
}

pub fn encrypt(key: &SymmetricKey, nonce: &Nonce, plaintext: &[u8]) -> Vec<u8> {
    encrypt_with_aad(key, nonce, plaintext, &[])
}

pub fn decrypt(key: &SymmetricKey, nonce: &Nonce, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    decrypt_with_aad(key, nonce, ciphertext, &[])
}

pub fn encrypt_with_aad(key: &SymmetricKey, nonce: &Nonce, plaintext: &[u8], aad: &[u8]) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new((&key.0).into());
    cipher
        .encrypt((&nonce.0).into(), Payload { msg: plaintext, aad })
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers")
}

pub fn decrypt_with_aad(
    key: &SymmetricKey,
    nonce: &Nonce,
    ciphertext: &[u8],
    aad: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let cipher = ChaCha20Poly1305::new((&key.0).into());
    cipher.decrypt((&nonce.0).into(), Payload { msg: ciphertext, aad }).map_err(|_| CryptoError::AuthenticationFailure)
}

/// Output key for a task: byte-wise XOR of the client key and the node's
/// committed secret.
pub fn derive_output_key(client_key: &SymmetricKey, node_secret: &Preimage) -> SymmetricKey {
    let mut out = [0u8; 32];
    for (o, (a, b)) in out.iter_mut().zip(client_key.0.iter().zip(node_secret.0.iter())) {
        *o = a ^ b;
    }
    SymmetricKey(out)
}

type HmacSha256 = Hmac<Sha256>;

pub fn mac(key: &[u8; 32], data: &[u8]) -> Digest {
    let mut m = <HmacSha256 as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    m.update(data);
    Digest(m.finalize().into_bytes().into())
}

pub fn verify_mac(key: &[u8; 32], data: &[u8], tag: &Digest) -> bool {
    let mut m = <HmacSha256 as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    m.update(data);
    m.verify_slice(&tag.0).is_ok()
}

/// Ed25519 signing key pair.
#[derive(Clone)]
pub struct KeyPair {
    signing: ed25519_dalek::SigningKey,
}

impl KeyPair {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self { signing: ed25519_dalek::SigningKey::from_bytes(&seed) }
    }

    pub fn generate<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(seed)
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key().to_bytes())
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature(self.signing.sign(message).to_bytes())
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("public", &self.public()).finish_non_exhaustive()
    }
}

pub fn verify(public: &PublicKey, message: &[u8], signature: &Signature) -> bool {
    let Ok(key) = ed25519_dalek::VerifyingKey::from_bytes(&public.0) else {
        return false;
    };
    key.verify(message, &ed25519_dalek::Signature::from_bytes(&signature.0)).is_ok()
}

/// X25519 key used by enclaves to receive secrets over a secure channel.
#[derive(Clone)]
pub struct ExchangeKeyPair {
    secret: x25519_dalek::StaticSecret,
}

impl ExchangeKeyPair {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self { secret: x25519_dalek::StaticSecret::from(seed) }
    }

    pub fn generate<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(seed)
    }

    pub fn public(&self) -> ExchangePublicKey {
        ExchangePublicKey(x25519_dalek::PublicKey::from(&self.secret).to_bytes())
    }

    /// Decrypt an envelope addressed to this key.
    pub fn open(&self, envelope: &SecureEnvelope, context: &[u8]) -> Result<Vec<u8>, CryptoError> {
        let shared = self.secret.diffie_hellman(&x25519_dalek::PublicKey::from(envelope.ephemeral.0));
        let key = channel_key(shared.as_bytes(), &envelope.ephemeral, &self.public());
        decrypt_with_aad(&key, &envelope.nonce, &envelope.ciphertext, context)
    }
}

impl fmt::Debug for ExchangeKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExchangeKeyPair").field("public", &self.public()).finish_non_exhaustive()
    }
}

/// Ciphertext addressed to one exchange public key. Any other key fails to
/// open it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecureEnvelope {
    pub ephemeral: ExchangePublicKey,
    pub nonce: Nonce,
    #[serde(with = "hex_bytes")]
    pub ciphertext: Vec<u8>,
}

fn channel_key(shared: &[u8; 32], ephemeral: &ExchangePublicKey, recipient: &ExchangePublicKey) -> SymmetricKey {
    SymmetricKey(hash_parts(&[b"secure-channel", shared, &ephemeral.0, &recipient.0]).0)
}

/// Encrypt `plaintext` so that only the holder of `recipient`'s secret can
/// read it. `context` is bound as associated data.
pub fn seal_to<R: RngCore + CryptoRng + ?Sized>(
    rng: &mut R,
    recipient: &ExchangePublicKey,
    plaintext: &[u8],
    context: &[u8],
) -> SecureEnvelope {
    let ephemeral = ExchangeKeyPair::generate(rng);
    let shared = ephemeral.secret.diffie_hellman(&x25519_dalek::PublicKey::from(recipient.0));
    let ephemeral_pub = ephemeral.public();
    let key = channel_key(shared.as_bytes(), &ephemeral_pub, recipient);
    let mut nonce = [0u8; 12];
    rng.fill_bytes(&mut nonce);
    let nonce = Nonce(nonce);
    SecureEnvelope { ephemeral: ephemeral_pub, nonce, ciphertext: encrypt_with_aad(&key, &nonce, plaintext, context) }
}
