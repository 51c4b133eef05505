//! The execution wrapper: checks the payment material, meters the guest and
//! releases settling data in proportion to the work done.

use serde::{Deserialize, Serialize};

use super::platform::{EnclaveId, Platform};
use super::vm::{self, AssembleError, Code, Termination};
use super::{EnclaveError, PURPOSE_INPUT, PURPOSE_OUTPUT, PURPOSE_SETTLING};
use crate::channel::SettlingData;
use crate::crypto::{self, Digest, Nonce, Preimage, SymmetricKey};

const WRAPPER_HEADER: &str = "metered-wrapper:v1";

/// A guest with the client's declared step budget `N_total`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuestProgram {
    pub code: Code,
    pub declared_steps: u64,
}

impl GuestProgram {
    pub fn new(code: Code, declared_steps: u64) -> Self {
        Self { code, declared_steps }
    }

    pub fn assemble(source: &str, declared_steps: u64) -> Result<Self, AssembleError> {
        Ok(Self::new(vm::assemble(source)?, declared_steps))
    }

    /// Enclave code image: wrapper header, budget, canonical guest text.
    pub fn image(&self) -> Vec<u8> {
        format!("{WRAPPER_HEADER}\nsteps {}\n{}", self.declared_steps, self.code.to_canonical()).into_bytes()
    }

    pub fn from_image(bytes: &[u8]) -> Result<Self, EnclaveError> {
        let malformed = |m: &str| EnclaveError::MalformedCode(m.to_string());
        let text = std::str::from_utf8(bytes).map_err(|_| malformed("not utf-8"))?;
        let rest = text
            .strip_prefix(WRAPPER_HEADER)
            .and_then(|r| r.strip_prefix('\n'))
            .ok_or_else(|| malformed("missing wrapper header"))?;
        let (steps_line, guest) = rest.split_once('\n').ok_or_else(|| malformed("missing budget"))?;
        let declared_steps =
            steps_line.strip_prefix("steps ").and_then(|s| s.parse().ok()).ok_or_else(|| malformed("bad budget"))?;
        let code = vm::assemble(guest).map_err(|e| EnclaveError::MalformedCode(e.to_string()))?;
        Ok(Self { code, declared_steps })
    }

    /// The measurement a client expects for this wrapped guest.
    pub fn measurement(&self) -> Digest {
        crypto::hash(&self.image())
    }
}

/// `min(n, floor(counter * n / total))`.
pub fn unlocked_index(counter: u64, n: usize, total: u64) -> usize {
    if total == 0 {
        return n;
    }
    let i = (counter as u128 * n as u128) / total as u128;
    i.min(n as u128) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeteringReport {
    pub counter: u64,
    pub unlocked_index: usize,
    pub completed: bool,
}

/// Output ciphertext plus a tag the client can check with `k_P` before
/// releasing anything in exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncryptedOutput {
    #[serde(with = "crate::crypto::hex_bytes")]
    pub ciphertext: Vec<u8>,
    pub tag: Digest,
}

fn delivery_tag_input(task: u64, node_lock: &Digest, ciphertext: &[u8]) -> Vec<u8> {
    let mut m = format!("delivery:v1;task={task};node-lock={node_lock};").into_bytes();
    m.extend_from_slice(ciphertext);
    m
}

/// Everything the wrapper needs besides its provisioned key.
#[derive(Debug, Clone)]
pub struct ExecutionRequest {
    pub task: u64,
    pub encrypted_input: Vec<u8>,
    pub encrypted_settling: Vec<u8>,
    pub locks: Vec<Digest>,
    /// `h_C`.
    pub node_lock: Digest,
    /// `rand_C`, supplied by the node host.
    pub node_secret: Preimage,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionOutcome {
    pub report: MeteringReport,
    pub termination: Termination,
    /// `(i, s_i)` for the highest unlocked index, if any.
    pub revealed: Option<(usize, Preimage)>,
    pub output: Option<EncryptedOutput>,
}

pub fn encrypt_input(key: &SymmetricKey, task: u64, input: &[i64]) -> Vec<u8> {
    crypto::encrypt(key, &Nonce::derive(task, PURPOSE_INPUT), &vm::encode_words(input))
}

pub fn encrypt_settling(key: &SymmetricKey, task: u64, data: &SettlingData) -> Vec<u8> {
    let plain: Vec<u8> = data.0.iter().flat_map(|s| *s.as_bytes()).collect();
    crypto::encrypt(key, &Nonce::derive(task, PURPOSE_SETTLING), &plain)
}

/// Tag check the client runs on a delivered ciphertext.
pub fn verify_delivery(key: &SymmetricKey, task: u64, node_lock: &Digest, output: &EncryptedOutput) -> bool {
    crypto::verify_mac(key.as_bytes(), &delivery_tag_input(task, node_lock, &output.ciphertext), &output.tag)
}

/// Decrypt with `k_CP = k_P xor rand_C`.
pub fn decrypt_output(
    key: &SymmetricKey,
    node_secret: &Preimage,
    task: u64,
    output: &EncryptedOutput,
) -> Result<Vec<i64>, EnclaveError> {
    let k = crypto::derive_output_key(key, node_secret);
    let plain = crypto::decrypt(&k, &Nonce::derive(task, PURPOSE_OUTPUT), &output.ciphertext)
        .map_err(|_| EnclaveError::Decryption("output"))?;
    vm::decode_words(&plain).ok_or(EnclaveError::Decryption("output"))
}

struct Checked {
    key: SymmetricKey,
    guest: GuestProgram,
    settling: SettlingData,
    input: Vec<i64>,
}

impl Platform {
    fn check_execution(&self, id: EnclaveId, req: &ExecutionRequest) -> Result<Checked, EnclaveError> {
        let enclave = self.enclave(id)?;
        let key = match enclave.memory.task_key {
            Some((task, key)) if task == req.task => key,
            _ => return Err(EnclaveError::KeyMissing),
        };
        let guest = GuestProgram::from_image(enclave.code())?;

        let plain = crypto::decrypt(&key, &Nonce::derive(req.task, PURPOSE_SETTLING), &req.encrypted_settling)
            .map_err(|_| EnclaveError::Decryption("settling data"))?;
        if plain.len() % 32 != 0 || plain.len() / 32 != req.locks.len() || req.locks.is_empty() {
            return Err(EnclaveError::CheckFailed("settling data does not match lock count".into()));
        }
        let settling =
            SettlingData(plain.chunks_exact(32).map(|c| Preimage::from_bytes(c.try_into().unwrap())).collect());
        for (i, (s, h)) in settling.0.iter().zip(&req.locks).enumerate() {
            if !s.opens(h) {
                return Err(EnclaveError::CheckFailed(format!("settling data {} does not open its lock", i + 1)));
            }
        }
        if !req.node_secret.opens(&req.node_lock) {
            return Err(EnclaveError::CheckFailed("node secret does not open h_C".into()));
        }

        let input = crypto::decrypt(&key, &Nonce::derive(req.task, PURPOSE_INPUT), &req.encrypted_input)
            .map_err(|_| EnclaveError::Decryption("input"))?;
        let input = vm::decode_words(&input).ok_or(EnclaveError::Decryption("input"))?;
        Ok(Checked { key, guest, settling, input })
    }

    /// Check the payment material, then meter the guest. The host may stop
    /// the enclave after `interrupt_at` instructions.
    pub fn run_prog_kt(
        &mut self,
        id: EnclaveId,
        req: &ExecutionRequest,
        interrupt_at: Option<u64>,
    ) -> Result<ExecutionOutcome, EnclaveError> {
        let Checked { key, guest, settling, input } = self.check_execution(id, req)?;
        let n = settling.0.len();
        let run = vm::run_metered(&guest.code, &input, guest.declared_steps, interrupt_at);
        let completed = run.termination == Termination::Halted;
        let unlocked = if completed { n } else { unlocked_index(run.steps, n, guest.declared_steps) };
        let revealed = settling.for_index(unlocked).map(|s| (unlocked, s));

        let output = completed.then(|| {
            let k = crypto::derive_output_key(&key, &req.node_secret);
            let ciphertext =
                crypto::encrypt(&k, &Nonce::derive(req.task, PURPOSE_OUTPUT), &vm::encode_words(&run.output));
            let tag = crypto::mac(key.as_bytes(), &delivery_tag_input(req.task, &req.node_lock, &ciphertext));
            EncryptedOutput { ciphertext, tag }
        });

        // One task per instance: the key is gone once the run ends.
        self.enclave_mut(id)?.memory.task_key = None;
        Ok(ExecutionOutcome {
            report: MeteringReport { counter: run.steps, unlocked_index: unlocked, completed },
            termination: run.termination,
            revealed,
            output,
        })
    }
}
