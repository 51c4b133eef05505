//! Pay-on-completion baseline: one escrow per task locked by `hash(data)`,
//! with the client attesting the execution enclave itself for every task.
//!
//! The enclave releases `data` once the guest halts, which is enough for the
//! node to claim the whole escrow whether or not it forwards the output.

use rand::{CryptoRng, RngCore};

use super::message::{BaselineJob, TaskId};
use crate::crypto::{self, ExchangePublicKey, Nonce, Preimage, SecureEnvelope, SymmetricKey};
use crate::enclave::vm::{self, Termination};
use crate::enclave::{EnclaveError, EnclaveId, GuestProgram, MeteringReport, Platform, PURPOSE_INPUT, PURPOSE_OUTPUT};

fn context(task: TaskId) -> Vec<u8> {
    format!("baseline-job:v1;task={task}").into_bytes()
}

/// `(k_P, data)` encrypted to the attested enclave.
pub fn seal_secrets<R: RngCore + CryptoRng + ?Sized>(
    rng: &mut R,
    enclave: &ExchangePublicKey,
    task: TaskId,
    key: &SymmetricKey,
    data: &Preimage,
) -> SecureEnvelope {
    let mut plain = key.as_bytes().to_vec();
    plain.extend_from_slice(data.as_bytes());
    crypto::seal_to(rng, enclave, &plain, &context(task))
}

pub fn decrypt_output(key: &SymmetricKey, task: TaskId, ciphertext: &[u8]) -> Option<Vec<i64>> {
    let plain = crypto::decrypt(key, &Nonce::derive(task, PURPOSE_OUTPUT), ciphertext).ok()?;
    vm::decode_words(&plain)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaselineOutcome {
    pub report: MeteringReport,
    pub termination: Termination,
    /// Released only on completion.
    pub data: Option<Preimage>,
    pub ciphertext: Option<Vec<u8>>,
}

impl Platform {
    /// Check `hash(data) = h`, run the guest, and on completion release
    /// `data` together with `Enc(k_P, output)`.
    pub fn run_baseline(
        &mut self,
        id: EnclaveId,
        task: TaskId,
        job: &BaselineJob,
        interrupt_at: Option<u64>,
    ) -> Result<BaselineOutcome, EnclaveError> {
        let enclave = self.enclave(id)?;
        let guest = GuestProgram::from_image(enclave.code())?;
        let plain =
            enclave.exchange_key().open(&job.secrets, &context(task)).map_err(|_| EnclaveError::ChannelRejected)?;
        if plain.len() != 64 {
            return Err(EnclaveError::ChannelRejected);
        }
        let key = SymmetricKey::from_bytes(plain[..32].try_into().unwrap());
        let data = Preimage::from_bytes(plain[32..].try_into().unwrap());
        if !data.opens(&job.lock) {
            return Err(EnclaveError::CheckFailed("data does not open the escrow lock".into()));
        }
        let input = crypto::decrypt(&key, &Nonce::derive(task, PURPOSE_INPUT), &job.encrypted_input)
            .map_err(|_| EnclaveError::Decryption("input"))?;
        let input = vm::decode_words(&input).ok_or(EnclaveError::Decryption("input"))?;

        let run = vm::run_metered(&guest.code, &input, guest.declared_steps, interrupt_at);
        let completed = run.termination == Termination::Halted;
        let ciphertext = completed
            .then(|| crypto::encrypt(&key, &Nonce::derive(task, PURPOSE_OUTPUT), &vm::encode_words(&run.output)));
        Ok(BaselineOutcome {
            report: MeteringReport { counter: run.steps, unlocked_index: 0, completed },
            termination: run.termination,
            data: completed.then_some(data),
            ciphertext,
        })
    }
}
