//! Client `P`: submits tasks, then stays offline until a delivery arrives.

use std::collections::{BTreeMap, VecDeque};

use super::baseline;
use super::config::{ClientBehavior, ClientConfig, Mode, TaskConfig};
use super::message::{AuxData, BaselineJob, Message, TaskId, TaskPackage};
use super::sim::{round_share, Ctx, Timer};
use super::trace::{EnclaveEvent, PromiseRole};
use crate::channel::{Alpha, KnownPreimages, PaymentChannel, PaymentPlan, SettlingData};
use crate::crypto::{self, Digest, KeyPair, Preimage, SymmetricKey};
use crate::enclave::{
    am_measurement, am_verify_cert, decrypt_output, encrypt_input, encrypt_settling, verify_delivery, vm,
    AttestationCertificate, EncryptedOutput, GuestProgram, KeyBundle, RemoteAttestation,
};
use crate::ledger::{self, EscrowId, PartyId};
use crate::matching::ResourceSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Queued,
    AwaitingLock,
    Submitted,
    AwaitingMatch,
    Attesting,
    Done,
}

pub(crate) struct ClientTask {
    value: u64,
    alpha: f64,
    n: usize,
    input: Vec<i64>,
    resources: ResourceSpec,
    submit_at: u64,
    guest: GuestProgram,
    pub expected_output: Option<Vec<i64>>,
    key: Option<SymmetricKey>,
    secret: Option<Preimage>,
    node_lock: Option<Digest>,
    output: Option<EncryptedOutput>,
    pub decrypted: Option<Vec<i64>>,
    /// Early termination before anything reached a node.
    pub fate: Option<String>,
    pub submitted: bool,
    /// Baseline: matched node and the escrow paying it.
    pub node: Option<String>,
    pub escrow: Option<EscrowId>,
    phase: Phase,
}

pub(crate) struct Client {
    pub id: String,
    keys: KeyPair,
    behavior: ClientBehavior,
    broker: String,
    channel: Option<PaymentChannel>,
    queue: VecDeque<TaskId>,
    tasks: BTreeMap<TaskId, ClientTask>,
    rounds: Vec<(TaskId, u64)>,
}

impl Client {
    pub fn new(ctx: &mut Ctx, cfg: &ClientConfig) -> Self {
        let keys = KeyPair::generate(ctx.rng);
        let broker = ctx.cfg.broker.id.clone();
        let channel = (ctx.cfg.mode == Mode::Fair)
            .then(|| {
                let timeout = ctx.height() + ctx.cfg.escrow_timeout;
                let (me, b) = (PartyId::new(cfg.id.clone()), PartyId::new(broker.clone()));
                ctx.ledger(|l| PaymentChannel::open(l, &me, &b, keys.public(), cfg.capacity, timeout)).ok()
            })
            .flatten();
        Self {
            id: cfg.id.clone(),
            keys,
            behavior: cfg.behavior,
            broker,
            channel,
            queue: VecDeque::new(),
            tasks: BTreeMap::new(),
            rounds: Vec::new(),
        }
    }

    pub fn add_task(&mut self, id: TaskId, t: &TaskConfig, guest: GuestProgram) {
        let reference = vm::run_metered(&guest.code, &t.input, guest.declared_steps, None);
        let expected_output = (reference.termination == vm::Termination::Halted).then_some(reference.output);
        self.queue.push_back(id);
        self.tasks.insert(
            id,
            ClientTask {
                value: t.value,
                alpha: t.alpha,
                n: t.n,
                input: t.input.clone(),
                resources: t.resources,
                submit_at: t.submit_at,
                guest,
                expected_output,
                key: None,
                secret: None,
                node_lock: None,
                output: None,
                decrypted: None,
                fate: None,
                submitted: false,
                node: None,
                escrow: None,
                phase: Phase::Queued,
            },
        );
    }

    pub fn public_key(&self) -> crypto::PublicKey {
        self.keys.public()
    }

    pub fn channel(&self) -> Option<&PaymentChannel> {
        self.channel.as_ref()
    }

    pub fn channel_escrow(&self) -> Option<EscrowId> {
        self.channel.as_ref().map(|c| c.escrow)
    }

    pub fn task(&self, id: TaskId) -> &ClientTask {
        &self.tasks[&id]
    }

    pub fn task_keys(&self) -> impl Iterator<Item = &SymmetricKey> {
        self.tasks.values().filter_map(|t| t.key.as_ref())
    }

    /// What this client paid for `task` given the final close of its channel.
    pub fn paid(&self, task: TaskId, close: Option<u64>) -> u64 {
        round_share(&self.rounds, task, close)
    }

    pub fn start(&mut self, ctx: &mut Ctx) {
        if let Some(t) = self.queue.pop_front() {
            let delay = self.tasks[&t].submit_at.saturating_sub(ctx.now);
            ctx.after(delay, &self.id, Timer::Submit(t));
        }
    }

    fn finish(&mut self, ctx: &mut Ctx, task: TaskId, fate: Option<&str>) {
        let t = self.tasks.get_mut(&task).expect("known task");
        if t.phase == Phase::Done {
            return;
        }
        t.phase = Phase::Done;
        if let Some(f) = fate {
            t.fate = Some(f.to_string());
        }
        self.start(ctx);
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        match timer {
            Timer::Submit(task) => {
                let t = self.tasks.get_mut(&task).expect("known task");
                match ctx.cfg.mode {
                    Mode::Fair => {
                        t.phase = Phase::AwaitingLock;
                        ctx.send(&self.id, &self.broker, Message::LockRequest { task });
                    }
                    Mode::Baseline => {
                        t.phase = Phase::AwaitingMatch;
                        t.submitted = true;
                        ctx.send(&self.id, &self.broker, Message::BaselineRequest { task });
                    }
                }
            }
            Timer::GiveUp(task) => {
                if self.tasks[&task].phase == Phase::Submitted {
                    self.finish(ctx, task, None);
                }
            }
            Timer::Epoch | Timer::ResponseTimeout(_) => {}
        }
    }

    fn phase(&self, task: TaskId) -> Option<Phase> {
        self.tasks.get(&task).map(|t| t.phase)
    }

    pub fn handle(&mut self, ctx: &mut Ctx, from: &str, msg: Message) {
        let task = msg.task();
        let from_broker = from == self.broker;
        match msg {
            Message::LockReply { broker_lock, am_certificate, .. }
                if from_broker && self.phase(task) == Some(Phase::AwaitingLock) =>
            {
                self.submit(ctx, task, broker_lock, &am_certificate);
            }
            Message::Rejected { .. } if from_broker && self.phase(task) == Some(Phase::Submitted) => {
                if let Some(ch) = self.channel.as_mut() {
                    ch.end_round();
                }
                self.finish(ctx, task, Some("rejected"));
            }
            Message::Dispatched { node_lock, .. } if from_broker => {
                if let Some(t) = self.tasks.get_mut(&task) {
                    t.node_lock.get_or_insert(node_lock);
                }
            }
            Message::Delivery { output, .. } => self.on_delivery(ctx, from, task, output),
            Message::Settled { revealed, node_secret, .. }
                if from_broker && self.phase(task) == Some(Phase::Submitted) =>
            {
                self.on_settled(ctx, task, &revealed, node_secret);
            }
            Message::BaselineMatch { node, .. } if from_broker && self.phase(task) == Some(Phase::AwaitingMatch) => {
                let t = self.tasks.get_mut(&task).expect("known task");
                t.phase = Phase::Attesting;
                t.node = Some(node.clone());
                ctx.send(&self.id, &node, Message::AttestRequest { task, program: t.guest.image() });
            }
            Message::AttestReply { attestation, .. }
                if self.phase(task) == Some(Phase::Attesting) && self.tasks[&task].node.as_deref() == Some(from) =>
            {
                self.baseline_submit(ctx, task, &attestation);
            }
            Message::BaselineOutput { ciphertext, .. }
                if self.phase(task) == Some(Phase::Submitted) && self.tasks[&task].node.as_deref() == Some(from) =>
            {
                let t = self.tasks.get_mut(&task).expect("known task");
                if let Some(key) = &t.key {
                    t.decrypted = baseline::decrypt_output(key, task, &ciphertext);
                }
                if t.decrypted.is_some() {
                    self.finish(ctx, task, None);
                }
            }
            _ => {}
        }
    }

    fn submit(&mut self, ctx: &mut Ctx, task: TaskId, broker_lock: Digest, cert: &AttestationCertificate) {
        if !am_verify_cert(cert, &am_measurement(), &ctx.ias_key()) {
            ctx.enclave(
                &self.id,
                EnclaveEvent::CertificateRejected { role: "attestation-manager".into(), task: Some(task) },
            );
            return self.finish(ctx, task, Some("certificate_invalid"));
        }
        let Some(ch) = self.channel.as_mut() else {
            return self.finish(ctx, task, Some("no_channel"));
        };
        let t = self.tasks.get_mut(&task).expect("known task");
        if ch.headroom() < t.value {
            return self.finish(ctx, task, Some("capacity_exceeded"));
        }
        let alpha = Alpha::from_f64(t.alpha).expect("validated");
        let key = SymmetricKey::random(ctx.rng);
        let settling = SettlingData::generate(ctx.rng, t.n);
        let secret = Preimage::random(ctx.rng);
        let plan = PaymentPlan::new(t.value, alpha, settling.locks(), secret.lock(), broker_lock).expect("validated");
        let base = ch.balance;
        let mut promises = match ch.issue_compute_promises(&self.keys, &plan) {
            Ok(p) => p,
            Err(_) => return self.finish(ctx, task, Some("capacity_exceeded")),
        };
        promises.push(ch.issue_delivery_promise(&self.keys, &plan).expect("room checked"));
        self.rounds.push((task, base));
        for p in &promises {
            ctx.promise(task, PromiseRole::Client, p);
        }
        let t = self.tasks.get_mut(&task).expect("known task");
        let package = TaskPackage {
            task,
            program: t.guest.image(),
            encrypted_input: encrypt_input(&key, task, &t.input),
            aux: AuxData {
                encrypted_settling: encrypt_settling(&key, task, &settling),
                locks: settling.locks(),
                client_lock: secret.lock(),
                broker_lock,
                node_lock: None,
                client_channel: ch.escrow,
                node_channel: None,
                client_promises: promises,
                broker_promises: Vec::new(),
                declared_steps: t.guest.declared_steps,
                value: t.value,
                alpha,
            },
        };
        let bundle = KeyBundle { task, key, expected_execution: t.guest.measurement() };
        let key_envelope = bundle.envelope_for(ctx.rng, &cert.enclave_keys().exchange);
        t.key = Some(key);
        t.secret = Some(secret);
        t.submitted = true;
        t.phase = Phase::Submitted;
        let resources = t.resources;
        ctx.send(&self.id, &self.broker, Message::Submit { task, resources, package, key_envelope });
    }

    fn on_delivery(&mut self, ctx: &mut Ctx, from: &str, task: TaskId, output: EncryptedOutput) {
        let Some(t) = self.tasks.get_mut(&task) else { return };
        if t.phase != Phase::Submitted || t.output.is_some() {
            return;
        }
        let (Some(key), Some(node_lock), Some(secret)) = (t.key, t.node_lock, t.secret) else { return };
        if !verify_delivery(&key, task, &node_lock, &output) {
            return;
        }
        t.output = Some(output);
        let reply = match self.behavior {
            ClientBehavior::Honest => secret,
            ClientBehavior::BadRand => Preimage::random(ctx.rng),
            ClientBehavior::Silent => return,
        };
        ctx.send(&self.id, from, Message::DeliveryResponse { task, client_secret: reply });
    }

    fn on_settled(
        &mut self,
        ctx: &mut Ctx,
        task: TaskId,
        revealed: &[crypto::Preimage],
        node_secret: Option<Preimage>,
    ) {
        if let Some(ch) = self.channel.as_mut() {
            let known: KnownPreimages = revealed.iter().collect();
            if known.is_empty() || ch.settle_off_chain(&known).is_err() {
                ch.end_round();
            }
        }
        if let Some(s) = node_secret {
            self.try_decrypt(task, &s);
        }
        self.finish(ctx, task, None);
    }

    fn try_decrypt(&mut self, task: TaskId, node_secret: &Preimage) -> bool {
        let t = self.tasks.get_mut(&task).expect("known task");
        let (Some(key), Some(lock), Some(out)) = (t.key, t.node_lock, t.output.as_ref()) else { return false };
        if !node_secret.opens(&lock) {
            return false;
        }
        t.decrypted = decrypt_output(&key, node_secret, task, out).ok();
        t.decrypted.is_some()
    }

    /// Look for `rand_C` among preimages published on the ledger.
    pub fn read_ledger_at_end(&mut self, ctx: &mut Ctx) {
        let revealed: Vec<Preimage> = ctx.ledger.all_revealed_preimages().copied().collect();
        let waiting: Vec<TaskId> =
            self.tasks.iter().filter(|(_, t)| t.decrypted.is_none() && t.output.is_some()).map(|(id, _)| *id).collect();
        for task in waiting {
            let lock = self.tasks[&task].node_lock;
            if let Some(s) = revealed.iter().find(|s| lock.is_some_and(|l| s.opens(&l))) {
                self.try_decrypt(task, s);
            }
        }
    }

    /// Baseline: attest the execution enclave, fund one escrow, send the job.
    fn baseline_submit(&mut self, ctx: &mut Ctx, task: TaskId, attestation: &RemoteAttestation) {
        let node = self.tasks[&task].node.clone().expect("matched");
        let cert = ctx.ias_verify(&node, "execution", attestation);
        let t = self.tasks.get_mut(&task).expect("known task");
        if !cert.accepts(&ctx.ias_key(), &t.guest.measurement()) {
            ctx.enclave(&self.id, EnclaveEvent::CertificateRejected { role: "execution".into(), task: Some(task) });
            return self.finish(ctx, task, Some("certificate_invalid"));
        }
        let key = SymmetricKey::random(ctx.rng);
        let data = Preimage::random(ctx.rng);
        let timeout = ctx.height() + ctx.cfg.escrow_timeout;
        let (me, payee) = (PartyId::new(self.id.clone()), PartyId::new(node.clone()));
        let pk = self.keys.public();
        let value = t.value;
        let Ok(escrow) = ctx.ledger(|l| l.open_escrow(&me, &payee, pk, value, vec![data.lock()], timeout)) else {
            return self.finish(ctx, task, Some("insufficient_funds"));
        };
        let t = self.tasks.get_mut(&task).expect("known task");
        let claim_signature = self.keys.sign(&ledger::claim_message(escrow, 0, value, &[data.lock()]));
        let job = BaselineJob {
            escrow,
            value,
            lock: data.lock(),
            claim_signature,
            program: t.guest.image(),
            encrypted_input: encrypt_input(&key, task, &t.input),
            secrets: baseline::seal_secrets(ctx.rng, &attestation.enclave_keys.exchange, task, &key, &data),
        };
        t.key = Some(key);
        t.escrow = Some(escrow);
        t.phase = Phase::Submitted;
        ctx.send(&self.id, &node, Message::BaselineSubmit { task, job });
        ctx.after(ctx.cfg.response_timeout, &self.id, Timer::GiveUp(task));
    }
}
