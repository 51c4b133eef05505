//! Compute node `C`: hosts the key handler, runs the metered wrapper and
//! trades the encrypted output for `rand_P`.

use std::collections::BTreeMap;

use super::config::{CodeTamper, Mode, NodeBehavior, NodeConfig, Routing};
use super::message::{BaselineJob, Message, TaskId, TaskPackage};
use super::sim::{round_share, Ctx, Timer};
use super::trace::EnclaveEvent;
use crate::channel::{check_client_schedule, KnownPreimages, PaymentChannel, PaymentPlan, PaymentPromise};
use crate::crypto::{Digest, Preimage, SecureEnvelope};
use crate::enclave::{EnclaveId, EncryptedOutput, ExecutionRequest, MeteringReport, Platform, KH_CODE};
use crate::ledger::{Claim, EscrowId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Locked,
    AwaitingResponse,
    Done,
}

pub(crate) struct NodeTask {
    /// `rand_C`
    secret: Preimage,
    client: Option<String>,
    pub report: Option<MeteringReport>,
    revealed: Option<(usize, Preimage)>,
    client_lock: Option<Digest>,
    promises: Vec<PaymentPromise>,
    base: u64,
    /// Held a valid `rand_P` (fair) or learned `data` (baseline).
    pub able_full: bool,
    /// Baseline: escrow claimed on the ledger.
    pub claimed: bool,
    enclave: Option<EnclaveId>,
    phase: Phase,
}

impl NodeTask {
    fn new(secret: Preimage) -> Self {
        Self {
            secret,
            client: None,
            report: None,
            revealed: None,
            client_lock: None,
            promises: Vec::new(),
            base: 0,
            able_full: false,
            claimed: false,
            enclave: None,
            phase: Phase::Locked,
        }
    }
}

pub(crate) struct Node {
    pub id: String,
    behavior: NodeBehavior,
    platform: Platform,
    kh: Option<EnclaveId>,
    tamper_program: Option<CodeTamper>,
    broker: String,
    channel: Option<PaymentChannel>,
    known: KnownPreimages,
    tasks: BTreeMap<TaskId, NodeTask>,
    rounds: Vec<(TaskId, u64)>,
}

impl Node {
    pub fn new(ctx: &mut Ctx, cfg: &NodeConfig) -> Self {
        let mut platform = Platform::new(cfg.id.as_str(), ctx.rng);
        let kh = (ctx.cfg.mode == Mode::Fair).then(|| {
            let code = cfg.tamper_kh.map_or_else(|| KH_CODE.to_vec(), |t| t.apply(KH_CODE));
            let (id, measurement) = platform.instantiate_enclave(&code);
            ctx.enclave(&cfg.id, EnclaveEvent::Instantiated { enclave: id, role: "key-handler".into(), measurement });
            id
        });
        Self {
            id: cfg.id.clone(),
            behavior: cfg.behavior,
            platform,
            kh,
            tamper_program: cfg.tamper_program,
            broker: ctx.cfg.broker.id.clone(),
            channel: None,
            known: KnownPreimages::new(),
            tasks: BTreeMap::new(),
            rounds: Vec::new(),
        }
    }

    pub fn platform(&self) -> &Platform {
        &self.platform
    }

    pub fn set_channel(&mut self, channel: PaymentChannel) {
        self.channel = Some(channel);
    }

    pub fn channel_escrow(&self) -> Option<EscrowId> {
        self.channel.as_ref().map(|c| c.escrow)
    }

    pub fn task(&self, id: TaskId) -> Option<&NodeTask> {
        self.tasks.get(&id)
    }

    /// Best compute promise of `task` this node can open, above its base.
    pub fn compute_claimable(&self, task: TaskId) -> u64 {
        let Some(t) = self.tasks.get(&task) else { return 0 };
        t.promises
            .iter()
            .filter(|p| p.locks.len() == 1 && self.known.contains(&p.locks[0]))
            .map(|p| p.value - t.base)
            .max()
            .unwrap_or(0)
    }

    pub fn earned(&self, task: TaskId, close: Option<u64>) -> u64 {
        round_share(&self.rounds, task, close)
    }

    pub fn handle(&mut self, ctx: &mut Ctx, from: &str, msg: Message) {
        let from_broker = from == self.broker;
        match msg {
            Message::NodeLockRequest { task } if from_broker => self.on_lock_request(ctx, task),
            Message::Dispatch { task, client, package, key_envelope } if from_broker => {
                self.on_dispatch(ctx, task, client, package, &key_envelope)
            }
            Message::DeliveryResponse { task, client_secret } => {
                let expected = self.tasks.get(&task).and_then(|t| t.client.clone());
                if from_broker || expected.as_deref() == Some(from) {
                    self.on_response(ctx, task, client_secret);
                }
            }
            Message::AttestRequest { task, program } => self.on_attest_request(ctx, from, task, &program),
            Message::BaselineSubmit { task, job } => self.on_baseline_job(ctx, from, task, &job),
            _ => {}
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        if let Timer::ResponseTimeout(task) = timer {
            if self.tasks.get(&task).is_some_and(|t| t.phase == Phase::AwaitingResponse) {
                self.settle_compute(ctx, task);
            }
        }
    }

    fn on_lock_request(&mut self, ctx: &mut Ctx, task: TaskId) {
        let Some(kh) = self.kh else { return };
        if self.tasks.contains_key(&task) {
            return;
        }
        let secret = Preimage::random(ctx.rng);
        self.tasks.insert(task, NodeTask::new(secret));
        let key_handler = self.platform.remote_attest(kh).expect("key handler is live");
        ctx.send(&self.id, &self.broker, Message::NodeLockReply { task, node_lock: secret.lock(), key_handler });
    }

    /// Give up on a task with nothing claimable.
    fn abort(&mut self, ctx: &mut Ctx, task: TaskId, event: EnclaveEvent) {
        ctx.enclave(&self.id, event);
        let t = self.tasks.get_mut(&task).expect("known task");
        if !t.promises.is_empty() {
            if let Some(ch) = self.channel.as_mut() {
                ch.end_round();
            }
        }
        t.phase = Phase::Done;
        ctx.send(&self.id, &self.broker, Message::Progress { task, index: 0, preimage: None, completed: false });
    }

    fn accept_round(&mut self, task: TaskId, package: &TaskPackage) -> Result<(), String> {
        let t = self.tasks.get_mut(&task).expect("known task");
        let aux = &package.aux;
        let ch = self.channel.as_mut().filter(|c| c.is_active()).ok_or("no active channel")?;
        if aux.node_lock != Some(t.secret.lock()) || aux.node_channel != Some(ch.escrow) {
            return Err("package is not addressed to this node".into());
        }
        if aux.broker_promises.len() != aux.locks.len() + 1 {
            return Err("delivery promise missing".into());
        }
        let plan = PaymentPlan::new(aux.value, aux.alpha, aux.locks.clone(), aux.client_lock, t.secret.lock())
            .map_err(|e| e.to_string())?;
        check_client_schedule(&ch.payer_key, ch.balance, &aux.broker_promises, &plan).map_err(|e| e.to_string())?;
        ch.receive_round(&aux.broker_promises).map_err(|e| e.to_string())?;
        t.base = ch.balance;
        t.promises = aux.broker_promises.clone();
        t.client_lock = Some(aux.client_lock);
        self.rounds.push((task, t.base));
        Ok(())
    }

    fn on_dispatch(&mut self, ctx: &mut Ctx, task: TaskId, client: String, package: TaskPackage, env: &SecureEnvelope) {
        let Some(kh) = self.kh else { return };
        match self.tasks.get_mut(&task) {
            Some(t) if t.phase == Phase::Locked => t.client = Some(client.clone()),
            _ => return,
        }
        if let Err(reason) = self.accept_round(task, &package) {
            return self.abort(ctx, task, EnclaveEvent::ExecutionFailed { task, reason });
        }
        let key_id = match self.platform.kh_receive_key(kh, env) {
            Ok(k) => k,
            Err(e) => return self.abort(ctx, task, EnclaveEvent::ReleaseRefused { task, reason: e.to_string() }),
        };
        ctx.enclave(&self.id, EnclaveEvent::KeyReceived { enclave: kh, task });

        let image = self.tamper_program.map_or_else(|| package.program.clone(), |t| t.apply(&package.program));
        let (prog, measurement) = self.platform.instantiate_enclave(&image);
        ctx.enclave(&self.id, EnclaveEvent::Instantiated { enclave: prog, role: "execution".into(), measurement });
        let report = self.platform.local_attest(prog, kh).expect("both enclaves live");
        if let Err(e) = self.platform.kh_send_key_local(kh, key_id, &report) {
            self.platform.destroy_enclave(prog);
            return self.abort(ctx, task, EnclaveEvent::ReleaseRefused { task, reason: e.to_string() });
        }
        ctx.enclave(&self.id, EnclaveEvent::KeyReleased { task, measurement });

        let t = self.tasks.get_mut(&task).expect("known task");
        let req = ExecutionRequest {
            task,
            encrypted_input: package.encrypted_input.clone(),
            encrypted_settling: package.aux.encrypted_settling.clone(),
            locks: package.aux.locks.clone(),
            node_lock: t.secret.lock(),
            node_secret: t.secret,
        };
        let interrupt = match self.behavior {
            NodeBehavior::AbortAtStep { step } => Some(step),
            _ => None,
        };
        let result = self.platform.run_prog_kt(prog, &req, interrupt);
        self.platform.destroy_enclave(prog);
        let outcome = match result {
            Ok(o) => o,
            Err(e) => return self.abort(ctx, task, EnclaveEvent::ExecutionFailed { task, reason: e.to_string() }),
        };
        ctx.enclave(
            &self.id,
            EnclaveEvent::Executed { task, report: outcome.report, termination: format!("{:?}", outcome.termination) },
        );
        let t = self.tasks.get_mut(&task).expect("known task");
        t.report = Some(outcome.report);
        t.revealed = outcome.revealed;
        if let Some((_, s)) = outcome.revealed {
            self.known.insert(s);
        }
        match outcome.output {
            Some(output) if self.behavior != NodeBehavior::WithholdOutput => self.deliver(ctx, task, &client, output),
            _ => self.settle_compute(ctx, task),
        }
    }

    fn deliver(&mut self, ctx: &mut Ctx, task: TaskId, client: &str, output: EncryptedOutput) {
        let to = match ctx.cfg.routing {
            Routing::Direct => client.to_string(),
            Routing::ViaBroker => self.broker.clone(),
        };
        self.tasks.get_mut(&task).expect("known task").phase = Phase::AwaitingResponse;
        ctx.send(&self.id, &to, Message::Delivery { task, output });
        ctx.after(ctx.cfg.response_timeout, &self.id, Timer::ResponseTimeout(task));
    }

    /// Pass back the settling data the enclave released and settle on it.
    fn settle_compute(&mut self, ctx: &mut Ctx, task: TaskId) {
        let t = self.tasks.get_mut(&task).expect("known task");
        t.phase = Phase::Done;
        let completed = t.report.is_some_and(|r| r.completed);
        let (index, preimage) = match t.revealed {
            Some((i, s)) => (i, Some(s)),
            None => (0, None),
        };
        if let Some(ch) = self.channel.as_mut() {
            let known: KnownPreimages = preimage.iter().collect();
            if known.is_empty() || ch.settle_off_chain(&known).is_err() {
                ch.end_round();
            }
        }
        ctx.send(&self.id, &self.broker, Message::Progress { task, index, preimage, completed });
    }

    fn on_response(&mut self, ctx: &mut Ctx, task: TaskId, client_secret: Preimage) {
        let Some(t) = self.tasks.get_mut(&task) else { return };
        // After the timeout an honest node has already settled; late answers are ignored.
        if t.phase != Phase::AwaitingResponse {
            return;
        }
        if !t.client_lock.is_some_and(|l| client_secret.opens(&l)) {
            ctx.accuse(task, &self.id, "delivery response does not open the client lock");
            return self.settle_compute(ctx, task);
        }
        t.able_full = true;
        t.phase = Phase::Done;
        let node_secret = t.secret;
        self.known.insert(client_secret);
        self.known.insert(node_secret);
        match self.behavior {
            NodeBehavior::HoldSecret => {}
            NodeBehavior::CloseOnChain => {
                if let Some(ch) = self.channel.as_mut() {
                    if let Some((p, pre)) = ch.select_closing_promise(&self.known) {
                        let _ = ctx.ledger(|l| ch.close(l, &p, &pre));
                    }
                }
            }
            NodeBehavior::ClaimComputeOnly => {
                let last = t.promises.iter().rev().find(|p| p.locks.len() == 1).cloned();
                if let (Some(ch), Some(p)) = (self.channel.as_mut(), last) {
                    if let Some(pre) = p.opening(&self.known) {
                        let _ = ctx.ledger(|l| ch.close(l, &p, &pre));
                    }
                }
            }
            _ => {
                if let Some(ch) = self.channel.as_mut() {
                    let known: KnownPreimages = [client_secret, node_secret].iter().collect();
                    if ch.settle_off_chain(&known).is_err() {
                        ch.end_round();
                    }
                }
                ctx.send(&self.id, &self.broker, Message::Settle { task, client_secret, node_secret });
            }
        }
    }

    /// Terminal close with the best promise this node can open (the worst,
    /// for a replaying node).
    pub fn close_at_end(&mut self, ctx: &mut Ctx) {
        let Some(ch) = self.channel.as_mut().filter(|c| c.is_active()) else { return };
        let choice = match self.behavior {
            NodeBehavior::ReplayPromise => ch.select_lowest_promise(&self.known),
            _ => ch.select_closing_promise(&self.known),
        };
        if let Some((p, pre)) = choice.filter(|(p, _)| p.value >= ctx.ledger.fee()) {
            let _ = ctx.ledger(|l| ch.close(l, &p, &pre));
        }
    }

    fn on_attest_request(&mut self, ctx: &mut Ctx, client: &str, task: TaskId, program: &[u8]) {
        if ctx.cfg.mode != Mode::Baseline || self.tasks.contains_key(&task) {
            return;
        }
        let image = self.tamper_program.map_or_else(|| program.to_vec(), |t| t.apply(program));
        let (id, measurement) = self.platform.instantiate_enclave(&image);
        ctx.enclave(&self.id, EnclaveEvent::Instantiated { enclave: id, role: "execution".into(), measurement });
        let mut t = NodeTask::new(Preimage::random(ctx.rng));
        t.enclave = Some(id);
        t.client = Some(client.to_string());
        self.tasks.insert(task, t);
        let attestation = self.platform.remote_attest(id).expect("enclave is live");
        ctx.send(&self.id, client, Message::AttestReply { task, attestation });
    }

    fn on_baseline_job(&mut self, ctx: &mut Ctx, client: &str, task: TaskId, job: &BaselineJob) {
        let Some(t) = self.tasks.get_mut(&task) else { return };
        if t.phase != Phase::Locked || t.client.as_deref() != Some(client) {
            return;
        }
        t.phase = Phase::Done;
        let Some(enclave) = t.enclave else { return };
        let interrupt = match self.behavior {
            NodeBehavior::AbortAtStep { step } => Some(step),
            _ => None,
        };
        let result = self.platform.run_baseline(enclave, task, job, interrupt);
        self.platform.destroy_enclave(enclave);
        let outcome = match result {
            Ok(o) => o,
            Err(e) => {
                return ctx.enclave(&self.id, EnclaveEvent::ExecutionFailed { task, reason: e.to_string() });
            }
        };
        ctx.enclave(
            &self.id,
            EnclaveEvent::Executed { task, report: outcome.report, termination: format!("{:?}", outcome.termination) },
        );
        let t = self.tasks.get_mut(&task).expect("known task");
        t.report = Some(outcome.report);
        let Some(data) = outcome.data else { return };
        t.able_full = true;
        let claim = Claim { sequence: 0, value: job.value, locks: vec![job.lock], signature: job.claim_signature };
        t.claimed = ctx.ledger(|l| l.close_escrow(job.escrow, &claim, &[data])).is_ok();
        if let (Some(ciphertext), false) = (outcome.ciphertext, self.behavior == NodeBehavior::WithholdOutput) {
            ctx.send(&self.id, client, Message::BaselineOutput { task, ciphertext });
        }
    }
}
