//! Broker `B`: hosts the attestation manager, matches tasks to nodes and
//! mirrors client promises onto its own node channels.
//!
//! The broker only settles a round with preimages it actually holds, and it
//! settles both sides of a task with the same preimages, so every increment
//! it owes a node is matched by one it is owed by the client.

use std::collections::{BTreeMap, VecDeque};

use super::config::{Mode, Routing};
use super::message::{Message, TaskId, TaskPackage};
use super::node::Node;
use super::sim::{Ctx, Timer};
use super::trace::{EnclaveEvent, PromiseRole};
use crate::channel::{KnownPreimages, PaymentChannel, PaymentPlan};
use crate::crypto::{Digest, KeyPair, Preimage, PublicKey, SecureEnvelope};
use crate::enclave::{kh_measurement, AttestationCertificate, EnclaveId, KeyId, Platform, AM_CODE};
use crate::ledger::{EscrowState, PartyId, TxKind};
use crate::matching::{epoch_assign, ResourceSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Phase {
    Pending,
    Locking(String),
    Running(String),
    Done,
}

struct BrokerTask {
    client: String,
    resources: ResourceSpec,
    package: TaskPackage,
    key: KeyId,
    client_base: u64,
    plan: PaymentPlan,
    node_lock: Option<Digest>,
    node: Option<String>,
    phase: Phase,
}

struct NodeEntry {
    channel: Option<PaymentChannel>,
    resources: ResourceSpec,
    busy: Option<TaskId>,
    excluded: bool,
    kh_cert: Option<AttestationCertificate>,
}

struct ClientEntry {
    channel: Option<PaymentChannel>,
    key: PublicKey,
    open_task: Option<TaskId>,
}

pub(crate) struct Broker {
    id: String,
    keys: KeyPair,
    platform: Platform,
    /// Attestation manager and its certificate; fair mode only.
    manager: Option<(EnclaveId, AttestationCertificate)>,
    /// `rand_B` per task.
    secrets: BTreeMap<TaskId, Preimage>,
    clients: BTreeMap<String, ClientEntry>,
    nodes: BTreeMap<String, NodeEntry>,
    tasks: BTreeMap<TaskId, BrokerTask>,
    pending: VecDeque<TaskId>,
    baseline_pending: VecDeque<(TaskId, String)>,
    baseline_assigned: BTreeMap<TaskId, String>,
    /// Preimages learned from settlements and the ledger.
    known: KnownPreimages,
    epoch_scheduled: bool,
}

impl Broker {
    pub fn new(ctx: &mut Ctx) -> Self {
        let cfg = &ctx.cfg.broker;
        let keys = KeyPair::generate(ctx.rng);
        let mut platform = Platform::new(cfg.id.as_str(), ctx.rng);
        let id = cfg.id.clone();
        ctx.register_platform(&platform);
        let mut manager = None;
        if ctx.cfg.mode == Mode::Fair {
            let code = cfg.tamper_am.map_or_else(|| AM_CODE.to_vec(), |t| t.apply(AM_CODE));
            let (am, measurement) = platform.instantiate_enclave(&code);
            ctx.enclave(
                &id,
                EnclaveEvent::Instantiated { enclave: am, role: "attestation-manager".into(), measurement },
            );
            let attestation = platform.remote_attest(am).expect("manager is live");
            manager = Some((am, ctx.ias_verify(&id, "attestation-manager", &attestation)));
        }
        Self {
            id,
            keys,
            platform,
            manager,
            secrets: BTreeMap::new(),
            clients: BTreeMap::new(),
            nodes: BTreeMap::new(),
            tasks: BTreeMap::new(),
            pending: VecDeque::new(),
            baseline_pending: VecDeque::new(),
            baseline_assigned: BTreeMap::new(),
            known: KnownPreimages::new(),
            epoch_scheduled: false,
        }
    }

    /// Open one channel per node (fair mode) and hand each node its copy.
    pub fn start(&mut self, ctx: &mut Ctx, nodes: &mut BTreeMap<String, Node>) {
        for cfg in &ctx.cfg.nodes {
            let mut channel = None;
            if ctx.cfg.mode == Mode::Fair {
                let timeout = ctx.height() + ctx.cfg.escrow_timeout;
                let (me, payee) = (PartyId::new(self.id.clone()), PartyId::new(cfg.id.clone()));
                let pk = self.keys.public();
                channel = ctx.ledger(|l| PaymentChannel::open(l, &me, &payee, pk, cfg.capacity, timeout)).ok();
                if let (Some(ch), Some(node)) = (&channel, nodes.get_mut(&cfg.id)) {
                    node.set_channel(PaymentChannel::watch(ch.escrow, me, payee, pk, ch.capacity));
                }
            }
            self.nodes.insert(
                cfg.id.clone(),
                NodeEntry { channel, resources: cfg.resources, busy: None, excluded: false, kh_cert: None },
            );
        }
    }

    pub fn add_client(&mut self, client: &super::client::Client) {
        let channel = client
            .channel()
            .map(|c| PaymentChannel::watch(c.escrow, c.payer.clone(), c.payee.clone(), c.payer_key, c.capacity));
        self.clients.insert(client.id.clone(), ClientEntry { channel, key: client.public_key(), open_task: None });
    }

    pub fn assigned_node(&self, task: TaskId) -> Option<String> {
        match self.tasks.get(&task) {
            Some(t) => t.node.clone(),
            None => self.baseline_assigned.get(&task).cloned(),
        }
    }

    fn schedule_epoch(&mut self, ctx: &mut Ctx) {
        if !self.epoch_scheduled {
            self.epoch_scheduled = true;
            ctx.after(ctx.cfg.epoch_interval, &self.id, Timer::Epoch);
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer, _nodes: &BTreeMap<String, Node>) {
        if timer != Timer::Epoch {
            return;
        }
        self.epoch_scheduled = false;
        match ctx.cfg.mode {
            Mode::Fair => self.fair_epoch(ctx),
            Mode::Baseline => self.baseline_epoch(ctx),
        }
    }

    fn fair_epoch(&mut self, ctx: &mut Ctx) {
        let pending: Vec<_> = self.pending.drain(..).map(|t| (t, self.tasks[&t].resources)).collect();
        let available: Vec<_> = self
            .nodes
            .iter()
            .filter(|(_, n)| n.busy.is_none() && !n.excluded)
            .filter(|(_, n)| {
                n.channel.as_ref().is_some_and(|c| {
                    c.is_active() && ctx.ledger.escrow(c.escrow).is_some_and(|e| e.state == EscrowState::Open)
                })
            })
            .map(|(id, n)| (id.clone(), n.resources))
            .collect();
        let result = epoch_assign(pending, available);
        self.pending = result.pending.into_iter().map(|(t, _)| t).collect();
        for (task, node) in result.pairs {
            self.nodes.get_mut(&node).expect("known node").busy = Some(task);
            self.tasks.get_mut(&task).expect("known task").phase = Phase::Locking(node.clone());
            ctx.send(&self.id, &node, Message::NodeLockRequest { task });
        }
    }

    fn baseline_epoch(&mut self, ctx: &mut Ctx) {
        let pending: Vec<_> =
            self.baseline_pending.drain(..).map(|(t, c)| ((t, c), ctx.cfg.tasks[t as usize].resources)).collect();
        let available: Vec<_> =
            self.nodes.iter().filter(|(_, n)| !n.excluded).map(|(id, n)| (id.clone(), n.resources)).collect();
        let result = epoch_assign(pending, available);
        self.baseline_pending = result.pending.into_iter().map(|(t, _)| t).collect();
        let matched = !result.pairs.is_empty();
        for ((task, client), node) in result.pairs {
            self.baseline_assigned.insert(task, node.clone());
            ctx.send(&self.id, &client, Message::BaselineMatch { task, node });
        }
        // Nodes are never busy here, so only capacity per epoch limits matching.
        if matched && !self.baseline_pending.is_empty() {
            self.schedule_epoch(ctx);
        }
    }

    pub fn handle(&mut self, ctx: &mut Ctx, from: &str, msg: Message, _nodes: &BTreeMap<String, Node>) {
        let fair = ctx.cfg.mode == Mode::Fair;
        match msg {
            Message::LockRequest { task } if self.clients.contains_key(from) => {
                let Some((_, am_cert)) = &self.manager else { return };
                let secret = *self.secrets.entry(task).or_insert_with(|| Preimage::random(ctx.rng));
                let reply = Message::LockReply { task, broker_lock: secret.lock(), am_certificate: am_cert.clone() };
                ctx.send(&self.id, from, reply);
            }
            Message::Submit { task, resources, package, key_envelope } if fair => {
                match self.accept_submission(from, task, resources, package, &key_envelope) {
                    Ok(()) => {
                        self.pending.push_back(task);
                        self.schedule_epoch(ctx);
                    }
                    Err(reason) => ctx.send(&self.id, from, Message::Rejected { task, reason }),
                }
            }
            Message::NodeLockReply { task, node_lock, key_handler } => {
                if self.tasks.get(&task).is_some_and(|t| t.phase == Phase::Locking(from.to_string())) {
                    self.dispatch(ctx, from, task, node_lock, &key_handler);
                }
            }
            Message::Progress { task, preimage, .. } if self.running_on(task, from) => {
                let revealed: Vec<Preimage> = preimage.into_iter().collect();
                self.settle(ctx, task, &revealed, &revealed, None);
            }
            Message::Settle { task, client_secret, node_secret } if self.running_on(task, from) => {
                let t = &self.tasks[&task];
                let valid =
                    client_secret.opens(&t.plan.client_lock) && t.node_lock.is_some_and(|l| node_secret.opens(&l));
                if valid {
                    let broker_secret = self.secrets[&task];
                    self.settle(
                        ctx,
                        task,
                        &[client_secret, broker_secret],
                        &[client_secret, node_secret],
                        Some(node_secret),
                    );
                }
            }
            Message::Delivery { task, output }
                if ctx.cfg.routing == Routing::ViaBroker && self.running_on(task, from) =>
            {
                let client = self.tasks[&task].client.clone();
                ctx.send(&self.id, &client, Message::Delivery { task, output });
            }
            Message::DeliveryResponse { task, client_secret } if ctx.cfg.routing == Routing::ViaBroker => {
                let Some(t) = self.tasks.get(&task) else { return };
                if let (Phase::Running(node), true) = (&t.phase, t.client == from) {
                    let node = node.clone();
                    ctx.send(&self.id, &node, Message::DeliveryResponse { task, client_secret });
                }
            }
            Message::BaselineRequest { task }
                if !fair
                    && self.clients.contains_key(from)
                    && (task as usize) < ctx.cfg.tasks.len()
                    && !self.baseline_assigned.contains_key(&task) =>
            {
                self.baseline_pending.push_back((task, from.to_string()));
                self.schedule_epoch(ctx);
            }
            _ => {}
        }
    }

    fn running_on(&self, task: TaskId, node: &str) -> bool {
        self.tasks.get(&task).is_some_and(|t| t.phase == Phase::Running(node.to_string()))
    }

    fn accept_submission(
        &mut self,
        client: &str,
        task: TaskId,
        resources: ResourceSpec,
        package: TaskPackage,
        key_envelope: &SecureEnvelope,
    ) -> Result<(), String> {
        let entry = self.clients.get_mut(client).ok_or("unknown client")?;
        if entry.open_task.is_some() || self.tasks.contains_key(&task) || package.task != task {
            return Err("task already open".into());
        }
        let secret = self.secrets.get(&task).ok_or("no broker lock issued")?;
        let aux = &package.aux;
        if aux.broker_lock != secret.lock() {
            return Err("wrong broker lock".into());
        }
        let ch = entry.channel.as_mut().filter(|c| c.is_active()).ok_or("no active channel")?;
        if aux.client_channel != ch.escrow {
            return Err("promises drawn on another channel".into());
        }
        if ch.headroom() < aux.value {
            return Err("channel capacity exceeded".into());
        }
        if aux.client_promises.len() != aux.locks.len() + 1 {
            return Err("delivery promise missing".into());
        }
        let plan = PaymentPlan::new(aux.value, aux.alpha, aux.locks.clone(), aux.client_lock, aux.broker_lock)
            .map_err(|e| e.to_string())?;
        crate::channel::check_client_schedule(&entry.key, ch.balance, &aux.client_promises, &plan)
            .map_err(|e| e.to_string())?;
        let (am, _) = self.manager.as_ref().ok_or("no attestation manager")?;
        let key = self.platform.am_receive_key(*am, key_envelope).map_err(|e| e.to_string())?;
        let client_base = ch.balance;
        ch.receive_round(&aux.client_promises).map_err(|e| e.to_string())?;
        entry.open_task = Some(task);
        self.tasks.insert(
            task,
            BrokerTask {
                client: client.to_string(),
                resources,
                package,
                key,
                client_base,
                plan,
                node_lock: None,
                node: None,
                phase: Phase::Pending,
            },
        );
        Ok(())
    }

    /// Certify the node's key handler, provision the task key and mirror the
    /// client's schedule onto the node channel.
    fn dispatch(
        &mut self,
        ctx: &mut Ctx,
        node: &str,
        task: TaskId,
        node_lock: Digest,
        kh: &crate::enclave::RemoteAttestation,
    ) {
        let entry = self.nodes.get_mut(node).expect("known node");
        let cert = match &entry.kh_cert {
            Some(c) => c.clone(),
            None => {
                let c = ctx.ias_verify(node, "key-handler", kh);
                entry.kh_cert = Some(c.clone());
                c
            }
        };
        let t = self.tasks.get_mut(&task).expect("known task");
        let client_key = self.clients[&t.client].key;
        let Some(ch) = entry.channel.as_mut() else { return };
        let mirrored = match ch.mirror_promises(
            &self.keys,
            &client_key,
            t.client_base,
            &t.package.aux.client_promises,
            &t.plan,
            node_lock,
        ) {
            Ok(p) => p,
            Err(e) => return self.requeue(ctx, node, task, e.to_string()),
        };
        let service_key = ctx.ias_key();
        let (am, _) = self.manager.as_ref().expect("dispatch runs in fair mode");
        let envelope = match self.platform.am_provision_key(*am, t.key, &cert, &kh_measurement(), &service_key) {
            Ok(env) => env,
            Err(e) => {
                ch.end_round();
                return self.requeue(ctx, node, task, e.to_string());
            }
        };
        ctx.enclave(&self.id, EnclaveEvent::KeyProvisioned { task, handler: cert.attestation.measurement });
        for p in &mirrored {
            ctx.promise(task, PromiseRole::Broker, p);
        }
        let mut package = t.package.clone();
        package.aux.node_lock = Some(node_lock);
        package.aux.node_channel = Some(ch.escrow);
        package.aux.broker_promises = mirrored;
        t.node_lock = Some(node_lock);
        t.node = Some(node.to_string());
        t.phase = Phase::Running(node.to_string());
        let client = t.client.clone();
        ctx.send(&self.id, node, Message::Dispatch { task, client: client.clone(), package, key_envelope: envelope });
        ctx.send(&self.id, &client, Message::Dispatched { task, node_lock });
    }

    /// Drop a node that cannot take work and put the task back.
    fn requeue(&mut self, ctx: &mut Ctx, node: &str, task: TaskId, reason: String) {
        ctx.enclave(&self.id, EnclaveEvent::ProvisionRefused { task, reason });
        let entry = self.nodes.get_mut(node).expect("known node");
        entry.excluded = true;
        entry.busy = None;
        self.tasks.get_mut(&task).expect("known task").phase = Phase::Pending;
        self.pending.push_front(task);
        self.schedule_epoch(ctx);
    }

    /// Settle the client round with `client_side` and the node round with
    /// `node_side`; a side with nothing claimable is abandoned at its base.
    fn settle(
        &mut self,
        ctx: &mut Ctx,
        task: TaskId,
        client_side: &[Preimage],
        node_side: &[Preimage],
        node_secret: Option<Preimage>,
    ) {
        let t = self.tasks.get_mut(&task).expect("known task");
        let Phase::Running(node) = std::mem::replace(&mut t.phase, Phase::Done) else { return };
        self.known.extend(client_side.iter().chain(node_side));
        let client = self.clients.get_mut(&t.client).expect("known client");
        client.open_task = None;
        if let Some(ch) = client.channel.as_mut() {
            settle_or_end(ch, client_side);
        }
        let entry = self.nodes.get_mut(&node).expect("known node");
        entry.busy = None;
        if let Some(ch) = entry.channel.as_mut() {
            settle_or_end(ch, node_side);
        }
        let revealed = client_side.to_vec();
        ctx.send(&self.id, &t.client, Message::Settled { task, revealed, node_secret });
        if !self.pending.is_empty() {
            self.schedule_epoch(ctx);
        }
    }

    /// Terminal phase: learn what nodes revealed on the ledger, resolve the
    /// client rounds that stalled, and close each client channel at no more
    /// than its settled balance.
    pub fn close_at_end(&mut self, ctx: &mut Ctx) {
        for entry in self.nodes.values_mut() {
            let Some(ch) = entry.channel.as_mut() else { continue };
            let closed = ctx
                .ledger
                .log()
                .iter()
                .any(|tx| matches!(&tx.kind, TxKind::CloseEscrow { escrow, .. } if *escrow == ch.escrow));
            if closed {
                if let Ok(pre) = ctx.ledger.read_revealed_preimages(ch.escrow) {
                    self.known.extend(pre.iter());
                }
                ch.state = crate::channel::ChannelState::Closed;
            }
        }
        let stalled: Vec<TaskId> =
            self.tasks.iter().filter(|(_, t)| matches!(t.phase, Phase::Running(_))).map(|(id, _)| *id).collect();
        for task in stalled {
            let t = self.tasks.get_mut(&task).expect("known task");
            t.phase = Phase::Done;
            let mut revealed: Vec<Preimage> = t.plan.locks.iter().filter_map(|l| self.known.get(l)).collect();
            if let Some(s) = self.known.get(&t.plan.client_lock) {
                revealed.extend([s, self.secrets[&task]]);
            }
            if let Some(ch) = self.clients.get_mut(&t.client).and_then(|c| c.channel.as_mut()) {
                settle_or_end(ch, &revealed);
            }
        }
        for s in self.secrets.values() {
            self.known.insert(*s);
        }
        let fee = ctx.ledger.fee();
        for entry in self.clients.values_mut() {
            let Some(ch) = entry.channel.as_mut().filter(|c| c.is_active()) else { continue };
            let best = ch
                .issued
                .iter()
                .filter(|p| p.value <= ch.balance && p.value >= fee)
                .filter_map(|p| p.opening(&self.known).map(|pre| (p.clone(), pre)))
                .max_by_key(|(p, _)| (p.value, p.sequence));
            if let Some((p, pre)) = best {
                let _ = ctx.ledger(|l| ch.close(l, &p, &pre));
            }
        }
    }
}

fn settle_or_end(ch: &mut PaymentChannel, revealed: &[Preimage]) {
    let known: KnownPreimages = revealed.iter().collect();
    if known.is_empty() || ch.settle_off_chain(&known).is_err() {
        ch.end_round();
    }
}
