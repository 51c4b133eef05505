//! Event loop, terminal phase and outcome extraction.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::broker::Broker;
use super::client::Client;
use super::config::{Mode, ScenarioConfig};
use super::message::{Message, TaskId};
use super::network::{Packet, SimNetwork};
use super::node::Node;
use super::trace::{key_fingerprint, EnclaveEvent, PromiseRole, TaskOutcome, TraceRecord, TRACE_VERSION};
use super::verdict::{self, Verdict};
use super::ProtocolError;
use crate::channel::PaymentPromise;
use crate::crypto::{self, KeyPair, PublicKey};
use crate::enclave::{vm, AttestationCertificate, AttestationService, GuestProgram, RemoteAttestation};
use crate::ledger::{EscrowId, Ledger, PartyId, TxKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Timer {
    Submit(TaskId),
    Epoch,
    ResponseTimeout(TaskId),
    /// Baseline client stops waiting for an output.
    GiveUp(TaskId),
}

enum Event {
    Packet(Packet),
    Timer { actor: String, timer: Timer },
}

/// What a handler may touch besides its own actor state.
pub(crate) struct Ctx<'a> {
    pub now: u64,
    pub cfg: &'a ScenarioConfig,
    pub ledger: &'a mut Ledger,
    pub rng: &'a mut ChaCha20Rng,
    ias: &'a mut AttestationService,
    trace: &'a mut Vec<TraceRecord>,
    outbox: &'a mut Vec<(String, String, Message)>,
    timers: &'a mut Vec<(u64, String, Timer)>,
}

impl Ctx<'_> {
    pub fn send(&mut self, from: &str, to: &str, msg: Message) {
        self.outbox.push((from.to_string(), to.to_string(), msg));
    }

    pub fn after(&mut self, delay: u64, actor: &str, timer: Timer) {
        self.timers.push((delay, actor.to_string(), timer));
    }

    /// Run one ledger operation and record the transaction it produced.
    pub fn ledger<R>(&mut self, op: impl FnOnce(&mut Ledger) -> R) -> R {
        let before = self.ledger.log().len();
        let out = op(self.ledger);
        let snapshot = self.ledger.snapshot();
        for tx in &self.ledger.log()[before..] {
            self.trace.push(TraceRecord::Ledger { time: self.now, tx: tx.clone(), snapshot: snapshot.clone() });
        }
        out
    }

    pub fn enclave(&mut self, platform: &str, event: EnclaveEvent) {
        self.trace.push(TraceRecord::Enclave { time: self.now, platform: platform.to_string(), event });
    }

    pub fn promise(&mut self, task: TaskId, role: PromiseRole, promise: &PaymentPromise) {
        self.trace.push(TraceRecord::Promise { time: self.now, task, role, promise: promise.clone() });
    }

    pub fn accuse(&mut self, task: TaskId, node: &str, reason: &str) {
        self.trace.push(TraceRecord::Accusation {
            time: self.now,
            task,
            node: node.to_string(),
            reason: reason.to_string(),
        });
    }

    pub fn ias_key(&self) -> PublicKey {
        self.ias.public_key()
    }

    /// One call to the attestation service, recorded in the trace.
    pub fn ias_verify(
        &mut self,
        platform: &str,
        role: &str,
        attestation: &RemoteAttestation,
    ) -> AttestationCertificate {
        let cert = self.ias.verify(attestation);
        self.enclave(
            platform,
            EnclaveEvent::ServiceVerification {
                role: role.to_string(),
                measurement: attestation.measurement,
                validity: cert.validity,
            },
        );
        cert
    }

    pub fn register_platform(&mut self, platform: &crate::enclave::Platform) {
        self.ias.register(platform);
    }

    pub fn height(&self) -> u64 {
        self.ledger.height()
    }
}

struct World {
    ledger: Ledger,
    ias: AttestationService,
    rng: ChaCha20Rng,
    trace: Vec<TraceRecord>,
    outbox: Vec<(String, String, Message)>,
    timers: Vec<(u64, String, Timer)>,
}

impl World {
    fn ctx<'a>(&'a mut self, now: u64, cfg: &'a ScenarioConfig) -> Ctx<'a> {
        Ctx {
            now,
            cfg,
            ledger: &mut self.ledger,
            rng: &mut self.rng,
            ias: &mut self.ias,
            trace: &mut self.trace,
            outbox: &mut self.outbox,
            timers: &mut self.timers,
        }
    }
}

struct Actors {
    broker: Broker,
    clients: BTreeMap<String, Client>,
    nodes: BTreeMap<String, Node>,
}

/// Trace plus verdict of one run.
#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub records: Vec<TraceRecord>,
    pub verdict: Verdict,
}

impl ScenarioResult {
    pub fn trace_text(&self) -> String {
        super::trace::trace_to_string(&self.records)
    }

    pub fn outcomes(&self) -> Vec<&TaskOutcome> {
        self.records
            .iter()
            .filter_map(|r| match r {
                TraceRecord::Outcome(o) => Some(o),
                _ => None,
            })
            .collect()
    }

    pub fn service_calls(&self) -> usize {
        self.records
            .iter()
            .filter(|r| matches!(r, TraceRecord::Enclave { event: EnclaveEvent::ServiceVerification { .. }, .. }))
            .count()
    }

    /// On-ledger transactions touching each escrow.
    pub fn transactions_per_escrow(&self) -> BTreeMap<u64, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            if let TraceRecord::Ledger { tx, .. } = r {
                *m.entry(tx.kind.escrow().0).or_insert(0) += 1;
            }
        }
        m
    }
}

/// Run `cfg` under `seed` (which replaces `cfg.seed`) to completion.
pub fn run_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<ScenarioResult, ProtocolError> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let mut sim = Simulation::new(cfg)?;
    sim.run();
    let records = sim.finish();
    let verdict = verdict::evaluate(&records);
    Ok(ScenarioResult { records, verdict })
}

struct Simulation {
    cfg: ScenarioConfig,
    now: u64,
    world: World,
    actors: Actors,
    net: SimNetwork<Event>,
}

impl Simulation {
    fn new(cfg: ScenarioConfig) -> Result<Self, ProtocolError> {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let ias = AttestationService::new(KeyPair::generate(&mut rng));
        let net_rng = ChaCha20Rng::from_seed(rng.gen());
        let node_ids: Vec<String> = cfg.nodes.iter().map(|n| n.id.clone()).collect();
        let net = SimNetwork::new(cfg.latency, cfg.adversary.clone(), node_ids.clone(), net_rng);
        let genesis = cfg.genesis();
        let ledger = Ledger::new(cfg.fee, genesis.iter().map(|(k, v)| (PartyId::new(k.clone()), *v)));

        let mut programs = BTreeMap::new();
        for name in cfg.programs.keys() {
            let src = cfg
                .program_source(name)
                .ok_or_else(|| ProtocolError::Config(format!("program `{name}` has no source loaded")))?;
            let code = vm::assemble(src).map_err(|e| ProtocolError::Config(format!("program `{name}`: {e}")))?;
            programs.insert(name.clone(), code);
        }

        let mut world = World { ledger, ias, rng, trace: Vec::new(), outbox: Vec::new(), timers: Vec::new() };
        world.trace.push(TraceRecord::Header {
            version: TRACE_VERSION,
            seed: cfg.seed,
            mode: cfg.mode,
            fee: cfg.fee,
            broker: cfg.broker.id.clone(),
            clients: cfg.clients.iter().map(|c| c.id.clone()).collect(),
            nodes: node_ids,
            genesis,
            config_digest: crypto::hash(cfg.to_json().as_bytes()),
        });

        let actors = {
            let mut ctx = world.ctx(0, &cfg);
            let mut broker = Broker::new(&mut ctx);
            let mut nodes = BTreeMap::new();
            for n in &cfg.nodes {
                let node = Node::new(&mut ctx, n);
                ctx.ias.register(node.platform());
                nodes.insert(n.id.clone(), node);
            }
            broker.start(&mut ctx, &mut nodes);
            let mut clients = BTreeMap::new();
            for c in &cfg.clients {
                let mut client = Client::new(&mut ctx, c);
                for (i, t) in cfg.tasks.iter().enumerate().filter(|(_, t)| t.client == c.id) {
                    let guest = GuestProgram::new(programs[&t.program].clone(), t.steps);
                    client.add_task(i as TaskId, t, guest);
                }
                broker.add_client(&client);
                client.start(&mut ctx);
                clients.insert(c.id.clone(), client);
            }
            Actors { broker, clients, nodes }
        };
        let mut sim = Self { cfg, now: 0, world, actors, net };
        sim.flush();
        Ok(sim)
    }

    fn flush(&mut self) {
        for (from, to, msg) in std::mem::take(&mut self.world.outbox) {
            let bytes = msg.to_bytes();
            let packet = Packet { from, to, bytes };
            let s = self.net.transmit(self.now, &packet, msg.kind());
            self.world.trace.push(TraceRecord::Message {
                time: self.now,
                from: packet.from.clone(),
                to: packet.to.clone(),
                kind: msg.kind().to_string(),
                fate: s.fate,
                deliver_at: s.deliver_at,
                payload: String::from_utf8_lossy(&s.bytes).into_owned(),
            });
            if let Some(at) = s.deliver_at {
                self.net.schedule(at, Event::Packet(Packet { bytes: s.bytes, ..packet }));
            }
        }
        for (delay, actor, timer) in std::mem::take(&mut self.world.timers) {
            self.net.schedule(self.now + delay, Event::Timer { actor, timer });
        }
    }

    fn run(&mut self) {
        while let Some((t, event)) = self.net.pop() {
            if t > self.cfg.horizon {
                self.net.clear();
                break;
            }
            self.now = t;
            let height = t / self.cfg.ticks_per_block;
            if height > self.world.ledger.height() {
                let _ = self.world.ledger.advance_height(height - self.world.ledger.height());
            }
            let Self { cfg, world, actors, .. } = self;
            let mut ctx = world.ctx(t, cfg);
            let broker_id = cfg.broker.id.as_str();
            match event {
                Event::Packet(p) => {
                    // Unparseable bytes are simply lost.
                    if let Some(msg) = Message::from_bytes(&p.bytes) {
                        if p.to == broker_id {
                            actors.broker.handle(&mut ctx, &p.from, msg, &actors.nodes);
                        } else if let Some(c) = actors.clients.get_mut(&p.to) {
                            c.handle(&mut ctx, &p.from, msg);
                        } else if let Some(n) = actors.nodes.get_mut(&p.to) {
                            n.handle(&mut ctx, &p.from, msg);
                        }
                    }
                }
                Event::Timer { actor, timer } => {
                    if actor == broker_id {
                        actors.broker.on_timer(&mut ctx, timer, &actors.nodes);
                    } else if let Some(c) = actors.clients.get_mut(&actor) {
                        c.on_timer(&mut ctx, timer);
                    } else if let Some(n) = actors.nodes.get_mut(&actor) {
                        n.on_timer(&mut ctx, timer);
                    }
                }
            }
            self.flush();
        }
    }

    /// Terminal phase: nodes close, the broker resolves and closes, clients
    /// read the ledger, and every remaining escrow is refunded.
    fn finish(mut self) -> Vec<TraceRecord> {
        let now = self.now;
        {
            let Self { cfg, world, actors, .. } = &mut self;
            let mut ctx = world.ctx(now, cfg);
            if cfg.mode == Mode::Fair {
                for node in actors.nodes.values_mut() {
                    node.close_at_end(&mut ctx);
                }
                actors.broker.close_at_end(&mut ctx);
            }
            for client in actors.clients.values_mut() {
                client.read_ledger_at_end(&mut ctx);
            }
            let last_timeout = ctx.ledger.escrows().map(|e| e.timeout).max().unwrap_or(0);
            if last_timeout >= ctx.ledger.height() {
                let _ = ctx.ledger.advance_height(last_timeout - ctx.ledger.height() + 1);
            }
            let open: Vec<EscrowId> =
                ctx.ledger.escrows().filter(|e| e.state == crate::ledger::EscrowState::Open).map(|e| e.id).collect();
            for id in open {
                let _ = ctx.ledger(|l| l.refund_after_timeout(id));
            }
        }
        self.world.outbox.clear();
        self.world.timers.clear();

        let outcomes = self.outcomes();
        let mut trace = std::mem::take(&mut self.world.trace);
        trace.extend(outcomes.into_iter().map(TraceRecord::Outcome));
        let mut fingerprints = Vec::new();
        for c in self.actors.clients.values() {
            fingerprints.extend(c.task_keys().map(key_fingerprint));
        }
        let mut channels = BTreeMap::new();
        for c in self.actors.clients.values() {
            if let Some(e) = c.channel_escrow() {
                channels.insert(c.id.clone(), e);
            }
        }
        for n in self.actors.nodes.values() {
            if let Some(e) = n.channel_escrow() {
                channels.insert(n.id.clone(), e);
            }
        }
        trace.push(TraceRecord::Audit { key_fingerprints: fingerprints, channels });
        let records = trace.len() as u64 + 1;
        trace.push(TraceRecord::End { records });
        trace
    }

    /// Final close value of an escrow, or `None` if it was refunded or is open.
    fn close_value(&self, escrow: EscrowId) -> Option<u64> {
        self.world.ledger.log().iter().find_map(|tx| match &tx.kind {
            TxKind::CloseEscrow { escrow: e, value, .. } if *e == escrow => Some(*value),
            _ => None,
        })
    }

    fn outcomes(&self) -> Vec<TaskOutcome> {
        let mut out = Vec::new();
        for (i, t) in self.cfg.tasks.iter().enumerate() {
            let task = i as TaskId;
            let client = &self.actors.clients[&t.client];
            let ct = client.task(task);
            let work_value = crate::channel::Alpha::from_f64(t.alpha).map_or(0, |a| a.apply(t.value));
            let mut o = TaskOutcome {
                task,
                client: t.client.clone(),
                node: None,
                status: String::new(),
                value: t.value,
                work_value,
                n: t.n,
                declared_steps: t.steps,
                counter: None,
                completed: false,
                client_decrypted: ct.decrypted.is_some(),
                output_correct: ct.decrypted.as_ref().map(|d| Some(d) == ct.expected_output.as_ref()),
                node_able_full: false,
                node_paid_full: false,
                node_compute_claimable: 0,
                node_earned: 0,
                client_paid: 0,
            };
            let node_id = match self.cfg.mode {
                Mode::Fair => self.actors.broker.assigned_node(task),
                Mode::Baseline => ct.node.clone(),
            };
            if let Some(node) = node_id.as_ref().and_then(|n| self.actors.nodes.get(n)) {
                o.node = Some(node.id.clone());
                if let Some(nt) = node.task(task) {
                    o.counter = nt.report.map(|r| r.counter);
                    o.completed = nt.report.is_some_and(|r| r.completed);
                    o.node_able_full = nt.able_full;
                    match self.cfg.mode {
                        Mode::Fair => {
                            o.node_compute_claimable = node.compute_claimable(task);
                            let close = node.channel_escrow().and_then(|e| self.close_value(e));
                            o.node_earned = node.earned(task, close);
                            o.node_paid_full = o.node_earned >= t.value;
                        }
                        Mode::Baseline => {
                            o.node_compute_claimable = if nt.able_full { t.value } else { 0 };
                            o.node_earned = if nt.claimed { t.value } else { 0 };
                            o.node_paid_full = nt.claimed;
                        }
                    }
                }
            }
            o.client_paid = match self.cfg.mode {
                Mode::Fair => client.paid(task, client.channel_escrow().and_then(|e| self.close_value(e))),
                Mode::Baseline => ct.escrow.and_then(|e| self.close_value(e)).unwrap_or(0),
            };
            o.status = if let Some(f) = &ct.fate {
                f.clone()
            } else if !ct.submitted {
                "not_submitted".into()
            } else if o.client_decrypted {
                "delivered".into()
            } else if o.completed {
                "undelivered".into()
            } else if o.counter.is_some() {
                "interrupted".into()
            } else if o.node.is_some() {
                "failed".into()
            } else {
                "pending".into()
            };
            out.push(o);
        }
        out
    }
}

/// Share of a cumulative channel close attributed to one task's round.
///
/// `rounds` lists `(task, base)` in issue order. Earlier rounds keep the
/// increment up to the next round's base, the closing round gets the rest,
/// and a refunded channel pays nothing.
pub(crate) fn round_share(rounds: &[(TaskId, u64)], task: TaskId, close: Option<u64>) -> u64 {
    let Some(value) = close else { return 0 };
    let Some(pos) = rounds.iter().position(|(t, _)| *t == task) else { return 0 };
    let base = rounds[pos].1;
    let cap = rounds.get(pos + 1).map_or(u64::MAX, |(_, next)| next - base);
    value.saturating_sub(base).min(cap)
}
