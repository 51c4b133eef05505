//! Scenario configuration (JSON).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ProtocolError;
use crate::channel::Alpha;
use crate::matching::ResourceSpec;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Split payments over channels with delegated attestation.
    #[default]
    Fair,
    /// One escrow per task, paid on completion, attested per task.
    Baseline,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    #[default]
    Direct,
    ViaBroker,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeBehavior {
    #[default]
    Honest,
    /// Host interrupts the enclave after `step` instructions.
    AbortAtStep { step: u64 },
    /// Never sends the encrypted output; settles the compute part only.
    WithholdOutput,
    /// After learning `rand_P`, keeps `rand_C` to itself until the final close.
    HoldSecret,
    /// After learning `rand_P`, closes on-chain with the delivery promise at once.
    CloseOnChain,
    /// After learning `rand_P`, closes on-chain with the last compute promise only.
    ClaimComputeOnly,
    /// Closes with the lowest claimable promise instead of the highest.
    ReplayPromise,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientBehavior {
    #[default]
    Honest,
    /// Answers a delivery with a random value instead of `rand_P`.
    BadRand,
    /// Never answers a delivery.
    Silent,
}

/// Single-byte modification of an enclave code image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeTamper {
    /// Taken modulo the image length.
    pub offset: usize,
    pub mask: u8,
}

impl CodeTamper {
    pub fn apply(&self, code: &[u8]) -> Vec<u8> {
        let mut out = code.to_vec();
        if !out.is_empty() {
            let i = self.offset % out.len();
            out[i] ^= self.mask.max(1);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerConfig {
    pub id: String,
    pub funds: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tamper_am: Option<CodeTamper>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub id: String,
    pub funds: u64,
    /// Deposit of the client-to-broker channel.
    pub capacity: u64,
    #[serde(default)]
    pub behavior: ClientBehavior,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub id: String,
    #[serde(default)]
    pub funds: u64,
    /// Deposit of the broker-to-node channel, paid by the broker.
    pub capacity: u64,
    pub resources: ResourceSpec,
    #[serde(default)]
    pub behavior: NodeBehavior,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tamper_kh: Option<CodeTamper>,
    /// The host modifies each execution enclave image before loading it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tamper_program: Option<CodeTamper>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgramConfig {
    /// Assembly file, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub client: String,
    pub program: String,
    #[serde(default)]
    pub input: Vec<i64>,
    pub value: u64,
    pub alpha: f64,
    pub n: usize,
    /// Declared step budget `N_total`.
    pub steps: u64,
    #[serde(default)]
    pub resources: ResourceSpec,
    /// Earliest tick the client submits this task.
    #[serde(default)]
    pub submit_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum LinkAction {
    Drop,
    Delay {
        ticks: u64,
    },
    /// Random extra delay in `0..=window`, which reorders messages.
    Reorder {
        window: u64,
    },
    /// Flip one byte of the serialized message.
    Tamper,
}

/// Adversarial control over a link touching a compute node. `"*"` matches
/// any endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkPolicy {
    pub from: String,
    pub to: String,
    #[serde(flatten)]
    pub action: LinkAction,
    /// Message kinds affected; empty means all.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub messages: Vec<String>,
    #[serde(default = "one")]
    pub probability: f64,
}

fn one() -> f64 {
    1.0
}

fn default_fee() -> u64 {
    crate::ledger::DEFAULT_FEE
}

fn default_timeout() -> u64 {
    1_000_000
}

fn default_ticks_per_block() -> u64 {
    10
}

fn default_response_timeout() -> u64 {
    50
}

fn default_epoch() -> u64 {
    5
}

fn default_latency() -> u64 {
    1
}

fn default_horizon() -> u64 {
    1_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_fee")]
    pub fee: u64,
    #[serde(default)]
    pub routing: Routing,
    /// Escrow timeout, in ledger blocks.
    #[serde(default = "default_timeout")]
    pub escrow_timeout: u64,
    #[serde(default = "default_ticks_per_block")]
    pub ticks_per_block: u64,
    /// Ticks a node waits for the client's answer to a delivery.
    #[serde(default = "default_response_timeout")]
    pub response_timeout: u64,
    /// Ticks between matching epochs.
    #[serde(default = "default_epoch")]
    pub epoch_interval: u64,
    #[serde(default = "default_latency")]
    pub latency: u64,
    /// Events after this tick are discarded and the terminal phase begins.
    #[serde(default = "default_horizon")]
    pub horizon: u64,
    pub broker: BrokerConfig,
    pub clients: Vec<ClientConfig>,
    pub nodes: Vec<NodeConfig>,
    pub programs: BTreeMap<String, ProgramConfig>,
    pub tasks: Vec<TaskConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adversary: Vec<LinkPolicy>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ProtocolError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ProtocolError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Read a config file and inline any program files it references.
    pub fn load(path: &Path) -> Result<Self, ProtocolError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ProtocolError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for (name, program) in cfg.programs.iter_mut() {
            if program.source.is_none() {
                let file = program
                    .file
                    .as_ref()
                    .ok_or_else(|| ProtocolError::Config(format!("program `{name}` has neither file nor source")))?;
                let p = dir.join(file);
                let src =
                    std::fs::read_to_string(&p).map_err(|e| ProtocolError::Config(format!("{}: {e}", p.display())))?;
                program.source = Some(src);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let err = |m: String| Err(ProtocolError::Config(m));
        let mut ids = BTreeSet::new();
        ids.insert(self.broker.id.as_str());
        for id in self.clients.iter().map(|c| &c.id).chain(self.nodes.iter().map(|n| &n.id)) {
            if id == "*" || !ids.insert(id.as_str()) {
                return err(format!("duplicate or reserved actor id `{id}`"));
            }
        }
        if self.ticks_per_block == 0 || self.latency == 0 {
            return err("ticks_per_block and latency must be positive".into());
        }
        if self.fee == 0 {
            return err("fee must be positive".into());
        }
        let node_capacity: u64 = self.nodes.iter().map(|n| n.capacity + self.fee).sum();
        if self.mode == Mode::Fair && node_capacity > self.broker.funds {
            return err(format!("broker funds {} cannot cover node channels {node_capacity}", self.broker.funds));
        }
        for c in &self.clients {
            if self.mode == Mode::Fair && c.capacity + self.fee > c.funds {
                return err(format!("client `{}` cannot fund its channel", c.id));
            }
        }
        for (name, p) in &self.programs {
            if p.source.is_none() && p.file.is_none() {
                return err(format!("program `{name}` has neither file nor source"));
            }
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if !self.clients.iter().any(|c| c.id == t.client) {
                return err(format!("task {i}: unknown client `{}`", t.client));
            }
            if !self.programs.contains_key(&t.program) {
                return err(format!("task {i}: unknown program `{}`", t.program));
            }
            if t.n == 0 || t.steps == 0 || t.value == 0 {
                return err(format!("task {i}: n, steps and value must be positive"));
            }
            if Alpha::from_f64(t.alpha).is_none() {
                return err(format!("task {i}: alpha {} outside [0, 1]", t.alpha));
            }
        }
        for (i, p) in self.adversary.iter().enumerate() {
            for end in [&p.from, &p.to] {
                if end != "*" && !ids.contains(end.as_str()) {
                    return err(format!("adversary policy {i}: unknown actor `{end}`"));
                }
            }
            let is_node = |e: &String| self.nodes.iter().any(|n| &n.id == e);
            if p.from != "*" && p.to != "*" && !is_node(&p.from) && !is_node(&p.to) {
                return err(format!("adversary policy {i}: link {} -> {} does not touch a compute node", p.from, p.to));
            }
            if !(0.0..=1.0).contains(&p.probability) {
                return err(format!("adversary policy {i}: probability outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn program_source(&self, name: &str) -> Option<&str> {
        self.programs.get(name).and_then(|p| p.source.as_deref())
    }

    pub fn genesis(&self) -> BTreeMap<String, u64> {
        let mut g = BTreeMap::new();
        g.insert(self.broker.id.clone(), self.broker.funds);
        for c in &self.clients {
            g.insert(c.id.clone(), c.funds);
        }
        for n in &self.nodes {
            g.insert(n.id.clone(), n.funds);
        }
        g
    }

    /// One client and one node running `tasks` copies of the sum program,
    /// each split into `n` compute promises. Handy starting point for
    /// tests and adversarial variations.
    pub fn sample(tasks: usize, n: usize) -> Self {
        let capacity = 100 * tasks as u64 + 1_000;
        let mut programs = BTreeMap::new();
        programs.insert(
            "sum".to_string(),
            ProgramConfig { file: None, source: Some(crate::enclave::vm::SUM_PROGRAM.to_string()) },
        );
        Self {
            seed: 0,
            mode: Mode::Fair,
            fee: default_fee(),
            routing: Routing::Direct,
            escrow_timeout: default_timeout(),
            ticks_per_block: default_ticks_per_block(),
            response_timeout: default_response_timeout(),
            epoch_interval: default_epoch(),
            latency: default_latency(),
            horizon: default_horizon(),
            broker: BrokerConfig { id: "broker".into(), funds: 2 * capacity + 1_000, tamper_am: None },
            clients: vec![ClientConfig {
                id: "alice".into(),
                funds: 2 * capacity,
                capacity,
                behavior: ClientBehavior::Honest,
            }],
            nodes: vec![NodeConfig {
                id: "n1".into(),
                funds: 0,
                capacity,
                resources: ResourceSpec::new(4, 4),
                behavior: NodeBehavior::Honest,
                tamper_kh: None,
                tamper_program: None,
            }],
            programs,
            tasks: (0..tasks)
                .map(|i| TaskConfig {
                    client: "alice".into(),
                    program: "sum".into(),
                    input: (1..=5).map(|x| x * (i as i64 + 1)).collect(),
                    value: 100,
                    alpha: 0.6,
                    n,
                    // The sum program over five words runs exactly this long.
                    steps: 68,
                    resources: ResourceSpec::new(2, 2),
                    submit_at: 0,
                })
                .collect(),
            adversary: Vec::new(),
        }
    }
}
