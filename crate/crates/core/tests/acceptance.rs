//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Lines are written straight to the process stdout so they show up without
//! `--nocapture`.

mod support;

use std::io::Write;
use std::time::{Duration, Instant};

use fairmarket::channel::SettlingData;
use fairmarket::cli::main_with;
use fairmarket::crypto::{KeyPair, Preimage, SymmetricKey};
use fairmarket::enclave::vm::SUM_PROGRAM;
use fairmarket::enclave::{
    encrypt_input, encrypt_settling, kh_measurement, AttestationService, ExecutionRequest, GuestProgram, KeyBundle,
    Platform, AM_CODE, KH_CODE,
};
use fairmarket::matching::{max_matching, random_graph};
use fairmarket::protocol::verdict::{ATOMICITY, CONFINEMENT, CONSERVATION, PROPORTIONALITY, SOLVENCY};
use fairmarket::protocol::{
    abort_sweep, adversarial_scenario, run_scenario, CodeTamper, EnclaveEvent, Mode, NodeBehavior, ScenarioConfig,
    ScenarioResult, TraceRecord,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

struct Report {
    lines: Vec<(String, bool)>,
    /// Every scenario run so far, for the conservation criterion.
    runs: usize,
    conservation_failures: Vec<String>,
}

impl Report {
    fn record(&mut self, id: u32, name: &str, passed: bool, detail: String) {
        let line = format!("criterion {id:>2} {:<4} {name}: {detail}\n", if passed { "PASS" } else { "FAIL" });
        std::io::stdout().write_all(line.as_bytes()).unwrap();
        self.lines.push((name.to_string(), passed));
    }

    /// Run a scenario and check conservation from the raw ledger snapshots,
    /// independently of the verdict.
    fn run(&mut self, cfg: &ScenarioConfig, seed: u64) -> ScenarioResult {
        let r = run_scenario(cfg, seed).unwrap();
        self.runs += 1;
        let genesis: u64 = r
            .records
            .iter()
            .find_map(|rec| match rec {
                TraceRecord::Header { genesis, .. } => Some(genesis.values().sum()),
                _ => None,
            })
            .unwrap();
        for rec in &r.records {
            if let TraceRecord::Ledger { snapshot, time, .. } = rec {
                let total = snapshot.balances.values().sum::<u64>() + snapshot.open_deposits + snapshot.fee_sink;
                if total != genesis {
                    self.conservation_failures.push(format!("seed {seed} t={time}: {total} != {genesis}"));
                }
            }
        }
        if !r.verdict.passed(CONSERVATION) {
            self.conservation_failures.push(format!("seed {seed}: verdict flags conservation"));
        }
        r
    }
}

fn first(items: &[String]) -> String {
    items.first().map_or(String::new(), |f| format!("; first: {f}"))
}

/// Criterion 1 is recorded here; criterion 3's line is returned so the
/// report stays in order.
fn c1_c3_adversarial(rep: &mut Report) -> (bool, String) {
    let start = Instant::now();
    let (mut atomic_bad, mut solvency_bad, mut outcomes) = (Vec::new(), Vec::new(), 0);
    for seed in 0..1000u64 {
        let cfg = adversarial_scenario(seed);
        let r = rep.run(&cfg, seed);
        let (mut paid_in, mut paid_out) = (0u64, 0u64);
        for o in r.outcomes() {
            outcomes += 1;
            let a = !o.client_decrypted || o.node_able_full;
            let b = o.node_earned <= o.work_value || o.client_decrypted;
            if !(a && b) {
                atomic_bad.push(format!("seed {seed} task {}", o.task));
            }
            paid_in += o.client_paid;
            paid_out += o.node_earned;
        }
        if !r.verdict.passed(ATOMICITY) && atomic_bad.last().is_none_or(|l| !l.starts_with(&format!("seed {seed} "))) {
            atomic_bad.push(format!("seed {seed}: verdict"));
        }
        if !r.verdict.passed(SOLVENCY) || paid_in < paid_out {
            solvency_bad.push(format!("seed {seed}: in {paid_in} out {paid_out}"));
        }
    }
    let elapsed = start.elapsed();
    rep.record(
        1,
        "fair-exchange atomicity",
        atomic_bad.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} violations over 1000 scenarios ({outcomes} tasks) in {:.1}s{}",
            atomic_bad.len(),
            elapsed.as_secs_f64(),
            first(&atomic_bad)
        ),
    );
    (solvency_bad.is_empty(), format!("{} insolvent terminal states{}", solvency_bad.len(), first(&solvency_bad)))
}

fn c2_proportionality(rep: &mut Report) {
    // v_c = 600, so each of the 10 compute promises is worth 60.
    let (n, total, value, alpha) = (10usize, 1000u64, 1000u64, 0.6);
    let points = abort_sweep(n, total, value, alpha, 0..=total).unwrap();
    let mut bad = Vec::new();
    for p in &points {
        let c = p.abort_at;
        let expected = (c * 10 / 1000) * (600 / 10);
        if p.counter != Some(c) || p.claimable != expected {
            bad.push(format!("c={c}: counter {:?} claimable {} expected {expected}", p.counter, p.claimable));
        }
    }
    rep.runs += points.len();
    for p in points.iter().filter(|p| !p.conserved) {
        rep.conservation_failures.push(format!("abort sweep c={}", p.abort_at));
    }
    rep.record(
        2,
        "metered proportionality",
        bad.is_empty() && points.len() == 1001,
        format!("{} of {} abort points off{}", bad.len(), points.len(), first(&bad)),
    );
}

fn c4_matching_oracle(rep: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let densities = [0.2, 0.5, 0.8, 0.9];
    let mut mismatches = Vec::new();
    for i in 0..1000 {
        let (p, q) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let g = random_graph(&mut rng, p, q, densities[i % 4]);
        let edges: Vec<_> = g.edges().collect();
        let hk = max_matching(&g);
        let oracle = support::brute_force_matching_size(p, q, &edges);
        if hk.len() != oracle || !hk.is_valid_for(&g) {
            mismatches.push(format!("graph {i}: {} vs {oracle}", hk.len()));
        }
    }
    let elapsed = start.elapsed();
    rep.record(
        4,
        "matching oracle equivalence",
        mismatches.is_empty() && elapsed < Duration::from_secs(30),
        format!(
            "{} mismatches on 1000 graphs in {:.2}s{}",
            mismatches.len(),
            elapsed.as_secs_f64(),
            first(&mismatches)
        ),
    );
}

fn c5_two_transactions(rep: &mut Report) {
    let cfg = ScenarioConfig::sample(5, 100);
    let r = rep.run(&cfg, 5);
    let per_channel = r.transactions_per_escrow();
    let delivered = r.outcomes().iter().filter(|o| o.status == "delivered").count();
    rep.record(
        5,
        "two-transaction bound",
        !per_channel.is_empty() && per_channel.values().all(|&t| t == 2) && delivered == 5,
        format!("{delivered}/5 tasks delivered, on-chain txs per channel {per_channel:?}"),
    );
}

fn c6_attestation_economy(rep: &mut Report) {
    let mut cfg = ScenarioConfig::sample(50, 10);
    let fair = rep.run(&cfg, 6);
    cfg.mode = Mode::Baseline;
    let baseline = rep.run(&cfg, 6);
    let done = |r: &ScenarioResult| r.outcomes().iter().filter(|o| o.client_decrypted).count();
    let (f, b) = (fair.service_calls(), baseline.service_calls());
    rep.record(
        6,
        "attestation economy",
        f == 2 && b == 50 && done(&fair) == 50 && done(&baseline) == 50,
        format!("fair {f} service calls, baseline {b} ({} and {} tasks delivered)", done(&fair), done(&baseline)),
    );
}

fn c7_attestation_soundness(rep: &mut Report) {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut bad = Vec::new();
    let mut counts = [0usize; 3];
    for i in 0..1000u64 {
        let mut cfg = ScenarioConfig::sample(1, 4);
        let tamper = CodeTamper { offset: rng.gen_range(0..4096), mask: rng.gen_range(1..=255) };
        let target = (i % 3) as usize;
        counts[target] += 1;
        match target {
            0 => cfg.broker.tamper_am = Some(tamper),
            1 => cfg.nodes[0].tamper_kh = Some(tamper),
            _ => cfg.nodes[0].tamper_program = Some(tamper),
        }
        let r = rep.run(&cfg, i);
        let leaked = r.records.iter().any(|rec| match rec {
            TraceRecord::Enclave { event: EnclaveEvent::KeyProvisioned { .. }, .. } => target < 2,
            TraceRecord::Enclave { event: EnclaveEvent::KeyReleased { .. }, .. } => true,
            TraceRecord::Enclave { event: EnclaveEvent::Executed { .. }, .. } => true,
            _ => false,
        });
        let decrypted = r.outcomes().iter().any(|o| o.client_decrypted);
        if leaked || decrypted || !r.verdict.passed(CONFINEMENT) {
            bad.push(format!("tamper {i} target {target}"));
        }
    }
    rep.record(
        7,
        "attestation soundness",
        bad.is_empty(),
        format!("{} key provisions or leaks over 1000 tamperings (am/kh/prog {counts:?}){}", bad.len(), first(&bad)),
    );
}

/// Drive one program through the full delegation path and the metered
/// wrapper, returning the enclave's instruction counter.
fn enclave_counter(rng: &mut ChaCha20Rng, source: &str, input: &[i64], budget: u64) -> Option<u64> {
    const TASK: u64 = 1;
    let guest = GuestProgram::assemble(source, budget).ok()?;
    let mut broker = Platform::new("broker", rng);
    let mut node = Platform::new("node", rng);
    let mut ias = AttestationService::new(KeyPair::from_seed([8; 32]));
    ias.register(&node);
    let (am, _) = broker.instantiate_enclave(AM_CODE);
    let (kh, _) = node.instantiate_enclave(KH_CODE);
    let key = SymmetricKey::random(rng);
    let bundle = KeyBundle { task: TASK, key, expected_execution: guest.measurement() };
    let env = bundle.envelope_for(rng, &broker.enclave(am).ok()?.keys().exchange);
    let am_key = broker.am_receive_key(am, &env).ok()?;
    let cert = ias.verify(&node.remote_attest(kh).ok()?);
    let env = broker.am_provision_key(am, am_key, &cert, &kh_measurement(), &ias.public_key()).ok()?;
    let kh_key = node.kh_receive_key(kh, &env).ok()?;
    let (prog, _) = node.instantiate_enclave(&guest.image());
    let report = node.local_attest(prog, kh).ok()?;
    node.kh_send_key_local(kh, kh_key, &report).ok()?;
    let settling = SettlingData::generate(rng, 4);
    let secret = Preimage::random(rng);
    let req = ExecutionRequest {
        task: TASK,
        encrypted_input: encrypt_input(&key, TASK, input),
        encrypted_settling: encrypt_settling(&key, TASK, &settling),
        locks: settling.locks(),
        node_lock: secret.lock(),
        node_secret: secret,
    };
    Some(node.run_prog_kt(prog, &req, None).ok()?.report.counter)
}

fn c8_metering(rep: &mut Report) {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let budget = 10_000;
    let (mut bad, mut capped, mut total) = (Vec::new(), 0, 0u64);
    for i in 0..1000 {
        let (source, input) =
            if i == 0 { (SUM_PROGRAM.to_string(), vec![1, 2, 3]) } else { support::fuzz_program(&mut rng) };
        let expected = support::reference_steps(&source, &input, budget);
        let got = enclave_counter(&mut rng, &source, &input, budget);
        if got != Some(expected) {
            bad.push(format!("program {i}: counter {got:?} reference {expected}"));
        }
        capped += usize::from(expected == budget);
        total += expected;
    }
    rep.record(
        8,
        "metering accuracy",
        bad.is_empty(),
        format!(
            "{} mismatches over 1000 programs ({total} steps in all, {capped} ran to the {budget}-step budget){}",
            bad.len(),
            first(&bad)
        ),
    );
}

fn c9_baseline_contrast(rep: &mut Report) {
    let base = ScenarioConfig::sample(1, 10);
    let with = |mode: Mode, behavior: NodeBehavior| {
        let mut cfg = base.clone();
        cfg.mode = mode;
        cfg.nodes[0].behavior = behavior;
        cfg
    };
    let abort = NodeBehavior::AbortAtStep { step: 40 };

    let fair_withhold = rep.run(&with(Mode::Fair, NodeBehavior::WithholdOutput), 9);
    let fair_abort = rep.run(&with(Mode::Fair, abort), 9);
    let base_withhold = rep.run(&with(Mode::Baseline, NodeBehavior::WithholdOutput), 9);
    let base_abort = rep.run(&with(Mode::Baseline, abort), 9);

    let fair_ok =
        [&fair_withhold, &fair_abort].iter().all(|r| r.verdict.passed(ATOMICITY) && r.verdict.passed(PROPORTIONALITY));
    let bw = base_withhold.outcomes()[0].clone();
    let reward_without_delivery =
        !base_withhold.verdict.passed(ATOMICITY) && bw.node_earned == bw.value && !bw.client_decrypted;
    let ba = base_abort.outcomes()[0].clone();
    let zero_pay = !base_abort.verdict.passed(PROPORTIONALITY) && ba.counter.unwrap_or(0) > 0 && ba.node_earned == 0;
    let fa = fair_abort.outcomes()[0].clone();
    rep.record(
        9,
        "baseline contrast",
        fair_ok && reward_without_delivery && zero_pay,
        format!(
            "baseline withhold pays {}/{} with no output, baseline abort at {:?} pays {}; fair abort pays {}, fair passes: {fair_ok}",
            bw.node_earned, bw.value, ba.counter, ba.node_earned, fa.node_earned
        ),
    );
}

fn c11_scaling(rep: &mut Report) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let args = ["fairmarket", "bench-match", "--sizes", "1000,2000,4000,8000", "--density", "0.85"];
    let code = main_with(args, &mut out, &mut err);
    let table = String::from_utf8(out).unwrap();
    let rows: Vec<(usize, f64)> = table
        .lines()
        .skip(1)
        .map(|l| {
            let cols: Vec<&str> = l.split_whitespace().collect();
            (cols[0].parse().unwrap(), cols[3].parse().unwrap())
        })
        .collect();
    let monotone = rows.windows(2).all(|w| w[1].1 >= w[0].1);
    let last = rows.last().map_or(f64::INFINITY, |r| r.1);
    rep.record(
        11,
        "matching scaling trend",
        code == 0 && rows.len() == 4 && monotone && last < 60.0,
        format!("seconds {:?}", rows.iter().map(|r| format!("{}:{:.3}", r.0, r.1)).collect::<Vec<_>>()),
    );
}

#[test]
fn acceptance() {
    let mut rep = Report { lines: Vec::new(), runs: 0, conservation_failures: Vec::new() };
    let (solvent, solvency_detail) = c1_c3_adversarial(&mut rep);
    c2_proportionality(&mut rep);
    rep.record(3, "broker solvency", solvent, solvency_detail);
    c4_matching_oracle(&mut rep);
    c5_two_transactions(&mut rep);
    c6_attestation_economy(&mut rep);
    c7_attestation_soundness(&mut rep);
    c8_metering(&mut rep);
    c9_baseline_contrast(&mut rep);
    // Abort-sweep runs are checked through their verdicts, the rest from raw snapshots too.
    rep.record(
        10,
        "ledger conservation",
        rep.conservation_failures.is_empty(),
        format!(
            "{} runs, {} violations{}",
            rep.runs,
            rep.conservation_failures.len(),
            first(&rep.conservation_failures)
        ),
    );
    c11_scaling(&mut rep);

    let failed: Vec<&str> = rep.lines.iter().filter(|l| !l.1).map(|l| l.0.as_str()).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
