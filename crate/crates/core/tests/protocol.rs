use fairmarket::protocol::verdict::{ATOMICITY, PROPORTIONALITY};
use fairmarket::protocol::{
    run_scenario, ClientBehavior, CodeTamper, EnclaveEvent, Mode, NodeBehavior, Routing, RunReport, ScenarioConfig,
    ScenarioResult, TaskOutcome, TraceRecord,
};

fn run(cfg: &ScenarioConfig) -> ScenarioResult {
    run_scenario(cfg, cfg.seed).unwrap()
}

fn single(cfg: &ScenarioConfig) -> (ScenarioResult, TaskOutcome) {
    let r = run(cfg);
    let o = r.outcomes()[0].clone();
    (r, o)
}

fn enclave_events(r: &ScenarioResult) -> Vec<&EnclaveEvent> {
    r.records
        .iter()
        .filter_map(|rec| match rec {
            TraceRecord::Enclave { event, .. } => Some(event),
            _ => None,
        })
        .collect()
}

#[test]
fn honest_tasks_complete() {
    let r = run(&ScenarioConfig::sample(3, 4));
    assert!(r.verdict.all_passed(), "{}", RunReport::from_trace(&r.records).render());
    for o in r.outcomes() {
        assert_eq!(o.status, "delivered");
        assert_eq!(o.output_correct, Some(true));
        assert_eq!(o.node_earned, o.value);
        assert_eq!(o.client_paid, o.value);
    }
}

#[test]
fn same_seed_same_trace() {
    let cfg = fairmarket::protocol::adversarial_scenario(7);
    assert_eq!(run(&cfg).trace_text(), run(&cfg).trace_text());
    let other = run_scenario(&cfg, 8).unwrap();
    assert_ne!(run(&cfg).trace_text(), other.trace_text());
}

#[test]
fn abort_pays_the_unlocked_share() {
    let mut cfg = ScenarioConfig::sample(1, 10);
    cfg.nodes[0].behavior = NodeBehavior::AbortAtStep { step: 40 };
    let (r, o) = single(&cfg);
    assert!(r.verdict.all_passed());
    assert_eq!(o.status, "interrupted");
    assert_eq!(o.counter, Some(40));
    // 40 of 68 steps unlocks 5 of 10 compute promises of a 60-unit work share.
    assert_eq!(o.node_earned, 30);
    assert!(!o.client_decrypted);
}

#[test]
fn withheld_output_pays_only_the_work_share() {
    let mut cfg = ScenarioConfig::sample(1, 10);
    cfg.nodes[0].behavior = NodeBehavior::WithholdOutput;
    let (r, o) = single(&cfg);
    assert!(r.verdict.all_passed());
    assert_eq!(o.status, "undelivered");
    assert_eq!(o.node_earned, o.work_value);
    assert_eq!(o.client_paid, o.work_value);
}

#[test]
fn bad_rand_is_accused_and_settled_compute_only() {
    let mut cfg = ScenarioConfig::sample(1, 10);
    cfg.clients[0].behavior = ClientBehavior::BadRand;
    let (r, o) = single(&cfg);
    assert!(r.verdict.all_passed());
    assert!(r.records.iter().any(|rec| matches!(rec, TraceRecord::Accusation { .. })));
    assert_eq!(o.node_earned, o.work_value);
}

#[test]
fn silent_client_pays_only_for_work() {
    let mut cfg = ScenarioConfig::sample(1, 10);
    cfg.clients[0].behavior = ClientBehavior::Silent;
    let (r, o) = single(&cfg);
    assert!(r.verdict.all_passed(), "{}", RunReport::from_trace(&r.records).render());
    assert_eq!(o.node_earned, o.work_value);
    assert!(!o.client_decrypted);
}

#[test]
fn replaying_an_old_promise_only_costs_the_node() {
    let mut honest = ScenarioConfig::sample(1, 10);
    let (_, fair) = single(&honest);
    honest.nodes[0].behavior = NodeBehavior::ReplayPromise;
    let (r, replay) = single(&honest);
    assert!(r.verdict.all_passed());
    assert!(replay.node_earned < fair.node_earned);
}

#[test]
fn on_chain_close_still_settles_the_client() {
    for behavior in [NodeBehavior::CloseOnChain, NodeBehavior::HoldSecret, NodeBehavior::ClaimComputeOnly] {
        let mut cfg = ScenarioConfig::sample(2, 5);
        cfg.nodes[0].behavior = behavior;
        let r = run(&cfg);
        assert!(r.verdict.all_passed(), "{behavior:?}: {}", RunReport::from_trace(&r.records).render());
    }
}

#[test]
fn tampered_attestation_manager_gets_no_keys() {
    let mut cfg = ScenarioConfig::sample(2, 4);
    cfg.broker.tamper_am = Some(CodeTamper { offset: 3, mask: 0x10 });
    let r = run(&cfg);
    assert!(r.verdict.all_passed());
    for o in r.outcomes() {
        assert_eq!(o.status, "certificate_invalid");
        assert_eq!(o.client_paid, 0);
    }
    assert!(!enclave_events(&r).iter().any(|e| matches!(e, EnclaveEvent::KeyProvisioned { .. })));
}

#[test]
fn tampered_key_handler_is_excluded() {
    let mut cfg = ScenarioConfig::sample(2, 4);
    cfg.nodes[0].tamper_kh = Some(CodeTamper { offset: 9, mask: 0x01 });
    let r = run(&cfg);
    assert!(r.verdict.all_passed());
    let events = enclave_events(&r);
    assert!(events.iter().any(|e| matches!(e, EnclaveEvent::ProvisionRefused { .. })));
    assert!(!events.iter().any(|e| matches!(e, EnclaveEvent::KeyProvisioned { .. })));
    // The first task waits for another node; the client runs tasks in order, so the rest never go out.
    let statuses: Vec<&str> = r.outcomes().iter().map(|o| o.status.as_str()).collect();
    assert_eq!(statuses, ["pending", "not_submitted"]);
    assert!(r.outcomes().iter().all(|o| o.client_paid == 0));
}

#[test]
fn tampered_program_never_sees_the_key() {
    let mut cfg = ScenarioConfig::sample(2, 4);
    cfg.nodes[0].tamper_program = Some(CodeTamper { offset: 0, mask: 0x80 });
    let r = run(&cfg);
    assert!(r.verdict.all_passed());
    let events = enclave_events(&r);
    assert!(events.iter().any(|e| matches!(e, EnclaveEvent::ReleaseRefused { .. })));
    assert!(!events.iter().any(|e| matches!(e, EnclaveEvent::KeyReleased { .. })));
    assert!(r.outcomes().iter().all(|o| !o.client_decrypted && o.node_earned == 0));
}

#[test]
fn via_broker_routing_delivers() {
    let mut cfg = ScenarioConfig::sample(3, 4);
    cfg.routing = Routing::ViaBroker;
    let r = run(&cfg);
    assert!(r.verdict.all_passed());
    assert!(r.outcomes().iter().all(|o| o.status == "delivered"));
    let direct = r.records.iter().any(|rec| {
        matches!(rec, TraceRecord::Message { from, to, kind, .. }
            if kind == "delivery" && from == "n1" && to == "alice")
    });
    assert!(!direct);
}

#[test]
fn baseline_withhold_breaks_atomicity() {
    let mut cfg = ScenarioConfig::sample(1, 10);
    cfg.mode = Mode::Baseline;
    cfg.nodes[0].behavior = NodeBehavior::WithholdOutput;
    let (r, o) = single(&cfg);
    assert!(!r.verdict.passed(ATOMICITY));
    assert_eq!(o.node_earned, o.value);
    assert!(!o.client_decrypted);
}

#[test]
fn baseline_abort_pays_nothing() {
    let mut cfg = ScenarioConfig::sample(1, 10);
    cfg.mode = Mode::Baseline;
    cfg.nodes[0].behavior = NodeBehavior::AbortAtStep { step: 40 };
    let (r, o) = single(&cfg);
    assert!(!r.verdict.passed(PROPORTIONALITY));
    assert_eq!(o.node_earned, 0);
}

#[test]
fn baseline_honest_run_passes() {
    let mut cfg = ScenarioConfig::sample(3, 10);
    cfg.mode = Mode::Baseline;
    let r = run(&cfg);
    assert!(r.verdict.all_passed(), "{}", RunReport::from_trace(&r.records).render());
}
