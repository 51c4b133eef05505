use std::path::{Path, PathBuf};

use fairmarket::cli::{main_with, scaffold_files, EXIT_ERROR, EXIT_OK, EXIT_VIOLATION};

fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets")
}

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = main_with(std::iter::once("fairmarket").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn run_to_trace(config: &str, dir: &Path) -> (i32, PathBuf) {
    let trace = dir.join(config.replace(".json", ".trace"));
    let cfg = assets().join(config);
    let (code, _, err) = run(&["run", "--config", cfg.to_str().unwrap(), "--trace-out", trace.to_str().unwrap()]);
    assert!(err.is_empty(), "{err}");
    (code, trace)
}

#[test]
fn bundled_assets_match_scaffold() {
    for (name, body) in scaffold_files() {
        let on_disk = std::fs::read_to_string(assets().join(name)).unwrap();
        assert_eq!(on_disk, body, "{name} is stale; rerun scaffold --out crates/core/assets");
    }
}

#[test]
fn bundled_scenarios_run_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    for (name, _) in scaffold_files().iter().filter(|(n, _)| n.ends_with(".json")) {
        let expected = if name.starts_with("baseline") { EXIT_VIOLATION } else { EXIT_OK };
        let (code, trace) = run_to_trace(name, dir.path());
        assert_eq!(code, expected, "{name}");
        let (code, out, _) = run(&["verify", "--trace", trace.to_str().unwrap()]);
        assert_eq!(code, expected, "{name}");
        assert!(out.contains("PASS ledger_conservation"), "{name}");
    }
}

#[test]
fn baseline_report_names_the_flaw() {
    let cfg = assets().join("baseline_withhold.json");
    let (code, out, _) = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, EXIT_VIOLATION);
    assert!(out.contains("FAIL exchange_atomicity"));
}

#[test]
fn seed_flag_overrides_config() {
    let cfg = assets().join("honest.json");
    let (_, out, _) = run(&["run", "--config", cfg.to_str().unwrap(), "--seed", "42"]);
    assert!(out.starts_with("seed 42 "));
}

#[test]
fn edited_payment_breaks_conservation() {
    let dir = tempfile::tempdir().unwrap();
    let (_, trace) = run_to_trace("honest.json", dir.path());
    let text = std::fs::read_to_string(&trace).unwrap();
    let line = text.lines().position(|l| l.contains("\"payee_credit\":")).expect("a close in the trace");
    let edited: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i != line {
                return l.to_string();
            }
            let start = l.find("\"payee_credit\":").unwrap() + "\"payee_credit\":".len();
            let end = start + l[start..].find(|c: char| !c.is_ascii_digit()).unwrap();
            let v: u64 = l[start..end].parse().unwrap();
            format!("{}{}{}", &l[..start], v + 1, &l[end..])
        })
        .collect();
    std::fs::write(&trace, edited.join("\n") + "\n").unwrap();
    let (code, out, _) = run(&["verify", "--trace", trace.to_str().unwrap()]);
    assert_eq!(code, EXIT_VIOLATION);
    assert!(out.contains("FAIL ledger_conservation"), "{out}");
}

#[test]
fn truncated_trace_is_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let (_, trace) = run_to_trace("honest.json", dir.path());
    let text = std::fs::read_to_string(&trace).unwrap();
    let kept: Vec<&str> = text.lines().take(text.lines().count() / 2).collect();
    std::fs::write(&trace, kept.join("\n")).unwrap();
    let (code, _, err) = run(&["verify", "--trace", trace.to_str().unwrap()]);
    assert_eq!(code, EXIT_ERROR);
    assert!(err.contains("corrupt trace"), "{err}");
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\"broker\": ").unwrap();
    let (code, _, err) = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, EXIT_ERROR);
    assert!(err.contains("config error"), "{err}");
    let (code, _, _) = run(&["run", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(code, EXIT_ERROR);
}

#[test]
fn scaffold_writes_and_overwrites_the_same_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("assets");
    let (code, _, _) = run(&["scaffold", "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let first: Vec<_> = scaffold_files().iter().map(|(n, _)| std::fs::read(out.join(n)).unwrap()).collect();
    std::fs::write(out.join("honest.json"), "scribbled").unwrap();
    assert_eq!(run(&["scaffold", "--out", out.to_str().unwrap()]).0, EXIT_OK);
    let second: Vec<_> = scaffold_files().iter().map(|(n, _)| std::fs::read(out.join(n)).unwrap()).collect();
    assert_eq!(first, second);
    let mut names: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), scaffold_files().len());
}

#[test]
fn scaffold_into_unwritable_path_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "not a directory").unwrap();
    let (code, _, err) = run(&["scaffold", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(code, EXIT_ERROR);
    assert!(err.contains("i/o error"), "{err}");
}

#[test]
fn bench_at_zero_density_matches_nothing() {
    let (code, out, _) = run(&["bench-match", "--sizes", "100,200", "--density", "0"]);
    assert_eq!(code, EXIT_OK);
    for line in out.lines().skip(1) {
        assert_eq!(line.split_whitespace().nth(4), Some("0"), "{line}");
    }
}
