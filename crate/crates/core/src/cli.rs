//! Command-line front end: `run`, `verify`, `bench-match` and `scaffold`.
//!
//! Exit codes: 0 when every predicate holds, 2 on a predicate violation,
//! 3 on a config, trace or I/O error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::enclave::vm::SUM_PROGRAM;
use crate::matching::bench_matching;
use crate::protocol::{
    read_trace, run_scenario, write_trace, LinkAction, LinkPolicy, Mode, NodeBehavior, ProgramConfig, ProtocolError,
    RunReport, ScenarioConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 2;
pub const EXIT_ERROR: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fairmarket", version, about = "Simulate and audit a fair outsourced-computation market")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario and print its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Recompute every predicate from a trace file.
    Verify {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Time maximum matching on random bipartite graphs.
    BenchMatch {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1000, 2000, 4000, 8000])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 0.85)]
        density: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Cross-check against exhaustive search (small graphs only).
        #[arg(long)]
        oracle: bool,
    },
    /// Write a sample guest program and scenario configs.
    Scaffold {
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse `args` (including the program name) and run the command.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    let result = match cli.command {
        Command::Run { config, seed, trace_out } => cmd_run(&config, seed, trace_out.as_deref(), out),
        Command::Verify { trace } => cmd_verify(&trace, out),
        Command::BenchMatch { sizes, density, seed, oracle } => cmd_bench_match(&sizes, density, seed, oracle, out),
        Command::Scaffold { out: dir } => cmd_scaffold(&dir, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_ERROR
        }
    }
}

fn verdict_code(report: &RunReport) -> i32 {
    if report.verdict.all_passed() {
        EXIT_OK
    } else {
        EXIT_VIOLATION
    }
}

pub fn cmd_run(
    config: &Path,
    seed: Option<u64>,
    trace_out: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32, ProtocolError> {
    let cfg = ScenarioConfig::load(config)?;
    let result = run_scenario(&cfg, seed.unwrap_or(cfg.seed))?;
    if let Some(path) = trace_out {
        let mut w = BufWriter::new(File::create(path)?);
        write_trace(&mut w, &result.records)?;
        w.flush()?;
    }
    let report = RunReport::from_trace(&result.records);
    write!(out, "{}", report.render())?;
    Ok(verdict_code(&report))
}

pub fn cmd_verify(trace: &Path, out: &mut dyn Write) -> Result<i32, ProtocolError> {
    let records = read_trace(BufReader::new(File::open(trace)?))?;
    let report = RunReport::from_trace(&records);
    write!(out, "{}", report.render())?;
    Ok(verdict_code(&report))
}

pub fn cmd_bench_match(
    sizes: &[usize],
    density: f64,
    seed: u64,
    oracle: bool,
    out: &mut dyn Write,
) -> Result<i32, ProtocolError> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(ProtocolError::Config("sizes must be positive".into()));
    }
    if !(0.0..=1.0).contains(&density) {
        return Err(ProtocolError::Config(format!("density {density} outside [0, 1]")));
    }
    writeln!(out, "vertices  density  edges       seconds  matched  oracle")?;
    for row in bench_matching(sizes, density, seed, oracle) {
        writeln!(
            out,
            "{:<9} {:<8} {:<10} {:>9.4}  {:<8} {}",
            row.vertices,
            row.density,
            row.edges,
            row.seconds,
            row.matched,
            row.oracle.map_or("-".to_string(), |o| o.to_string())
        )?;
    }
    Ok(EXIT_OK)
}

/// Files written by `scaffold`, in order.
pub fn scaffold_files() -> Vec<(&'static str, String)> {
    let with_file = |mut cfg: ScenarioConfig| {
        cfg.seed = 1;
        cfg.programs.insert("sum".into(), ProgramConfig { file: Some("sum.asm".into()), source: None });
        cfg.to_json() + "\n"
    };
    let honest = ScenarioConfig::sample(3, 10);

    let mut abort = honest.clone();
    abort.nodes[0].behavior = NodeBehavior::AbortAtStep { step: 40 };

    let mut withhold = honest.clone();
    withhold.nodes[0].behavior = NodeBehavior::WithholdOutput;

    let mut network = honest.clone();
    network.adversary = vec![
        LinkPolicy {
            from: "n1".into(),
            to: "*".into(),
            action: LinkAction::Tamper,
            messages: vec!["delivery".into()],
            probability: 0.5,
        },
        LinkPolicy {
            from: "*".into(),
            to: "n1".into(),
            action: LinkAction::Reorder { window: 30 },
            messages: Vec::new(),
            probability: 1.0,
        },
    ];

    let mut baseline = withhold.clone();
    baseline.mode = Mode::Baseline;

    vec![
        ("sum.asm", SUM_PROGRAM.to_string()),
        ("honest.json", with_file(honest)),
        ("abort.json", with_file(abort)),
        ("withhold.json", with_file(withhold)),
        ("network.json", with_file(network)),
        ("baseline_withhold.json", with_file(baseline)),
    ]
}

pub fn cmd_scaffold(dir: &Path, out: &mut dyn Write) -> Result<i32, ProtocolError> {
    std::fs::create_dir_all(dir)?;
    for (name, body) in scaffold_files() {
        let path = dir.join(name);
        std::fs::write(&path, body)?;
        writeln!(out, "wrote {}", path.display())?;
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = main_with(std::iter::once("fairmarket").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        let (code, _, err) = run(&["frobnicate"]);
        assert_eq!(code, EXIT_ERROR);
        assert!(!err.is_empty());
    }

    #[test]
    fn bench_rejects_bad_arguments() {
        assert_eq!(run(&["bench-match", "--sizes", "0"]).0, EXIT_ERROR);
        assert_eq!(run(&["bench-match", "--sizes", "8", "--density", "1.5"]).0, EXIT_ERROR);
    }

    #[test]
    fn bench_with_oracle_agrees() {
        let (code, out, _) = run(&["bench-match", "--sizes", "8,12", "--density", "0.5", "--oracle"]);
        assert_eq!(code, EXIT_OK);
        for line in out.lines().skip(1) {
            let cols: Vec<&str> = line.split_whitespace().collect();
            assert_eq!(cols[4], cols[5], "{line}");
        }
    }

    #[test]
    fn scaffold_is_deterministic() {
        assert_eq!(scaffold_files(), scaffold_files());
        for (name, body) in scaffold_files().iter().filter(|(n, _)| n.ends_with(".json")) {
            ScenarioConfig::from_json(body).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}
