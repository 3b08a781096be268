use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use tetris_core::node::Mutation;
use tetris_core::sim::{explain, run_scenario_with, ConfigError, RunOptions, Simulation};
use tetris_core::{Digest, RunReport, ScenarioConfig, Tetris, ValidatorId};

const OUT_DIR_ENV: &str = "TETRIS_OUT_DIR";

#[derive(Parser)]
#[command(name = "tetris", version, about = "Run and inspect simulated Tetris consensus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its report.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Report path. Defaults to $TETRIS_OUT_DIR/report-<seed>.json, or stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write every validator's DAG into this directory.
        #[arg(long)]
        dump_dag: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = DagFormat::Json)]
        format: DagFormat,
        #[arg(long, value_enum, hide = true)]
        mutant: Option<Mutant>,
    },
    /// Run a scenario over a range of seeds and aggregate the results.
    Sweep {
        scenario: PathBuf,
        /// Half-open range such as 0..100.
        #[arg(long, default_value = "0..100")]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, hide = true)]
        mutant: Option<Mutant>,
    },
    /// Print the witness vote table for one base event.
    Explain {
        /// Scenario file or a report written by `run`.
        input: PathBuf,
        #[arg(long)]
        stage: u64,
        #[arg(long)]
        base: u32,
        /// Whose view to show. Defaults to the first honest validator.
        #[arg(long)]
        validator: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DagFormat {
    Json,
    Dot,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mutant {
    InvertVerdicts,
}

impl From<Mutant> for Mutation {
    fn from(m: Mutant) -> Self {
        match m {
            Mutant::InvertVerdicts => Mutation::InvertVerdicts,
        }
    }
}

/// Errors that map to exit code 1.
#[derive(Debug)]
struct SetupError(anyhow::Error);

impl From<ConfigError> for SetupError {
    fn from(e: ConfigError) -> Self {
        SetupError(anyhow!("config error: {e}"))
    }
}

impl From<anyhow::Error> for SetupError {
    fn from(e: anyhow::Error) -> Self {
        SetupError(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { scenario, seed, out, dump_dag, format, mutant } => {
            cmd_run(&scenario, seed, out, dump_dag.as_deref(), format, mutant)
        }
        Command::Sweep { scenario, seeds, out, mutant } => cmd_sweep(&scenario, &seeds, out, mutant),
        Command::Explain { input, stage, base, validator, seed } => {
            cmd_explain(&input, stage, base, validator, seed).map(|text| {
                let _ = std::io::stdout().lock().write_all(text.as_bytes());
                true
            })
        }
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(SetupError(e)) => {
            eprintln!("{e:#}");
            ExitCode::from(1)
        }
    }
}

/// Reads a scenario file, or the config echoed inside a report.
fn load_config(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, SetupError> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let doc = match value.get("config") {
        Some(c) if value.get("lemma_checks").is_some() => c.clone(),
        _ => value,
    };
    let mut cfg = ScenarioConfig::from_json(&doc.to_string())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn simulate(cfg: &ScenarioConfig, mutant: Option<Mutant>) -> Result<Simulation, SetupError> {
    let mut sim = run_scenario_with(cfg, RunOptions { mutation: mutant.map(Into::into) })?;
    sim.run();
    Ok(sim)
}

fn write_output(out: Option<PathBuf>, default_name: &str, body: &str) -> Result<(), SetupError> {
    let path = out.or_else(|| std::env::var_os(OUT_DIR_ENV).map(|d| PathBuf::from(d).join(default_name)));
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
            }
            std::fs::write(&p, body).with_context(|| format!("cannot write {}", p.display()))?;
        }
        None => {
            let _ = writeln!(std::io::stdout().lock(), "{body}");
        }
    }
    Ok(())
}

fn cmd_run(
    scenario: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    dump_dag: Option<&Path>,
    format: DagFormat,
    mutant: Option<Mutant>,
) -> Result<bool, SetupError> {
    let cfg = load_config(scenario, seed)?;
    let sim = simulate(&cfg, mutant)?;
    let report = sim.report();
    write_output(out, &format!("report-{}.json", cfg.seed), &report.to_json())?;
    if let Some(dir) = dump_dag {
        dump_dags(&sim, dir, format)?;
    }
    if !report.passed {
        eprintln!("property violation: failed checks {:?}", report.failed_checks());
    }
    Ok(report.passed)
}

#[derive(Serialize)]
struct DagEvent<'a> {
    digest: Digest,
    vid: ValidatorId,
    seq: u64,
    parents: &'a [Digest],
    txs: Vec<Digest>,
    placeholder: bool,
    witness: bool,
}

fn witnesses_of(sim: &Simulation, id: ValidatorId) -> BTreeSet<Digest> {
    let v = sim.validator(id).expect("known validator");
    let t = v.tetris();
    let mut out = v.current_stage().all_witnesses(t);
    for r in v.records() {
        if let Some(s) = v.finished_stage(r.stage) {
            out.extend(s.all_witnesses(t));
        }
    }
    out
}

fn dag_json(t: &Tetris, witnesses: &BTreeSet<Digest>) -> String {
    let events: Vec<DagEvent> = t
        .events()
        .map(|e| DagEvent {
            digest: e.digest(),
            vid: e.vid(),
            seq: e.seq(),
            parents: e.parent_hashes(),
            txs: e.tx_hashes().iter().copied().collect(),
            placeholder: e.is_placeholder(),
            witness: witnesses.contains(&e.digest()),
        })
        .collect();
    serde_json::to_string_pretty(&events).expect("dag serializes")
}

fn dump_dags(sim: &Simulation, dir: &Path, format: DagFormat) -> Result<(), SetupError> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    for v in sim.validators() {
        let w = witnesses_of(sim, v.id());
        let (ext, body) = match format {
            DagFormat::Json => ("json", dag_json(v.tetris(), &w)),
            DagFormat::Dot => ("dot", v.tetris().to_dot(&w)),
        };
        let path = dir.join(format!("validator-{}.{ext}", v.id()));
        std::fs::write(&path, body).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn parse_seeds(s: &str) -> Result<std::ops::Range<u64>, SetupError> {
    let (a, b) = s.split_once("..").ok_or_else(|| anyhow!("seed range must look like 0..100"))?;
    let a: u64 = a.trim().parse().context("bad seed range start")?;
    let b: u64 = b.trim().parse().context("bad seed range end")?;
    if a >= b {
        return Err(anyhow!("seed range {s} is empty").into());
    }
    Ok(a..b)
}

#[derive(Serialize)]
struct SweepSummary {
    seeds: String,
    runs: usize,
    passed: usize,
    pass_rate: f64,
    check_pass_rates: BTreeMap<String, f64>,
    failed_seeds: Vec<u64>,
    max_rounds_to_decision: Option<u32>,
    max_rounds_by_stage: BTreeMap<u64, u32>,
    /// stage -> number of committable-true bases -> occurrences across
    /// honest validators and seeds.
    committable_true_counts: BTreeMap<u64, BTreeMap<usize, usize>>,
    message_count_mean: f64,
    steps_mean: f64,
}

fn summarize(seeds: &str, reports: &[RunReport]) -> SweepSummary {
    let runs = reports.len();
    let passed = reports.iter().filter(|r| r.passed).count();
    let mut check_pass: BTreeMap<String, usize> = BTreeMap::new();
    let mut max_by_stage: BTreeMap<u64, u32> = BTreeMap::new();
    let mut counts: BTreeMap<u64, BTreeMap<usize, usize>> = BTreeMap::new();
    for r in reports {
        for (name, c) in &r.lemma_checks {
            *check_pass.entry(name.clone()).or_default() += usize::from(c.passed());
        }
        for (s, rd) in &r.rounds_to_decision {
            let e = max_by_stage.entry(*s).or_default();
            *e = (*e).max(*rd);
        }
        for v in r.validators.values().filter(|v| v.honest) {
            for st in &v.stages {
                let yes = st.committable.values().filter(|x| **x).count();
                *counts.entry(st.stage).or_default().entry(yes).or_default() += 1;
            }
        }
    }
    let mean = |f: &dyn Fn(&RunReport) -> u64| reports.iter().map(f).sum::<u64>() as f64 / runs as f64;
    SweepSummary {
        seeds: seeds.to_string(),
        runs,
        passed,
        pass_rate: passed as f64 / runs as f64,
        check_pass_rates: check_pass.into_iter().map(|(k, n)| (k, n as f64 / runs as f64)).collect(),
        failed_seeds: reports.iter().filter(|r| !r.passed).map(|r| r.seed).collect(),
        max_rounds_to_decision: max_by_stage.values().copied().max(),
        max_rounds_by_stage: max_by_stage,
        committable_true_counts: counts,
        message_count_mean: mean(&|r| r.message_count),
        steps_mean: mean(&|r| r.steps_run),
    }
}

fn cmd_sweep(scenario: &Path, seeds: &str, out: Option<PathBuf>, mutant: Option<Mutant>) -> Result<bool, SetupError> {
    let cfg = load_config(scenario, None)?;
    let range = parse_seeds(seeds)?;
    let reports: Vec<RunReport> = range
        .into_par_iter()
        .map(|seed| {
            let mut c = cfg.clone();
            c.seed = seed;
            simulate(&c, mutant).map(|s| s.report())
        })
        .collect::<Result<_, _>>()?;
    let summary = summarize(seeds, &reports);
    let body = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_output(out, "sweep.json", &body)?;
    if summary.passed < summary.runs {
        eprintln!("property violation: seeds {:?} failed", summary.failed_seeds);
    }
    Ok(summary.passed == summary.runs)
}

fn cmd_explain(
    input: &Path,
    stage: u64,
    base: u32,
    validator: Option<u32>,
    seed: Option<u64>,
) -> Result<String, SetupError> {
    let cfg = load_config(input, seed)?;
    let sim = simulate(&cfg, None)?;
    let id = match validator {
        Some(v) => ValidatorId(v),
        None => *cfg.honest_ids().first().ok_or_else(|| anyhow!("no honest validator"))?,
    };
    explain(&sim, id, stage, ValidatorId(base)).map_err(|e| SetupError(e.into()))
}
