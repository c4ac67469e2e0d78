//! Simulator verbs.

use crate::{emit, CliError};
use clap::{Subcommand, ValueEnum};
use recraft_sim::fuzz::{generate, Profile};
use recraft_sim::oracle::{check, Report};
use recraft_sim::probe::{self, ProbeOp};
use recraft_sim::{mutation, run as simulate, scripts, Scenario, Trace};
use serde::Serialize;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

#[derive(Subcommand)]
pub enum SimCmd {
    /// Run one scenario and judge the trace.
    Run {
        /// Scenario file in TOML.
        #[arg(required_unless_present = "builtin")]
        scenario: Option<PathBuf>,
        /// A built-in scenario instead of a file.
        #[arg(long, value_enum, conflicts_with = "scenario")]
        builtin: Option<Builtin>,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Generate, run and judge random scenarios.
    Fuzz {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: u64,
        /// Heal every fault and require progress afterwards.
        #[arg(long)]
        liveness: bool,
    },
    /// Print the scenario the fuzzer generates for a seed.
    Generate {
        seed: u64,
        #[arg(long)]
        liveness: bool,
    },
    /// Judge a recorded trace.
    Check {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Smallest crash set that stalls a reconfiguration phase.
    Probe {
        #[arg(long, value_enum)]
        op: Op,
        /// One phase; every phase when omitted.
        #[arg(long)]
        phase: Option<u8>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Check that each planted defect is caught by some oracle.
    Mutations {
        #[arg(long, default_value_t = 50)]
        seeds: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Builtin {
    /// Six nodes split three ways with one subcluster cut off, then two merge.
    SplitThreeMergeTwo,
    /// A merge whose coordinator crashes once its participants have voted.
    CoordinatorCrash,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Op {
    Split,
    Merge,
}

#[derive(Serialize)]
struct RunSummary {
    name: String,
    seed: u64,
    events: usize,
    digest: String,
    clean: bool,
    violations: Vec<String>,
}

fn summarize(sc: &Scenario, trace: &Trace, report: &Report) -> RunSummary {
    RunSummary {
        name: sc.name.clone(),
        seed: sc.seed,
        events: trace.events.len(),
        digest: trace.digest(),
        clean: report.is_clean(),
        violations: if report.is_clean() { Vec::new() } else { report.to_string().lines().map(String::from).collect() },
    }
}

fn load(path: &PathBuf) -> Result<Scenario, CliError> {
    Ok(Scenario::from_toml(&std::fs::read_to_string(path)?)?)
}

fn profile(liveness: bool) -> Profile {
    if liveness {
        Profile::liveness()
    } else {
        Profile::safety()
    }
}

pub fn run(cmd: SimCmd, json: bool) -> Result<(), CliError> {
    match cmd {
        SimCmd::Run { scenario, builtin, seed, trace: out } => {
            let mut sc = match (scenario, builtin) {
                (Some(path), _) => load(&path)?,
                (None, Some(Builtin::SplitThreeMergeTwo)) => scripts::split_three_merge_two(),
                (None, Some(Builtin::CoordinatorCrash)) => {
                    scripts::coordinator_crash(scripts::TX_BOUNDARIES[2], Some(300), 3)
                }
                (None, None) => return Err(CliError::Usage("give a scenario file or --builtin".into())),
            };
            if let Some(s) = seed {
                sc.seed = s;
            }
            let trace = simulate(&sc)?;
            if let Some(path) = out {
                trace.write_jsonl(BufWriter::new(File::create(path)?))?;
            }
            let report = check(&sc, &trace);
            let summary = summarize(&sc, &trace, &report);
            emit(json, &summary, || {
                format!(
                    "{} seed {}: {} events, digest {}\n{report}",
                    summary.name, summary.seed, summary.events, summary.digest
                )
            });
            finish(report.is_clean(), "the trace violates a checked property")
        }
        SimCmd::Fuzz { seed, count, liveness } => {
            let profile = profile(liveness);
            let mut summaries = Vec::new();
            for s in seed..seed.saturating_add(count) {
                let sc = generate(s, &profile);
                let trace = simulate(&sc)?;
                let report = check(&sc, &trace);
                if !json {
                    let verdict = if report.is_clean() { "ok".to_string() } else { format!("FAIL\n{report}") };
                    println!("seed {s}: {} events {verdict}", trace.events.len());
                }
                summaries.push(summarize(&sc, &trace, &report));
            }
            let failed: Vec<u64> = summaries.iter().filter(|s| !s.clean).map(|s| s.seed).collect();
            if json {
                emit(true, &summaries, String::new);
            } else {
                println!("{} of {} seeds clean", summaries.len() - failed.len(), summaries.len());
            }
            finish(failed.is_empty(), &format!("failing seeds: {failed:?}"))
        }
        SimCmd::Generate { seed, liveness } => {
            print!("{}", generate(seed, &profile(liveness)).to_toml());
            Ok(())
        }
        SimCmd::Check { scenario, trace } => {
            let sc = load(&scenario)?;
            let trace = Trace::read_jsonl(BufReader::new(File::open(trace)?))?;
            let report = check(&sc, &trace);
            let summary = summarize(&sc, &trace, &report);
            emit(json, &summary, || report.to_string());
            finish(report.is_clean(), "the trace violates a checked property")
        }
        SimCmd::Probe { op, phase, seed } => {
            let op = match op {
                Op::Split => ProbeOp::Split,
                Op::Merge => ProbeOp::Merge,
            };
            let phases: Vec<u8> = match phase {
                Some(p) if probe::phases(op).contains(&p) => vec![p],
                Some(p) => return Err(CliError::Usage(format!("no phase {p}; phases are {:?}", probe::phases(op)))),
                None => probe::phases(op).to_vec(),
            };
            #[derive(Serialize)]
            struct Row {
                result: probe::ProbeResult,
                closed_form: Option<usize>,
            }
            let rows: Vec<Row> = phases
                .iter()
                .map(|p| Row {
                    result: probe::min_failure_probe(op, *p, seed),
                    closed_form: probe::closed_form(op, *p, probe::SUBS, probe::SUB_SIZE),
                })
                .collect();
            emit(json, &rows, || {
                rows.iter()
                    .map(|r| match r.closed_form {
                        Some(k) => format!("{} (closed form {k})\n", r.result),
                        None => format!("{}\n", r.result),
                    })
                    .collect()
            });
            Ok(())
        }
        SimCmd::Mutations { seeds } => {
            let found = mutation::suite(seeds);
            #[derive(Serialize)]
            struct Row {
                mutation: String,
                seed: Option<u64>,
                properties: Vec<String>,
                runs: usize,
            }
            let rows: Vec<Row> = found
                .iter()
                .map(|d| Row {
                    mutation: format!("{:?}", d.mutation),
                    seed: d.found.map(|(s, _)| s),
                    properties: d.properties.iter().cloned().collect(),
                    runs: d.runs,
                })
                .collect();
            emit(json, &rows, || found.iter().map(|d| format!("{d}\n")).collect());
            let missed = found.iter().filter(|d| d.found.is_none()).count();
            finish(missed == 0, &format!("{missed} mutations went undetected"))
        }
    }
}

fn finish(ok: bool, why: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Failed(why.to_string()))
    }
}
