use std::collections::BTreeSet;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use dpe_core::geometry::coverage_stats;
use dpe_core::policy::{compile_policy, required_settings};
use dpe_core::protocol::{decode, peek_header, split_frames, AuthKey, MsgType};
use dpe_core::sim::check_properties;
use dpe_core::{load_scenario, run_scenario, Scenario};

#[derive(Parser)]
#[command(name = "dpe", version, about = "Zone-based device privacy enforcement simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and summarize the outcome.
    Run {
        scenario: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the event trace (JSON lines) here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the full run report (JSON) here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Verify restore, breach-bound and conservation properties.
        #[arg(long)]
        check: bool,
        #[arg(long)]
        json: bool,
    },
    /// Policy tools.
    Policy {
        #[command(subcommand)]
        command: PolicyCommand,
    },
    /// Report zone coverage of every premise in a scenario.
    Coverage {
        scenario: PathBuf,
        /// Sampling grid step in meters.
        #[arg(long, default_value_t = 0.5)]
        step: f64,
        /// Fail if any premise covers less than this fraction.
        #[arg(long)]
        min: Option<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Frame tools.
    Frame {
        #[command(subcommand)]
        command: FrameCommand,
    },
    /// Directory tools.
    Egos {
        #[command(subcommand)]
        command: EgosCommand,
    },
}

#[derive(Subcommand)]
enum PolicyCommand {
    /// Compile a policy file and show what each tag set requires.
    Check {
        file: PathBuf,
        /// Show the requirement for a zone carrying these tags (repeatable).
        #[arg(long = "tag")]
        tags: Vec<String>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum FrameCommand {
    /// Decode a stream of frames from a file (`-` for stdin).
    Inspect {
        file: PathBuf,
        /// Input is hex text rather than raw bytes.
        #[arg(long)]
        hex: bool,
        /// Verify with this 32-byte key (64 hex digits).
        #[arg(long, conflicts_with = "premise")]
        key: Option<String>,
        /// Verify with the default key of this premise id.
        #[arg(long)]
        premise: Option<String>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum EgosCommand {
    /// Run a scenario and print every premise's directory replica.
    Dump {
        scenario: PathBuf,
        /// Only this premise's replica.
        #[arg(long)]
        premise: Option<String>,
        #[arg(long)]
        json: bool,
    },
}

enum Failure {
    /// Input could not be parsed or validated (exit 1).
    Invalid(String),
    /// Input was fine but a requested check failed (exit 2).
    Check(String),
    /// Anything else (exit 3).
    Internal(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Internal(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run {
            scenario,
            seed,
            trace,
            report,
            check,
            json,
        } => cmd_run(&scenario, seed, trace.as_deref(), report.as_deref(), check, json),
        Command::Policy {
            command: PolicyCommand::Check { file, tags, json },
        } => cmd_policy_check(&file, &tags, json),
        Command::Coverage {
            scenario,
            step,
            min,
            json,
        } => cmd_coverage(&scenario, step, min, json),
        Command::Frame {
            command:
                FrameCommand::Inspect {
                    file,
                    hex,
                    key,
                    premise,
                    json,
                },
        } => cmd_frame_inspect(&file, hex, key.as_deref(), premise.as_deref(), json),
        Command::Egos {
            command:
                EgosCommand::Dump {
                    scenario,
                    premise,
                    json,
                },
        } => cmd_egos_dump(&scenario, premise.as_deref(), json),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("internal error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    load_scenario(path).map_err(|e| Failure::Invalid(e.to_string()))
}

fn print_json(v: &Value) -> CmdResult {
    let s = serde_json::to_string_pretty(v).context("serializing output")?;
    println!("{s}");
    Ok(())
}

fn ms(v: Option<u64>) -> String {
    v.map_or_else(|| "-".to_owned(), |m| format!("{m} ms"))
}

fn cmd_run(
    path: &Path,
    seed: Option<u64>,
    trace: Option<&Path>,
    report_path: Option<&Path>,
    check: bool,
    json: bool,
) -> CmdResult {
    let mut scenario = load(path)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    let out = run_scenario(&scenario).map_err(|e| Failure::Invalid(e.to_string()))?;
    let report = &out.report;
    if let Some(p) = trace {
        std::fs::write(p, &out.trace).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = report_path {
        let bytes = serde_json::to_vec_pretty(report).context("serializing report")?;
        std::fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))?;
    }
    let checks = if check {
        check_properties(report, &scenario)
    } else {
        Vec::new()
    };

    if json {
        let mut v = json!({ "report": report });
        if check {
            v["checks"] = serde_json::to_value(&checks).context("serializing checks")?;
        }
        print_json(&v)?;
    } else {
        println!(
            "scenario {} ran {} events over {} s (tick {} ms, latency {} ms)",
            report.scenario,
            report.events,
            report.duration_ms as f64 / 1000.0,
            report.tick_ms,
            report.link_latency_ms
        );
        let c = &report.counts;
        println!(
            "results: {} compliant, {} enforced, {} rejected, {} alerts",
            c.compliant, c.enforced, c.rejected, c.alerts
        );
        for d in &report.devices {
            let channels: Vec<String> = d.channels.iter().map(|c| format!("{c:?}").to_lowercase()).collect();
            println!(
                "  {:<16} compliance {:>8}  max gap {:>8}  breaches {}  restores {}/{}  via [{}]",
                d.device_id,
                ms(d.compliance_latency_ms),
                ms(d.max_unmonitored_ms),
                d.breach_latencies_ms.len(),
                d.restores.iter().filter(|r| r.ok).count(),
                d.restores.len(),
                channels.join(",")
            );
        }
        if report.egos.rounds > 0 {
            println!(
                "egos: {} rounds, replicas {}",
                report.egos.rounds,
                if report.egos.converged { "converged" } else { "diverged" }
            );
        }
        println!("trace {}", report.trace_hash);
        for c in &checks {
            println!("{c}");
        }
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if !failed.is_empty() {
        return Err(Failure::Check(failed.join(", ")));
    }
    Ok(())
}

fn cmd_policy_check(path: &Path, tags: &[String], json: bool) -> CmdResult {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let policy = compile_policy(&text).map_err(|e| Failure::Invalid(e.to_string()))?;
    let zone_tags: BTreeSet<String> = tags.iter().cloned().collect();
    let required = required_settings(&policy, &zone_tags);
    if json {
        return print_json(&json!({
            "policy": policy,
            "zone_tags": zone_tags,
            "required": required,
        }));
    }
    println!(
        "policy {} for premise {} (version {}): {} rules",
        policy.policy_id,
        policy.premise_id,
        policy.version,
        policy.rules.len()
    );
    for r in &policy.rules {
        let scope = match &r.scope {
            dpe_core::policy::Scope::AllZones => "all zones".to_owned(),
            dpe_core::policy::Scope::Tagged(t) => format!("tags {}", t.iter().cloned().collect::<Vec<_>>().join(",")),
        };
        println!("  {:<24} {:<24} {}", r.rule_id, scope, r.required);
    }
    let label = if zone_tags.is_empty() {
        "untagged zone".to_owned()
    } else {
        format!("zone tagged {}", tags.join(","))
    };
    println!("{label} requires: {required}");
    Ok(())
}

fn cmd_coverage(path: &Path, step: f64, min: Option<f64>, json: bool) -> CmdResult {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Failure::Invalid(format!("--step must be positive, got {step}")));
    }
    let scenario = load(path)?;
    let mut rows = Vec::new();
    let mut below = Vec::new();
    for p in &scenario.premises {
        let stats = coverage_stats(&p.layout, step).map_err(|e| Failure::Invalid(e.to_string()))?;
        let fraction = stats.fraction();
        if min.is_some_and(|m| fraction < m) {
            below.push(p.layout.premise_id.clone());
        }
        rows.push((p, stats, fraction));
    }
    if json {
        let v: Vec<Value> = rows
            .iter()
            .map(|(p, s, f)| {
                json!({
                    "premise_id": p.layout.premise_id,
                    "zones": p.layout.zones.len(),
                    "samples": s.samples,
                    "covered": s.covered,
                    "fraction": f,
                    "max_gap": s.max_gap,
                    "worst_point": s.worst_point,
                })
            })
            .collect();
        print_json(&json!({ "step": step, "premises": v }))?;
    } else {
        for (p, s, f) in &rows {
            println!(
                "{:<16} {:>3} zones  {:>7.3}% covered ({}/{} samples)  max gap {:.3} m",
                p.layout.premise_id,
                p.layout.zones.len(),
                f * 100.0,
                s.covered,
                s.samples,
                s.max_gap
            );
        }
    }
    if !below.is_empty() {
        return Err(Failure::Check(format!(
            "coverage below minimum in {}",
            below.join(", ")
        )));
    }
    Ok(())
}

fn read_input(path: &Path) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    if path.as_os_str() == "-" {
        std::io::stdin().read_to_end(&mut buf).context("reading stdin")?;
    } else {
        buf = std::fs::read(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    }
    Ok(buf)
}

fn cmd_frame_inspect(path: &Path, is_hex: bool, key: Option<&str>, premise: Option<&str>, json: bool) -> CmdResult {
    let raw = read_input(path)?;
    let bytes = if is_hex {
        let text: String = String::from_utf8_lossy(&raw).split_whitespace().collect();
        hex::decode(text).map_err(|e| Failure::Invalid(format!("bad hex input: {e}")))?
    } else {
        raw
    };
    let key = match (key, premise) {
        (Some(k), _) => Some(AuthKey::from_hex(k).map_err(|e| Failure::Invalid(format!("--key: {e}")))?),
        (None, Some(p)) => Some(AuthKey::derive(p)),
        (None, None) => None,
    };
    let frames = split_frames(&bytes).map_err(|e| Failure::Invalid(format!("framing: {e}")))?;
    let mut rows = Vec::new();
    let mut bad = 0;
    for (i, f) in frames.iter().enumerate() {
        let header = peek_header(f).map_err(|e| Failure::Invalid(format!("frame {i}: {e}")))?;
        let type_name = MsgType::from_u8(header.msg_type).map_or("unknown", MsgType::name);
        let mut row = json!({
            "index": i,
            "len": f.len(),
            "type": type_name,
            "seq": header.seq,
            "sender": header.sender_id,
            "payload_len": header.payload_len,
        });
        match &key {
            None => row["verified"] = json!(false),
            Some(k) => match decode(f, k) {
                Ok(frame) => {
                    row["verified"] = json!(true);
                    row["body"] = serde_json::to_value(&frame.body).context("serializing body")?;
                }
                Err(e) => {
                    bad += 1;
                    row["verified"] = json!(false);
                    row["error"] = json!(e.name());
                    row["detail"] = json!(e.to_string());
                }
            },
        }
        rows.push(row);
    }
    if json {
        print_json(&json!({ "frames": rows }))?;
    } else {
        for r in &rows {
            let status = match (&r["error"], r["verified"].as_bool()) {
                (Value::String(e), _) => format!("FAILED {e}"),
                (_, Some(true)) => "ok".to_owned(),
                _ => "unverified".to_owned(),
            };
            println!(
                "#{} {} seq={} sender={} payload={}B {}",
                r["index"],
                r["type"].as_str().unwrap_or("?"),
                r["seq"],
                r["sender"].as_str().unwrap_or(""),
                r["payload_len"],
                status
            );
            if let Some(body) = r.get("body") {
                println!("   {body}");
            }
        }
    }
    if bad > 0 {
        return Err(Failure::Check(format!(
            "{bad} of {} frames failed verification",
            rows.len()
        )));
    }
    Ok(())
}

fn cmd_egos_dump(path: &Path, premise: Option<&str>, json: bool) -> CmdResult {
    let scenario = load(path)?;
    let out = run_scenario(&scenario).map_err(|e| Failure::Invalid(e.to_string()))?;
    let replicas: Vec<_> = out
        .replicas
        .iter()
        .filter(|(id, _)| premise.is_none_or(|p| p == id.as_str()))
        .collect();
    if let Some(p) = premise {
        if replicas.is_empty() {
            return Err(Failure::Invalid(format!("no premise {p:?} in scenario")));
        }
    }
    if json {
        let v: serde_json::Map<String, Value> = replicas
            .iter()
            .map(|(id, d)| Ok(((*id).clone(), json!({ "digest": d.digest(), "directory": d }))))
            .collect::<anyhow::Result<_>>()?;
        return print_json(&json!({ "converged": out.report.egos.converged, "replicas": v }));
    }
    for (id, dir) in replicas {
        println!("replica {id} ({} entries, digest {})", dir.len(), dir.digest());
        for e in dir.entries.values() {
            let versions: Vec<String> = e.policy_versions.iter().map(|(k, v)| format!("{k}@{v}")).collect();
            println!(
                "  {:<16} stamp {}/{}  fvus {}  policies [{}]  results {}",
                e.premise_id,
                e.stamp.counter,
                e.stamp.origin_id,
                e.fvu_topology.len(),
                versions.join(","),
                e.results_digest
            );
        }
    }
    Ok(())
}
