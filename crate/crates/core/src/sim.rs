//! Deterministic discrete-event engine.
//!
//! Events run in `(at, insertion sequence)` order. Every message between
//! components travels as an encoded, authenticated frame with one
//! `link_latency` per hop, and every executed event appends one canonical
//! JSON line to the trace. Two runs of the same [`Scenario`] produce the
//! same trace bytes.
//!
//! Premise entry and exit follow the premise rectangle. Zone coverage only
//! counts while inside the rectangle. When a device leaves the rectangle the
//! engine picks exactly one FVU of that premise as restore authority: the
//! lowest-id FVU still holding a session, else the FVU that saw the device
//! last, else the premise's first FVU.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::console::{Channel, ConsoleState, OutcomeCounts, Outgoing, ResultOutcome};
use crate::device::{DeviceProfile, EnforcementStatus};
use crate::egos::{diff, full_mesh, Digest32, EgosDirectory};
use crate::fvu::{Destination, FvuAction, FvuState, T_PROBE};
use crate::geometry::{zones_covering, Point, PremiseLayout};
use crate::policy::{is_compliant, Policy, PrivacySettings, SettingsDelta, Toggle};
use crate::protocol::{
    decode, encode, Alert, AuthKey, EgosSync, EnforceAck, MessageBody, PolicyPush, ReplayGuard, ResultReport,
    StateReport, SENDER_LEN,
};
use crate::time::SimTime;

/// A policy the console publishes at `at`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduledPolicy {
    pub at: SimTime,
    pub policy: Policy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PremiseSetup {
    pub layout: PremiseLayout,
    /// World position of the layout's `(0, 0)` corner.
    pub origin: Point,
    pub policies: Vec<ScheduledPolicy>,
    pub key: AuthKey,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EgosSchedule {
    /// Anti-entropy period; `None` disables sync rounds.
    pub period: Option<SimTime>,
    /// Directed `(from, to)` premise links; `None` means full mesh.
    pub links: Option<Vec<(String, String)>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub premises: Vec<PremiseSetup>,
    pub devices: Vec<DeviceProfile>,
    pub link_latency: SimTime,
    pub tick: SimTime,
    pub duration: SimTime,
    /// Recorded in the trace header. Core scenarios draw no randomness.
    pub seed: u64,
    pub egos: EgosSchedule,
}

/// The first failed validation, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field}: {message}")]
pub struct ScenarioError {
    pub field: String,
    pub message: String,
}

impl ScenarioError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        ScenarioError {
            field: field.into(),
            message: message.into(),
        }
    }
}

fn check_id(field: &str, id: &str) -> Result<(), ScenarioError> {
    if id.is_empty() || id.len() > SENDER_LEN || id.contains('\0') {
        return Err(ScenarioError::new(field, format!("id {id:?} must be 1..=16 bytes")));
    }
    Ok(())
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.duration == SimTime::ZERO {
            return Err(ScenarioError::new("run.duration", "must be > 0"));
        }
        if self.tick == SimTime::ZERO {
            return Err(ScenarioError::new("run.tick", "must be > 0"));
        }
        let mut premise_ids = BTreeSet::new();
        for (i, p) in self.premises.iter().enumerate() {
            let f = |name: &str| format!("premises[{i}].{name}");
            let l = &p.layout;
            if l.premise_id.is_empty() || !premise_ids.insert(l.premise_id.as_str()) {
                return Err(ScenarioError::new(f("premise_id"), "missing or duplicate premise id"));
            }
            check_id(&f("console_id"), &l.console_id)?;
            if !p.origin.is_finite() {
                return Err(ScenarioError::new(f("origin"), "non-finite coordinate"));
            }
            l.validate()
                .map_err(|e| ScenarioError::new(f("zones"), e.to_string()))?;
            if l.zones.is_empty() {
                return Err(ScenarioError::new(f("zones"), "premise needs at least one zone"));
            }
            for z in &l.zones {
                check_id(&f("zones.fvu_id"), &z.fvu_id)?;
            }
            for (k, sp) in p.policies.iter().enumerate() {
                let field = format!("premises[{i}].policies[{k}]");
                sp.policy
                    .validate()
                    .map_err(|e| ScenarioError::new(&field, e.to_string()))?;
                if sp.policy.premise_id != l.premise_id {
                    return Err(ScenarioError::new(
                        field,
                        "policy premise_id does not match its premise",
                    ));
                }
                if sp.at > self.duration {
                    return Err(ScenarioError::new(format!("{field}.at"), "publish time after run end"));
                }
            }
        }
        let mut device_ids = BTreeSet::new();
        for (i, d) in self.devices.iter().enumerate() {
            let field = format!("devices[{i}]");
            check_id(&format!("{field}.device_id"), &d.device_id)?;
            if !device_ids.insert(d.device_id.as_str()) {
                return Err(ScenarioError::new(format!("{field}.device_id"), "duplicate device id"));
            }
            d.validate()
                .map_err(|e| ScenarioError::new(format!("{field}.waypoints"), e.to_string()))?;
            if !d.snapshots.is_empty() {
                return Err(ScenarioError::new(
                    format!("{field}.snapshots"),
                    "devices must start outside every premise",
                ));
            }
            if d.waypoints.iter().any(|w| !w.point.is_finite()) {
                return Err(ScenarioError::new(
                    format!("{field}.waypoints"),
                    "non-finite coordinate",
                ));
            }
        }
        if let Some(period) = self.egos.period {
            if period == SimTime::ZERO {
                return Err(ScenarioError::new("egos.sync_period", "must be > 0"));
            }
        }
        if let Some(links) = &self.egos.links {
            for (a, b) in links {
                for id in [a, b] {
                    if !premise_ids.contains(id.as_str()) {
                        return Err(ScenarioError::new("egos.links", format!("unknown premise {id:?}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Upper bound on breach re-enforcement latency: one probe period plus
    /// probe, report, enforce and ack hops.
    pub fn breach_bound(&self) -> SimTime {
        T_PROBE + SimTime(4 * self.link_latency.as_millis())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Endpoint {
    Device(String),
    Fvu(usize, String),
    Console(usize),
    Egos(usize),
}

#[derive(Clone, Debug)]
enum EventKind {
    Motion,
    Deliver {
        from: Endpoint,
        to: Endpoint,
        frame: Vec<u8>,
    },
    Timer {
        premise: usize,
        fvu: String,
        device: String,
        token: u64,
    },
    Evasive {
        device: usize,
    },
    Sync,
    Publish {
        premise: usize,
        index: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RestoreCheck {
    pub premise_id: String,
    pub at_ms: u64,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DeviceReport {
    pub device_id: String,
    pub first_coverage_ms: Option<u64>,
    pub compliant_at_ms: Option<u64>,
    /// First coverage to first moment the device met every covering zone's
    /// requirement, as confirmed by an FVU result.
    pub compliance_latency_ms: Option<u64>,
    /// Longest stretch inside a premise between covered motion samples.
    pub max_unmonitored_ms: Option<u64>,
    pub breach_latencies_ms: Vec<u64>,
    /// Breaches dropped because the device left coverage first.
    pub breaches_out_of_coverage: u64,
    /// Breach times still open when the run ended.
    pub unresolved_breaches_ms: Vec<u64>,
    pub restores: Vec<RestoreCheck>,
    pub channels: BTreeSet<Channel>,
    pub final_settings: PrivacySettings,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConsoleSummary {
    pub premise_id: String,
    pub console_id: String,
    pub counts: OutcomeCounts,
    pub results_digest: Digest32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EgosSummary {
    pub rounds: u64,
    pub converged: bool,
    pub last_local_change_ms: Option<u64>,
    pub replica_digests: BTreeMap<String, Digest32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub duration_ms: u64,
    pub tick_ms: u64,
    pub link_latency_ms: u64,
    pub events: u64,
    pub devices: Vec<DeviceReport>,
    /// Ground truth tallied from FVU outputs.
    pub counts: OutcomeCounts,
    pub consoles: Vec<ConsoleSummary>,
    pub restore_violations: u64,
    pub decode_errors: u64,
    pub egos: EgosSummary,
    pub trace_hash: Digest32,
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub trace: Vec<u8>,
    pub consoles: Vec<ConsoleState>,
    pub replicas: BTreeMap<String, EgosDirectory>,
    pub devices: Vec<DeviceProfile>,
}

#[derive(Clone, Copy, Debug)]
struct Breach {
    at: SimTime,
    reapplied: bool,
}

#[derive(Clone, Debug, Default)]
struct Track {
    inside: Vec<bool>,
    covering: Vec<BTreeSet<String>>,
    last_attached: Vec<Option<String>>,
    entry_settings: Vec<Option<PrivacySettings>>,
    pending_exit: Vec<bool>,
    last_monitored: Vec<SimTime>,
    first_coverage: Option<SimTime>,
    compliant_at: Option<SimTime>,
    max_unmonitored: Option<u64>,
    breach: Option<Breach>,
    breach_latencies: Vec<u64>,
    breaches_out_of_coverage: u64,
    restores: Vec<RestoreCheck>,
    channels: BTreeSet<Channel>,
}

struct Engine<'s> {
    s: &'s Scenario,
    now: SimTime,
    queue: BTreeMap<(SimTime, u64), EventKind>,
    next_seq: u64,
    devices: Vec<DeviceProfile>,
    device_index: BTreeMap<String, usize>,
    fvus: Vec<BTreeMap<String, FvuState>>,
    consoles: Vec<ConsoleState>,
    replicas: BTreeMap<String, EgosDirectory>,
    tracks: Vec<Track>,
    send_seq: BTreeMap<Endpoint, u32>,
    guards: BTreeMap<Endpoint, ReplayGuard>,
    trace: Vec<u8>,
    counts: OutcomeCounts,
    events: u64,
    decode_errors: u64,
    sync_rounds: u64,
    last_local_change: Option<SimTime>,
}

/// Run `s` to completion.
pub fn run_scenario(s: &Scenario) -> Result<RunOutput, ScenarioError> {
    s.validate()?;
    let mut e = Engine::new(s);
    e.run();
    Ok(e.finish())
}

impl<'s> Engine<'s> {
    fn new(s: &'s Scenario) -> Self {
        let np = s.premises.len();
        let fvus = s
            .premises
            .iter()
            .map(|p| {
                p.layout
                    .zones
                    .iter()
                    .map(|z| {
                        (
                            z.fvu_id.clone(),
                            FvuState::new(z.fvu_id.clone(), z.zone_id.clone(), z.tags.clone()),
                        )
                    })
                    .collect()
            })
            .collect();
        let consoles: Vec<ConsoleState> = s.premises.iter().map(|p| ConsoleState::for_layout(&p.layout)).collect();
        let replicas = consoles
            .iter()
            .map(|c| {
                let mut d = EgosDirectory::new();
                d.merge_entry(c.local_entry());
                (c.premise_id.clone(), d)
            })
            .collect();
        let tracks = s
            .devices
            .iter()
            .map(|_| Track {
                inside: vec![false; np],
                covering: vec![BTreeSet::new(); np],
                last_attached: vec![None; np],
                entry_settings: vec![None; np],
                pending_exit: vec![false; np],
                last_monitored: vec![SimTime::ZERO; np],
                ..Default::default()
            })
            .collect();
        Engine {
            s,
            now: SimTime::ZERO,
            queue: BTreeMap::new(),
            next_seq: 0,
            devices: s.devices.clone(),
            device_index: s
                .devices
                .iter()
                .enumerate()
                .map(|(i, d)| (d.device_id.clone(), i))
                .collect(),
            fvus,
            consoles,
            replicas,
            tracks,
            send_seq: BTreeMap::new(),
            guards: BTreeMap::new(),
            trace: Vec::new(),
            counts: OutcomeCounts::default(),
            events: 0,
            decode_errors: 0,
            sync_rounds: 0,
            last_local_change: None,
        }
    }

    fn schedule(&mut self, at: SimTime, kind: EventKind) {
        self.queue.insert((at, self.next_seq), kind);
        self.next_seq += 1;
    }

    fn line(&mut self, v: Value) {
        serde_json::to_writer(&mut self.trace, &v).expect("trace line serializes");
        self.trace.push(b'\n');
    }

    fn endpoint_name(&self, ep: &Endpoint) -> String {
        match ep {
            Endpoint::Device(d) => format!("device:{d}"),
            Endpoint::Fvu(p, f) => format!("fvu:{}/{f}", self.s.premises[*p].layout.premise_id),
            Endpoint::Console(p) => format!("console:{}", self.s.premises[*p].layout.premise_id),
            Endpoint::Egos(p) => format!("egos:{}", self.s.premises[*p].layout.premise_id),
        }
    }

    fn sender_id(&self, ep: &Endpoint) -> String {
        match ep {
            Endpoint::Device(d) => d.clone(),
            Endpoint::Fvu(_, f) => f.clone(),
            Endpoint::Console(p) | Endpoint::Egos(p) => self.s.premises[*p].layout.console_id.clone(),
        }
    }

    fn link_key(&self, from: &Endpoint, to: &Endpoint) -> &'s AuthKey {
        let premise = match (from, to) {
            (Endpoint::Fvu(p, _), _) | (_, Endpoint::Fvu(p, _)) => *p,
            (Endpoint::Console(p), _) | (Endpoint::Egos(p), _) => *p,
            (_, Endpoint::Console(p)) | (_, Endpoint::Egos(p)) => *p,
            (Endpoint::Device(_), Endpoint::Device(_)) => 0,
        };
        &self.s.premises[premise].key
    }

    fn send(&mut self, from: Endpoint, to: Endpoint, body: MessageBody) {
        let seq = {
            let c = self.send_seq.entry(from.clone()).or_insert(0);
            let v = *c;
            *c = c.wrapping_add(1);
            v
        };
        let key = self.link_key(&from, &to);
        let frame = encode(&body, seq, &self.sender_id(&from), key).expect("scenario ids and bodies fit the frame");
        let at = self.now + self.s.link_latency;
        self.schedule(at, EventKind::Deliver { from, to, frame });
    }

    fn run(&mut self) {
        let s = self.s;
        self.line(json!({
            "ev": "meta",
            "scenario": s.name,
            "seed": s.seed,
            "duration_ms": s.duration.as_millis(),
            "tick_ms": s.tick.as_millis(),
            "latency_ms": s.link_latency.as_millis(),
            "premises": s.premises.iter().map(|p| p.layout.premise_id.clone()).collect::<Vec<_>>(),
            "devices": s.devices.iter().map(|d| d.device_id.clone()).collect::<Vec<_>>(),
        }));
        for (pi, p) in s.premises.iter().enumerate() {
            for (k, sp) in p.policies.iter().enumerate() {
                self.schedule(sp.at, EventKind::Publish { premise: pi, index: k });
            }
        }
        self.schedule(SimTime::ZERO, EventKind::Motion);
        for (i, d) in s.devices.iter().enumerate() {
            if let crate::device::Behavior::Evasive { interval } = d.behavior {
                let mut t = interval;
                while t <= s.duration {
                    self.schedule(t, EventKind::Evasive { device: i });
                    t = t + interval;
                }
            }
        }
        if let Some(period) = s.egos.period {
            self.schedule(period, EventKind::Sync);
        }

        while let Some(entry) = self.queue.first_entry() {
            let (at, _) = *entry.key();
            if at > s.duration {
                break;
            }
            let ((at, seq), kind) = entry.remove_entry();
            self.now = at;
            self.events += 1;
            self.dispatch(seq, kind);
        }

        // Drain frames already on the wire so nothing sent is lost. Timers and
        // motion past the end are dropped.
        while let Some(((at, seq), kind)) = self.queue.pop_first() {
            if let EventKind::Deliver { .. } = kind {
                self.now = at;
                self.events += 1;
                self.dispatch(seq, kind);
            }
        }
    }

    fn dispatch(&mut self, seq: u64, kind: EventKind) {
        match kind {
            EventKind::Motion => self.on_motion(seq),
            EventKind::Deliver { from, to, frame } => self.on_deliver(seq, from, to, frame),
            EventKind::Timer {
                premise,
                fvu,
                device,
                token,
            } => {
                let res = self.fvus[premise]
                    .get_mut(&fvu)
                    .map(|f| f.on_timer(&device, token, self.now));
                let fvu_name = self.endpoint_name(&Endpoint::Fvu(premise, fvu.clone()));
                match res {
                    Some(Ok(actions)) => {
                        self.line(json!({"t": self.now, "n": seq, "ev": "timer", "fvu": fvu_name, "device": device, "token": token, "actions": &actions}));
                        self.apply_actions(premise, &fvu, actions);
                    }
                    Some(Err(err)) => {
                        self.line(json!({"t": self.now, "n": seq, "ev": "timer", "fvu": fvu_name, "device": device, "token": token, "error": err.to_string()}));
                    }
                    None => {}
                }
            }
            EventKind::Evasive { device } => self.on_evasive(seq, device),
            EventKind::Sync => self.on_sync(seq),
            EventKind::Publish { premise, index } => self.on_publish(seq, premise, index),
        }
    }

    fn on_publish(&mut self, seq: u64, premise: usize, index: usize) {
        let policy = self.s.premises[premise].policies[index].policy.clone();
        let res = self.consoles[premise]
            .publish_compiled(policy)
            .map(|p| (p.policy_id.clone(), p.version));
        match res {
            Ok((id, version)) => {
                self.last_local_change = Some(self.now);
                self.line(json!({"t": self.now, "n": seq, "ev": "publish", "premise": self.s.premises[premise].layout.premise_id, "policy_id": id, "version": version}));
                self.flush_console(premise);
            }
            Err(err) => {
                self.line(json!({"t": self.now, "n": seq, "ev": "publish", "premise": self.s.premises[premise].layout.premise_id, "error": err.to_string()}));
            }
        }
    }

    fn flush_console(&mut self, premise: usize) {
        for out in self.consoles[premise].drain_outbox() {
            match out {
                Outgoing::PolicyPush { fvu_id, policy } => self.send(
                    Endpoint::Console(premise),
                    Endpoint::Fvu(premise, fvu_id),
                    MessageBody::PolicyPush(PolicyPush { policy }),
                ),
                Outgoing::EgosSync(entry) => self.send(
                    Endpoint::Console(premise),
                    Endpoint::Egos(premise),
                    MessageBody::EgosSync(EgosSync { entries: vec![entry] }),
                ),
            }
        }
    }

    /// Union of what every FVU currently covering the device demands.
    fn required_for(&self, device: usize) -> SettingsDelta {
        let t = &self.tracks[device];
        let mut req = SettingsDelta::default();
        for (p, cover) in t.covering.iter().enumerate() {
            for f in cover {
                if let Some(fvu) = self.fvus[p].get(f) {
                    req = req.merge(&fvu.required());
                }
            }
        }
        req
    }

    fn is_covered(&self, device: usize) -> bool {
        self.tracks[device].covering.iter().any(|c| !c.is_empty())
    }

    fn on_motion(&mut self, seq: u64) {
        let s = self.s;
        let now = self.now;
        let mut changes = Vec::new();
        let mut positions = Vec::new();
        for di in 0..self.devices.len() {
            let world = self.devices[di].position_at(now).expect("validated non-empty path");
            self.devices[di].position = world;
            positions.push(json!([self.devices[di].device_id, world.x, world.y]));
            let device_id = self.devices[di].device_id.clone();
            for (pi, premise) in s.premises.iter().enumerate() {
                let layout = &premise.layout;
                let pos = Point::new(world.x - premise.origin.x, world.y - premise.origin.y);
                let was_inside = self.tracks[di].inside[pi];
                let inside = layout.contains(&pos);
                if inside && !was_inside {
                    let snap = self.devices[di].snapshot_on_entry(&layout.premise_id);
                    let t = &mut self.tracks[di];
                    t.inside[pi] = true;
                    t.entry_settings[pi] = Some(self.devices[di].settings);
                    t.last_monitored[pi] = now;
                    changes.push(match snap {
                        Ok(()) => json!({"device": device_id, "enter": layout.premise_id}),
                        Err(e) => json!({"device": device_id, "enter": layout.premise_id, "error": e.to_string()}),
                    });
                }
                let now_covering: BTreeSet<String> = if inside {
                    zones_covering(layout, &pos)
                        .into_iter()
                        .map(|z| z.fvu_id.clone())
                        .collect()
                } else {
                    BTreeSet::new()
                };
                let before = std::mem::take(&mut self.tracks[di].covering[pi]);

                for f in now_covering.difference(&before) {
                    changes.push(json!({"device": device_id, "in_range": f}));
                    let actions = self.fvus[pi]
                        .get_mut(f)
                        .expect("fvu exists")
                        .on_device_in_range(&device_id, now);
                    self.apply_actions(pi, f, actions);
                    let t = &mut self.tracks[di];
                    t.last_attached[pi] = Some(f.clone());
                    t.first_coverage.get_or_insert(now);
                }
                if inside {
                    for f in before.difference(&now_covering) {
                        changes.push(json!({"device": device_id, "out_of_range": f}));
                        let actions = self.fvus[pi]
                            .get_mut(f)
                            .expect("fvu exists")
                            .on_device_out_of_range(&device_id, false, now);
                        self.apply_actions(pi, f, actions);
                    }
                }
                if let Some(f) = now_covering.iter().next() {
                    self.tracks[di].last_attached[pi] = Some(f.clone());
                }
                self.tracks[di].covering[pi] = now_covering;

                if was_inside && !inside {
                    let authority = before
                        .iter()
                        .next()
                        .cloned()
                        .or_else(|| self.tracks[di].last_attached[pi].clone())
                        .unwrap_or_else(|| layout.zones[0].fvu_id.clone());
                    for f in before
                        .iter()
                        .chain(std::iter::once(&authority).filter(|a| !before.contains(*a)))
                    {
                        let actions = self.fvus[pi].get_mut(f).expect("fvu exists").on_device_out_of_range(
                            &device_id,
                            *f == authority,
                            now,
                        );
                        self.apply_actions(pi, f, actions);
                    }
                    let t = &mut self.tracks[di];
                    t.inside[pi] = false;
                    t.pending_exit[pi] = true;
                    let gap = (now - t.last_monitored[pi]).as_millis();
                    t.max_unmonitored = Some(t.max_unmonitored.unwrap_or(0).max(gap));
                    changes.push(json!({"device": device_id, "exit": layout.premise_id, "restore_by": authority}));
                } else if inside && !self.tracks[di].covering[pi].is_empty() {
                    let t = &mut self.tracks[di];
                    let gap = (now - t.last_monitored[pi]).as_millis();
                    t.max_unmonitored = Some(t.max_unmonitored.unwrap_or(0).max(gap));
                    t.last_monitored[pi] = now;
                }
            }
            if self.tracks[di].breach.is_some() && !self.is_covered(di) {
                let t = &mut self.tracks[di];
                t.breach = None;
                t.breaches_out_of_coverage += 1;
                changes.push(json!({"device": device_id, "breach_dropped": "left coverage"}));
            }
        }
        self.line(json!({"t": now, "n": seq, "ev": "motion", "positions": positions, "changes": changes}));
        let next = now + self.s.tick;
        if next <= self.s.duration {
            self.schedule(next, EventKind::Motion);
        }
    }

    fn on_evasive(&mut self, seq: u64, di: usize) {
        let now = self.now;
        let reverted = self.devices[di].evasive_tick(now);
        let mut breach = false;
        if reverted.is_some()
            && self.is_covered(di)
            && self.required_for(di).camera == Some(Toggle::Off)
            && self.tracks[di].breach.is_none()
        {
            self.tracks[di].breach = Some(Breach {
                at: now,
                reapplied: false,
            });
            breach = true;
        }
        self.line(json!({
            "t": now, "n": seq, "ev": "evasive",
            "device": self.devices[di].device_id,
            "reverted": reverted, "breach": breach,
        }));
    }

    fn on_sync(&mut self, seq: u64) {
        let s = self.s;
        self.sync_rounds += 1;
        let mut refreshed = Vec::new();
        for pi in 0..self.consoles.len() {
            if let Some(entry) = self.consoles[pi].refresh_entry() {
                self.last_local_change = Some(self.now);
                refreshed.push(entry.premise_id.clone());
                self.replicas
                    .get_mut(&s.premises[pi].layout.premise_id)
                    .expect("replica")
                    .merge_entry(entry);
            }
        }
        let links = match &s.egos.links {
            Some(l) => l.clone(),
            None => full_mesh(self.replicas.keys()),
        };
        let index: BTreeMap<&str, usize> = s
            .premises
            .iter()
            .enumerate()
            .map(|(i, p)| (p.layout.premise_id.as_str(), i))
            .collect();
        let mut exchanged = Vec::new();
        for (from, to) in &links {
            let delta = diff(&self.replicas[from], &self.replicas[to]);
            if delta.is_empty() {
                continue;
            }
            // Ship the diff as an authenticated frame and merge what decodes.
            let fp = index[from.as_str()];
            let key = &s.premises[fp].key;
            let seq_no = {
                let c = self.send_seq.entry(Endpoint::Egos(fp)).or_insert(0);
                let v = *c;
                *c = c.wrapping_add(1);
                v
            };
            let frame = encode(
                &MessageBody::EgosSync(EgosSync { entries: delta }),
                seq_no,
                &s.premises[fp].layout.console_id,
                key,
            )
            .expect("directory diff fits a frame");
            match decode(&frame, key) {
                Ok(f) => {
                    if let MessageBody::EgosSync(body) = f.body {
                        let n = body.entries.len();
                        let dst = self.replicas.get_mut(to).expect("replica");
                        for e in body.entries {
                            dst.merge_entry(e);
                        }
                        exchanged.push(json!([from, to, n]));
                    }
                }
                Err(_) => self.decode_errors += 1,
            }
        }
        self.line(json!({"t": self.now, "n": seq, "ev": "sync", "refreshed": refreshed, "links": exchanged}));
        if let Some(period) = s.egos.period {
            let next = self.now + period;
            if next <= s.duration {
                self.schedule(next, EventKind::Sync);
            }
        }
    }

    fn on_deliver(&mut self, seq: u64, from: Endpoint, to: Endpoint, frame: Vec<u8>) {
        let key = self.link_key(&from, &to);
        let from_name = self.endpoint_name(&from);
        let to_name = self.endpoint_name(&to);
        let decoded = match decode(&frame, key) {
            Ok(f) => f,
            Err(err) => {
                self.decode_errors += 1;
                self.line(json!({"t": self.now, "n": seq, "ev": "deliver", "from": from_name, "to": to_name, "error": err.name()}));
                return;
            }
        };
        if !self
            .guards
            .entry(to.clone())
            .or_default()
            .accept(&decoded.sender_id, decoded.seq)
        {
            self.line(json!({"t": self.now, "n": seq, "ev": "deliver", "from": from_name, "to": to_name, "seq": decoded.seq, "error": "duplicate"}));
            return;
        }
        let msg_type = decoded.msg_type.name();
        let note = match (&to, decoded.body.clone()) {
            (Endpoint::Device(d), body) => self.device_receive(d, &from, body),
            (Endpoint::Fvu(p, f), body) => self.fvu_receive(*p, f, body),
            (Endpoint::Console(p), MessageBody::ResultReport(r)) => {
                self.consoles[*p].record_result(&r);
                Value::Null
            }
            (Endpoint::Console(p), MessageBody::Alert(a)) => {
                self.consoles[*p].handle_alert(&a);
                Value::Null
            }
            (Endpoint::Egos(p), MessageBody::EgosSync(body)) => {
                let pid = &self.s.premises[*p].layout.premise_id;
                let dst = self.replicas.get_mut(pid).expect("replica");
                for e in body.entries {
                    dst.merge_entry(e);
                }
                Value::Null
            }
            (_, _) => json!("unexpected message for endpoint"),
        };
        let mut line = json!({
            "t": self.now, "n": seq, "ev": "deliver",
            "from": from_name, "to": to_name,
            "type": msg_type, "seq": decoded.seq, "body": decoded.body,
        });
        if !note.is_null() {
            line["note"] = note;
        }
        self.line(line);
    }

    fn device_receive(&mut self, device_id: &str, from: &Endpoint, body: MessageBody) -> Value {
        let Some(&di) = self.device_index.get(device_id) else {
            return json!("unknown device");
        };
        let Endpoint::Fvu(pi, _) = from else {
            return json!("device accepts FVU traffic only");
        };
        let pi = *pi;
        let dev_ep = Endpoint::Device(device_id.to_owned());
        match body {
            MessageBody::Interrogate(_) => {
                let d = &self.devices[di];
                let report = StateReport {
                    device_id: d.device_id.clone(),
                    settings: d.settings,
                    os_integrity: d.os_integrity,
                    emmd: d.emmd,
                };
                self.send(dev_ep, from.clone(), MessageBody::StateReport(report));
                Value::Null
            }
            MessageBody::Enforce(e) if e.device_id == device_id => {
                let outcome = self.devices[di].apply_enforcement(&e.delta);
                if let Some(b) = self.tracks[di].breach.as_mut() {
                    if outcome.status != EnforcementStatus::Rejected && outcome.resulting.camera == Toggle::Off {
                        b.reapplied = true;
                    }
                }
                self.send(
                    dev_ep,
                    from.clone(),
                    MessageBody::EnforceAck(EnforceAck {
                        device_id: device_id.to_owned(),
                        outcome,
                    }),
                );
                Value::Null
            }
            MessageBody::Restore(r) if r.device_id == device_id => {
                let premise_id = self.s.premises[pi].layout.premise_id.clone();
                let restored = self.devices[di].restore_on_exit(&premise_id);
                let t = &mut self.tracks[di];
                let expected = t.entry_settings[pi].take();
                let ok = t.pending_exit[pi] && matches!((&restored, expected), (Ok(now), Some(exp)) if *now == exp);
                t.pending_exit[pi] = false;
                t.restores.push(RestoreCheck {
                    premise_id,
                    at_ms: self.now.as_millis(),
                    ok,
                });
                match restored {
                    Ok(_) => json!({"restored": ok}),
                    Err(e) => json!({"restored": false, "error": e.to_string()}),
                }
            }
            _ => json!("ignored"),
        }
    }

    fn fvu_receive(&mut self, pi: usize, fvu_id: &str, body: MessageBody) -> Value {
        let now = self.now;
        let Some(fvu) = self.fvus[pi].get_mut(fvu_id) else {
            return json!("unknown fvu");
        };
        let res = match &body {
            MessageBody::StateReport(r) => fvu.on_state_report(r, now),
            MessageBody::EnforceAck(a) => {
                let res = fvu.on_enforce_ack(a, now);
                if res.is_ok() && a.outcome.status != EnforcementStatus::Rejected {
                    if let Some(&di) = self.device_index.get(&a.device_id) {
                        let t = &mut self.tracks[di];
                        if let Some(b) = t.breach.filter(|b| b.reapplied) {
                            t.breach_latencies.push((now - b.at).as_millis());
                            t.breach = None;
                        }
                    }
                }
                res
            }
            MessageBody::PolicyPush(p) => fvu.on_policy_push(p.policy.clone(), now),
            _ => return json!("ignored"),
        };
        match res {
            Ok(actions) => {
                self.apply_actions(pi, fvu_id, actions);
                Value::Null
            }
            Err(e) => json!(e.to_string()),
        }
    }

    fn apply_actions(&mut self, pi: usize, fvu_id: &str, actions: Vec<FvuAction>) {
        let fvu_ep = Endpoint::Fvu(pi, fvu_id.to_owned());
        let zone_id = self.fvus[pi][fvu_id].zone_id.clone();
        for a in actions {
            match a {
                FvuAction::Send { to, body } => {
                    let dst = match to {
                        Destination::Device(d) => Endpoint::Device(d),
                        Destination::Console => Endpoint::Console(pi),
                    };
                    self.send(fvu_ep.clone(), dst, body);
                }
                FvuAction::SetTimer { device_id, at, token } => self.schedule(
                    at,
                    EventKind::Timer {
                        premise: pi,
                        fvu: fvu_id.to_owned(),
                        device: device_id,
                        token,
                    },
                ),
                FvuAction::RaiseAlert { device_id, reason } => {
                    self.counts.alerts += 1;
                    let body = MessageBody::Alert(Alert {
                        device_id,
                        zone_id: zone_id.clone(),
                        reason,
                        timestamp: self.now,
                    });
                    self.send(fvu_ep.clone(), Endpoint::Console(pi), body);
                }
                FvuAction::ReportResult {
                    device_id,
                    outcome,
                    policy_version,
                } => {
                    match outcome {
                        ResultOutcome::Compliant => self.counts.compliant += 1,
                        ResultOutcome::Enforced { .. } => self.counts.enforced += 1,
                        ResultOutcome::Rejected => {
                            self.counts.rejected += 1;
                            self.counts.alerts += 1;
                        }
                    }
                    if let Some(&di) = self.device_index.get(&device_id) {
                        if let ResultOutcome::Enforced { channel } = outcome {
                            self.tracks[di].channels.insert(channel);
                        }
                        if outcome != ResultOutcome::Rejected && self.tracks[di].compliant_at.is_none() {
                            let required = self.required_for(di);
                            if is_compliant(&self.devices[di].settings, &required).0 {
                                self.tracks[di].compliant_at = Some(self.now);
                            }
                        }
                    }
                    let body = MessageBody::ResultReport(ResultReport {
                        device_id,
                        zone_id: zone_id.clone(),
                        outcome,
                        timestamp: self.now,
                        policy_version,
                    });
                    self.send(fvu_ep.clone(), Endpoint::Console(pi), body);
                }
            }
        }
    }

    fn finish(self) -> RunOutput {
        let s = self.s;
        let trace_hash = Digest32::of(&self.trace);
        let mut restore_violations = 0;
        let devices: Vec<DeviceReport> = self
            .tracks
            .iter()
            .zip(&self.devices)
            .map(|(t, d)| {
                restore_violations += t.restores.iter().filter(|r| !r.ok).count() as u64;
                restore_violations += t.pending_exit.iter().filter(|&&p| p).count() as u64;
                DeviceReport {
                    device_id: d.device_id.clone(),
                    first_coverage_ms: t.first_coverage.map(SimTime::as_millis),
                    compliant_at_ms: t.compliant_at.map(SimTime::as_millis),
                    compliance_latency_ms: match (t.first_coverage, t.compliant_at) {
                        (Some(a), Some(b)) => Some((b - a).as_millis()),
                        _ => None,
                    },
                    max_unmonitored_ms: t.max_unmonitored,
                    breach_latencies_ms: t.breach_latencies.clone(),
                    breaches_out_of_coverage: t.breaches_out_of_coverage,
                    unresolved_breaches_ms: t.breach.iter().map(|b| b.at.as_millis()).collect(),
                    restores: t.restores.clone(),
                    channels: t.channels.clone(),
                    final_settings: d.settings,
                }
            })
            .collect();
        let consoles = self
            .consoles
            .iter()
            .map(|c| ConsoleSummary {
                premise_id: c.premise_id.clone(),
                console_id: c.console_id.clone(),
                counts: c.counts(),
                results_digest: c.results_digest(),
            })
            .collect();
        let replica_digests: BTreeMap<String, Digest32> =
            self.replicas.iter().map(|(k, v)| (k.clone(), v.digest())).collect();
        let converged = replica_digests.values().collect::<BTreeSet<_>>().len() <= 1;
        let report = RunReport {
            scenario: s.name.clone(),
            seed: s.seed,
            duration_ms: s.duration.as_millis(),
            tick_ms: s.tick.as_millis(),
            link_latency_ms: s.link_latency.as_millis(),
            events: self.events,
            devices,
            counts: self.counts.clone(),
            consoles,
            restore_violations,
            decode_errors: self.decode_errors,
            egos: EgosSummary {
                rounds: self.sync_rounds,
                converged,
                last_local_change_ms: self.last_local_change.map(SimTime::as_millis),
                replica_digests,
            },
            trace_hash,
        };
        RunOutput {
            report,
            trace: self.trace,
            consoles: self.consoles,
            replicas: self.replicas,
            devices: self.devices,
        }
    }
}

/// True iff every in-coverage breach was re-enforced within
/// `T_PROBE + 4·link_latency`, and no open breach has outlived that bound.
pub fn check_breach_bound(report: &RunReport, s: &Scenario) -> bool {
    let bound = s.breach_bound().as_millis();
    report.devices.iter().all(|d| {
        d.breach_latencies_ms.iter().all(|&l| l <= bound)
            && d.unresolved_breaches_ms
                .iter()
                .all(|&at| report.duration_ms.saturating_sub(at) <= bound)
    })
}

/// Outcome of one property in the `--check` suite.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PropertyCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for PropertyCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{mark} {}: {}", self.name, self.detail)
    }
}

/// Restore correctness, breach bound, and count conservation.
pub fn check_properties(report: &RunReport, s: &Scenario) -> Vec<PropertyCheck> {
    let exits: usize = report.devices.iter().map(|d| d.restores.len()).sum();
    let mut console_total = OutcomeCounts::default();
    for c in &report.consoles {
        console_total.compliant += c.counts.compliant;
        console_total.enforced += c.counts.enforced;
        console_total.rejected += c.counts.rejected;
        console_total.alerts += c.counts.alerts;
    }
    let breaches: usize = report.devices.iter().map(|d| d.breach_latencies_ms.len()).sum();
    vec![
        PropertyCheck {
            name: "restore",
            passed: report.restore_violations == 0,
            detail: format!("{exits} exits, {} violations", report.restore_violations),
        },
        PropertyCheck {
            name: "breach-bound",
            passed: check_breach_bound(report, s),
            detail: format!("{breaches} breaches, bound {} ms", s.breach_bound().as_millis()),
        },
        PropertyCheck {
            name: "conservation",
            passed: console_total == report.counts,
            detail: format!(
                "engine {}/{}/{}/{} vs consoles {}/{}/{}/{} (compliant/enforced/rejected/alerts)",
                report.counts.compliant,
                report.counts.enforced,
                report.counts.rejected,
                report.counts.alerts,
                console_total.compliant,
                console_total.enforced,
                console_total.rejected,
                console_total.alerts
            ),
        },
    ]
}
