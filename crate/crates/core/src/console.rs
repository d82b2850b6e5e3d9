//! Per-premise central console: versioned policies, pushes to FVUs, result
//! and alert logs, a syslog-style alert sink, and the premise's own
//! directory entry for cross-premise sync.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::egos::{Digest32, DirectoryEntry, FvuPlacement, VersionStamp};
use crate::geometry::PremiseLayout;
use crate::policy::{compile_policy, Policy, PolicyError};
use crate::protocol::{Alert, ResultReport};
use crate::time::SimTime;

/// Alert reason recorded for a rejected enforcement (rooted OS, no EMMD).
pub const REJECTED_REASON: &str = "emmd-absent-rooted";

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Os,
    Emmd,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultOutcome {
    Compliant,
    Enforced { channel: Channel },
    Rejected,
}

impl fmt::Display for ResultOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResultOutcome::Compliant => f.write_str("compliant"),
            ResultOutcome::Enforced { channel: Channel::Os } => f.write_str("enforced(os)"),
            ResultOutcome::Enforced { channel: Channel::Emmd } => f.write_str("enforced(emmd)"),
            ResultOutcome::Rejected => f.write_str("rejected"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub timestamp: SimTime,
    pub device_id: String,
    pub zone_id: String,
    pub outcome: ResultOutcome,
    pub policy_version: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub timestamp: SimTime,
    pub device_id: String,
    pub zone_id: String,
    pub reason: String,
}

/// Work the console wants delivered.
#[derive(Clone, Debug, PartialEq)]
pub enum Outgoing {
    PolicyPush { fvu_id: String, policy: Policy },
    EgosSync(DirectoryEntry),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OutcomeCounts {
    pub compliant: u64,
    pub enforced: u64,
    pub rejected: u64,
    pub alerts: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConsoleState {
    pub console_id: String,
    pub premise_id: String,
    pub policies: BTreeMap<String, Policy>,
    pub fvu_registry: Vec<String>,
    pub results_log: Vec<ResultRecord>,
    pub alerts_log: Vec<AlertRecord>,
    #[serde(skip)]
    pub outbox: VecDeque<Outgoing>,
    /// One line per alert, oldest first.
    pub syslog: Vec<String>,
    topology: Vec<FvuPlacement>,
    stamp_counter: u64,
    stamped_digest: Digest32,
}

impl ConsoleState {
    pub fn new(console_id: impl Into<String>, premise_id: impl Into<String>) -> Self {
        let mut c = ConsoleState {
            console_id: console_id.into(),
            premise_id: premise_id.into(),
            policies: BTreeMap::new(),
            fvu_registry: Vec::new(),
            results_log: Vec::new(),
            alerts_log: Vec::new(),
            outbox: VecDeque::new(),
            syslog: Vec::new(),
            topology: Vec::new(),
            stamp_counter: 0,
            stamped_digest: Digest32::default(),
        };
        c.stamped_digest = c.results_digest();
        c
    }

    /// Console for a layout, with every zone's FVU registered.
    pub fn for_layout(layout: &PremiseLayout) -> Self {
        let mut c = ConsoleState::new(layout.console_id.clone(), layout.premise_id.clone());
        for z in &layout.zones {
            c.fvu_registry.push(z.fvu_id.clone());
            c.topology.push(FvuPlacement {
                fvu_id: z.fvu_id.clone(),
                zone_id: z.zone_id.clone(),
                center: z.center,
                radius: z.radius,
            });
        }
        c
    }

    pub fn register_fvu(&mut self, placement: FvuPlacement) {
        self.fvu_registry.push(placement.fvu_id.clone());
        self.topology.push(placement);
    }

    /// Compile and publish a policy document.
    pub fn publish_policy(&mut self, source: &str) -> Result<&Policy, PolicyError> {
        let policy = compile_policy(source)?;
        self.publish_compiled(policy)
    }

    /// Publish an already compiled policy. The version is reassigned:
    /// previous version + 1, or 1 for a new policy id.
    pub fn publish_compiled(&mut self, mut policy: Policy) -> Result<&Policy, PolicyError> {
        policy.validate()?;
        if policy.premise_id != self.premise_id {
            return Err(PolicyError::Parse(format!(
                "policy targets premise {:?}, console manages {:?}",
                policy.premise_id, self.premise_id
            )));
        }
        policy.version = self.policies.get(&policy.policy_id).map_or(1, |p| p.version + 1);
        for fvu_id in &self.fvu_registry {
            self.outbox.push_back(Outgoing::PolicyPush {
                fvu_id: fvu_id.clone(),
                policy: policy.clone(),
            });
        }
        let id = policy.policy_id.clone();
        self.policies.insert(id.clone(), policy);
        self.bump();
        self.outbox.push_back(Outgoing::EgosSync(self.local_entry()));
        Ok(&self.policies[&id])
    }

    pub fn record_result(&mut self, report: &ResultReport) {
        self.results_log.push(ResultRecord {
            timestamp: report.timestamp,
            device_id: report.device_id.clone(),
            zone_id: report.zone_id.clone(),
            outcome: report.outcome,
            policy_version: report.policy_version,
        });
        if report.outcome == ResultOutcome::Rejected {
            self.push_alert(AlertRecord {
                timestamp: report.timestamp,
                device_id: report.device_id.clone(),
                zone_id: report.zone_id.clone(),
                reason: REJECTED_REASON.to_owned(),
            });
        }
    }

    pub fn handle_alert(&mut self, alert: &Alert) {
        self.push_alert(AlertRecord {
            timestamp: alert.timestamp,
            device_id: alert.device_id.clone(),
            zone_id: alert.zone_id.clone(),
            reason: alert.reason.clone(),
        });
    }

    fn push_alert(&mut self, rec: AlertRecord) {
        self.syslog.push(format!(
            "{} ALERT premise={} device={} zone={} reason={}",
            rec.timestamp, self.premise_id, rec.device_id, rec.zone_id, rec.reason
        ));
        self.alerts_log.push(rec);
    }

    pub fn counts(&self) -> OutcomeCounts {
        let mut c = OutcomeCounts {
            alerts: self.alerts_log.len() as u64,
            ..Default::default()
        };
        for r in &self.results_log {
            match r.outcome {
                ResultOutcome::Compliant => c.compliant += 1,
                ResultOutcome::Enforced { .. } => c.enforced += 1,
                ResultOutcome::Rejected => c.rejected += 1,
            }
        }
        c
    }

    /// SHA-256 over the results log, one canonical JSON record per line.
    pub fn results_digest(&self) -> Digest32 {
        let mut buf = Vec::new();
        for r in &self.results_log {
            serde_json::to_writer(&mut buf, r).expect("record serializes");
            buf.push(b'\n');
        }
        Digest32::of(&buf)
    }

    fn bump(&mut self) {
        self.stamp_counter += 1;
        self.stamped_digest = self.results_digest();
    }

    /// This premise's directory entry as of the last stamp bump.
    pub fn local_entry(&self) -> DirectoryEntry {
        DirectoryEntry {
            premise_id: self.premise_id.clone(),
            policy_versions: self.policies.iter().map(|(k, p)| (k.clone(), p.version)).collect(),
            fvu_topology: self.topology.clone(),
            results_digest: self.stamped_digest,
            stamp: VersionStamp {
                counter: self.stamp_counter,
                origin_id: self.console_id.clone(),
            },
        }
    }

    /// If results changed since the last bump, bump the stamp and return the
    /// new entry.
    pub fn refresh_entry(&mut self) -> Option<DirectoryEntry> {
        if self.results_digest() == self.stamped_digest {
            return None;
        }
        self.bump();
        Some(self.local_entry())
    }

    pub fn drain_outbox(&mut self) -> Vec<Outgoing> {
        self.outbox.drain(..).collect()
    }
}
