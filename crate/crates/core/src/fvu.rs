//! Field Verification Unit state machine.
//!
//! One session per device in range. A session walks
//! detect → interrogate → evaluate → enforce → monitor, probing periodically
//! so a device that re-enables a control gets caught and re-enforced.
//! Transitions never perform I/O; they return [`FvuAction`]s for the caller
//! to carry out. Identical `(state, event, now)` always produce identical
//! `(state', actions)`.
//!
//! Timers carry a token. Every phase change that arms a timer issues a fresh
//! token, so at most one timer per session is live and older ones arrive as
//! [`FvuError::StaleTimer`].

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::console::{Channel, ResultOutcome};
use crate::device::EnforcementStatus;
use crate::policy::{is_compliant, required_settings, Policy, SettingsDelta};
use crate::protocol::{Enforce, EnforceAck, Interrogate, MessageBody, Restore, StateReport};
use crate::time::SimTime;

pub const T_REPORT: SimTime = SimTime::from_secs(2);
pub const T_ACK: SimTime = SimTime::from_secs(2);
pub const T_PROBE: SimTime = SimTime::from_secs(10);
pub const MAX_ATTEMPTS: u8 = 3;

pub const REASON_UNRESPONSIVE: &str = "unresponsive";
pub const REASON_ENFORCE_TIMEOUT: &str = "enforce-timeout";

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionPhase {
    Detected,
    AwaitReport { deadline: SimTime, attempts: u8 },
    Evaluating,
    AwaitAck { deadline: SimTime, attempts: u8 },
    Monitoring { next_probe: SimTime },
    Alerted,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Session {
    pub phase: SessionPhase,
    /// Token of the live timer, if the phase has one.
    pub timer: Option<u64>,
    /// Delta sent in the outstanding ENFORCE, kept for retries.
    pub pending: SettingsDelta,
    /// When the current probe or enforce cycle started. The next probe is
    /// due `T_PROBE` after this.
    pub cycle_start: SimTime,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Destination {
    Device(String),
    Console,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FvuAction {
    Send {
        to: Destination,
        body: MessageBody,
    },
    SetTimer {
        device_id: String,
        at: SimTime,
        token: u64,
    },
    RaiseAlert {
        device_id: String,
        reason: String,
    },
    ReportResult {
        device_id: String,
        outcome: ResultOutcome,
        policy_version: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FvuError {
    #[error("no session for device {0}")]
    UnknownSession(String),
    #[error("stale timer for device {0}")]
    StaleTimer(String),
    #[error("ack from device {0} while not awaiting one")]
    UnexpectedAck(String),
    #[error("stale policy {policy_id} v{offered} (active v{active})")]
    StalePolicy {
        policy_id: String,
        offered: u64,
        active: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FvuState {
    pub fvu_id: String,
    pub zone_id: String,
    pub zone_tags: BTreeSet<String>,
    pub sessions: BTreeMap<String, Session>,
    /// Active policies by id. Required settings merge across all of them.
    pub policies: BTreeMap<String, Policy>,
    next_token: u64,
}

impl FvuState {
    pub fn new(fvu_id: impl Into<String>, zone_id: impl Into<String>, zone_tags: BTreeSet<String>) -> Self {
        FvuState {
            fvu_id: fvu_id.into(),
            zone_id: zone_id.into(),
            zone_tags,
            sessions: BTreeMap::new(),
            policies: BTreeMap::new(),
            next_token: 0,
        }
    }

    pub fn phase(&self, device_id: &str) -> Option<SessionPhase> {
        self.sessions.get(device_id).map(|s| s.phase)
    }

    /// What this zone currently demands.
    pub fn required(&self) -> SettingsDelta {
        self.policies
            .values()
            .map(|p| required_settings(p, &self.zone_tags))
            .fold(SettingsDelta::default(), |acc, d| acc.merge(&d))
    }

    /// Highest active policy version, 0 with no policy.
    pub fn policy_version(&self) -> u64 {
        self.policies.values().map(|p| p.version).max().unwrap_or(0)
    }

    fn arm(&mut self, device_id: &str, at: SimTime, actions: &mut Vec<FvuAction>) {
        let token = self.next_token;
        self.next_token += 1;
        if let Some(s) = self.sessions.get_mut(device_id) {
            s.timer = Some(token);
        }
        actions.push(FvuAction::SetTimer {
            device_id: device_id.to_owned(),
            at,
            token,
        });
    }

    fn interrogate(&mut self, device_id: &str, attempts: u8, now: SimTime, actions: &mut Vec<FvuAction>) {
        let s = self.sessions.get_mut(device_id).expect("session exists");
        s.phase = SessionPhase::AwaitReport {
            deadline: now + T_REPORT,
            attempts,
        };
        s.cycle_start = now;
        actions.push(FvuAction::Send {
            to: Destination::Device(device_id.to_owned()),
            body: MessageBody::Interrogate(Interrogate {
                fvu_id: self.fvu_id.clone(),
            }),
        });
        self.arm(device_id, now + T_REPORT, actions);
    }

    fn enforce(&mut self, device_id: &str, attempts: u8, now: SimTime, actions: &mut Vec<FvuAction>) {
        let s = self.sessions.get_mut(device_id).expect("session exists");
        s.phase = SessionPhase::AwaitAck {
            deadline: now + T_ACK,
            attempts,
        };
        s.cycle_start = now;
        actions.push(FvuAction::Send {
            to: Destination::Device(device_id.to_owned()),
            body: MessageBody::Enforce(Enforce {
                device_id: device_id.to_owned(),
                delta: s.pending,
            }),
        });
        self.arm(device_id, now + T_ACK, actions);
    }

    fn monitor(&mut self, device_id: &str, now: SimTime, actions: &mut Vec<FvuAction>) {
        let s = self.sessions.get_mut(device_id).expect("session exists");
        let next_probe = (s.cycle_start + T_PROBE).max(now);
        s.phase = SessionPhase::Monitoring { next_probe };
        self.arm(device_id, next_probe, actions);
    }

    fn alert(&mut self, device_id: &str, reason: &str, actions: &mut Vec<FvuAction>) {
        let s = self.sessions.get_mut(device_id).expect("session exists");
        s.phase = SessionPhase::Alerted;
        s.timer = None;
        actions.push(FvuAction::RaiseAlert {
            device_id: device_id.to_owned(),
            reason: reason.to_owned(),
        });
    }

    /// A device entered this FVU's detection range.
    pub fn on_device_in_range(&mut self, device_id: &str, now: SimTime) -> Vec<FvuAction> {
        let mut actions = Vec::new();
        if self.sessions.contains_key(device_id) {
            return actions;
        }
        self.sessions.insert(
            device_id.to_owned(),
            Session {
                phase: SessionPhase::Detected,
                timer: None,
                pending: SettingsDelta::default(),
                cycle_start: now,
            },
        );
        self.interrogate(device_id, 1, now, &mut actions);
        actions
    }

    pub fn on_state_report(&mut self, report: &StateReport, now: SimTime) -> Result<Vec<FvuAction>, FvuError> {
        let device_id = report.device_id.as_str();
        let required = self.required();
        let version = self.policy_version();
        let session = self
            .sessions
            .get_mut(device_id)
            .ok_or_else(|| FvuError::UnknownSession(device_id.to_owned()))?;
        session.phase = SessionPhase::Evaluating;

        let mut actions = Vec::new();
        let (compliant, deviations) = is_compliant(&report.settings, &required);
        if compliant {
            actions.push(FvuAction::ReportResult {
                device_id: device_id.to_owned(),
                outcome: ResultOutcome::Compliant,
                policy_version: version,
            });
            self.monitor(device_id, now, &mut actions);
        } else {
            session.pending = required.only(&deviations);
            self.enforce(device_id, 1, now, &mut actions);
        }
        Ok(actions)
    }

    pub fn on_enforce_ack(&mut self, ack: &EnforceAck, now: SimTime) -> Result<Vec<FvuAction>, FvuError> {
        let device_id = ack.device_id.as_str();
        let session = self
            .sessions
            .get(device_id)
            .ok_or_else(|| FvuError::UnknownSession(device_id.to_owned()))?;
        if !matches!(session.phase, SessionPhase::AwaitAck { .. }) {
            return Err(FvuError::UnexpectedAck(device_id.to_owned()));
        }
        let mut actions = Vec::new();
        let version = self.policy_version();
        match ack.outcome.status {
            EnforcementStatus::AppliedViaOs | EnforcementStatus::AppliedViaEmmd => {
                let channel = if ack.outcome.status == EnforcementStatus::AppliedViaOs {
                    Channel::Os
                } else {
                    Channel::Emmd
                };
                actions.push(FvuAction::ReportResult {
                    device_id: device_id.to_owned(),
                    outcome: ResultOutcome::Enforced { channel },
                    policy_version: version,
                });
                self.monitor(device_id, now, &mut actions);
            }
            EnforcementStatus::Rejected => {
                // The console turns a rejected result into its alert record,
                // so no separate RaiseAlert here.
                let s = self.sessions.get_mut(device_id).expect("session exists");
                s.phase = SessionPhase::Alerted;
                s.timer = None;
                actions.push(FvuAction::ReportResult {
                    device_id: device_id.to_owned(),
                    outcome: ResultOutcome::Rejected,
                    policy_version: version,
                });
            }
        }
        Ok(actions)
    }

    pub fn on_timer(&mut self, device_id: &str, token: u64, now: SimTime) -> Result<Vec<FvuAction>, FvuError> {
        let session = self
            .sessions
            .get(device_id)
            .filter(|s| s.timer == Some(token))
            .ok_or_else(|| FvuError::StaleTimer(device_id.to_owned()))?;
        let mut actions = Vec::new();
        match session.phase {
            SessionPhase::AwaitReport { attempts, .. } if attempts < MAX_ATTEMPTS => {
                self.interrogate(device_id, attempts + 1, now, &mut actions);
            }
            SessionPhase::AwaitReport { .. } => self.alert(device_id, REASON_UNRESPONSIVE, &mut actions),
            SessionPhase::AwaitAck { attempts, .. } if attempts < MAX_ATTEMPTS => {
                self.enforce(device_id, attempts + 1, now, &mut actions);
            }
            SessionPhase::AwaitAck { .. } => self.alert(device_id, REASON_ENFORCE_TIMEOUT, &mut actions),
            SessionPhase::Monitoring { .. } => self.interrogate(device_id, 1, now, &mut actions),
            SessionPhase::Detected | SessionPhase::Evaluating | SessionPhase::Alerted => {
                return Err(FvuError::StaleTimer(device_id.to_owned()));
            }
        }
        Ok(actions)
    }

    /// The device left this zone. `left_premise` is the engine's verdict that
    /// it also left every zone of the premise; only then is RESTORE sent, and
    /// it is sent even when this FVU holds no session (the engine picks one
    /// FVU as restore authority).
    pub fn on_device_out_of_range(&mut self, device_id: &str, left_premise: bool, _now: SimTime) -> Vec<FvuAction> {
        self.sessions.remove(device_id);
        if !left_premise {
            return Vec::new();
        }
        vec![FvuAction::Send {
            to: Destination::Device(device_id.to_owned()),
            body: MessageBody::Restore(Restore {
                device_id: device_id.to_owned(),
            }),
        }]
    }

    /// Install a policy. Monitored devices are re-probed immediately.
    pub fn on_policy_push(&mut self, policy: Policy, now: SimTime) -> Result<Vec<FvuAction>, FvuError> {
        if let Some(active) = self.policies.get(&policy.policy_id) {
            if policy.version < active.version {
                return Err(FvuError::StalePolicy {
                    policy_id: policy.policy_id,
                    offered: policy.version,
                    active: active.version,
                });
            }
        }
        self.policies.insert(policy.policy_id.clone(), policy);
        let monitored: Vec<String> = self
            .sessions
            .iter()
            .filter(|(_, s)| matches!(s.phase, SessionPhase::Monitoring { .. }))
            .map(|(id, _)| id.clone())
            .collect();
        let mut actions = Vec::new();
        for id in monitored {
            self.interrogate(&id, 1, now, &mut actions);
        }
        Ok(actions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{EmmdPresence, EnforcementOutcome, OsIntegrity};
    use crate::policy::{compile_policy, PrivacySettings, Toggle};

    fn fvu() -> FvuState {
        let mut f = FvuState::new("fvu-z0-0", "z0-0", ["screen".to_string()].into());
        let p = compile_policy(
            "policy_id='p'\npremise_id='c'\n[[rules]]\nrule_id='cam'\nscope={tagged=['screen']}\nrequired={camera='off'}\n",
        )
        .unwrap();
        f.on_policy_push(p, SimTime::ZERO).unwrap();
        f
    }

    fn report(device: &str, camera: Toggle) -> StateReport {
        StateReport {
            device_id: device.into(),
            settings: PrivacySettings {
                camera,
                ..Default::default()
            },
            os_integrity: OsIntegrity::Intact,
            emmd: EmmdPresence::Absent,
        }
    }

    fn ack(device: &str, status: EnforcementStatus) -> EnforceAck {
        EnforceAck {
            device_id: device.into(),
            outcome: EnforcementOutcome {
                status,
                resulting: PrivacySettings::default(),
            },
        }
    }

    fn sends(actions: &[FvuAction]) -> Vec<&MessageBody> {
        actions
            .iter()
            .filter_map(|a| match a {
                FvuAction::Send { body, .. } => Some(body),
                _ => None,
            })
            .collect()
    }

    fn timer_token(actions: &[FvuAction]) -> u64 {
        actions
            .iter()
            .find_map(|a| match a {
                FvuAction::SetTimer { token, .. } => Some(*token),
                _ => None,
            })
            .expect("a timer was set")
    }

    fn t(ms: u64) -> SimTime {
        SimTime(ms)
    }

    #[test]
    fn new_device_is_interrogated() {
        let mut f = fvu();
        let acts = f.on_device_in_range("d1", t(0));
        assert!(matches!(sends(&acts)[..], [MessageBody::Interrogate(_)]));
        assert_eq!(
            f.phase("d1"),
            Some(SessionPhase::AwaitReport {
                deadline: T_REPORT,
                attempts: 1
            })
        );
        assert!(acts.contains(&FvuAction::SetTimer {
            device_id: "d1".into(),
            at: T_REPORT,
            token: 0
        }));
    }

    #[test]
    fn in_range_is_idempotent_and_sessions_are_isolated() {
        let mut f = fvu();
        f.on_device_in_range("d1", t(0));
        f.on_state_report(&report("d1", Toggle::Off), t(40)).unwrap();
        assert!(matches!(f.phase("d1"), Some(SessionPhase::Monitoring { .. })));
        assert!(f.on_device_in_range("d1", t(1000)).is_empty());

        let a = f.on_device_in_range("d2", t(1000));
        let b = f.on_device_in_range("d3", t(1000));
        assert_eq!(sends(&a).len(), 1);
        assert_eq!(sends(&b).len(), 1);
        assert_eq!(f.sessions.len(), 3);
    }

    #[test]
    fn compliant_report_goes_to_monitoring() {
        let mut f = fvu();
        f.on_device_in_range("d1", t(0));
        let acts = f.on_state_report(&report("d1", Toggle::Off), t(40)).unwrap();
        assert!(acts.iter().any(|a| matches!(
            a,
            FvuAction::ReportResult {
                outcome: ResultOutcome::Compliant,
                ..
            }
        )));
        // next probe is anchored at the interrogate that started the cycle
        assert_eq!(f.phase("d1"), Some(SessionPhase::Monitoring { next_probe: T_PROBE }));
    }

    #[test]
    fn non_compliant_report_sends_enforce() {
        let mut f = fvu();
        f.on_device_in_range("d1", t(0));
        let acts = f.on_state_report(&report("d1", Toggle::On), t(40)).unwrap();
        match sends(&acts)[..] {
            [MessageBody::Enforce(e)] => {
                assert_eq!(
                    e.delta,
                    SettingsDelta {
                        camera: Some(Toggle::Off),
                        ..Default::default()
                    }
                )
            }
            ref other => panic!("unexpected {other:?}"),
        }
        assert_eq!(
            f.phase("d1"),
            Some(SessionPhase::AwaitAck {
                deadline: t(40) + T_ACK,
                attempts: 1
            })
        );
    }

    #[test]
    fn unknown_device_report_changes_nothing() {
        let mut f = fvu();
        let before = f.clone();
        assert_eq!(
            f.on_state_report(&report("ghost", Toggle::On), t(5)),
            Err(FvuError::UnknownSession("ghost".into()))
        );
        assert_eq!(f, before);
    }

    #[test]
    fn ack_outcomes() {
        let mut f = fvu();
        for (id, status) in [
            ("os", EnforcementStatus::AppliedViaOs),
            ("emmd", EnforcementStatus::AppliedViaEmmd),
            ("rej", EnforcementStatus::Rejected),
        ] {
            f.on_device_in_range(id, t(0));
            f.on_state_report(&report(id, Toggle::On), t(40)).unwrap();
            let acts = f.on_enforce_ack(&ack(id, status), t(80)).unwrap();
            let outcome = acts.iter().find_map(|a| match a {
                FvuAction::ReportResult { outcome, .. } => Some(*outcome),
                _ => None,
            });
            match status {
                EnforcementStatus::AppliedViaOs => {
                    assert_eq!(outcome, Some(ResultOutcome::Enforced { channel: Channel::Os }));
                    assert!(matches!(f.phase(id), Some(SessionPhase::Monitoring { .. })));
                }
                EnforcementStatus::AppliedViaEmmd => {
                    assert_eq!(outcome, Some(ResultOutcome::Enforced { channel: Channel::Emmd }));
                    assert!(matches!(f.phase(id), Some(SessionPhase::Monitoring { .. })));
                }
                EnforcementStatus::Rejected => {
                    assert_eq!(outcome, Some(ResultOutcome::Rejected));
                    assert_eq!(f.phase(id), Some(SessionPhase::Alerted));
                }
            }
        }
        assert_eq!(
            f.on_enforce_ack(&ack("os", EnforcementStatus::AppliedViaOs), t(90)),
            Err(FvuError::UnexpectedAck("os".into()))
        );
        assert!(matches!(
            f.on_enforce_ack(&ack("zz", EnforcementStatus::AppliedViaOs), t(90)),
            Err(FvuError::UnknownSession(_))
        ));
    }

    #[test]
    fn monitoring_probe_reinterrogates() {
        let mut f = fvu();
        f.on_device_in_range("d1", t(0));
        let acts = f.on_state_report(&report("d1", Toggle::Off), t(40)).unwrap();
        let tok = timer_token(&acts);
        let acts = f.on_timer("d1", tok, T_PROBE).unwrap();
        assert!(matches!(sends(&acts)[..], [MessageBody::Interrogate(_)]));
        assert!(matches!(
            f.phase("d1"),
            Some(SessionPhase::AwaitReport { attempts: 1, .. })
        ));
    }

    #[test]
    fn enforce_retries_then_alerts() {
        let mut f = fvu();
        f.on_device_in_range("d1", t(0));
        let mut acts = f.on_state_report(&report("d1", Toggle::On), t(40)).unwrap();
        let mut now = t(40);
        for attempt in 2..=3u8 {
            now = now + T_ACK;
            acts = f.on_timer("d1", timer_token(&acts), now).unwrap();
            assert!(matches!(sends(&acts)[..], [MessageBody::Enforce(_)]));
            assert_eq!(
                f.phase("d1"),
                Some(SessionPhase::AwaitAck {
                    deadline: now + T_ACK,
                    attempts: attempt
                })
            );
        }
        let acts = f.on_timer("d1", timer_token(&acts), now + T_ACK).unwrap();
        assert_eq!(
            acts,
            vec![FvuAction::RaiseAlert {
                device_id: "d1".into(),
                reason: REASON_ENFORCE_TIMEOUT.into()
            }]
        );
        assert_eq!(f.phase("d1"), Some(SessionPhase::Alerted));
    }

    #[test]
    fn interrogate_retries_then_alerts() {
        let mut f = fvu();
        let mut acts = f.on_device_in_range("d1", t(0));
        let mut now = t(0);
        for _ in 0..2 {
            now = now + T_REPORT;
            acts = f.on_timer("d1", timer_token(&acts), now).unwrap();
            assert!(matches!(sends(&acts)[..], [MessageBody::Interrogate(_)]));
        }
        let acts = f.on_timer("d1", timer_token(&acts), now + T_REPORT).unwrap();
        assert!(matches!(&acts[..], [FvuAction::RaiseAlert { reason, .. }] if reason == REASON_UNRESPONSIVE));
    }

    #[test]
    fn timer_after_ack_is_stale() {
        let mut f = fvu();
        f.on_device_in_range("d1", t(0));
        let acts = f.on_state_report(&report("d1", Toggle::On), t(40)).unwrap();
        let ack_timer = timer_token(&acts);
        f.on_enforce_ack(&ack("d1", EnforcementStatus::AppliedViaOs), t(80))
            .unwrap();
        let before = f.clone();
        assert_eq!(
            f.on_timer("d1", ack_timer, t(2040)),
            Err(FvuError::StaleTimer("d1".into()))
        );
        assert_eq!(f, before);
    }

    #[test]
    fn out_of_range_handoff() {
        let mut f = fvu();
        f.on_device_in_range("d1", t(0));
        f.on_device_in_range("d2", t(0));
        assert!(f.on_device_out_of_range("d1", false, t(10)).is_empty());
        assert!(f.phase("d1").is_none());
        let acts = f.on_device_out_of_range("d2", true, t(10));
        assert!(matches!(sends(&acts)[..], [MessageBody::Restore(_)]));
        assert!(f.on_device_out_of_range("ghost", false, t(10)).is_empty());
    }

    #[test]
    fn policy_versions_and_reprobe() {
        let mut f = fvu();
        let mut p2 = f.policies["p"].clone();
        p2.version = 2;
        for d in ["a", "b", "c"] {
            f.on_device_in_range(d, t(0));
            f.on_state_report(&report(d, Toggle::Off), t(40)).unwrap();
        }
        let acts = f.on_policy_push(p2.clone(), t(500)).unwrap();
        assert_eq!(
            sends(&acts)
                .iter()
                .filter(|b| matches!(b, MessageBody::Interrogate(_)))
                .count(),
            3
        );
        assert_eq!(f.policy_version(), 2);

        let mut p1 = p2;
        p1.version = 1;
        let before = f.clone();
        assert!(matches!(
            f.on_policy_push(p1, t(600)),
            Err(FvuError::StalePolicy { .. })
        ));
        assert_eq!(f, before);
    }

    #[test]
    fn compliant_report_from_any_phase_reaches_monitoring() {
        // Walk a session through each reachable phase and inject a compliant report.
        type Setup = Box<dyn Fn(&mut FvuState)>;
        let setups: Vec<Setup> = vec![
            Box::new(|f| {
                f.on_device_in_range("d", t(0));
            }),
            Box::new(|f| {
                f.on_device_in_range("d", t(0));
                f.on_state_report(&report("d", Toggle::On), t(40)).unwrap();
            }),
            Box::new(|f| {
                f.on_device_in_range("d", t(0));
                f.on_state_report(&report("d", Toggle::Off), t(40)).unwrap();
            }),
            Box::new(|f| {
                f.on_device_in_range("d", t(0));
                f.on_state_report(&report("d", Toggle::On), t(40)).unwrap();
                f.on_enforce_ack(&ack("d", EnforcementStatus::Rejected), t(80)).unwrap();
            }),
        ];
        for setup in setups {
            let mut f = fvu();
            setup(&mut f);
            f.on_state_report(&report("d", Toggle::Off), t(5000)).unwrap();
            assert!(matches!(f.phase("d"), Some(SessionPhase::Monitoring { .. })));
        }
    }

    #[test]
    fn transitions_are_pure() {
        let mut a = fvu();
        a.on_device_in_range("d", t(0));
        let mut b = a.clone();
        let ra = a.on_state_report(&report("d", Toggle::On), t(40));
        let rb = b.on_state_report(&report("d", Toggle::On), t(40));
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }
}
