//! Mobile device model: settings, OS integrity, the optional hardware
//! enforcement module, entry snapshots, motion, and evasive behavior.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point;
use crate::policy::{PrivacySettings, SettingField, SettingsDelta, Toggle};
use crate::time::SimTime;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OsIntegrity {
    Intact,
    Rooted,
}

/// Whether the device carries a hardware enforcement module (EMMD).
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmmdPresence {
    Present,
    Absent,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behavior {
    Compliant,
    /// Re-enables the camera every `interval`.
    Evasive {
        interval: SimTime,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnforcementStatus {
    AppliedViaOs,
    AppliedViaEmmd,
    Rejected,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnforcementOutcome {
    pub status: EnforcementStatus,
    pub resulting: PrivacySettings,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: SimTime,
    pub point: Point,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("device {device_id} is already inside premise {premise_id}")]
    DuplicateEntry { device_id: String, premise_id: String },
    #[error("device {device_id} must exit {top} before {premise_id}")]
    ExitOrderViolation {
        device_id: String,
        premise_id: String,
        top: String,
    },
    #[error("device {device_id} is not inside premise {premise_id}")]
    NotInside { device_id: String, premise_id: String },
    #[error("device {0} has no waypoints")]
    EmptyPath(String),
    #[error("device {0} waypoints are not sorted by time")]
    UnsortedPath(String),
    #[error("device {0} evasive interval must be positive")]
    ZeroInterval(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: String,
    pub os_integrity: OsIntegrity,
    pub emmd: EmmdPresence,
    pub behavior: Behavior,
    pub settings: PrivacySettings,
    /// One entry per premise currently occupied; innermost last.
    pub snapshots: Vec<(String, PrivacySettings)>,
    pub position: Point,
    pub waypoints: Vec<Waypoint>,
}

impl DeviceProfile {
    pub fn new(device_id: impl Into<String>, settings: PrivacySettings) -> Self {
        DeviceProfile {
            device_id: device_id.into(),
            os_integrity: OsIntegrity::Intact,
            emmd: EmmdPresence::Absent,
            behavior: Behavior::Compliant,
            settings,
            snapshots: Vec::new(),
            position: Point::default(),
            waypoints: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        if let Behavior::Evasive { interval } = self.behavior {
            if interval == SimTime::ZERO {
                return Err(DeviceError::ZeroInterval(self.device_id.clone()));
            }
        }
        if self.waypoints.is_empty() {
            return Err(DeviceError::EmptyPath(self.device_id.clone()));
        }
        if self.waypoints.windows(2).any(|w| w[0].t > w[1].t) {
            return Err(DeviceError::UnsortedPath(self.device_id.clone()));
        }
        Ok(())
    }

    /// Decision table: an intact OS applies the delta itself, a rooted device
    /// needs its hardware module, and a rooted device without one refuses.
    pub fn apply_enforcement(&mut self, required: &SettingsDelta) -> EnforcementOutcome {
        let status = match (self.os_integrity, self.emmd) {
            (OsIntegrity::Intact, _) => EnforcementStatus::AppliedViaOs,
            (OsIntegrity::Rooted, EmmdPresence::Present) => EnforcementStatus::AppliedViaEmmd,
            (OsIntegrity::Rooted, EmmdPresence::Absent) => EnforcementStatus::Rejected,
        };
        if status != EnforcementStatus::Rejected {
            self.settings = self.settings.apply(required);
        }
        EnforcementOutcome {
            status,
            resulting: self.settings,
        }
    }

    pub fn is_inside(&self, premise_id: &str) -> bool {
        self.snapshots.iter().any(|(p, _)| p == premise_id)
    }

    pub fn snapshot_on_entry(&mut self, premise_id: &str) -> Result<(), DeviceError> {
        if self.is_inside(premise_id) {
            return Err(DeviceError::DuplicateEntry {
                device_id: self.device_id.clone(),
                premise_id: premise_id.to_owned(),
            });
        }
        self.snapshots.push((premise_id.to_owned(), self.settings));
        Ok(())
    }

    /// Pop the snapshot for `premise_id` and reinstate it. Returns the
    /// restored settings.
    pub fn restore_on_exit(&mut self, premise_id: &str) -> Result<PrivacySettings, DeviceError> {
        match self.snapshots.last() {
            Some((top, _)) if top == premise_id => {}
            Some((top, _)) if self.is_inside(premise_id) => {
                return Err(DeviceError::ExitOrderViolation {
                    device_id: self.device_id.clone(),
                    premise_id: premise_id.to_owned(),
                    top: top.clone(),
                });
            }
            _ => {
                return Err(DeviceError::NotInside {
                    device_id: self.device_id.clone(),
                    premise_id: premise_id.to_owned(),
                })
            }
        }
        let (_, saved) = self.snapshots.pop().expect("checked above");
        self.settings = saved;
        Ok(saved)
    }

    /// The modeled breach: at every positive multiple of the evasive
    /// interval the device switches its camera back on. Reports the field
    /// only when the camera actually changed.
    pub fn evasive_tick(&mut self, now: SimTime) -> Option<SettingField> {
        let Behavior::Evasive { interval } = self.behavior else {
            return None;
        };
        if interval == SimTime::ZERO || now == SimTime::ZERO || !now.as_millis().is_multiple_of(interval.as_millis()) {
            return None;
        }
        if self.settings.camera == Toggle::On {
            return None;
        }
        self.settings.camera = Toggle::On;
        Some(SettingField::Camera)
    }

    /// Piecewise-linear position along the waypoints, clamped at both ends.
    pub fn position_at(&self, t: SimTime) -> Result<Point, DeviceError> {
        let (first, last) = match (self.waypoints.first(), self.waypoints.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(DeviceError::EmptyPath(self.device_id.clone())),
        };
        if t <= first.t {
            return Ok(first.point);
        }
        if t >= last.t {
            return Ok(last.point);
        }
        let idx = self.waypoints.partition_point(|w| w.t <= t);
        let (a, b) = (&self.waypoints[idx - 1], &self.waypoints[idx]);
        let span = (b.t - a.t).as_millis() as f64;
        let frac = (t - a.t).as_millis() as f64 / span;
        Ok(Point::new(
            a.point.x + (b.point.x - a.point.x) * frac,
            a.point.y + (b.point.y - a.point.y) * frac,
        ))
    }
}
