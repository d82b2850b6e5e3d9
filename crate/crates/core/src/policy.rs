//! Privacy settings, zone-scoped rules, and the policy compiler.
//!
//! A [`Policy`] is an ordered list of [`Rule`]s. Each rule demands a partial
//! assignment of device controls (a [`SettingsDelta`]) in the zones its scope
//! matches. Evaluating a policy for a zone merges every matching rule's delta;
//! when two rules touch the same control the more restrictive value wins, so
//! the result does not depend on rule order.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Camera and microphone state. `Off` is the restrictive end.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Toggle {
    On,
    Off,
}

/// Ringer profile, ordered `Normal < Vibrate < Silent`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AudioProfile {
    Normal,
    Vibrate,
    Silent,
}

/// Radio state, ordered `Normal < Airplane`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RadioMode {
    Normal,
    Airplane,
}

/// The enforceable controls of a device. Every field is always populated.
///
/// Each enum derives `Ord` in restrictiveness order, so `a >= b` reads
/// "`a` is at least as restrictive as `b`".
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySettings {
    pub camera: Toggle,
    pub microphone: Toggle,
    pub audio_profile: AudioProfile,
    pub radio_mode: RadioMode,
}

impl Default for PrivacySettings {
    /// Everything on, ringer normal, radios normal.
    fn default() -> Self {
        Self {
            camera: Toggle::On,
            microphone: Toggle::On,
            audio_profile: AudioProfile::Normal,
            radio_mode: RadioMode::Normal,
        }
    }
}

impl PrivacySettings {
    /// Overwrite exactly the fields present in `delta`.
    pub fn apply(&self, delta: &SettingsDelta) -> PrivacySettings {
        PrivacySettings {
            camera: delta.camera.unwrap_or(self.camera),
            microphone: delta.microphone.unwrap_or(self.microphone),
            audio_profile: delta.audio_profile.unwrap_or(self.audio_profile),
            radio_mode: delta.radio_mode.unwrap_or(self.radio_mode),
        }
    }
}

/// Names of the settings fields, in canonical order.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SettingField {
    Camera,
    Microphone,
    AudioProfile,
    RadioMode,
}

impl SettingField {
    pub const ALL: [SettingField; 4] = [
        SettingField::Camera,
        SettingField::Microphone,
        SettingField::AudioProfile,
        SettingField::RadioMode,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SettingField::Camera => "camera",
            SettingField::Microphone => "microphone",
            SettingField::AudioProfile => "audio_profile",
            SettingField::RadioMode => "radio_mode",
        }
    }
}

impl fmt::Display for SettingField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A partial assignment of settings. The empty delta is the merge identity.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingsDelta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<Toggle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub microphone: Option<Toggle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_profile: Option<AudioProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radio_mode: Option<RadioMode>,
}

fn stricter<T: Ord>(a: Option<T>, b: Option<T>) -> Option<T> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, b) => a.or(b),
    }
}

impl SettingsDelta {
    pub fn is_empty(&self) -> bool {
        self.fields().is_empty()
    }

    /// Fields present in this delta, in canonical order.
    pub fn fields(&self) -> Vec<SettingField> {
        let mut out = Vec::with_capacity(4);
        if self.camera.is_some() {
            out.push(SettingField::Camera);
        }
        if self.microphone.is_some() {
            out.push(SettingField::Microphone);
        }
        if self.audio_profile.is_some() {
            out.push(SettingField::AudioProfile);
        }
        if self.radio_mode.is_some() {
            out.push(SettingField::RadioMode);
        }
        out
    }

    /// Field-wise most-restrictive union. Commutative, associative and
    /// idempotent, with the empty delta as identity.
    pub fn merge(&self, other: &SettingsDelta) -> SettingsDelta {
        SettingsDelta {
            camera: stricter(self.camera, other.camera),
            microphone: stricter(self.microphone, other.microphone),
            audio_profile: stricter(self.audio_profile, other.audio_profile),
            radio_mode: stricter(self.radio_mode, other.radio_mode),
        }
    }

    /// Restrict this delta to the listed fields.
    pub fn only(&self, fields: &[SettingField]) -> SettingsDelta {
        let keep = |f: SettingField| fields.contains(&f);
        SettingsDelta {
            camera: self.camera.filter(|_| keep(SettingField::Camera)),
            microphone: self.microphone.filter(|_| keep(SettingField::Microphone)),
            audio_profile: self.audio_profile.filter(|_| keep(SettingField::AudioProfile)),
            radio_mode: self.radio_mode.filter(|_| keep(SettingField::RadioMode)),
        }
    }
}

impl fmt::Display for SettingsDelta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("{}");
        }
        let mut parts = Vec::new();
        if let Some(v) = self.camera {
            parts.push(format!("camera={}", toggle_str(v)));
        }
        if let Some(v) = self.microphone {
            parts.push(format!("microphone={}", toggle_str(v)));
        }
        if let Some(v) = self.audio_profile {
            let s = match v {
                AudioProfile::Normal => "normal",
                AudioProfile::Vibrate => "vibrate",
                AudioProfile::Silent => "silent",
            };
            parts.push(format!("audio_profile={s}"));
        }
        if let Some(v) = self.radio_mode {
            let s = match v {
                RadioMode::Normal => "normal",
                RadioMode::Airplane => "airplane",
            };
            parts.push(format!("radio_mode={s}"));
        }
        write!(f, "{{{}}}", parts.join(", "))
    }
}

fn toggle_str(t: Toggle) -> &'static str {
    match t {
        Toggle::On => "on",
        Toggle::Off => "off",
    }
}

/// Which zones a rule applies to.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    AllZones,
    Tagged(BTreeSet<String>),
}

impl Scope {
    pub fn matches(&self, zone_tags: &BTreeSet<String>) -> bool {
        match self {
            Scope::AllZones => true,
            Scope::Tagged(tags) => !tags.is_disjoint(zone_tags),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub rule_id: String,
    pub scope: Scope,
    pub required: SettingsDelta,
    /// Display and audit ordering only; never overrides restrictiveness.
    #[serde(default)]
    pub priority: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    pub policy_id: String,
    pub premise_id: String,
    pub version: u64,
    #[serde(default)]
    pub rules: Vec<Rule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error in rule {rule_id:?}: {reason}")]
    Validation { rule_id: String, reason: String },
}

impl PolicyError {
    fn validation(rule_id: &str, reason: &str) -> Self {
        PolicyError::Validation {
            rule_id: rule_id.to_owned(),
            reason: reason.to_owned(),
        }
    }
}

/// On-disk shape of a policy document. `version` may be omitted (defaults
/// to 1); the console assigns the real version on publish.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyDocument {
    policy_id: String,
    premise_id: String,
    #[serde(default = "default_version")]
    version: u64,
    #[serde(default)]
    rules: Vec<Rule>,
}

fn default_version() -> u64 {
    1
}

impl Policy {
    /// Check the structural invariants: non-empty ids, version ≥ 1, unique
    /// rule ids, non-empty deltas and tag sets.
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.policy_id.is_empty() {
            return Err(PolicyError::Parse("policy_id must not be empty".into()));
        }
        if self.premise_id.is_empty() {
            return Err(PolicyError::Parse("premise_id must not be empty".into()));
        }
        if self.version == 0 {
            return Err(PolicyError::Parse("version must be >= 1".into()));
        }
        let mut seen = BTreeSet::new();
        for rule in &self.rules {
            if rule.rule_id.is_empty() {
                return Err(PolicyError::validation("", "empty rule_id"));
            }
            if !seen.insert(rule.rule_id.as_str()) {
                return Err(PolicyError::validation(&rule.rule_id, "duplicate rule_id"));
            }
            if rule.required.is_empty() {
                return Err(PolicyError::validation(&rule.rule_id, "empty required delta"));
            }
            if let Scope::Tagged(tags) = &rule.scope {
                if tags.is_empty() {
                    return Err(PolicyError::validation(&rule.rule_id, "empty tag set"));
                }
            }
        }
        Ok(())
    }

    /// Every tag mentioned by a `Tagged` scope, sorted.
    pub fn mentioned_tags(&self) -> BTreeSet<String> {
        self.rules
            .iter()
            .filter_map(|r| match &r.scope {
                Scope::Tagged(t) => Some(t.iter().cloned()),
                Scope::AllZones => None,
            })
            .flatten()
            .collect()
    }
}

/// Parse and validate a policy document (TOML).
pub fn compile_policy(source: &str) -> Result<Policy, PolicyError> {
    let doc: PolicyDocument = toml::from_str(source).map_err(|e| PolicyError::Parse(e.message().to_owned()))?;
    let policy = Policy {
        policy_id: doc.policy_id,
        premise_id: doc.premise_id,
        version: doc.version,
        rules: doc.rules,
    };
    policy.validate()?;
    Ok(policy)
}

/// Merge the deltas of every rule whose scope matches `zone_tags`.
pub fn required_settings(policy: &Policy, zone_tags: &BTreeSet<String>) -> SettingsDelta {
    policy
        .rules
        .iter()
        .filter(|r| r.scope.matches(zone_tags))
        .fold(SettingsDelta::default(), |acc, r| acc.merge(&r.required))
}

/// Compare `current` against `required`. Stricter-than-required counts as
/// compliant. Deviations come back in canonical field order.
pub fn is_compliant(current: &PrivacySettings, required: &SettingsDelta) -> (bool, Vec<SettingField>) {
    let mut deviations = Vec::new();
    if required.camera.is_some_and(|r| current.camera < r) {
        deviations.push(SettingField::Camera);
    }
    if required.microphone.is_some_and(|r| current.microphone < r) {
        deviations.push(SettingField::Microphone);
    }
    if required.audio_profile.is_some_and(|r| current.audio_profile < r) {
        deviations.push(SettingField::AudioProfile);
    }
    if required.radio_mode.is_some_and(|r| current.radio_mode < r) {
        deviations.push(SettingField::RadioMode);
    }
    (deviations.is_empty(), deviations)
}
