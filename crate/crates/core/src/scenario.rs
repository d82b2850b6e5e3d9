//! TOML scenario files.
//!
//! Times are seconds (fractional allowed), distances meters. Policies are
//! either inline tables or `file = "..."` paths relative to the scenario.
//! Device waypoints are world coordinates; each premise may set an `origin`
//! for its layout's `(0, 0)` corner.
//!
//! ```toml
//! name = "demo"
//! [run]
//! duration = 30.0
//! tick = 0.1
//! [network]
//! preset = "wifi"
//! [[premises]]
//! premise_id = "hall"
//! console_id = "cms-hall"
//! width = 20.0
//! height = 10.0
//! hex = { pitch = 10.0, radius = 7.0 }
//! [[premises.policies]]
//! publish_at = 0.0
//! policy = { policy_id = "quiet", premise_id = "hall", rules = [
//!   { rule_id = "r1", scope = "all_zones", required = { audio_profile = "silent" } },
//! ] }
//! [[devices]]
//! device_id = "d1"
//! waypoints = [{ t = 0.0, x = -2.0, y = 5.0 }, { t = 20.0, x = 22.0, y = 5.0 }]
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;

use crate::device::{Behavior, DeviceProfile, EmmdPresence, OsIntegrity, Waypoint};
use crate::geometry::{hex_layout, Point, PremiseLayout, Zone};
use crate::policy::{compile_policy, PrivacySettings};
use crate::protocol::AuthKey;
use crate::sim::{EgosSchedule, PremiseSetup, Scenario, ScenarioError, ScheduledPolicy};
use crate::time::SimTime;

/// One-hop latency of the `wifi` preset.
pub const WIFI_LATENCY: SimTime = SimTime::from_millis(20);
/// One-hop latency of the `lte` preset.
pub const LTE_LATENCY: SimTime = SimTime::from_millis(60);

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Doc {
    #[serde(default)]
    name: Option<String>,
    run: RunDoc,
    #[serde(default)]
    network: Option<NetworkDoc>,
    #[serde(default)]
    egos: Option<EgosDoc>,
    #[serde(default)]
    premises: Vec<PremiseDoc>,
    #[serde(default)]
    devices: Vec<DeviceDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunDoc {
    duration: f64,
    #[serde(default = "default_tick")]
    tick: f64,
    #[serde(default)]
    seed: u64,
}

fn default_tick() -> f64 {
    0.1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDoc {
    preset: Option<String>,
    latency: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EgosDoc {
    sync_period: Option<f64>,
    links: Option<Vec<(String, String)>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PremiseDoc {
    premise_id: String,
    console_id: String,
    width: f64,
    height: f64,
    key: Option<String>,
    #[serde(default)]
    origin: Option<OriginDoc>,
    hex: Option<HexDoc>,
    #[serde(default)]
    zone_tags: BTreeMap<String, BTreeSet<String>>,
    #[serde(default)]
    zones: Vec<ZoneDoc>,
    #[serde(default)]
    policies: Vec<PolicyRef>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OriginDoc {
    x: f64,
    y: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HexDoc {
    pitch: f64,
    radius: f64,
    #[serde(default)]
    tags: BTreeSet<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ZoneDoc {
    zone_id: String,
    x: f64,
    y: f64,
    radius: f64,
    #[serde(default)]
    tags: BTreeSet<String>,
    fvu_id: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyRef {
    #[serde(default)]
    publish_at: f64,
    file: Option<String>,
    policy: Option<toml::Table>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceDoc {
    device_id: String,
    #[serde(default = "default_os")]
    os: OsIntegrity,
    #[serde(default = "default_emmd")]
    emmd: EmmdPresence,
    #[serde(default)]
    evasive_interval: Option<f64>,
    #[serde(default)]
    settings: PrivacySettings,
    waypoints: Vec<WaypointDoc>,
}

fn default_os() -> OsIntegrity {
    OsIntegrity::Intact
}

fn default_emmd() -> EmmdPresence {
    EmmdPresence::Absent
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WaypointDoc {
    t: f64,
    x: f64,
    y: f64,
}

fn seconds(field: impl Into<String>, v: f64) -> Result<SimTime, ScenarioError> {
    SimTime::from_secs_f64(v).ok_or_else(|| ScenarioError::new(field, format!("{v} is not a valid time in seconds")))
}

/// Parse and validate a scenario. `base_dir` resolves policy `file`
/// references; without it such references are an error.
pub fn parse_scenario(source: &str, base_dir: Option<&Path>) -> Result<Scenario, ScenarioError> {
    let doc: Doc = toml::from_str(source).map_err(|e| ScenarioError::new("document", e.message().to_owned()))?;

    let duration = seconds("run.duration", doc.run.duration)?;
    let tick = seconds("run.tick", doc.run.tick)?;

    let link_latency = match doc.network {
        None => WIFI_LATENCY,
        Some(NetworkDoc {
            preset: Some(_),
            latency: Some(_),
        }) => return Err(ScenarioError::new("network", "give either preset or latency, not both")),
        Some(NetworkDoc { latency: Some(l), .. }) => seconds("network.latency", l)?,
        Some(NetworkDoc { preset: Some(p), .. }) => match p.as_str() {
            "wifi" => WIFI_LATENCY,
            "lte" => LTE_LATENCY,
            other => {
                return Err(ScenarioError::new(
                    "network.preset",
                    format!("unknown preset {other:?}"),
                ))
            }
        },
        Some(NetworkDoc { .. }) => WIFI_LATENCY,
    };

    let egos = match doc.egos {
        None => EgosSchedule::default(),
        Some(e) => EgosSchedule {
            period: e.sync_period.map(|p| seconds("egos.sync_period", p)).transpose()?,
            links: e.links,
        },
    };

    let mut premises = Vec::new();
    for (i, p) in doc.premises.into_iter().enumerate() {
        let f = |name: &str| format!("premises[{i}].{name}");
        let mut zones: Vec<Zone> = match &p.hex {
            Some(h) => hex_layout(p.width, p.height, h.pitch, h.radius, &h.tags)
                .map_err(|e| ScenarioError::new(f("hex"), e.to_string()))?,
            None => Vec::new(),
        };
        for z in p.zones {
            zones.push(Zone {
                fvu_id: z.fvu_id.unwrap_or_else(|| format!("fvu-{}", z.zone_id)),
                zone_id: z.zone_id,
                center: Point::new(z.x, z.y),
                radius: z.radius,
                tags: z.tags,
            });
        }
        for (zone_id, tags) in p.zone_tags {
            let zone = zones
                .iter_mut()
                .find(|z| z.zone_id == zone_id)
                .ok_or_else(|| ScenarioError::new(f("zone_tags"), format!("unknown zone {zone_id:?}")))?;
            zone.tags.extend(tags);
        }
        let key = match &p.key {
            Some(h) => AuthKey::from_hex(h).map_err(|e| ScenarioError::new(f("key"), e.to_string()))?,
            None => AuthKey::derive(&p.premise_id),
        };
        let mut policies = Vec::new();
        for (k, r) in p.policies.into_iter().enumerate() {
            let field = format!("premises[{i}].policies[{k}]");
            let at = seconds(format!("{field}.publish_at"), r.publish_at)?;
            let text = match (r.file, r.policy) {
                (Some(path), None) => {
                    let base = base_dir.ok_or_else(|| {
                        ScenarioError::new(format!("{field}.file"), "no base directory for policy files")
                    })?;
                    std::fs::read_to_string(base.join(&path))
                        .map_err(|e| ScenarioError::new(format!("{field}.file"), format!("{path}: {e}")))?
                }
                (None, Some(table)) => {
                    toml::to_string(&table).map_err(|e| ScenarioError::new(format!("{field}.policy"), e.to_string()))?
                }
                _ => return Err(ScenarioError::new(field, "give exactly one of file or policy")),
            };
            let policy = compile_policy(&text).map_err(|e| ScenarioError::new(&field, e.to_string()))?;
            policies.push(ScheduledPolicy { at, policy });
        }
        premises.push(PremiseSetup {
            layout: PremiseLayout {
                premise_id: p.premise_id,
                width: p.width,
                height: p.height,
                zones,
                console_id: p.console_id,
            },
            origin: p.origin.map_or(Point::default(), |o| Point::new(o.x, o.y)),
            policies,
            key,
        });
    }

    let mut devices = Vec::new();
    for (i, d) in doc.devices.into_iter().enumerate() {
        let mut dev = DeviceProfile::new(d.device_id, d.settings);
        dev.os_integrity = d.os;
        dev.emmd = d.emmd;
        if let Some(iv) = d.evasive_interval {
            dev.behavior = Behavior::Evasive {
                interval: seconds(format!("devices[{i}].evasive_interval"), iv)?,
            };
        }
        for (k, w) in d.waypoints.into_iter().enumerate() {
            dev.waypoints.push(Waypoint {
                t: seconds(format!("devices[{i}].waypoints[{k}].t"), w.t)?,
                point: Point::new(w.x, w.y),
            });
        }
        if let Some(first) = dev.waypoints.first() {
            dev.position = first.point;
        }
        devices.push(dev);
    }

    let scenario = Scenario {
        name: doc.name.unwrap_or_else(|| "scenario".to_owned()),
        premises,
        devices,
        link_latency,
        tick,
        duration,
        seed: doc.run.seed,
        egos,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Read and parse a scenario file; policy paths resolve against its directory.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ScenarioError::new("document", format!("{}: {e}", path.display())))?;
    parse_scenario(&text, path.parent())
}
