#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dpe_core::console::{Channel, ResultOutcome};
use dpe_core::device::{
    Behavior, DeviceProfile, EmmdPresence, EnforcementOutcome, EnforcementStatus, OsIntegrity, Waypoint,
};
use dpe_core::egos::{Digest32, DirectoryEntry, FvuPlacement, VersionStamp};
use dpe_core::geometry::{hex_layout, Point, PremiseLayout};
use dpe_core::policy::{AudioProfile, Policy, PrivacySettings, RadioMode, Rule, Scope, SettingsDelta, Toggle};
use dpe_core::protocol::{
    Alert, AuthKey, EgosSync, Enforce, EnforceAck, Interrogate, MessageBody, PolicyPush, Restore, ResultReport,
    StateReport,
};
use dpe_core::sim::{EgosSchedule, PremiseSetup, ScheduledPolicy};
use dpe_core::{Scenario, SimTime};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn cookbook(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

pub fn cookbook_names() -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(cookbook(""))
        .expect("scenarios directory")
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".toml"))
        .collect();
    names.sort();
    names
}

pub fn toggle(r: &mut ChaCha8Rng) -> Toggle {
    if r.random_bool(0.5) {
        Toggle::On
    } else {
        Toggle::Off
    }
}

pub fn audio(r: &mut ChaCha8Rng) -> AudioProfile {
    [AudioProfile::Normal, AudioProfile::Vibrate, AudioProfile::Silent][r.random_range(0..3)]
}

pub fn radio(r: &mut ChaCha8Rng) -> RadioMode {
    if r.random_bool(0.5) {
        RadioMode::Normal
    } else {
        RadioMode::Airplane
    }
}

pub fn settings(r: &mut ChaCha8Rng) -> PrivacySettings {
    PrivacySettings {
        camera: toggle(r),
        microphone: toggle(r),
        audio_profile: audio(r),
        radio_mode: radio(r),
    }
}

pub fn delta(r: &mut ChaCha8Rng, non_empty: bool) -> SettingsDelta {
    loop {
        let d = SettingsDelta {
            camera: r.random_bool(0.5).then(|| toggle(r)),
            microphone: r.random_bool(0.5).then(|| toggle(r)),
            audio_profile: r.random_bool(0.5).then(|| audio(r)),
            radio_mode: r.random_bool(0.5).then(|| radio(r)),
        };
        if !non_empty || !d.is_empty() {
            return d;
        }
    }
}

const ALPHABET: &[char] = &['a', 'b', 'z', '0', '9', '-', '_', '.', ' ', '"', '\\', 'é', '✓', '\n'];

pub fn text(r: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let n = r.random_range(min..=max);
    (0..n).map(|_| ALPHABET[r.random_range(0..ALPHABET.len())]).collect()
}

pub fn ident(r: &mut ChaCha8Rng) -> String {
    let n = r.random_range(1..=12);
    (0..n).map(|_| (b'a' + r.random_range(0..26u8)) as char).collect()
}

pub fn tag_set(r: &mut ChaCha8Rng, pool: &[&str]) -> BTreeSet<String> {
    loop {
        let s: BTreeSet<String> = pool
            .iter()
            .filter(|_| r.random_bool(0.4))
            .map(|t| t.to_string())
            .collect();
        if !s.is_empty() {
            return s;
        }
    }
}

pub const TAGS: [&str; 4] = ["screen", "stage", "ward", "lab"];

pub fn policy(r: &mut ChaCha8Rng, premise_id: &str) -> Policy {
    let rules = (0..r.random_range(1..=4))
        .map(|i| Rule {
            rule_id: format!("r{i}"),
            scope: if r.random_bool(0.4) {
                Scope::AllZones
            } else {
                Scope::Tagged(tag_set(r, &TAGS))
            },
            required: delta(r, true),
            priority: r.random_range(0..5),
        })
        .collect();
    Policy {
        policy_id: ident(r),
        premise_id: premise_id.to_owned(),
        version: r.random_range(1..100),
        rules,
    }
}

pub fn entry(r: &mut ChaCha8Rng, premise_id: &str) -> DirectoryEntry {
    DirectoryEntry {
        premise_id: premise_id.to_owned(),
        policy_versions: (0..r.random_range(0..3))
            .map(|_| (ident(r), r.random_range(1..50)))
            .collect(),
        fvu_topology: (0..r.random_range(0..4))
            .map(|_| FvuPlacement {
                fvu_id: ident(r),
                zone_id: ident(r),
                center: Point::new(r.random_range(-1e3..1e3), r.random::<f64>()),
                radius: r.random_range(0.1..20.0),
            })
            .collect(),
        results_digest: Digest32(r.random()),
        stamp: VersionStamp {
            counter: r.random_range(0..1000),
            origin_id: ident(r),
        },
    }
}

pub fn message(r: &mut ChaCha8Rng) -> MessageBody {
    let device_id = text(r, 1, 24);
    match r.random_range(0..9) {
        0 => MessageBody::Interrogate(Interrogate { fvu_id: text(r, 1, 20) }),
        1 => MessageBody::StateReport(StateReport {
            device_id,
            settings: settings(r),
            os_integrity: if r.random_bool(0.5) {
                OsIntegrity::Intact
            } else {
                OsIntegrity::Rooted
            },
            emmd: if r.random_bool(0.5) {
                EmmdPresence::Present
            } else {
                EmmdPresence::Absent
            },
        }),
        2 => MessageBody::Enforce(Enforce {
            device_id,
            delta: delta(r, true),
        }),
        3 => MessageBody::EnforceAck(EnforceAck {
            device_id,
            outcome: EnforcementOutcome {
                status: [
                    EnforcementStatus::AppliedViaOs,
                    EnforcementStatus::AppliedViaEmmd,
                    EnforcementStatus::Rejected,
                ][r.random_range(0..3)],
                resulting: settings(r),
            },
        }),
        4 => MessageBody::Restore(Restore { device_id }),
        5 => {
            let premise = ident(r);
            MessageBody::PolicyPush(PolicyPush {
                policy: policy(r, &premise),
            })
        }
        6 => MessageBody::ResultReport(ResultReport {
            device_id,
            zone_id: text(r, 1, 10),
            outcome: match r.random_range(0..4) {
                0 => ResultOutcome::Compliant,
                1 => ResultOutcome::Enforced { channel: Channel::Os },
                2 => ResultOutcome::Enforced { channel: Channel::Emmd },
                _ => ResultOutcome::Rejected,
            },
            timestamp: SimTime(r.random_range(0..1u64 << 40)),
            policy_version: r.random_range(0..1000),
        }),
        7 => MessageBody::Alert(Alert {
            device_id,
            zone_id: text(r, 1, 10),
            reason: text(r, 1, 30),
            timestamp: SimTime(r.random_range(0..1u64 << 40)),
        }),
        _ => MessageBody::EgosSync(EgosSync {
            entries: (0..r.random_range(0..3))
                .map(|_| {
                    let premise = ident(r);
                    entry(r, &premise)
                })
                .collect(),
        }),
    }
}

fn random_point_inside(r: &mut ChaCha8Rng, w: f64, h: f64, ox: f64) -> Point {
    Point::new(ox + r.random_range(0.0..=w), r.random_range(0.0..=h))
}

/// A point just outside the rectangle `[ox, ox+w] x [0, h]` on a random side.
fn random_point_outside(r: &mut ChaCha8Rng, w: f64, h: f64, ox: f64) -> Point {
    let m = r.random_range(1.0..4.0);
    match r.random_range(0..4) {
        0 => Point::new(ox - m, r.random_range(0.0..=h)),
        1 => Point::new(ox + w + m, r.random_range(0.0..=h)),
        2 => Point::new(ox + r.random_range(0.0..=w), -m),
        _ => Point::new(ox + r.random_range(0.0..=w), h + m),
    }
}

/// One or two disjoint premises, random hex layouts, tags and policies, and
/// devices that walk in and out (some twice). Every device starts outside.
pub fn random_scenario(seed: u64) -> Scenario {
    let r = &mut rng(seed);
    let n_premises = r.random_range(1..=2);
    let mut premises = Vec::new();
    for p in 0..n_premises {
        let premise_id = format!("site-{p}");
        let width = r.random_range(8.0..40.0);
        let height = r.random_range(6.0..30.0);
        let pitch = r.random_range(5.0..15.0);
        let radius = pitch * r.random_range(0.5..1.0);
        let mut zones = hex_layout(width, height, pitch, radius, &BTreeSet::new()).unwrap();
        for z in &mut zones {
            if r.random_bool(0.5) {
                z.tags = tag_set(r, &TAGS);
            }
        }
        let n_pol = r.random_range(1..=2);
        let policies = (0..n_pol)
            .map(|k| ScheduledPolicy {
                at: SimTime::from_millis(if k == 0 { 0 } else { r.random_range(0..20_000) }),
                policy: policy(r, &premise_id),
            })
            .collect();
        premises.push(PremiseSetup {
            layout: PremiseLayout {
                console_id: format!("cms-{p}"),
                premise_id: premise_id.clone(),
                width,
                height,
                zones,
            },
            origin: Point::new(200.0 * p as f64, 0.0),
            policies,
            key: AuthKey::derive(&premise_id),
        });
    }

    let mut devices = Vec::new();
    let mut end = 0u64;
    for i in 0..r.random_range(1..=5) {
        let mut d = DeviceProfile::new(format!("dev-{i}"), settings(r));
        d.os_integrity = if r.random_bool(0.3) {
            OsIntegrity::Rooted
        } else {
            OsIntegrity::Intact
        };
        d.emmd = if r.random_bool(0.5) {
            EmmdPresence::Present
        } else {
            EmmdPresence::Absent
        };
        if r.random_bool(0.3) {
            d.behavior = Behavior::Evasive {
                interval: SimTime::from_millis(r.random_range(1_000..15_000)),
            };
        }
        let p = r.random_range(0..n_premises);
        let (w, h) = (premises[p].layout.width, premises[p].layout.height);
        let ox = premises[p].origin.x;
        let mut t = r.random_range(0..3_000u64);
        let mut path = vec![random_point_outside(r, w, h, ox)];
        for _visit in 0..r.random_range(1..=2) {
            for _ in 0..r.random_range(1..=3) {
                path.push(random_point_inside(r, w, h, ox));
            }
            path.push(random_point_outside(r, w, h, ox));
        }
        for point in path {
            d.waypoints.push(Waypoint {
                t: SimTime::from_millis(t),
                point,
            });
            t += r.random_range(1_000..12_000);
        }
        d.position = d.waypoints[0].point;
        end = end.max(d.waypoints.last().unwrap().t.as_millis());
        devices.push(d);
    }

    for p in &mut premises {
        for sp in &mut p.policies {
            sp.at = sp.at.min(SimTime::from_millis(end));
        }
    }
    Scenario {
        name: format!("random-{seed}"),
        premises,
        devices,
        link_latency: SimTime::from_millis(20),
        tick: SimTime::from_millis(100),
        duration: SimTime::from_millis(end + 2_000),
        seed,
        egos: EgosSchedule {
            period: Some(SimTime::from_secs(5)),
            links: None,
        },
    }
}

/// Merge every entry of `b` into a copy of `a`.
pub fn join(a: &dpe_core::egos::EgosDirectory, b: &dpe_core::egos::EgosDirectory) -> dpe_core::egos::EgosDirectory {
    let mut out = a.clone();
    for e in b.entries.values() {
        out.merge_entry(e.clone());
    }
    out
}

/// Content is a function of `(premise, stamp)`, as with a single writer per
/// premise.
pub fn stamped_entry(premise: &str, counter: u64, origin: &str) -> DirectoryEntry {
    let key = Digest32::of(format!("{premise}/{counter}/{origin}").as_bytes());
    let seed = u64::from_be_bytes(key.0[..8].try_into().unwrap());
    let mut e = entry(&mut rng(seed), premise);
    e.stamp = VersionStamp {
        counter,
        origin_id: origin.to_owned(),
    };
    e.results_digest = key;
    e
}

pub fn random_directory(r: &mut ChaCha8Rng) -> dpe_core::egos::EgosDirectory {
    let mut d = dpe_core::egos::EgosDirectory::new();
    for _ in 0..r.random_range(0..6) {
        let premise = ["p0", "p1", "p2", "p3"][r.random_range(0..4)];
        let origin = ["cms-a", "cms-b"][r.random_range(0..2)];
        d.merge_entry(stamped_entry(premise, r.random_range(0..6), origin));
    }
    d
}
