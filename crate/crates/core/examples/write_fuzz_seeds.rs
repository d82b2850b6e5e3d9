//! Regenerate the checked-in fuzz corpus seeds.
//!
//! cargo run -p dpe-core --example write_fuzz_seeds

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dpe_core::console::{Channel, ResultOutcome};
use dpe_core::device::{EmmdPresence, EnforcementOutcome, EnforcementStatus, OsIntegrity};
use dpe_core::egos::{Digest32, DirectoryEntry, FvuPlacement, VersionStamp};
use dpe_core::geometry::Point;
use dpe_core::policy::{compile_policy, AudioProfile, PrivacySettings, SettingsDelta, Toggle};
use dpe_core::protocol::{
    encode, Alert, AuthKey, EgosSync, Enforce, EnforceAck, Interrogate, MessageBody, PolicyPush, Restore, ResultReport,
    StateReport,
};
use dpe_core::SimTime;

fn write(dir: &Path, idx: usize, bytes: &[u8]) {
    fs::write(dir.join(format!("seed-{idx:02}")), bytes).expect("write seed");
}

fn main() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let corpus = root.join("fuzz/corpus");
    let scenarios = root.join("../../scenarios");
    for t in ["decode_frame", "split_frames", "parse_policy", "parse_scenario"] {
        fs::create_dir_all(corpus.join(t)).expect("corpus dir");
    }

    let policy_text = fs::read_to_string(scenarios.join("policies/cinema.toml")).expect("cinema policy");
    let policy = compile_policy(&policy_text).expect("cinema policy compiles");
    let delta = SettingsDelta {
        camera: Some(Toggle::Off),
        audio_profile: Some(AudioProfile::Silent),
        ..Default::default()
    };
    let entry = DirectoryEntry {
        premise_id: "cinema".into(),
        policy_versions: BTreeMap::from([("cinema-quiet".to_string(), 1)]),
        fvu_topology: vec![FvuPlacement {
            fvu_id: "fvu-z0-0".into(),
            zone_id: "z0-0".into(),
            center: Point::new(0.0, 0.0),
            radius: 7.0,
        }],
        results_digest: Digest32::of(b""),
        stamp: VersionStamp {
            counter: 3,
            origin_id: "cms-cinema".into(),
        },
    };
    let bodies = vec![
        MessageBody::Interrogate(Interrogate {
            fvu_id: "fvu-z0-0".into(),
        }),
        MessageBody::StateReport(StateReport {
            device_id: "phone-a".into(),
            settings: PrivacySettings::default(),
            os_integrity: OsIntegrity::Intact,
            emmd: EmmdPresence::Absent,
        }),
        MessageBody::Enforce(Enforce {
            device_id: "phone-a".into(),
            delta,
        }),
        MessageBody::EnforceAck(EnforceAck {
            device_id: "phone-a".into(),
            outcome: EnforcementOutcome {
                status: EnforcementStatus::AppliedViaEmmd,
                resulting: PrivacySettings::default().apply(&delta),
            },
        }),
        MessageBody::Restore(Restore {
            device_id: "phone-a".into(),
        }),
        MessageBody::PolicyPush(PolicyPush { policy }),
        MessageBody::ResultReport(ResultReport {
            device_id: "phone-a".into(),
            zone_id: "z0-0".into(),
            outcome: ResultOutcome::Enforced { channel: Channel::Os },
            timestamp: SimTime::from_millis(80),
            policy_version: 1,
        }),
        MessageBody::Alert(Alert {
            device_id: "rooted-bare".into(),
            zone_id: "z0-1".into(),
            reason: "emmd-absent-rooted".into(),
            timestamp: SimTime::from_millis(80),
        }),
        MessageBody::EgosSync(EgosSync { entries: vec![entry] }),
    ];

    let key = AuthKey::derive("fuzz");
    let frames: Vec<Vec<u8>> = bodies
        .iter()
        .enumerate()
        .map(|(i, b)| encode(b, i as u32, "fvu-z0-0", &key).expect("seed encodes"))
        .collect();
    for (i, f) in frames.iter().enumerate() {
        write(&corpus.join("decode_frame"), i, f);
    }
    write(&corpus.join("decode_frame"), frames.len(), &frames[0][..40]);

    let stream = frames.concat();
    write(&corpus.join("split_frames"), 0, &stream);
    write(&corpus.join("split_frames"), 1, &frames[4]);
    write(&corpus.join("split_frames"), 2, &stream[..stream.len() - 7]);

    write(&corpus.join("parse_policy"), 0, policy_text.as_bytes());
    let minimal = "policy_id = \"p\"\npremise_id = \"x\"\n[[rules]]\nrule_id = \"r\"\nscope = { tagged = [\"a\"] }\nrequired = { radio_mode = \"airplane\" }\npriority = 2\n";
    write(&corpus.join("parse_policy"), 1, minimal.as_bytes());

    let mut names: Vec<_> = fs::read_dir(&scenarios)
        .expect("scenarios dir")
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    names.sort();
    for (i, p) in names.iter().enumerate() {
        write(&corpus.join("parse_scenario"), i, &fs::read(p).expect("scenario"));
    }
    println!("wrote seeds under {}", corpus.display());
}
