//! Replicated premise directory with last-writer-wins convergence.
//!
//! Each premise's console is the only writer of that premise's
//! [`DirectoryEntry`] and bumps the stamp counter on every local change, so a
//! per-entry LWW register loses nothing. Replicas converge through pairwise
//! anti-entropy: `diff` ships what the peer is missing, `merge` keeps the
//! greater stamp.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::geometry::Point;

/// Ordered lexicographically on `(counter, origin_id)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VersionStamp {
    pub counter: u64,
    pub origin_id: String,
}

/// A SHA-256 digest, serialized as lowercase hex.
#[derive(Copy, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest32(pub [u8; 32]);

impl Digest32 {
    pub fn of(bytes: &[u8]) -> Self {
        Digest32(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest32({})", self.to_hex())
    }
}

impl fmt::Display for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest32 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest32 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(Digest32(out))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FvuPlacement {
    pub fvu_id: String,
    pub zone_id: String,
    pub center: Point,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectoryEntry {
    pub premise_id: String,
    pub policy_versions: BTreeMap<String, u64>,
    pub fvu_topology: Vec<FvuPlacement>,
    pub results_digest: Digest32,
    pub stamp: VersionStamp,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgosDirectory {
    pub entries: BTreeMap<String, DirectoryEntry>,
}

impl EgosDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, premise_id: &str) -> Option<&DirectoryEntry> {
        self.entries.get(premise_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keep whichever of the held and incoming entry has the greater stamp.
    /// Returns true if the directory changed.
    pub fn merge_entry(&mut self, entry: DirectoryEntry) -> bool {
        match self.entries.get(&entry.premise_id) {
            Some(held) if held.stamp >= entry.stamp => false,
            _ => {
                self.entries.insert(entry.premise_id.clone(), entry);
                true
            }
        }
    }

    /// Digest of the canonical JSON form, handy for comparing replicas.
    pub fn digest(&self) -> Digest32 {
        Digest32::of(&serde_json::to_vec(self).expect("directory serializes"))
    }
}

/// Functional form of [`EgosDirectory::merge_entry`].
pub fn merge(dir: &EgosDirectory, entry: DirectoryEntry) -> EgosDirectory {
    let mut out = dir.clone();
    out.merge_entry(entry);
    out
}

/// Entries of `a` that are strictly newer than, or absent from, `b`.
pub fn diff(a: &EgosDirectory, b: &EgosDirectory) -> Vec<DirectoryEntry> {
    a.entries
        .values()
        .filter(|e| b.get(&e.premise_id).is_none_or(|held| e.stamp > held.stamp))
        .cloned()
        .collect()
}

/// Run one anti-entropy round: for each `(from, to)` link in order, push
/// `diff(from, to)` into `to`. Links naming unknown replicas are skipped.
/// Returns the number of entries that changed a replica.
pub fn sync_round(dirs: &mut BTreeMap<String, EgosDirectory>, schedule: &[(String, String)]) -> usize {
    let mut changed = 0;
    for (from, to) in schedule {
        if from == to {
            continue;
        }
        let Some(src) = dirs.get(from) else { continue };
        let Some(dst) = dirs.get(to) else { continue };
        let delta = diff(src, dst);
        let dst = dirs.get_mut(to).expect("checked above");
        for entry in delta {
            if dst.merge_entry(entry) {
                changed += 1;
            }
        }
    }
    changed
}

/// Bidirectional links between every pair of replicas, in key order.
pub fn full_mesh<'a>(ids: impl IntoIterator<Item = &'a String>) -> Vec<(String, String)> {
    let ids: Vec<&String> = ids.into_iter().collect();
    let mut out = Vec::new();
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            out.push(((*a).clone(), (*b).clone()));
            out.push(((*b).clone(), (*a).clone()));
        }
    }
    out
}
