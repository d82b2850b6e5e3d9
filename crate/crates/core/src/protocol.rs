//! Authenticated binary envelope shared by every link.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "DPE1"
//!      4     1  proto_version (0x01)
//!      5     1  msg_type
//!      6     4  seq (u32, big-endian)
//!     10    16  sender_id (UTF-8, zero-padded)
//!     26     2  payload_len (u16, big-endian)
//!     28     n  payload (canonical JSON of the message body)
//!   28+n    32  HMAC-SHA-256 over bytes [0, 28+n)
//! ```
//!
//! Frames are self-delimiting through `payload_len`. Decoding checks the
//! structure first, then the tag, and only then looks at the type and body,
//! so a corrupted frame always surfaces as an error.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::console::ResultOutcome;
use crate::device::{EmmdPresence, EnforcementOutcome, OsIntegrity};
use crate::egos::DirectoryEntry;
use crate::policy::{Policy, PrivacySettings, SettingsDelta};
use crate::time::SimTime;

pub const MAGIC: [u8; 4] = *b"DPE1";
pub const PROTO_VERSION: u8 = 0x01;
pub const SENDER_LEN: usize = 16;
pub const HEADER_LEN: usize = 28;
pub const TAG_LEN: usize = 32;
pub const MIN_FRAME_LEN: usize = HEADER_LEN + TAG_LEN;
pub const MAX_PAYLOAD: usize = u16::MAX as usize;

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported protocol version {0:#04x}")]
    UnsupportedVersion(u8),
    #[error("truncated frame: {got} bytes, need at least {need}")]
    Truncated { need: usize, got: usize },
    #[error("length mismatch: header declares {declared} payload bytes, frame carries {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("authentication tag mismatch")]
    AuthFailure,
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("bad sender id")]
    BadSender,
    #[error("payload of {0} bytes exceeds 65535")]
    Oversize(usize),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
}

impl ProtocolError {
    /// Stable variant name, as printed by `dpe frame inspect`.
    pub fn name(&self) -> &'static str {
        match self {
            ProtocolError::BadMagic => "BadMagic",
            ProtocolError::UnsupportedVersion(_) => "UnsupportedVersion",
            ProtocolError::Truncated { .. } => "Truncated",
            ProtocolError::LengthMismatch { .. } => "LengthMismatch",
            ProtocolError::AuthFailure => "AuthFailure",
            ProtocolError::UnknownType(_) => "UnknownType",
            ProtocolError::BadSender => "BadSender",
            ProtocolError::Oversize(_) => "Oversize",
            ProtocolError::MalformedPayload(_) => "MalformedPayload",
        }
    }
}

/// A 32-byte pre-shared key, one per premise.
#[derive(Clone, PartialEq, Eq)]
pub struct AuthKey([u8; 32]);

impl AuthKey {
    pub const fn new(bytes: [u8; 32]) -> Self {
        AuthKey(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s.trim(), &mut out)?;
        Ok(AuthKey(out))
    }

    /// Deterministic key derived from a label. For simulations and tests.
    pub fn derive(label: &str) -> Self {
        AuthKey(Sha256::digest(format!("dpe-key:{label}").as_bytes()).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for AuthKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("AuthKey(..)")
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
#[repr(u8)]
pub enum MsgType {
    Interrogate = 0x01,
    StateReport = 0x02,
    Enforce = 0x03,
    EnforceAck = 0x04,
    Restore = 0x05,
    PolicyPush = 0x10,
    ResultReport = 0x11,
    Alert = 0x12,
    EgosSync = 0x20,
}

impl MsgType {
    pub fn from_u8(b: u8) -> Option<MsgType> {
        Some(match b {
            0x01 => MsgType::Interrogate,
            0x02 => MsgType::StateReport,
            0x03 => MsgType::Enforce,
            0x04 => MsgType::EnforceAck,
            0x05 => MsgType::Restore,
            0x10 => MsgType::PolicyPush,
            0x11 => MsgType::ResultReport,
            0x12 => MsgType::Alert,
            0x20 => MsgType::EgosSync,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgType::Interrogate => "INTERROGATE",
            MsgType::StateReport => "STATE_REPORT",
            MsgType::Enforce => "ENFORCE",
            MsgType::EnforceAck => "ENFORCE_ACK",
            MsgType::Restore => "RESTORE",
            MsgType::PolicyPush => "POLICY_PUSH",
            MsgType::ResultReport => "RESULT_REPORT",
            MsgType::Alert => "ALERT",
            MsgType::EgosSync => "EGOS_SYNC",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interrogate {
    pub fvu_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateReport {
    pub device_id: String,
    pub settings: PrivacySettings,
    pub os_integrity: OsIntegrity,
    pub emmd: EmmdPresence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Enforce {
    pub device_id: String,
    pub delta: SettingsDelta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnforceAck {
    pub device_id: String,
    pub outcome: EnforcementOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Restore {
    pub device_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyPush {
    pub policy: Policy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultReport {
    pub device_id: String,
    pub zone_id: String,
    pub outcome: ResultOutcome,
    pub timestamp: SimTime,
    pub policy_version: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Alert {
    pub device_id: String,
    pub zone_id: String,
    pub reason: String,
    pub timestamp: SimTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgosSync {
    pub entries: Vec<DirectoryEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageBody {
    Interrogate(Interrogate),
    StateReport(StateReport),
    Enforce(Enforce),
    EnforceAck(EnforceAck),
    Restore(Restore),
    PolicyPush(PolicyPush),
    ResultReport(ResultReport),
    Alert(Alert),
    EgosSync(EgosSync),
}

fn malformed(e: impl fmt::Display) -> ProtocolError {
    ProtocolError::MalformedPayload(e.to_string())
}

impl MessageBody {
    pub fn msg_type(&self) -> MsgType {
        match self {
            MessageBody::Interrogate(_) => MsgType::Interrogate,
            MessageBody::StateReport(_) => MsgType::StateReport,
            MessageBody::Enforce(_) => MsgType::Enforce,
            MessageBody::EnforceAck(_) => MsgType::EnforceAck,
            MessageBody::Restore(_) => MsgType::Restore,
            MessageBody::PolicyPush(_) => MsgType::PolicyPush,
            MessageBody::ResultReport(_) => MsgType::ResultReport,
            MessageBody::Alert(_) => MsgType::Alert,
            MessageBody::EgosSync(_) => MsgType::EgosSync,
        }
    }

    /// Canonical JSON payload: struct fields in declaration order, maps
    /// sorted by key.
    pub fn to_payload(&self) -> Vec<u8> {
        let out = match self {
            MessageBody::Interrogate(b) => serde_json::to_vec(b),
            MessageBody::StateReport(b) => serde_json::to_vec(b),
            MessageBody::Enforce(b) => serde_json::to_vec(b),
            MessageBody::EnforceAck(b) => serde_json::to_vec(b),
            MessageBody::Restore(b) => serde_json::to_vec(b),
            MessageBody::PolicyPush(b) => serde_json::to_vec(b),
            MessageBody::ResultReport(b) => serde_json::to_vec(b),
            MessageBody::Alert(b) => serde_json::to_vec(b),
            MessageBody::EgosSync(b) => serde_json::to_vec(b),
        };
        out.expect("message bodies always serialize")
    }

    pub fn from_payload(msg_type: MsgType, payload: &[u8]) -> Result<MessageBody, ProtocolError> {
        let body = match msg_type {
            MsgType::Interrogate => MessageBody::Interrogate(serde_json::from_slice(payload).map_err(malformed)?),
            MsgType::StateReport => MessageBody::StateReport(serde_json::from_slice(payload).map_err(malformed)?),
            MsgType::Enforce => MessageBody::Enforce(serde_json::from_slice(payload).map_err(malformed)?),
            MsgType::EnforceAck => MessageBody::EnforceAck(serde_json::from_slice(payload).map_err(malformed)?),
            MsgType::Restore => MessageBody::Restore(serde_json::from_slice(payload).map_err(malformed)?),
            MsgType::PolicyPush => MessageBody::PolicyPush(serde_json::from_slice(payload).map_err(malformed)?),
            MsgType::ResultReport => MessageBody::ResultReport(serde_json::from_slice(payload).map_err(malformed)?),
            MsgType::Alert => MessageBody::Alert(serde_json::from_slice(payload).map_err(malformed)?),
            MsgType::EgosSync => MessageBody::EgosSync(serde_json::from_slice(payload).map_err(malformed)?),
        };
        body.validate()?;
        Ok(body)
    }

    fn validate(&self) -> Result<(), ProtocolError> {
        match self {
            MessageBody::Alert(a) if a.reason.is_empty() => Err(malformed("alert reason is empty")),
            MessageBody::Enforce(e) if e.delta.is_empty() => Err(malformed("enforce delta is empty")),
            MessageBody::PolicyPush(p) => p.policy.validate().map_err(malformed),
            _ => Ok(()),
        }
    }

    /// Device the message concerns, if any.
    pub fn device_id(&self) -> Option<&str> {
        match self {
            MessageBody::StateReport(b) => Some(&b.device_id),
            MessageBody::Enforce(b) => Some(&b.device_id),
            MessageBody::EnforceAck(b) => Some(&b.device_id),
            MessageBody::Restore(b) => Some(&b.device_id),
            MessageBody::ResultReport(b) => Some(&b.device_id),
            MessageBody::Alert(b) => Some(&b.device_id),
            MessageBody::Interrogate(_) | MessageBody::PolicyPush(_) | MessageBody::EgosSync(_) => None,
        }
    }
}

/// Header fields, readable without the key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Header {
    pub magic: [u8; 4],
    pub proto_version: u8,
    pub msg_type: u8,
    pub seq: u32,
    pub sender_id: String,
    pub payload_len: u16,
}

/// A decoded, authenticated frame.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Frame {
    pub msg_type: MsgType,
    pub seq: u32,
    pub sender_id: String,
    pub body: MessageBody,
}

fn pad_sender(sender_id: &str) -> Result<[u8; SENDER_LEN], ProtocolError> {
    let bytes = sender_id.as_bytes();
    if bytes.is_empty() || bytes.len() > SENDER_LEN || bytes.contains(&0) {
        return Err(ProtocolError::BadSender);
    }
    let mut out = [0u8; SENDER_LEN];
    out[..bytes.len()].copy_from_slice(bytes);
    Ok(out)
}

fn unpad_sender(field: &[u8]) -> Result<String, ProtocolError> {
    let end = field.iter().position(|&b| b == 0).unwrap_or(field.len());
    if end == 0 || field[end..].iter().any(|&b| b != 0) {
        return Err(ProtocolError::BadSender);
    }
    String::from_utf8(field[..end].to_vec()).map_err(|_| ProtocolError::BadSender)
}

fn mac(key: &AuthKey) -> HmacSha256 {
    <HmacSha256 as KeyInit>::new_from_slice(key.as_bytes()).expect("HMAC accepts any key length")
}

/// Serialize and authenticate `body`. Deterministic for identical inputs.
pub fn encode(body: &MessageBody, seq: u32, sender_id: &str, key: &AuthKey) -> Result<Vec<u8>, ProtocolError> {
    let sender = pad_sender(sender_id)?;
    let payload = body.to_payload();
    if payload.len() > MAX_PAYLOAD {
        return Err(ProtocolError::Oversize(payload.len()));
    }
    let mut out = Vec::with_capacity(MIN_FRAME_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(PROTO_VERSION);
    out.push(body.msg_type() as u8);
    out.extend_from_slice(&seq.to_be_bytes());
    out.extend_from_slice(&sender);
    out.extend_from_slice(&(payload.len() as u16).to_be_bytes());
    out.extend_from_slice(&payload);
    let mut m = mac(key);
    m.update(&out);
    out.extend_from_slice(&m.finalize().into_bytes());
    Ok(out)
}

/// Structural checks shared by `decode` and `split_frames`; returns the
/// header and the total frame length it declares.
fn check_structure(bytes: &[u8]) -> Result<usize, ProtocolError> {
    if bytes.len() >= 4 && bytes[..4] != MAGIC {
        return Err(ProtocolError::BadMagic);
    }
    if bytes.len() >= 5 && bytes[4] != PROTO_VERSION {
        return Err(ProtocolError::UnsupportedVersion(bytes[4]));
    }
    if bytes.len() < MIN_FRAME_LEN {
        return Err(ProtocolError::Truncated {
            need: MIN_FRAME_LEN,
            got: bytes.len(),
        });
    }
    let payload_len = u16::from_be_bytes([bytes[26], bytes[27]]) as usize;
    Ok(MIN_FRAME_LEN + payload_len)
}

/// Read the header without verifying the tag.
pub fn peek_header(bytes: &[u8]) -> Result<Header, ProtocolError> {
    check_structure(bytes)?;
    Ok(Header {
        magic: bytes[..4].try_into().expect("4 bytes"),
        proto_version: bytes[4],
        msg_type: bytes[5],
        seq: u32::from_be_bytes(bytes[6..10].try_into().expect("4 bytes")),
        sender_id: String::from_utf8_lossy(&bytes[10..26])
            .trim_end_matches('\0')
            .to_owned(),
        payload_len: u16::from_be_bytes([bytes[26], bytes[27]]),
    })
}

/// Verify and decode exactly one frame.
pub fn decode(bytes: &[u8], key: &AuthKey) -> Result<Frame, ProtocolError> {
    let total = check_structure(bytes)?;
    if total != bytes.len() {
        return Err(ProtocolError::LengthMismatch {
            declared: total - MIN_FRAME_LEN,
            actual: bytes.len().saturating_sub(MIN_FRAME_LEN),
        });
    }
    let (signed, tag) = bytes.split_at(total - TAG_LEN);
    let mut m = mac(key);
    m.update(signed);
    // constant-time comparison
    m.verify_slice(tag).map_err(|_| ProtocolError::AuthFailure)?;

    let msg_type = MsgType::from_u8(bytes[5]).ok_or(ProtocolError::UnknownType(bytes[5]))?;
    let seq = u32::from_be_bytes(bytes[6..10].try_into().expect("4 bytes"));
    let sender_id = unpad_sender(&bytes[10..26])?;
    let body = MessageBody::from_payload(msg_type, &signed[HEADER_LEN..])?;
    Ok(Frame {
        msg_type,
        seq,
        sender_id,
        body,
    })
}

/// Split a concatenation of frames using each header's `payload_len`.
/// Does not authenticate.
pub fn split_frames(mut stream: &[u8]) -> Result<Vec<&[u8]>, ProtocolError> {
    let mut out = Vec::new();
    while !stream.is_empty() {
        let total = check_structure(stream)?;
        if stream.len() < total {
            return Err(ProtocolError::Truncated {
                need: total,
                got: stream.len(),
            });
        }
        let (frame, rest) = stream.split_at(total);
        out.push(frame);
        stream = rest;
    }
    Ok(out)
}

/// Per-sender duplicate suppression on sequence numbers. Ordering is not
/// enforced.
#[derive(Clone, Debug, Default)]
pub struct ReplayGuard {
    seen: BTreeMap<String, BTreeSet<u32>>,
}

impl ReplayGuard {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false if `(sender, seq)` was accepted before.
    pub fn accept(&mut self, sender_id: &str, seq: u32) -> bool {
        self.seen.entry(sender_id.to_owned()).or_default().insert(seq)
    }
}
