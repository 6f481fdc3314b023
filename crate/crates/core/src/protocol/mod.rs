//! Binary wire protocol shared by the client library, controller, managers,
//! agents and the resource-manager stub.
//!
//! Every message travels in frames of
//!
//! ```text
//! magic "ICHK" | version u8 = 1 | msg_type u8 | payload_len u32 BE | payload
//! ```
//!
//! A frame carries at most [`MAX_FRAME_PAYLOAD`] bytes. A message whose
//! payload does not fit is split across consecutive frames of the same
//! `msg_type`; a frame filled exactly to the cap means "continued", so the
//! last frame of a message is always shorter than the cap (possibly empty).

pub mod arbitrary;
mod wire;

use std::fmt;

pub use wire::{Blob, Reader, Wire, Writer};
use wire::{wire_enum, wire_struct};

use crate::layout::{Layout, Transfer};
use crate::model::{
    AgentAssignment, AgentId, AppId, NodeStats, ProcessType, RegionDescriptor, StorageLevel,
};

pub const MAGIC: [u8; 4] = *b"ICHK";
pub const PROTOCOL_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
pub const MAX_FRAME_PAYLOAD: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown version {0}")]
    UnknownVersion(u8),
    #[error("unknown msg_type {0}")]
    UnknownMsgType(u8),
    #[error("truncated payload in field `{field}`")]
    Truncated { field: &'static str },
    #[error("field `{field}` exceeds its size limit")]
    Oversize { field: &'static str },
    #[error("field `{field}` is not valid UTF-8")]
    InvalidUtf8 { field: &'static str },
    #[error("field `{field}` has invalid tag {value}")]
    InvalidEnum { field: &'static str, value: u8 },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("continuation frame has msg_type {got}, expected {expected}")]
    MixedContinuation { expected: u8, got: u8 },
}

/// Error classes carried in `Error` and `CommitAck` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    Ok,
    Integrity,
    Unregistered,
    Capacity,
    Missing,
    Storage,
    NoSource,
    Layout,
    Moved,
    UnknownApp,
    NotOwned,
    InsufficientCapacity,
    Rejected,
    Protocol,
    Internal,
    InvalidArgument,
    Timeout,
}

wire_enum!(ErrorCode {
    ErrorCode::Ok = 0,
    ErrorCode::Integrity = 1,
    ErrorCode::Unregistered = 2,
    ErrorCode::Capacity = 3,
    ErrorCode::Missing = 4,
    ErrorCode::Storage = 5,
    ErrorCode::NoSource = 6,
    ErrorCode::Layout = 7,
    ErrorCode::Moved = 8,
    ErrorCode::UnknownApp = 9,
    ErrorCode::NotOwned = 10,
    ErrorCode::InsufficientCapacity = 11,
    ErrorCode::Rejected = 12,
    ErrorCode::Protocol = 13,
    ErrorCode::Internal = 14,
    ErrorCode::InvalidArgument = 15,
    ErrorCode::Timeout = 16,
});

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorCode::Ok => "ok",
            ErrorCode::Integrity => "integrity",
            ErrorCode::Unregistered => "unregistered",
            ErrorCode::Capacity => "capacity",
            ErrorCode::Missing => "missing",
            ErrorCode::Storage => "storage",
            ErrorCode::NoSource => "no source",
            ErrorCode::Layout => "layout",
            ErrorCode::Moved => "moved",
            ErrorCode::UnknownApp => "unknown app",
            ErrorCode::NotOwned => "not owned",
            ErrorCode::InsufficientCapacity => "insufficient checkpoint capacity",
            ErrorCode::Rejected => "rejected",
            ErrorCode::Protocol => "protocol",
            ErrorCode::Internal => "internal",
            ErrorCode::InvalidArgument => "invalid argument",
            ErrorCode::Timeout => "timeout",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeChange {
    NoChange,
    NewAssignments,
}

wire_enum!(ProbeChange {
    ProbeChange::NoChange = 0,
    ProbeChange::NewAssignments = 1,
});

/// Size and checksum of one region within a commit or snapshot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionChecksum {
    pub region_id: String,
    pub len: u64,
    pub crc: u32,
}
wire_struct!(RegionChecksum { region_id, len, crc });

/// Checksum of one (rank, region) of a version.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryChecksum {
    pub rank: u32,
    pub region_id: String,
    pub len: u64,
    pub crc: u32,
}
wire_struct!(EntryChecksum {
    rank,
    region_id,
    len,
    crc
});

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentLaunch {
    pub agent_id: AgentId,
    pub ranks: Vec<u32>,
}
wire_struct!(AgentLaunch { agent_id, ranks });

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentReadyEntry {
    pub agent_id: AgentId,
    pub endpoint: String,
    pub ok: bool,
}
wire_struct!(AgentReadyEntry {
    agent_id,
    endpoint,
    ok
});

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteRange {
    pub offset: u64,
    pub len: u64,
}
wire_struct!(ByteRange { offset, len });

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VersionKey {
    pub epoch: u32,
    pub version: u64,
}
wire_struct!(VersionKey { epoch, version });

/// The latest COMPLETE version of an application and where its data lives.
#[derive(Debug, Clone, PartialEq)]
pub struct RestartPoint {
    pub app_id: AppId,
    pub version: u64,
    pub adapt_epoch: u32,
    pub world_size: u32,
    pub regions: Vec<RegionDescriptor>,
    /// Agents holding the version's memory copy, each with the ranks it holds.
    pub placement: Vec<AgentAssignment>,
    /// Current agent endpoints of the application.
    pub assignments: Vec<AgentAssignment>,
    pub levels: Vec<StorageLevel>,
    pub checksums: Vec<EntryChecksum>,
    pub pfs_root: String,
}
wire_struct!(RestartPoint {
    app_id,
    version,
    adapt_epoch,
    world_size,
    regions,
    placement,
    assignments,
    levels,
    checksums,
    pfs_root
});

impl RestartPoint {
    pub fn checksum(&self, rank: u32, region_id: &str) -> Option<&EntryChecksum> {
        self.checksums
            .iter()
            .find(|c| c.rank == rank && c.region_id == region_id)
    }
}

/// Declares the message set: one line per variant with its msg_type code
/// and fields, encoded in the order listed.
macro_rules! messages {
    ($( $code:literal => $name:ident { $($field:ident : $ty:ty),* $(,)? } ),+ $(,)?) => {
        #[derive(Debug, Clone, PartialEq)]
        pub enum Message {
            $( $name { $($field: $ty),* } ),+
        }

        impl Message {
            pub fn msg_type(&self) -> u8 {
                match self { $( Message::$name { .. } => $code ),+ }
            }

            pub fn name(&self) -> &'static str {
                match self { $( Message::$name { .. } => stringify!($name) ),+ }
            }

            /// Every defined msg_type code.
            pub const CODES: &'static [u8] = &[$($code),+];

            #[allow(unused_variables)]
            fn put_payload(&self, w: &mut Writer) -> Result<(), ProtocolError> {
                match self {
                    $( Message::$name { $($field),* } => {
                        $( Wire::put($field, w, stringify!($field))?; )*
                    } ),+
                }
                Ok(())
            }

            /// A message of type `code` with random field values.
            #[allow(unused_variables)]
            pub fn arbitrary(code: u8, rng: &mut dyn rand::RngCore) -> Option<Self> {
                match code {
                    $( $code => Some(Message::$name {
                        $( $field: <$ty as arbitrary::Arbitrary>::arbitrary(rng), )*
                    }), )+
                    _ => None,
                }
            }

            #[allow(unused_variables)]
            fn get_payload(code: u8, r: &mut Reader<'_>) -> Result<Self, ProtocolError> {
                match code {
                    $( $code => Ok(Message::$name {
                        $( $field: <$ty as Wire>::get(r, stringify!($field))?, )*
                    }), )+
                    other => Err(ProtocolError::UnknownMsgType(other)),
                }
            }
        }
    };
}

messages! {
    // client <-> controller
    1 => Register { name: String, world_size: u32, rank: u32, process_type: ProcessType, regions: Vec<RegionDescriptor> },
    2 => RegisterAck { app_id: AppId, world_size: u32, adapt_epoch: u32, next_version: u64, generation: u64, assignments: Vec<AgentAssignment> },
    3 => ProbeAgents { app_id: AppId },
    4 => ProbeAgentsAck { change: ProbeChange, generation: u64, assignments: Vec<AgentAssignment> },
    5 => RestartQuery { app_id: AppId, name: String },
    6 => RestartInfo { info: Option<RestartPoint> },
    7 => Deregister { app_id: AppId },
    8 => DeclareRegions { app_id: AppId, regions: Vec<RegionDescriptor> },
    9 => AdaptBegin { app_id: AppId, new_world_size: u32, epoch: u32 },
    10 => AdaptAck { epoch: u32, world_size: u32, generation: u64, assignments: Vec<AgentAssignment> },
    11 => AssignmentQuery { app_id: AppId },
    12 => SourceMapQuery { app_id: AppId, epoch: u32 },
    13 => SourceMap { assignments: Vec<AgentAssignment> },
    14 => Ok {},
    15 => Error { code: ErrorCode, reason: String },

    // client <-> agent
    16 => Connect { app_id: AppId, rank: u32, epoch: u32 },
    17 => MemRegister { app_id: AppId, rank: u32, epoch: u32, regions: Vec<RegionDescriptor> },
    18 => CommitBegin { app_id: AppId, epoch: u32, version: u64, rank: u32, regions: Vec<RegionChecksum> },
    19 => CommitData { region_id: String, offset: u64, data: Blob },
    20 => CommitEnd { app_id: AppId, version: u64, rank: u32 },
    21 => CommitAck { version: u64, code: ErrorCode, reason: String },
    22 => RestoreReq { app_id: AppId, epoch: u32, version: u64, rank: u32, region_id: String },
    23 => RestoreData { region_id: String, offset: u64, total: u64, crc: u32, data: Blob },
    24 => RedistReq { app_id: AppId, epoch: u32, region_id: String, elem_size: u32, old: Layout, new: Layout, dst_rank: u32 },
    25 => RedistData { region_id: String, offset: u64, total: u64, data: Blob },
    26 => SnapshotPush { app_id: AppId, epoch: u32, rank: u32, regions: Vec<RegionChecksum> },

    // controller <-> manager (and agents)
    32 => LaunchAgents { app_id: AppId, pfs_root: String, agents: Vec<AgentLaunch> },
    33 => AgentReady { agents: Vec<AgentReadyEntry> },
    34 => StatsReport { stats: NodeStats, live_agents: Vec<AgentId>, dead_agents: Vec<AgentId> },
    35 => FlushOrder { app_id: AppId, epoch: u32, version: u64, agent_id: AgentId, ranks: Vec<u32> },
    36 => MigrateOrder { app_id: AppId, agent_id: AgentId, target_node: String, target_endpoint: String },
    37 => Shutdown { agent_id: AgentId },
    38 => CommitReport { app_id: AppId, epoch: u32, version: u64, rank: u32, agent_id: AgentId, bytes: u64, transfer_us: u64, regions: Vec<RegionChecksum> },
    39 => FlushAck { app_id: AppId, version: u64, agent_id: AgentId, ok: bool, reason: String },
    40 => MigrateAck { app_id: AppId, agent_id: AgentId, entries: u64, ok: bool, reason: String },
    41 => PlanPush { app_id: AppId, epoch: u32, region_id: String, elem_size: u32, old: Layout, new: Layout, transfers: Vec<Transfer>, sources: Vec<AgentAssignment> },
    42 => DropVersions { app_id: AppId, versions: Vec<VersionKey>, snapshots_through_epoch: u32 },
    43 => ManagerHello { node_id: String, endpoint: String, mem_capacity: u64 },
    44 => PurgeMemory { app_id: AppId, epoch: u32, version: u64 },
    45 => AgentStatsQuery {},
    46 => AgentStatsReply { agent_id: AgentId, bytes_staged: u64, bytes_moved: u64, entries: u64, plans_computed: u64, plans_pushed: u64 },
    47 => CapacityNotice { app_id: AppId, agent_id: AgentId, needed: u64 },

    // controller <-> resource manager
    48 => NodeRequest { count: u32, reason: String },
    49 => NodeGrant { nodes: Vec<String>, partial: bool },
    50 => NodeReclaim { nodes: Vec<String>, deadline_ms: u64 },
    51 => MigrateHint { from: String, to: String },
    52 => AppAdaptNotice { app_id: AppId, new_world_size: u32, epoch: u32 },

    // agent <-> agent
    64 => MigrateStream { app_id: AppId, epoch: u32, version: u64, rank: u32, region_id: String, crc: u32, data: Blob },
    65 => PeerFetch { app_id: AppId, epoch: u32, src_rank: u32, region_id: String, ranges: Vec<ByteRange> },
    66 => PeerData { crc: u32, data: Blob },
}

impl Message {
    pub fn error(code: ErrorCode, reason: impl Into<String>) -> Self {
        Message::Error {
            code,
            reason: reason.into(),
        }
    }

    /// Encoded payload, before framing.
    pub fn payload(&self) -> Result<Vec<u8>, ProtocolError> {
        let mut w = Writer::new();
        self.put_payload(&mut w)?;
        Ok(w.into_inner())
    }
}

fn push_header(out: &mut Vec<u8>, msg_type: u8, len: usize) {
    out.extend_from_slice(&MAGIC);
    out.push(PROTOCOL_VERSION);
    out.push(msg_type);
    out.extend_from_slice(&(len as u32).to_be_bytes());
}

/// Encodes `msg` into one or more frames.
pub fn encode(msg: &Message) -> Result<Vec<u8>, ProtocolError> {
    let payload = msg.payload()?;
    let code = msg.msg_type();
    let frames = payload.len() / MAX_FRAME_PAYLOAD + 1;
    let mut out = Vec::with_capacity(payload.len() + frames * HEADER_LEN);
    let mut chunks = payload.chunks(MAX_FRAME_PAYLOAD);
    loop {
        match chunks.next() {
            Some(chunk) => {
                push_header(&mut out, code, chunk.len());
                out.extend_from_slice(chunk);
                if chunk.len() < MAX_FRAME_PAYLOAD {
                    break;
                }
            }
            None => {
                // empty payload, or a payload that is an exact multiple of the cap
                push_header(&mut out, code, 0);
                break;
            }
        }
    }
    Ok(out)
}

struct FrameHeader {
    msg_type: u8,
    len: usize,
}

fn parse_header(buf: &[u8]) -> Result<FrameHeader, ProtocolError> {
    let magic: [u8; 4] = buf[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    if buf[4] != PROTOCOL_VERSION {
        return Err(ProtocolError::UnknownVersion(buf[4]));
    }
    let msg_type = buf[5];
    if !Message::CODES.contains(&msg_type) {
        return Err(ProtocolError::UnknownMsgType(msg_type));
    }
    let len = u32::from_be_bytes(buf[6..10].try_into().unwrap()) as usize;
    if len > MAX_FRAME_PAYLOAD {
        return Err(ProtocolError::Oversize {
            field: "payload_len",
        });
    }
    Ok(FrameHeader { msg_type, len })
}

/// Decodes one message from the front of `buf`.
///
/// Returns `Ok(None)` when `buf` does not yet hold a complete frame set,
/// otherwise the message and the number of bytes it occupied.
pub fn decode(buf: &[u8]) -> Result<Option<(Message, usize)>, ProtocolError> {
    let mut pos = 0;
    let mut msg_type = None;
    let mut spans: Vec<(usize, usize)> = Vec::new();
    loop {
        if buf.len() < pos + HEADER_LEN {
            // Validate what is visible so garbage is rejected early.
            if buf.len() >= pos + 6 {
                let partial = &buf[pos..pos + 6];
                if partial[0..4] != MAGIC {
                    return Err(ProtocolError::BadMagic(partial[0..4].try_into().unwrap()));
                }
                if partial[4] != PROTOCOL_VERSION {
                    return Err(ProtocolError::UnknownVersion(partial[4]));
                }
            }
            return Ok(None);
        }
        let header = parse_header(&buf[pos..pos + HEADER_LEN])?;
        if let Some(expected) = msg_type {
            if header.msg_type != expected {
                return Err(ProtocolError::MixedContinuation {
                    expected,
                    got: header.msg_type,
                });
            }
        }
        msg_type = Some(header.msg_type);
        let start = pos + HEADER_LEN;
        if buf.len() < start + header.len {
            return Ok(None);
        }
        spans.push((start, start + header.len));
        pos = start + header.len;
        if header.len < MAX_FRAME_PAYLOAD {
            break;
        }
    }
    let code = msg_type.expect("at least one frame");
    let msg = if spans.len() == 1 {
        let (s, e) = spans[0];
        decode_payload(code, &buf[s..e])?
    } else {
        let mut payload = Vec::with_capacity(spans.iter().map(|(s, e)| e - s).sum());
        for (s, e) in spans {
            payload.extend_from_slice(&buf[s..e]);
        }
        decode_payload(code, &payload)?
    };
    Ok(Some((msg, pos)))
}

fn decode_payload(code: u8, payload: &[u8]) -> Result<Message, ProtocolError> {
    let mut r = Reader::new(payload);
    let msg = Message::get_payload(code, &mut r)?;
    if r.remaining() != 0 {
        return Err(ProtocolError::TrailingBytes(r.remaining()));
    }
    Ok(msg)
}

/// Per-connection reassembly buffer.
#[derive(Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    start: usize,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.start > 0 && self.start == self.buf.len() {
            self.buf.clear();
            self.start = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len() - self.start
    }

    /// Next complete message, if one is buffered.
    pub fn next_message(&mut self) -> Result<Option<Message>, ProtocolError> {
        match decode(&self.buf[self.start..])? {
            Some((msg, used)) => {
                self.start += used;
                if self.start == self.buf.len() {
                    self.buf.clear();
                    self.start = 0;
                } else if self.start > (1 << 20) && self.start * 2 > self.buf.len() {
                    self.buf.drain(..self.start);
                    self.start = 0;
                }
                Ok(Some(msg))
            }
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DistributionScheme;

    #[test]
    fn probe_agents_hand_encoded() {
        let bytes = encode(&Message::ProbeAgents { app_id: AppId(1) }).unwrap();
        let mut expect = b"ICHK".to_vec();
        expect.extend_from_slice(&[0x01, 0x03, 0, 0, 0, 8]);
        expect.extend_from_slice(&1u64.to_be_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn register_hand_encoded() {
        let msg = Message::Register {
            name: "ab".into(),
            world_size: 2,
            rank: 0,
            process_type: ProcessType::Initial,
            regions: vec![RegionDescriptor {
                region_id: "d".into(),
                elem_size: 4,
                count_per_rank: vec![1, 1],
                scheme: DistributionScheme::Cyclic,
            }],
        };
        let mut payload = vec![0, 2, b'a', b'b', 0, 0, 0, 2, 0, 0, 0, 0, 0];
        payload.extend_from_slice(&[0, 0, 0, 1, 0, 1, b'd', 0, 0, 0, 4, 0, 0, 0, 2]);
        payload.extend_from_slice(&1u64.to_be_bytes());
        payload.extend_from_slice(&1u64.to_be_bytes());
        payload.push(1);
        assert_eq!(msg.payload().unwrap(), payload);
        let bytes = encode(&msg).unwrap();
        let (back, used) = decode(&bytes).unwrap().unwrap();
        assert_eq!(back, msg);
        assert_eq!(used, bytes.len());
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode(&Message::Ok {}).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert_eq!(
            decode(&bytes).unwrap_err(),
            ProtocolError::BadMagic(*b"XXXX")
        );
    }

    #[test]
    fn unknown_version_and_type_rejected() {
        let mut bytes = encode(&Message::Ok {}).unwrap();
        bytes[4] = 9;
        assert_eq!(decode(&bytes).unwrap_err(), ProtocolError::UnknownVersion(9));
        let mut bytes = encode(&Message::Ok {}).unwrap();
        bytes[5] = 200;
        assert_eq!(decode(&bytes).unwrap_err(), ProtocolError::UnknownMsgType(200));
    }

    #[test]
    fn short_payload_needs_more_bytes() {
        let bytes = encode(&Message::Deregister { app_id: AppId(7) }).unwrap();
        for cut in 0..bytes.len() {
            assert!(decode(&bytes[..cut]).unwrap().is_none(), "cut {cut}");
        }
    }

    #[test]
    fn truncated_field_names_the_field() {
        // header claims 4 bytes, but an app_id needs 8
        let mut bytes = b"ICHK".to_vec();
        bytes.extend_from_slice(&[1, 7, 0, 0, 0, 4, 0, 0, 0, 1]);
        assert_eq!(
            decode(&bytes).unwrap_err(),
            ProtocolError::Truncated { field: "app_id" }
        );
    }

    #[test]
    fn trailing_payload_rejected() {
        let mut bytes = b"ICHK".to_vec();
        bytes.extend_from_slice(&[1, 14, 0, 0, 0, 1, 0]);
        assert_eq!(decode(&bytes).unwrap_err(), ProtocolError::TrailingBytes(1));
    }

    #[test]
    fn oversize_string_rejected() {
        let msg = Message::Deregister { app_id: AppId(1) };
        assert!(encode(&msg).is_ok());
        let long = Message::NodeRequest {
            count: 1,
            reason: "x".repeat(70_000),
        };
        assert_eq!(
            encode(&long).unwrap_err(),
            ProtocolError::Oversize { field: "reason" }
        );
    }

    #[test]
    fn exact_cap_payload_gets_empty_terminator() {
        // blob header: region_id (2) + offset (8) + blob len (4)
        let data = vec![7u8; MAX_FRAME_PAYLOAD - 14];
        let msg = Message::CommitData {
            region_id: String::new(),
            offset: 0,
            data: Blob(data),
        };
        let bytes = encode(&msg).unwrap();
        assert_eq!(bytes.len(), MAX_FRAME_PAYLOAD + 2 * HEADER_LEN);
        assert!(decode(&bytes[..bytes.len() - 1]).unwrap().is_none());
        let (back, used) = decode(&bytes).unwrap().unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, msg);
    }

    #[test]
    fn decoder_reassembles_across_pushes() {
        let a = encode(&Message::ProbeAgents { app_id: AppId(3) }).unwrap();
        let b = encode(&Message::Ok {}).unwrap();
        let mut stream = a.clone();
        stream.extend_from_slice(&b);
        let mut dec = FrameDecoder::new();
        let mut got = Vec::new();
        for byte in stream {
            dec.push(&[byte]);
            while let Some(m) = dec.next_message().unwrap() {
                got.push(m);
            }
        }
        assert_eq!(
            got,
            vec![Message::ProbeAgents { app_id: AppId(3) }, Message::Ok {}]
        );
        assert_eq!(dec.buffered(), 0);
    }
}
