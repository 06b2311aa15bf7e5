//! Wire format and simulated transport between the server and its clients.
//!
//! Every message travels as one frame. All integers are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FDP1"
//! 4       2     version (1)
//! 6       1     kind: 1 = client update, 2 = server model
//! 7       4     body length L
//! 11      L     body
//! 11+L    4     CRC-32 (IEEE) of bytes 4 .. 11+L
//! ```
//!
//! Client update body: `round u32, client_id u32, dp_applied u8 (0|1),
//! count u32, count × f64`.
//!
//! Server model body: `round u32, layout_digest u64, count u32, count × f64`.
//!
//! The checksum covers everything between the magic and the checksum itself,
//! so any single corrupted byte is reported. A capture file is a plain
//! concatenation of frames.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{self, Role, Stream};

pub const MAGIC: [u8; 4] = *b"FDP1";
pub const VERSION: u16 = 1;
pub const KIND_CLIENT: u8 = 1;
pub const KIND_SERVER: u8 = 2;
pub const HEADER_LEN: usize = 11;
pub const TRAILER_LEN: usize = 4;

const CLIENT_FIXED: usize = 4 + 4 + 1 + 4;
const SERVER_FIXED: usize = 4 + 8 + 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown frame kind {0}")]
    UnknownKind(u8),
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("body length {body} does not match {count} values")]
    BodyLength { body: usize, count: usize },
    #[error("invalid dp flag {0}")]
    InvalidFlag(u8),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("expected a {expected} frame")]
    UnexpectedKind { expected: &'static str },
}

/// A client's upload for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientMessage {
    pub version: u16,
    pub round: u32,
    pub client_id: u32,
    pub delta: Vec<f64>,
    pub dp_applied: bool,
}

/// Global parameters distributed at the start of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerMessage {
    pub version: u16,
    pub round: u32,
    pub theta: Vec<f64>,
    pub layout_digest: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Client(ClientMessage),
    Server(ServerMessage),
}

impl ClientMessage {
    pub fn new(round: u32, client_id: u32, delta: Vec<f64>, dp_applied: bool) -> Self {
        Self {
            version: VERSION,
            round,
            client_id,
            delta,
            dp_applied,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::with_capacity(CLIENT_FIXED + 8 * self.delta.len());
        body.extend_from_slice(&self.round.to_le_bytes());
        body.extend_from_slice(&self.client_id.to_le_bytes());
        body.push(u8::from(self.dp_applied));
        put_values(&mut body, &self.delta);
        frame(self.version, KIND_CLIENT, &body)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        match decode_frame(bytes)? {
            Frame::Client(m) => Ok(m),
            Frame::Server(_) => Err(WireError::UnexpectedKind { expected: "client" }),
        }
    }
}

impl ServerMessage {
    pub fn new(round: u32, theta: Vec<f64>, layout_digest: u64) -> Self {
        Self {
            version: VERSION,
            round,
            theta,
            layout_digest,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::with_capacity(SERVER_FIXED + 8 * self.theta.len());
        body.extend_from_slice(&self.round.to_le_bytes());
        body.extend_from_slice(&self.layout_digest.to_le_bytes());
        put_values(&mut body, &self.theta);
        frame(self.version, KIND_SERVER, &body)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        match decode_frame(bytes)? {
            Frame::Server(m) => Ok(m),
            Frame::Client(_) => Err(WireError::UnexpectedKind { expected: "server" }),
        }
    }
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Frame::Client(m) => m.encode(),
            Frame::Server(m) => m.encode(),
        }
    }
}

fn put_values(body: &mut Vec<u8>, values: &[f64]) {
    let count = u32::try_from(values.len()).expect("vector longer than u32::MAX");
    body.extend_from_slice(&count.to_le_bytes());
    for v in values {
        body.extend_from_slice(&v.to_le_bytes());
    }
}

fn frame(version: u16, kind: u8, body: &[u8]) -> Vec<u8> {
    let len = u32::try_from(body.len()).expect("frame body longer than u32::MAX");
    let mut out = Vec::with_capacity(HEADER_LEN + body.len() + TRAILER_LEN);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(body);
    let crc = crc32fast::hash(&out[4..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Decodes exactly one frame; extra bytes are an error.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, WireError> {
    let (frame, used) = read_frame(bytes)?;
    if used != bytes.len() {
        return Err(WireError::TrailingBytes(bytes.len() - used));
    }
    Ok(frame)
}

/// Decodes the frame at the start of `bytes`, returning it and its length.
pub fn read_frame(bytes: &[u8]) -> Result<(Frame, usize), WireError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(WireError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(WireError::Truncated {
            needed: HEADER_LEN,
            have: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(WireError::UnsupportedVersion(version));
    }
    let kind = bytes[6];
    if kind != KIND_CLIENT && kind != KIND_SERVER {
        return Err(WireError::UnknownKind(kind));
    }
    let body_len = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let total = HEADER_LEN
        .checked_add(body_len)
        .and_then(|n| n.checked_add(TRAILER_LEN))
        .unwrap_or(usize::MAX);
    if bytes.len() < total {
        return Err(WireError::Truncated {
            needed: total,
            have: bytes.len(),
        });
    }
    let body_end = HEADER_LEN + body_len;
    let stored = u32::from_le_bytes(bytes[body_end..total].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[4..body_end]);
    if stored != computed {
        return Err(WireError::ChecksumMismatch { stored, computed });
    }
    let body = &bytes[HEADER_LEN..body_end];
    let frame = match kind {
        KIND_CLIENT => {
            let (round, client_id, flag, values) = parse_client_body(body)?;
            Frame::Client(ClientMessage {
                version,
                round,
                client_id,
                delta: values,
                dp_applied: flag,
            })
        }
        _ => {
            let (round, digest, values) = parse_server_body(body)?;
            Frame::Server(ServerMessage {
                version,
                round,
                theta: values,
                layout_digest: digest,
            })
        }
    };
    Ok((frame, total))
}

fn read_values(body: &[u8], fixed: usize) -> Result<Vec<f64>, WireError> {
    let count = u32::from_le_bytes(body[fixed - 4..fixed].try_into().unwrap()) as usize;
    if body.len() - fixed != count.saturating_mul(8) {
        return Err(WireError::BodyLength {
            body: body.len(),
            count,
        });
    }
    Ok(body[fixed..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn parse_client_body(body: &[u8]) -> Result<(u32, u32, bool, Vec<f64>), WireError> {
    if body.len() < CLIENT_FIXED {
        return Err(WireError::BodyLength {
            body: body.len(),
            count: 0,
        });
    }
    let round = u32::from_le_bytes(body[0..4].try_into().unwrap());
    let client_id = u32::from_le_bytes(body[4..8].try_into().unwrap());
    let flag = match body[8] {
        0 => false,
        1 => true,
        other => return Err(WireError::InvalidFlag(other)),
    };
    Ok((round, client_id, flag, read_values(body, CLIENT_FIXED)?))
}

fn parse_server_body(body: &[u8]) -> Result<(u32, u64, Vec<f64>), WireError> {
    if body.len() < SERVER_FIXED {
        return Err(WireError::BodyLength {
            body: body.len(),
            count: 0,
        });
    }
    let round = u32::from_le_bytes(body[0..4].try_into().unwrap());
    let digest = u64::from_le_bytes(body[4..12].try_into().unwrap());
    Ok((round, digest, read_values(body, SERVER_FIXED)?))
}

pub fn write_capture(frames: &[Frame]) -> Vec<u8> {
    frames.iter().flat_map(Frame::encode).collect()
}

/// Parses a concatenation of frames; any malformed frame fails the whole
/// capture.
pub fn read_capture(mut bytes: &[u8]) -> Result<Vec<Frame>, WireError> {
    let mut frames = Vec::new();
    while !bytes.is_empty() {
        let (frame, used) = read_frame(bytes)?;
        frames.push(frame);
        bytes = &bytes[used..];
    }
    Ok(frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    #[serde(default)]
    pub drop_rate: f64,
    #[serde(default)]
    pub latency_ticks: u64,
    /// Falls back to a value derived from the experiment's root seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            drop_rate: 0.0,
            latency_ticks: 0,
            seed: None,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(ChannelError::InvalidConfig(format!(
                "drop_rate must lie in [0, 1), got {}",
                self.drop_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    #[error("channel closed")]
    Closed,
    #[error("invalid channel config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub sent: u64,
    pub dropped: u64,
    pub delivered: u64,
}

/// One-directional, in-order, lossy link. Each send draws one uniform from the
/// channel's own stream; the frame is dropped when it falls below
/// `drop_rate`. Surviving frames become receivable `latency_ticks` after they
/// were sent.
#[derive(Debug)]
pub struct Channel {
    queue: VecDeque<(u64, Vec<u8>)>,
    rng: Stream,
    drop_rate: f64,
    latency: u64,
    now: u64,
    closed: bool,
    stats: ChannelStats,
}

impl Channel {
    pub fn new(drop_rate: f64, latency_ticks: u64, seed: u64) -> Self {
        Self {
            queue: VecDeque::new(),
            rng: seed::stream(seed),
            drop_rate,
            latency: latency_ticks,
            now: 0,
            closed: false,
            stats: ChannelStats::default(),
        }
    }

    /// Returns whether the frame survived the drop lottery.
    pub fn send(&mut self, frame: Vec<u8>) -> Result<bool, ChannelError> {
        if self.closed {
            return Err(ChannelError::Closed);
        }
        self.stats.sent += 1;
        if seed::uniform(&mut self.rng) < self.drop_rate {
            self.stats.dropped += 1;
            return Ok(false);
        }
        self.queue.push_back((self.now + self.latency, frame));
        Ok(true)
    }

    /// Next frame whose delivery time has come, if any.
    pub fn recv(&mut self) -> Result<Option<Vec<u8>>, ChannelError> {
        if self.closed {
            return Err(ChannelError::Closed);
        }
        match self.queue.front() {
            Some((at, _)) if *at <= self.now => {
                self.stats.delivered += 1;
                Ok(self.queue.pop_front().map(|(_, f)| f))
            }
            _ => Ok(None),
        }
    }

    pub fn advance(&mut self, ticks: u64) {
        self.now += ticks;
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn latency(&self) -> u64 {
        self.latency
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }
}

/// A downlink and an uplink per client, indexed by client id.
#[derive(Debug)]
pub struct Transport {
    pub downlinks: Vec<Channel>,
    pub uplinks: Vec<Channel>,
}

impl Transport {
    pub fn new(clients: usize, cfg: &ChannelConfig, seed: u64) -> Result<Self, ChannelError> {
        cfg.validate()?;
        let seed = cfg.seed.unwrap_or(seed);
        let link = |id: usize, dir: u64| {
            Channel::new(
                cfg.drop_rate,
                cfg.latency_ticks,
                seed::derive(seed, Role::Transport, id as u64, dir),
            )
        };
        Ok(Self {
            downlinks: (0..clients).map(|i| link(i, 0)).collect(),
            uplinks: (0..clients).map(|i| link(i, 1)).collect(),
        })
    }

    pub fn latency(&self) -> u64 {
        self.downlinks.first().map_or(0, Channel::latency)
    }

    pub fn advance_downlinks(&mut self, ticks: u64) {
        self.downlinks.iter_mut().for_each(|c| c.advance(ticks));
    }

    pub fn advance_uplinks(&mut self, ticks: u64) {
        self.uplinks.iter_mut().for_each(|c| c.advance(ticks));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn client_round_trip() {
        let m = ClientMessage::new(7, 3, vec![1.5, -0.25, 1e-300], true);
        let bytes = m.encode();
        assert_eq!(&bytes[..4], b"FDP1");
        assert_eq!(bytes.len(), HEADER_LEN + CLIENT_FIXED + 24 + TRAILER_LEN);
        assert_eq!(ClientMessage::decode(&bytes).unwrap(), m);
    }

    #[test]
    fn empty_delta_is_valid() {
        let m = ClientMessage::new(0, 0, vec![], false);
        let back = ClientMessage::decode(&m.encode()).unwrap();
        assert!(back.delta.is_empty());
        let s = ServerMessage::new(1, vec![], 42);
        assert_eq!(ServerMessage::decode(&s.encode()).unwrap(), s);
    }

    #[test]
    fn golden_layout() {
        let m = ClientMessage::new(1, 2, vec![1.0], true);
        let b = m.encode();
        assert_eq!(&b[4..6], &1u16.to_le_bytes());
        assert_eq!(b[6], KIND_CLIENT);
        assert_eq!(&b[7..11], &(CLIENT_FIXED as u32 + 8).to_le_bytes());
        assert_eq!(&b[11..15], &1u32.to_le_bytes());
        assert_eq!(&b[15..19], &2u32.to_le_bytes());
        assert_eq!(b[19], 1);
        assert_eq!(&b[20..24], &1u32.to_le_bytes());
        assert_eq!(&b[24..32], &1.0f64.to_le_bytes());
        assert_eq!(&b[32..36], &crc32fast::hash(&b[4..32]).to_le_bytes());
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let m = ClientMessage::new(1, 1, vec![0.5; 4], false);
        let mut b = m.encode();
        b[30] ^= 0x01;
        assert!(matches!(decode_frame(&b), Err(WireError::ChecksumMismatch { .. })));
    }

    #[test]
    fn distinct_header_errors() {
        let b = ServerMessage::new(1, vec![2.0], 9).encode();
        let mut bad = b.clone();
        bad[0] = b'G';
        assert!(matches!(decode_frame(&bad), Err(WireError::BadMagic(_))));
        let mut bad = b.clone();
        bad[4] = 2;
        assert_eq!(decode_frame(&bad), Err(WireError::UnsupportedVersion(2)));
        let mut bad = b.clone();
        bad[6] = 9;
        assert_eq!(decode_frame(&bad), Err(WireError::UnknownKind(9)));
        assert!(matches!(decode_frame(&b[..b.len() - 1]), Err(WireError::Truncated { .. })));
        let mut long = b.clone();
        long.push(0);
        assert_eq!(decode_frame(&long), Err(WireError::TrailingBytes(1)));
        assert_eq!(
            ClientMessage::decode(&b),
            Err(WireError::UnexpectedKind { expected: "client" })
        );
    }

    #[test]
    fn inconsistent_count_is_rejected_even_with_valid_crc() {
        let mut body = Vec::new();
        body.extend_from_slice(&0u32.to_le_bytes());
        body.extend_from_slice(&0u32.to_le_bytes());
        body.push(0);
        body.extend_from_slice(&1000u32.to_le_bytes());
        body.extend_from_slice(&1.0f64.to_le_bytes());
        let f = frame(VERSION, KIND_CLIENT, &body);
        assert!(matches!(decode_frame(&f), Err(WireError::BodyLength { .. })));
        let mut body2 = body.clone();
        body2[8] = 2;
        body2.truncate(CLIENT_FIXED);
        body2[9..13].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(decode_frame(&frame(VERSION, KIND_CLIENT, &body2)), Err(WireError::InvalidFlag(2)));
    }

    #[test]
    fn capture_round_trip() {
        let frames = vec![
            Frame::Server(ServerMessage::new(0, vec![1.0, 2.0], 5)),
            Frame::Client(ClientMessage::new(0, 1, vec![-1.0], true)),
            Frame::Client(ClientMessage::new(0, 2, vec![], false)),
        ];
        let bytes = write_capture(&frames);
        assert_eq!(read_capture(&bytes).unwrap(), frames);
        assert!(read_capture(&bytes[..bytes.len() - 2]).is_err());
        assert!(read_capture(&[]).unwrap().is_empty());
    }

    #[test]
    fn lossless_channel_keeps_order() {
        let mut ch = Channel::new(0.0, 0, 1);
        for i in 0..100u8 {
            assert!(ch.send(vec![i]).unwrap());
        }
        for i in 0..100u8 {
            assert_eq!(ch.recv().unwrap(), Some(vec![i]));
        }
        assert_eq!(ch.recv().unwrap(), None);
    }

    #[test]
    fn latency_delays_delivery() {
        let mut ch = Channel::new(0.0, 3, 1);
        ch.send(vec![1]).unwrap();
        ch.advance(2);
        assert_eq!(ch.recv().unwrap(), None);
        ch.advance(1);
        assert_eq!(ch.recv().unwrap(), Some(vec![1]));
    }

    #[test]
    fn drop_rate_frequency() {
        let mut ch = Channel::new(0.5, 0, 2024);
        let delivered = (0..10_000).filter(|_| ch.send(vec![0]).unwrap()).count();
        let frac = delivered as f64 / 10_000.0;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
        assert_eq!(ch.stats().dropped + delivered as u64, 10_000);
    }

    #[test]
    fn drop_pattern_is_seeded() {
        let pattern = |seed| {
            let mut ch = Channel::new(0.3, 0, seed);
            (0..200).map(|_| ch.send(vec![]).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(pattern(5), pattern(5));
        assert_ne!(pattern(5), pattern(6));
    }

    #[test]
    fn closed_channel_errors() {
        let mut ch = Channel::new(0.0, 0, 0);
        ch.close();
        assert_eq!(ch.recv(), Err(ChannelError::Closed));
        assert_eq!(ch.send(vec![]), Err(ChannelError::Closed));
    }

    #[test]
    fn channel_config_validation() {
        assert!(ChannelConfig { drop_rate: 1.0, ..Default::default() }.validate().is_err());
        assert!(ChannelConfig::default().validate().is_ok());
    }

    fn arb_frame() -> impl Strategy<Value = Frame> {
        let values = prop::collection::vec(any::<u64>().prop_map(f64::from_bits), 0..64);
        prop_oneof![
            (any::<u32>(), any::<u32>(), values.clone(), any::<bool>())
                .prop_map(|(r, c, d, f)| Frame::Client(ClientMessage::new(r, c, d, f))),
            (any::<u32>(), values, any::<u64>())
                .prop_map(|(r, t, g)| Frame::Server(ServerMessage::new(r, t, g))),
        ]
    }

    fn same(a: &Frame, b: &Frame) -> bool {
        match (a, b) {
            (Frame::Client(x), Frame::Client(y)) => {
                x.round == y.round
                    && x.client_id == y.client_id
                    && x.dp_applied == y.dp_applied
                    && bits(&x.delta) == bits(&y.delta)
            }
            (Frame::Server(x), Frame::Server(y)) => {
                x.round == y.round && x.layout_digest == y.layout_digest && bits(&x.theta) == bits(&y.theta)
            }
            _ => false,
        }
    }

    proptest! {
        #[test]
        fn encode_decode_bijection(f in arb_frame()) {
            let bytes = f.encode();
            let back = decode_frame(&bytes).unwrap();
            prop_assert!(same(&f, &back));
            prop_assert_eq!(back.encode(), bytes);
        }

        #[test]
        fn single_byte_corruption_detected(f in arb_frame(), pos in any::<prop::sample::Index>(), flip in 1u8..=255) {
            let mut bytes = f.encode();
            let i = pos.index(bytes.len());
            bytes[i] ^= flip;
            prop_assert!(decode_frame(&bytes).is_err());
        }
    }
}
