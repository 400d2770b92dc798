//! Wire messages shared by simulated clients and the assembly service.
//!
//! A trial's trajectory is serialized into a canonical text form, split into
//! fixed-size chunks, and framed by a header and a tail. The tail carries the
//! chunk count and a CRC-32 over the concatenated payload so the receiver can
//! tell a complete, intact stream from a damaged one regardless of the order
//! the envelopes arrived in.

use std::fmt;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use bytes::Bytes;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const PROTOCOL_VERSION: u32 = 1;

/// Column names of the canonical trajectory encoding, in order.
pub const TRAJECTORY_FIELDS: [&str; 6] = ["t", "x", "y", "z", "yaw", "pitch"];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ProtocolError {
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("malformed trajectory line {line}: {msg}")]
    Trajectory { line: usize, msg: String },
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
#[error("decode error at `{path}`: {msg}")]
pub struct DecodeError {
    pub path: String,
    pub msg: String,
}

impl DecodeError {
    fn new(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

/// One pose sample: seconds since trial start, position in meters, and
/// heading/pitch in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
    pub pitch: f64,
}

impl TrajectorySample {
    /// Rounds every field to the 6-decimal grid of the wire encoding, so the
    /// sample survives an encode/decode cycle unchanged.
    pub fn quantized(self) -> Self {
        let q = |v: f64| {
            let r = (v * 1e6).round() / 1e6;
            if r == 0.0 {
                0.0
            } else {
                r
            }
        };
        Self {
            t: q(self.t),
            x: q(self.x),
            y: q(self.y),
            z: q(self.z),
            yaw: q(self.yaw),
            pitch: q(self.pitch),
        }
    }

    fn check(&self) -> Result<(), String> {
        let all = [self.t, self.x, self.y, self.z, self.yaw, self.pitch];
        if all.iter().any(|v| !v.is_finite()) {
            return Err("non-finite value".into());
        }
        if self.t < 0.0 {
            return Err(format!("negative t {}", self.t));
        }
        if !(-180.0..180.0).contains(&self.yaw) {
            return Err(format!("yaw {} outside [-180,180)", self.yaw));
        }
        if !(-90.0..=90.0).contains(&self.pitch) {
            return Err(format!("pitch {} outside [-90,90]", self.pitch));
        }
        Ok(())
    }
}

fn check_samples(samples: &[TrajectorySample]) -> Result<(), String> {
    let mut prev_t = f64::NEG_INFINITY;
    for (i, s) in samples.iter().enumerate() {
        s.check().map_err(|e| format!("sample {i}: {e}"))?;
        if s.t < prev_t {
            return Err(format!("sample {i}: t decreases ({} after {prev_t})", s.t));
        }
        prev_t = s.t;
    }
    Ok(())
}

/// Canonical byte form: one `t,x,y,z,yaw,pitch\n` line per sample, six
/// decimals per value, no header.
pub fn encode_trajectory(samples: &[TrajectorySample]) -> Result<Vec<u8>, ProtocolError> {
    check_samples(samples).map_err(ProtocolError::Invariant)?;
    let mut out = String::with_capacity(samples.len() * 56);
    for s in samples {
        use fmt::Write as _;
        let _ = writeln!(
            out,
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            s.t, s.x, s.y, s.z, s.yaw, s.pitch
        );
    }
    Ok(out.into_bytes())
}

pub fn decode_trajectory(bytes: &[u8]) -> Result<Vec<TrajectorySample>, ProtocolError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ProtocolError::Trajectory {
        line: 0,
        msg: e.to_string(),
    })?;
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let body = text.strip_suffix('\n').ok_or(ProtocolError::Trajectory {
        line: text.lines().count(),
        msg: "missing trailing newline".into(),
    })?;
    let mut samples = Vec::new();
    for (i, line) in body.split('\n').enumerate() {
        let bad = |msg: String| ProtocolError::Trajectory { line: i + 1, msg };
        let mut vals = [0f64; 6];
        let mut fields = line.split(',');
        for (slot, name) in vals.iter_mut().zip(TRAJECTORY_FIELDS) {
            let f = fields
                .next()
                .ok_or_else(|| bad(format!("missing {name}")))?;
            *slot = f.parse().map_err(|_| bad(format!("bad {name}: {f:?}")))?;
        }
        if fields.next().is_some() {
            return Err(bad("too many fields".into()));
        }
        samples.push(TrajectorySample {
            t: vals[0],
            x: vals[1],
            y: vals[2],
            z: vals[3],
            yaw: vals[4],
            pitch: vals[5],
        });
    }
    check_samples(&samples).map_err(ProtocolError::Invariant)?;
    Ok(samples)
}

/// CRC-32 (IEEE, reflected, init and final xor 0xFFFFFFFF).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Checksum(pub u32);

impl Checksum {
    pub fn to_hex(self) -> String {
        format!("{:08x}", self.0)
    }

    /// Accepts exactly eight lowercase hex digits.
    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 8 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return None;
        }
        u32::from_str_radix(s, 16).ok().map(Checksum)
    }
}

impl fmt::Display for Checksum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08x}", self.0)
    }
}

impl Serialize for Checksum {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

pub fn compute_checksum(payload: &[u8]) -> Checksum {
    Checksum(crc32fast::hash(payload))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvelopeKind {
    Event,
    Header,
    Chunk,
    Tail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventPayload {
    pub name: String,
    pub data: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeaderPayload {
    pub stream: String,
    pub fields: Vec<String>,
    pub sample_hz: f64,
}

impl HeaderPayload {
    pub fn trajectory(sample_hz: f64) -> Self {
        Self {
            stream: "trajectory".into(),
            fields: TRAJECTORY_FIELDS.iter().map(|s| s.to_string()).collect(),
            sample_hz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TailPayload {
    pub chunk_count: u32,
    pub crc32: Checksum,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Event(EventPayload),
    Header(HeaderPayload),
    Chunk { seq: u32, bytes: Bytes },
    Tail(TailPayload),
}

impl Body {
    pub fn kind(&self) -> EnvelopeKind {
        match self {
            Body::Event(_) => EnvelopeKind::Event,
            Body::Header(_) => EnvelopeKind::Header,
            Body::Chunk { .. } => EnvelopeKind::Chunk,
            Body::Tail(_) => EnvelopeKind::Tail,
        }
    }
}

/// One JSON message on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct WireEnvelope {
    pub session: String,
    /// 0 for session-scoped events.
    pub trial: u32,
    pub ts_ms: u64,
    pub body: Body,
}

impl WireEnvelope {
    pub fn event(
        session: impl Into<String>,
        trial: u32,
        ts_ms: u64,
        name: impl Into<String>,
        data: Map<String, Value>,
    ) -> Self {
        Self {
            session: session.into(),
            trial,
            ts_ms,
            body: Body::Event(EventPayload {
                name: name.into(),
                data,
            }),
        }
    }

    pub fn kind(&self) -> EnvelopeKind {
        self.body.kind()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnvelope {
    v: u32,
    session: String,
    kind: EnvelopeKind,
    trial: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seq: Option<u32>,
    ts_ms: u64,
    payload: Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChunk {
    b64: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTail {
    chunk_count: u32,
    crc32: String,
}

pub fn encode_envelope(e: &WireEnvelope) -> Vec<u8> {
    let (seq, payload) = match &e.body {
        Body::Event(p) => (None, serde_json::to_value(p)),
        Body::Header(p) => (None, serde_json::to_value(p)),
        Body::Chunk { seq, bytes } => (
            Some(*seq),
            serde_json::to_value(RawChunk {
                b64: B64.encode(bytes),
            }),
        ),
        Body::Tail(t) => (
            None,
            serde_json::to_value(RawTail {
                chunk_count: t.chunk_count,
                crc32: t.crc32.to_hex(),
            }),
        ),
    };
    let raw = RawEnvelope {
        v: PROTOCOL_VERSION,
        session: e.session.clone(),
        kind: e.kind(),
        trial: e.trial,
        seq,
        ts_ms: e.ts_ms,
        payload: payload.expect("payload types always serialize"),
    };
    serde_json::to_vec(&raw).expect("envelope always serializes")
}

fn payload_as<T: serde::de::DeserializeOwned>(v: Value) -> Result<T, DecodeError> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let inner = e.path().to_string();
        let path = if inner == "." {
            "payload".to_string()
        } else {
            format!("payload.{inner}")
        };
        DecodeError::new(path, e.into_inner().to_string())
    })
}

pub fn decode_envelope(bytes: &[u8]) -> Result<WireEnvelope, DecodeError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let raw: RawEnvelope = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        // serde reports a missing field at the parent path; name the field.
        let msg = inner.to_string();
        let path = match msg.strip_prefix("missing field `") {
            Some(rest) if path == "." => rest.split('`').next().unwrap_or("").to_string(),
            _ => path,
        };
        DecodeError::new(path, msg)
    })?;
    if raw.v != PROTOCOL_VERSION {
        return Err(DecodeError::new(
            "v",
            format!("unsupported version {}", raw.v),
        ));
    }
    if raw.session.is_empty() {
        return Err(DecodeError::new("session", "empty session id"));
    }
    match (raw.kind, raw.seq) {
        (EnvelopeKind::Chunk, None) => return Err(DecodeError::new("seq", "chunk requires seq")),
        (k, Some(_)) if k != EnvelopeKind::Chunk => {
            return Err(DecodeError::new("seq", "seq only allowed on chunks"))
        }
        _ => {}
    }
    let body = match raw.kind {
        EnvelopeKind::Event => Body::Event(payload_as(raw.payload)?),
        EnvelopeKind::Header => Body::Header(payload_as(raw.payload)?),
        EnvelopeKind::Chunk => {
            let c: RawChunk = payload_as(raw.payload)?;
            let bytes = B64
                .decode(c.b64.as_bytes())
                .map_err(|e| DecodeError::new("payload.b64", e.to_string()))?;
            Body::Chunk {
                seq: raw.seq.unwrap_or_default(),
                bytes: bytes.into(),
            }
        }
        EnvelopeKind::Tail => {
            let t: RawTail = payload_as(raw.payload)?;
            let crc32 = Checksum::from_hex(&t.crc32).ok_or_else(|| {
                DecodeError::new("payload.crc32", "expected 8 lowercase hex digits")
            })?;
            Body::Tail(TailPayload {
                chunk_count: t.chunk_count,
                crc32,
            })
        }
    };
    Ok(WireEnvelope {
        session: raw.session,
        trial: raw.trial,
        ts_ms: raw.ts_ms,
        body,
    })
}

/// Identifies the stream a chunked payload belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamMeta {
    pub session: String,
    pub trial: u32,
    pub ts_ms: u64,
    pub sample_hz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedStream {
    pub header: WireEnvelope,
    pub chunks: Vec<WireEnvelope>,
    pub tail: WireEnvelope,
}

impl ChunkedStream {
    /// Header, chunks, tail: the order a well-behaved client sends them.
    pub fn into_envelopes(self) -> Vec<WireEnvelope> {
        let mut v = Vec::with_capacity(self.chunks.len() + 2);
        v.push(self.header);
        v.extend(self.chunks);
        v.push(self.tail);
        v
    }
}

/// Splits `payload` into `chunk_size`-byte chunks framed by a header and a
/// tail. A zero `chunk_size` is treated as 1.
pub fn chunk_payload(payload: &[u8], chunk_size: usize, meta: &StreamMeta) -> ChunkedStream {
    let chunk_size = chunk_size.max(1);
    let envelope = |body| WireEnvelope {
        session: meta.session.clone(),
        trial: meta.trial,
        ts_ms: meta.ts_ms,
        body,
    };
    let shared = Bytes::copy_from_slice(payload);
    let chunks: Vec<_> = shared
        .chunks(chunk_size)
        .enumerate()
        .map(|(i, c)| {
            envelope(Body::Chunk {
                seq: i as u32,
                bytes: shared.slice_ref(c),
            })
        })
        .collect();
    let tail = envelope(Body::Tail(TailPayload {
        chunk_count: chunks.len() as u32,
        crc32: compute_checksum(payload),
    }));
    ChunkedStream {
        header: envelope(Body::Header(HeaderPayload::trajectory(meta.sample_hz))),
        chunks,
        tail,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Bitwise CRC-32 straight from the polynomial definition.
    fn crc32_reference(data: &[u8]) -> u32 {
        let mut crc = 0xFFFF_FFFFu32;
        for &b in data {
            crc ^= b as u32;
            for _ in 0..8 {
                crc = if crc & 1 != 0 {
                    (crc >> 1) ^ 0xEDB8_8320
                } else {
                    crc >> 1
                };
            }
        }
        !crc
    }

    fn meta() -> StreamMeta {
        StreamMeta {
            session: "s1".into(),
            trial: 1,
            ts_ms: 1000,
            sample_hz: 50.0,
        }
    }

    fn chunk_bytes(e: &WireEnvelope) -> (u32, &[u8]) {
        match &e.body {
            Body::Chunk { seq, bytes } => (*seq, bytes),
            other => panic!("not a chunk: {other:?}"),
        }
    }

    fn tail_of(s: &ChunkedStream) -> TailPayload {
        match s.tail.body {
            Body::Tail(t) => t,
            _ => unreachable!(),
        }
    }

    #[test]
    fn empty_trajectory_encodes_to_nothing() {
        assert!(encode_trajectory(&[]).unwrap().is_empty());
        assert!(decode_trajectory(b"").unwrap().is_empty());
    }

    #[test]
    fn single_sample_line() {
        let s = TrajectorySample {
            t: 0.0,
            x: 1.0,
            y: 2.0,
            z: 0.0,
            yaw: 90.0,
            pitch: 0.0,
        };
        let bytes = encode_trajectory(&[s]).unwrap();
        assert_eq!(
            bytes,
            b"0.000000,1.000000,2.000000,0.000000,90.000000,0.000000\n"
        );
        assert_eq!(bytes.len(), 55);
    }

    #[test]
    fn decreasing_time_is_rejected() {
        let a = TrajectorySample {
            t: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
            yaw: 0.0,
            pitch: 0.0,
        };
        let b = TrajectorySample { t: 0.5, ..a };
        assert!(matches!(
            encode_trajectory(&[a, b]),
            Err(ProtocolError::Invariant(_))
        ));
    }

    #[test]
    fn crc_published_vectors() {
        assert_eq!(compute_checksum(b"123456789").0, 0xCBF4_3926);
        assert_eq!(crc32_reference(b"123456789"), 0xCBF4_3926);
        assert_eq!(compute_checksum(b"").0, 0);
    }

    #[test]
    fn crc_single_byte_flip_detected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut changed = 0;
        for _ in 0..10_000 {
            let len = rng.random_range(1..512);
            let mut p: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            let before = compute_checksum(&p);
            let i = rng.random_range(0..len);
            p[i] ^= rng.random_range(1..=255u8);
            if compute_checksum(&p) != before {
                changed += 1;
            }
        }
        assert!(changed as f64 / 10_000.0 >= 0.999, "changed {changed}");
    }

    #[test]
    fn chunking_ceiling_arithmetic() {
        let payload = vec![7u8; 10_000];
        let s = chunk_payload(&payload, 4300, &meta());
        let sizes: Vec<_> = s.chunks.iter().map(|c| chunk_bytes(c).1.len()).collect();
        assert_eq!(sizes, vec![4300, 4300, 1400]);
        assert_eq!(tail_of(&s).chunk_count, 3);
    }

    #[test]
    fn empty_payload_has_no_chunks() {
        let s = chunk_payload(&[], 4300, &meta());
        assert!(s.chunks.is_empty());
        let t = tail_of(&s);
        assert_eq!(t.chunk_count, 0);
        assert_eq!(t.crc32, Checksum(0));
    }

    #[test]
    fn chunks_reassemble_in_any_order() {
        let payload: Vec<u8> = (0..10_000u32).map(|i| (i * 31 % 251) as u8).collect();
        let s = chunk_payload(&payload, 4300, &meta());
        for order in [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ] {
            let mut parts: Vec<_> = order.iter().map(|&i| chunk_bytes(&s.chunks[i])).collect();
            parts.sort_by_key(|(seq, _)| *seq);
            let joined: Vec<u8> = parts.iter().flat_map(|(_, b)| b.iter().copied()).collect();
            assert_eq!(joined, payload);
        }
    }

    #[test]
    fn event_round_trip() {
        let mut data = Map::new();
        data.insert("participant_id".into(), Value::from("p1"));
        let e = WireEnvelope::event("s1", 0, 42, "consent_given", data);
        assert_eq!(decode_envelope(&encode_envelope(&e)).unwrap(), e);
    }

    #[test]
    fn chunk_without_seq_names_the_field() {
        let raw =
            br#"{"v":1,"session":"s","kind":"chunk","trial":1,"ts_ms":0,"payload":{"b64":""}}"#;
        assert_eq!(decode_envelope(raw).unwrap_err().path, "seq");
    }

    #[test]
    fn unknown_fields_rejected() {
        let top = br#"{"v":1,"session":"s","kind":"event","trial":0,"ts_ms":0,"payload":{"name":"a","data":{}},"extra":1}"#;
        assert!(decode_envelope(top).is_err());
        let inner = br#"{"v":1,"session":"s","kind":"tail","trial":1,"ts_ms":0,"payload":{"chunk_count":1,"crc32":"00000000","x":2}}"#;
        assert!(decode_envelope(inner)
            .unwrap_err()
            .path
            .starts_with("payload"));
    }

    #[test]
    fn tail_crc_must_be_lowercase_hex() {
        let raw = br#"{"v":1,"session":"s","kind":"tail","trial":1,"ts_ms":0,"payload":{"chunk_count":1,"crc32":"CBF43926"}}"#;
        assert_eq!(decode_envelope(raw).unwrap_err().path, "payload.crc32");
    }

    #[test]
    fn wrong_version_rejected() {
        let raw = br#"{"v":2,"session":"s","kind":"event","trial":0,"ts_ms":0,"payload":{"name":"a","data":{}}}"#;
        assert_eq!(decode_envelope(raw).unwrap_err().path, "v");
    }

    fn arb_sample_list() -> impl Strategy<Value = Vec<TrajectorySample>> {
        prop::collection::vec(
            (
                0u32..1_000_000,
                -50_000_000i64..50_000_000,
                -50_000_000i64..50_000_000,
                -50_000_000i64..50_000_000,
                -180_000_000i64..180_000_000,
                -90_000_000i64..=90_000_000,
            ),
            0..40,
        )
        .prop_map(|rows| {
            let mut t = 0u64;
            rows.into_iter()
                .map(|(dt, x, y, z, yaw, pitch)| {
                    t += dt as u64;
                    TrajectorySample {
                        t: t as f64 / 1e6,
                        x: x as f64 / 1e6,
                        y: y as f64 / 1e6,
                        z: z as f64 / 1e6,
                        yaw: yaw as f64 / 1e6,
                        pitch: pitch as f64 / 1e6,
                    }
                    .quantized()
                })
                .collect()
        })
    }

    fn arb_envelope() -> impl Strategy<Value = WireEnvelope> {
        let body = prop_oneof![
            (
                "[a-z_]{1,12}",
                prop::collection::btree_map("[a-z]{1,6}", any::<i32>(), 0..4)
            )
                .prop_map(|(name, m)| Body::Event(EventPayload {
                    name,
                    data: m.into_iter().map(|(k, v)| (k, Value::from(v))).collect(),
                })),
            (1u32..1000).prop_map(|hz| Body::Header(HeaderPayload::trajectory(hz as f64))),
            (any::<u32>(), prop::collection::vec(any::<u8>(), 0..64)).prop_map(|(seq, bytes)| {
                Body::Chunk {
                    seq,
                    bytes: bytes.into(),
                }
            }),
            (any::<u32>(), any::<u32>()).prop_map(|(n, c)| Body::Tail(TailPayload {
                chunk_count: n,
                crc32: Checksum(c)
            })),
        ];
        ("[a-zA-Z0-9-]{1,16}", any::<u32>(), any::<u64>(), body).prop_map(
            |(session, trial, ts_ms, body)| WireEnvelope {
                session,
                trial,
                ts_ms,
                body,
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn envelope_codec_is_byte_stable(e in arb_envelope()) {
            let once = encode_envelope(&e);
            let back = decode_envelope(&once).unwrap();
            prop_assert_eq!(&back, &e);
            prop_assert_eq!(encode_envelope(&back), once);
        }
    }

    proptest! {
        #[test]
        fn trajectory_round_trip(samples in arb_sample_list()) {
            let bytes = encode_trajectory(&samples).unwrap();
            prop_assert_eq!(decode_trajectory(&bytes).unwrap(), samples);
        }

        #[test]
        fn reassembly_completeness(payload in prop::collection::vec(any::<u8>(), 0..3000), size in 1usize..600) {
            let s = chunk_payload(&payload, size, &meta());
            let t = tail_of(&s);
            prop_assert_eq!(t.chunk_count as usize, payload.len().div_ceil(size));
            let mut joined = Vec::new();
            for (i, c) in s.chunks.iter().enumerate() {
                let (seq, b) = chunk_bytes(c);
                prop_assert_eq!(seq as usize, i);
                prop_assert!(b.len() <= size);
                if i + 1 < s.chunks.len() {
                    prop_assert_eq!(b.len(), size);
                }
                joined.extend_from_slice(b);
            }
            prop_assert_eq!(&joined, &payload);
            prop_assert_eq!(t.crc32.0, crc32_reference(&payload));
        }

        #[test]
        fn distinct_envelopes_encode_distinctly(a in arb_envelope(), b in arb_envelope()) {
            if a != b {
                prop_assert_ne!(encode_envelope(&a), encode_envelope(&b));
            }
        }
    }
}
