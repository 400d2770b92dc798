use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use bytes::Bytes;

use serde::{Deserialize, Serialize};

use crate::protocol::{compute_checksum, Body, Checksum, HeaderPayload, TailPayload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrialStatus {
    Open,
    Reconstructed,
    ChecksumMismatch,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
#[error("conflicting {what} for trial stream")]
pub struct ConflictError {
    pub what: String,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
#[error("trial buffer has no tail yet")]
pub struct Incomplete;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MismatchReport {
    pub expected: Checksum,
    /// Only computed when every expected chunk is present.
    pub actual: Option<Checksum>,
    pub missing: Vec<u32>,
    /// Chunks whose seq is at or beyond the announced count.
    pub unexpected: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reconstruction {
    Complete(Vec<u8>),
    Mismatch(MismatchReport),
}

/// Reassembly state of one trial's trajectory stream.
#[derive(Debug, Clone)]
pub struct TrialBuffer {
    pub header: Option<HeaderPayload>,
    pub chunks: BTreeMap<u32, Bytes>,
    pub tail: Option<TailPayload>,
    pub status: TrialStatus,
}

impl Default for TrialBuffer {
    fn default() -> Self {
        Self {
            header: None,
            chunks: BTreeMap::new(),
            tail: None,
            status: TrialStatus::Open,
        }
    }
}

/// What an insert changed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InsertOutcome {
    /// Number of chunk bytes that were new to the buffer.
    pub new_bytes: usize,
    /// The buffer now has a tail and every announced chunk.
    pub ready: bool,
}

impl TrialBuffer {
    /// Merges a header, chunk or tail. Exact duplicates are no-ops; a
    /// duplicate carrying different content is a conflict. Once the buffer
    /// left `Open`, further envelopes are ignored.
    pub fn insert(&mut self, body: &Body) -> Result<InsertOutcome, ConflictError> {
        let conflict = |what: &str| ConflictError { what: what.into() };
        let mut new_bytes = 0;
        match body {
            Body::Header(h) => match &self.header {
                Some(existing) if existing != h => return Err(conflict("header")),
                Some(_) => {}
                None => self.header = Some(h.clone()),
            },
            Body::Chunk { seq, bytes } => match self.chunks.entry(*seq) {
                Entry::Occupied(existing) if existing.get() != bytes => {
                    return Err(conflict(&format!("chunk seq {seq}")))
                }
                Entry::Occupied(_) => {}
                Entry::Vacant(slot) if self.status == TrialStatus::Open => {
                    new_bytes = bytes.len();
                    slot.insert(bytes.clone());
                }
                Entry::Vacant(_) => {}
            },
            Body::Tail(t) => match &self.tail {
                Some(existing) if existing != t => return Err(conflict("tail")),
                Some(_) => {}
                None => self.tail = Some(*t),
            },
            Body::Event(_) => {}
        }
        Ok(InsertOutcome {
            new_bytes,
            ready: self.is_ready(),
        })
    }

    /// Open, tail present, and every seq below the announced count present.
    pub fn is_ready(&self) -> bool {
        self.status == TrialStatus::Open
            && self.tail.is_some_and(|t| {
                let n = t.chunk_count as usize;
                self.chunks.len() >= n
                    && self.chunks.len() - self.chunks.range(t.chunk_count..).count() == n
            })
    }
}

/// Concatenates the chunks in seq order if the set is exactly what the tail
/// announced and the CRC matches.
pub fn try_reconstruct(b: &TrialBuffer) -> Result<Reconstruction, Incomplete> {
    let tail = b.tail.ok_or(Incomplete)?;
    let mut missing = Vec::new();
    let mut next = 0;
    for &seq in b.chunks.range(..tail.chunk_count).map(|(s, _)| s) {
        missing.extend(next..seq);
        next = seq + 1;
    }
    missing.extend(next..tail.chunk_count);
    let unexpected: Vec<u32> = b
        .chunks
        .range(tail.chunk_count..)
        .map(|(s, _)| *s)
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Ok(Reconstruction::Mismatch(MismatchReport {
            expected: tail.crc32,
            actual: None,
            missing,
            unexpected,
        }));
    }
    let mut payload = Vec::with_capacity(b.chunks.values().map(|c| c.len()).sum());
    for c in b.chunks.values() {
        payload.extend_from_slice(c);
    }
    let actual = compute_checksum(&payload);
    if actual != tail.crc32 {
        return Ok(Reconstruction::Mismatch(MismatchReport {
            expected: tail.crc32,
            actual: Some(actual),
            missing,
            unexpected,
        }));
    }
    Ok(Reconstruction::Complete(payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{chunk_payload, StreamMeta};

    fn stream(payload: &[u8]) -> Vec<Body> {
        let meta = StreamMeta {
            session: "s".into(),
            trial: 1,
            ts_ms: 0,
            sample_hz: 50.0,
        };
        chunk_payload(payload, 4, &meta)
            .into_envelopes()
            .into_iter()
            .map(|e| e.body)
            .collect()
    }

    fn fill(bodies: &[Body]) -> TrialBuffer {
        let mut b = TrialBuffer::default();
        for body in bodies {
            b.insert(body).unwrap();
        }
        b
    }

    #[test]
    fn inverse_of_chunking() {
        let b = fill(&stream(b"hello, trajectory"));
        assert!(b.is_ready());
        assert_eq!(
            try_reconstruct(&b).unwrap(),
            Reconstruction::Complete(b"hello, trajectory".to_vec())
        );
    }

    #[test]
    fn no_tail_is_incomplete() {
        let bodies = stream(b"abcdefgh");
        let b = fill(&bodies[..bodies.len() - 1]);
        assert_eq!(try_reconstruct(&b), Err(Incomplete));
    }

    #[test]
    fn missing_chunk_reported() {
        let bodies = stream(b"abcdefghij");
        // header, chunks 0..3, tail; drop chunk seq 1
        let kept: Vec<_> = bodies
            .iter()
            .filter(|b| !matches!(b, Body::Chunk { seq: 1, .. }))
            .cloned()
            .collect();
        let b = fill(&kept);
        assert!(!b.is_ready());
        match try_reconstruct(&b).unwrap() {
            Reconstruction::Mismatch(r) => {
                assert_eq!(r.missing, vec![1]);
                assert_eq!(r.actual, None);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flipped_bit_reports_crc_pair() {
        let mut bodies = stream(b"abcdefghij");
        if let Body::Chunk { bytes, .. } = &mut bodies[1] {
            let mut v = bytes.to_vec();
            v[0] ^= 0x01;
            *bytes = v.into();
        }
        let b = fill(&bodies);
        match try_reconstruct(&b).unwrap() {
            Reconstruction::Mismatch(r) => {
                assert!(r.missing.is_empty());
                assert_ne!(Some(r.expected), r.actual);
                assert!(r.actual.is_some());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicates_are_no_ops_and_conflicts_detected() {
        let bodies = stream(b"abcdefgh");
        let mut b = fill(&bodies);
        let before = b.chunks.clone();
        assert_eq!(b.insert(&bodies[1]).unwrap().new_bytes, 0);
        assert_eq!(b.chunks, before);
        let evil = Body::Chunk {
            seq: 0,
            bytes: Bytes::from_static(b"zzzz"),
        };
        assert!(b.insert(&evil).is_err());
    }
}
