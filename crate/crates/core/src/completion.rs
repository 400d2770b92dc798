//! Offboarding challenges and salted completion codes.
//!
//! The client receives a random challenge at the end of a session and
//! combines it with the researcher's salt into a short code the participant
//! pastes into the recruitment form. The researcher re-derives the code from
//! the stored challenge to confirm the task was finished.

use std::collections::HashMap;

use parking_lot::Mutex;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Length of a completion code in base32 characters (60 bits).
pub const CODE_LEN: usize = 12;

const BASE32_ALPHABET: &[u8; 32] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ234567";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CompletionError {
    #[error("salt must not be empty")]
    EmptySalt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Challenge {
    pub session_id: String,
    /// 16 random bytes, lowercase hex.
    pub nonce: String,
    pub issued_ts_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CompletionCode(String);

impl CompletionCode {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for CompletionCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn generate_challenge<R: RngCore + ?Sized>(
    session_id: &str,
    rng: &mut R,
    now_ms: u64,
) -> Challenge {
    let mut nonce = [0u8; 16];
    rng.fill_bytes(&mut nonce);
    Challenge {
        session_id: session_id.to_string(),
        nonce: hex::encode(nonce),
        issued_ts_ms: now_ms,
    }
}

/// First 60 bits of `SHA-256(nonce ":" salt ":" session_id)` as 12 base32
/// characters.
pub fn derive_code(ch: &Challenge, salt: &str) -> Result<CompletionCode, CompletionError> {
    if salt.is_empty() {
        return Err(CompletionError::EmptySalt);
    }
    let mut h = Sha256::new();
    h.update(ch.nonce.as_bytes());
    h.update(b":");
    h.update(salt.as_bytes());
    h.update(b":");
    h.update(ch.session_id.as_bytes());
    let digest = h.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    let bits = u64::from_be_bytes(head) >> 4;
    let code = (0..CODE_LEN)
        .map(|i| BASE32_ALPHABET[((bits >> (5 * (CODE_LEN - 1 - i))) & 0x1f) as usize] as char)
        .collect();
    Ok(CompletionCode(code))
}

/// Case-insensitive check of a submitted code. The comparison touches every
/// byte regardless of where the first mismatch is.
pub fn verify_code(submitted: &str, ch: &Challenge, salt: &str) -> bool {
    let Ok(expected) = derive_code(ch, salt) else {
        return false;
    };
    let submitted = submitted.trim().to_ascii_uppercase();
    if submitted.len() != CODE_LEN {
        return false;
    }
    submitted
        .bytes()
        .zip(expected.as_str().bytes())
        .fold(0u8, |acc, (a, b)| acc | (a ^ b))
        == 0
}

/// Latest challenge per session. Issuing again replaces the previous one.
#[derive(Debug, Default)]
pub struct ChallengeStore {
    inner: Mutex<HashMap<String, Challenge>>,
}

impl ChallengeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn issue<R: RngCore + ?Sized>(
        &self,
        session_id: &str,
        rng: &mut R,
        now_ms: u64,
    ) -> Challenge {
        let ch = generate_challenge(session_id, rng, now_ms);
        self.inner.lock().insert(session_id.to_string(), ch.clone());
        ch
    }

    pub fn get(&self, session_id: &str) -> Option<Challenge> {
        self.inner.lock().get(session_id).cloned()
    }

    pub fn insert(&self, ch: Challenge) {
        self.inner.lock().insert(ch.session_id.clone(), ch);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn zero_challenge() -> Challenge {
        Challenge {
            session_id: "s1".into(),
            nonce: "00".repeat(16),
            issued_ts_ms: 0,
        }
    }

    #[test]
    fn golden_vector() {
        // Computed with Python hashlib + the RFC 4648 alphabet.
        assert_eq!(
            derive_code(&zero_challenge(), "salt").unwrap().as_str(),
            "66HFYOKQ3RHB"
        );
    }

    #[test]
    fn empty_salt() {
        assert_eq!(
            derive_code(&zero_challenge(), ""),
            Err(CompletionError::EmptySalt)
        );
        assert!(!verify_code("66HFYOKQ3RHB", &zero_challenge(), ""));
    }

    #[test]
    fn seeded_nonce_is_reproducible() {
        let a = generate_challenge("s", &mut ChaCha8Rng::seed_from_u64(3), 0);
        let b = generate_challenge("s", &mut ChaCha8Rng::seed_from_u64(3), 0);
        let c = generate_challenge("s", &mut ChaCha8Rng::seed_from_u64(4), 0);
        assert_eq!(a, b);
        assert_ne!(a.nonce, c.nonce);
        assert_eq!(a.nonce.len(), 32);
    }

    #[test]
    fn ten_thousand_nonces_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let set: HashSet<_> = (0..10_000)
            .map(|_| generate_challenge("s", &mut rng, 0).nonce)
            .collect();
        assert_eq!(set.len(), 10_000);
    }

    #[test]
    fn verify_round_trip_and_failures() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ch = generate_challenge("sess", &mut rng, 5);
        let code = derive_code(&ch, "pepper").unwrap();
        assert!(verify_code(code.as_str(), &ch, "pepper"));
        assert!(verify_code(&code.as_str().to_lowercase(), &ch, "pepper"));
        assert!(!verify_code(code.as_str(), &ch, "peppers"));
        assert!(!verify_code("", &ch, "pepper"));
        assert!(!verify_code(&code.as_str()[..11], &ch, "pepper"));
    }

    #[test]
    fn salt_change_always_changes_code() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..1000 {
            let ch = generate_challenge("p", &mut rng, 0);
            let salt: Vec<u8> = (0..rng.random_range(1..16))
                .map(|_| rng.random_range(b'a'..=b'z'))
                .collect();
            let mut other = salt.clone();
            let i = rng.random_range(0..other.len());
            other[i] = if other[i] == b'z' { b'a' } else { other[i] + 1 };
            let a = derive_code(&ch, std::str::from_utf8(&salt).unwrap()).unwrap();
            let b = derive_code(&ch, std::str::from_utf8(&other).unwrap()).unwrap();
            assert_ne!(a, b);
        }
    }

    #[test]
    fn store_replaces_challenge() {
        let store = ChallengeStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let first = store.issue("s", &mut rng, 1);
        let second = store.issue("s", &mut rng, 2);
        assert_ne!(first, second);
        assert_eq!(store.get("s"), Some(second));
    }
}
