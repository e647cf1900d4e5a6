//! AES-256-GCM sealing of whole-image payloads and a per-key nonce ladder.

use std::collections::HashSet;

use aes_gcm::aead::Aead;
use aes_gcm::{Aes256Gcm, KeyInit, Nonce};

use super::BenchError;

pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

/// Serialized header: nonce then little-endian `u32` plaintext length.
const HEADER_LEN: usize = NONCE_LEN + 4;

/// Authenticated ciphertext of one payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CipherPayload {
    pub nonce: [u8; NONCE_LEN],
    /// Ciphertext followed by the 16-byte tag.
    pub ciphertext: Vec<u8>,
    pub plaintext_len: usize,
}

impl CipherPayload {
    /// Size on the wire.
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.ciphertext.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&(self.plaintext_len as u32).to_le_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BenchError> {
        if bytes.len() < HEADER_LEN + TAG_LEN {
            return Err(BenchError::Format(format!(
                "payload is {} bytes, shorter than the {}-byte minimum",
                bytes.len(),
                HEADER_LEN + TAG_LEN
            )));
        }
        let nonce: [u8; NONCE_LEN] = bytes[..NONCE_LEN].try_into().expect("slice length");
        let plaintext_len = u32::from_le_bytes(bytes[NONCE_LEN..HEADER_LEN].try_into().expect("slice length")) as usize;
        let ciphertext = bytes[HEADER_LEN..].to_vec();
        if ciphertext.len() != plaintext_len + TAG_LEN {
            return Err(BenchError::Format(format!(
                "header declares {plaintext_len} plaintext bytes but {} ciphertext bytes follow",
                ciphertext.len()
            )));
        }
        Ok(CipherPayload {
            nonce,
            ciphertext,
            plaintext_len,
        })
    }
}

fn cipher(key: &[u8]) -> Result<Aes256Gcm, BenchError> {
    Aes256Gcm::new_from_slice(key).map_err(|_| BenchError::Param(format!("key must be {KEY_LEN} bytes, got {}", key.len())))
}

pub fn encrypt(plaintext: &[u8], key: &[u8], nonce: &[u8]) -> Result<CipherPayload, BenchError> {
    if nonce.len() != NONCE_LEN {
        return Err(BenchError::Param(format!("nonce must be {NONCE_LEN} bytes, got {}", nonce.len())));
    }
    if plaintext.len() > u32::MAX as usize {
        return Err(BenchError::Param("plaintext longer than 4 GiB".into()));
    }
    let ciphertext = cipher(key)?
        .encrypt(Nonce::from_slice(nonce), plaintext)
        .map_err(|_| BenchError::Param("encryption failed".into()))?;
    Ok(CipherPayload {
        nonce: nonce.try_into().expect("checked length"),
        ciphertext,
        plaintext_len: plaintext.len(),
    })
}

pub fn decrypt(payload: &CipherPayload, key: &[u8]) -> Result<Vec<u8>, BenchError> {
    if payload.ciphertext.len() != payload.plaintext_len + TAG_LEN {
        return Err(BenchError::Format("ciphertext length disagrees with plaintext length".into()));
    }
    let plain = cipher(key)?
        .decrypt(Nonce::from_slice(&payload.nonce), payload.ciphertext.as_slice())
        .map_err(|_| BenchError::Authentication)?;
    debug_assert_eq!(plain.len(), payload.plaintext_len);
    Ok(plain)
}

/// Counter nonces for a single key: a fixed 4-byte prefix and a big-endian
/// 64-bit counter. Every issued nonce is remembered so reuse is detected even
/// if callers mix in nonces from elsewhere.
#[derive(Debug, Clone)]
pub struct NonceLadder {
    prefix: [u8; 4],
    counter: u64,
    issued: HashSet<[u8; NONCE_LEN]>,
}

impl NonceLadder {
    pub fn new(prefix: [u8; 4]) -> Self {
        NonceLadder {
            prefix,
            counter: 0,
            issued: HashSet::new(),
        }
    }

    pub fn next_nonce(&mut self) -> Result<[u8; NONCE_LEN], BenchError> {
        if self.counter == u64::MAX {
            return Err(BenchError::NonceExhausted);
        }
        let mut nonce = [0u8; NONCE_LEN];
        nonce[..4].copy_from_slice(&self.prefix);
        nonce[4..].copy_from_slice(&self.counter.to_be_bytes());
        self.counter += 1;
        self.claim(nonce)?;
        Ok(nonce)
    }

    /// Registers an externally chosen nonce, failing if it was used before.
    pub fn claim(&mut self, nonce: [u8; NONCE_LEN]) -> Result<(), BenchError> {
        if self.issued.insert(nonce) {
            Ok(())
        } else {
            Err(BenchError::NonceReuse)
        }
    }

    pub fn issued(&self) -> usize {
        self.issued.len()
    }
}
