//! Hash-chained game ledger with optional proof-of-work, tamper detection and
//! longest-chain resolution across peers.
//!
//! `hash = sha256(index_be64 || prev_hash || payload || nonce_be64)` where
//! `payload` is the canonical JSON of a status-report-shaped record.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::protocol::{canonical_json, encode_frame, StatusReport, MAX_FRAME_LEN};

pub const MAX_DIFFICULTY: u8 = 24;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("difficulty {0} exceeds the maximum of {MAX_DIFFICULTY} bits")]
    Difficulty(u8),
    #[error("no valid chain among {0} peers")]
    NoValidChain(usize),
    #[error("block {index} rejected: {reason}")]
    Rejected { index: u64, reason: String },
    #[error("ledger file block {index}: {reason}")]
    Corrupt { index: usize, reason: String },
    #[error("payload encoding: {0}")]
    Encoding(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn leading_zero_bits(&self) -> u32 {
        let mut bits = 0;
        for b in self.0 {
            if b == 0 {
                bits += 8;
            } else {
                bits += b.leading_zeros();
                break;
            }
        }
        bits
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(&text, &mut out).map_err(D::Error::custom)?;
        Ok(Digest(out))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerBlock {
    pub index: u64,
    pub prev_hash: Digest,
    /// Canonical JSON of the [`StatusReport`] this block records.
    pub payload: Vec<u8>,
    pub nonce: u64,
    pub hash: Digest,
}

pub fn block_hash(index: u64, prev_hash: &Digest, payload: &[u8], nonce: u64) -> Digest {
    let mut h = Sha256::new();
    h.update(index.to_be_bytes());
    h.update(prev_hash.0);
    h.update(payload);
    h.update(nonce.to_be_bytes());
    Digest(h.finalize().into())
}

impl LedgerBlock {
    pub fn report(&self) -> Result<StatusReport, serde_json::Error> {
        serde_json::from_slice(&self.payload)
    }

    pub fn recompute_hash(&self) -> Digest {
        block_hash(self.index, &self.prev_hash, &self.payload, self.nonce)
    }

    fn seal(index: u64, prev_hash: Digest, payload: Vec<u8>, difficulty_bits: u8) -> Result<Self, LedgerError> {
        if difficulty_bits > MAX_DIFFICULTY {
            return Err(LedgerError::Difficulty(difficulty_bits));
        }
        let mut nonce = 0u64;
        loop {
            let hash = block_hash(index, &prev_hash, &payload, nonce);
            if hash.leading_zero_bits() >= u32::from(difficulty_bits) {
                return Ok(LedgerBlock {
                    index,
                    prev_hash,
                    payload,
                    nonce,
                    hash,
                });
            }
            nonce += 1;
        }
    }
}

/// On-disk form: fields in sorted order, the payload embedded verbatim so a
/// flipped byte on disk changes the hashed bytes.
#[derive(Serialize, Deserialize)]
struct StoredBlock<'a> {
    hash: Digest,
    index: u64,
    nonce: u64,
    #[serde(borrow)]
    payload: &'a RawValue,
    prev_hash: Digest,
}

impl LedgerBlock {
    pub fn to_json(&self) -> Result<Vec<u8>, LedgerError> {
        let text = std::str::from_utf8(&self.payload).map_err(|e| LedgerError::Rejected {
            index: self.index,
            reason: format!("payload is not utf-8: {e}"),
        })?;
        let raw: Box<RawValue> = RawValue::from_string(text.to_owned())?;
        let stored = StoredBlock {
            hash: self.hash,
            index: self.index,
            nonce: self.nonce,
            payload: &raw,
            prev_hash: self.prev_hash,
        };
        Ok(serde_json::to_vec(&stored)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        let stored: StoredBlock = serde_json::from_slice(bytes)?;
        Ok(LedgerBlock {
            index: stored.index,
            prev_hash: stored.prev_hash,
            payload: stored.payload.get().as_bytes().to_vec(),
            nonce: stored.nonce,
            hash: stored.hash,
        })
    }
}

/// First block of a chain.
pub fn genesis(payload: &StatusReport, difficulty_bits: u8) -> Result<LedgerBlock, LedgerError> {
    LedgerBlock::seal(0, Digest::ZERO, canonical_json(payload)?, difficulty_bits)
}

/// Next block after `prev`, searching nonces upward from zero until the hash
/// has `difficulty_bits` leading zero bits.
pub fn make_block(
    prev: &LedgerBlock,
    payload: &StatusReport,
    difficulty_bits: u8,
) -> Result<LedgerBlock, LedgerError> {
    LedgerBlock::seal(prev.index + 1, prev.hash, canonical_json(payload)?, difficulty_bits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainVerdict {
    pub valid: bool,
    /// Position of the first block that fails a check.
    pub first_bad_index: Option<usize>,
}

fn check_block(block: &LedgerBlock, position: usize, prev: Option<&LedgerBlock>, difficulty_bits: u8) -> Result<(), String> {
    if block.index != position as u64 {
        return Err(format!("index {} at position {position}", block.index));
    }
    let expected_prev = prev.map_or(Digest::ZERO, |p| p.hash);
    if block.prev_hash != expected_prev {
        return Err("prev_hash does not link".into());
    }
    if block.recompute_hash() != block.hash {
        return Err("hash does not recompute".into());
    }
    if block.hash.leading_zero_bits() < u32::from(difficulty_bits) {
        return Err("difficulty not met".into());
    }
    let report = block.report().map_err(|e| format!("payload: {e}"))?;
    match canonical_json(&report) {
        Ok(bytes) if bytes == block.payload => Ok(()),
        _ => Err("payload is not canonical".into()),
    }
}

/// Checks links, hashes, difficulty and payload canonicity of every block.
pub fn verify_chain(blocks: &[LedgerBlock], difficulty_bits: u8) -> ChainVerdict {
    if blocks.is_empty() {
        return ChainVerdict {
            valid: false,
            first_bad_index: None,
        };
    }
    for (i, block) in blocks.iter().enumerate() {
        let prev = i.checked_sub(1).map(|j| &blocks[j]);
        if check_block(block, i, prev, difficulty_bits).is_err() {
            return ChainVerdict {
                valid: false,
                first_bad_index: Some(i),
            };
        }
    }
    ChainVerdict {
        valid: true,
        first_bad_index: None,
    }
}

/// Longest valid chain; equal lengths go to the lowest tip hash.
pub fn resolve(peers: &[Vec<LedgerBlock>], difficulty_bits: u8) -> Result<Vec<LedgerBlock>, LedgerError> {
    peers
        .iter()
        .filter(|c| verify_chain(c, difficulty_bits).valid)
        .min_by(|a, b| {
            b.len()
                .cmp(&a.len())
                .then_with(|| a.last().map(|t| t.hash).cmp(&b.last().map(|t| t.hash)))
        })
        .cloned()
        .ok_or(LedgerError::NoValidChain(peers.len()))
}

/// Appends a block frame to a ledger file.
pub fn append_block_file(path: &Path, block: &LedgerBlock) -> Result<(), LedgerError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&encode_frame(&block.to_json()?))?;
    Ok(())
}

/// Reads every framed block from a ledger file.
pub fn read_chain_file(path: &Path) -> Result<Vec<LedgerBlock>, LedgerError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    read_chain_bytes(&bytes)
}

pub fn read_chain_bytes(mut bytes: &[u8]) -> Result<Vec<LedgerBlock>, LedgerError> {
    let mut blocks = Vec::new();
    while !bytes.is_empty() {
        let corrupt = |reason: String| LedgerError::Corrupt {
            index: blocks.len(),
            reason,
        };
        if bytes.len() < 4 {
            return Err(corrupt("truncated length prefix".into()));
        }
        let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
        if len > MAX_FRAME_LEN || bytes.len() < 4 + len {
            return Err(corrupt(format!("frame of {len} bytes is truncated or oversized")));
        }
        let block = LedgerBlock::from_json(&bytes[4..4 + len]).map_err(|e| corrupt(e.to_string()))?;
        blocks.push(block);
        bytes = &bytes[4 + len..];
    }
    Ok(blocks)
}

/// Single-writer chain, optionally mirrored to an append-only file.
#[derive(Debug)]
pub struct Ledger {
    blocks: Vec<LedgerBlock>,
    difficulty_bits: u8,
    path: Option<PathBuf>,
}

impl Ledger {
    pub fn new(difficulty_bits: u8) -> Result<Self, LedgerError> {
        if difficulty_bits > MAX_DIFFICULTY {
            return Err(LedgerError::Difficulty(difficulty_bits));
        }
        Ok(Ledger {
            blocks: Vec::new(),
            difficulty_bits,
            path: None,
        })
    }

    /// Opens (or creates) a ledger file. Existing content must verify.
    pub fn open(path: &Path, difficulty_bits: u8) -> Result<Self, LedgerError> {
        let mut ledger = Ledger::new(difficulty_bits)?;
        if path.exists() {
            ledger.blocks = read_chain_file(path)?;
            let v = verify_chain(&ledger.blocks, difficulty_bits);
            if !ledger.blocks.is_empty() && !v.valid {
                return Err(LedgerError::Corrupt {
                    index: v.first_bad_index.unwrap_or(0),
                    reason: "chain does not verify".into(),
                });
            }
        }
        ledger.path = Some(path.to_owned());
        Ok(ledger)
    }

    pub fn append(&mut self, payload: &StatusReport) -> Result<&LedgerBlock, LedgerError> {
        let block = match self.blocks.last() {
            Some(prev) => make_block(prev, payload, self.difficulty_bits)?,
            None => genesis(payload, self.difficulty_bits)?,
        };
        if let Some(path) = &self.path {
            append_block_file(path, &block)?;
        }
        self.blocks.push(block);
        Ok(self.blocks.last().expect("just pushed"))
    }

    pub fn blocks(&self) -> &[LedgerBlock] {
        &self.blocks
    }

    pub fn difficulty_bits(&self) -> u8 {
        self.difficulty_bits
    }

    pub fn verify(&self) -> ChainVerdict {
        verify_chain(&self.blocks, self.difficulty_bits)
    }
}

/// A peer in the simulated validation network. It only appends blocks that
/// extend its chain correctly.
#[derive(Debug, Clone)]
pub struct Peer {
    pub name: String,
    pub chain: Vec<LedgerBlock>,
    difficulty_bits: u8,
}

impl Peer {
    pub fn new(name: &str, difficulty_bits: u8) -> Self {
        Peer {
            name: name.to_owned(),
            chain: Vec::new(),
            difficulty_bits,
        }
    }

    pub fn receive(&mut self, block: LedgerBlock) -> Result<(), LedgerError> {
        let position = self.chain.len();
        check_block(&block, position, self.chain.last(), self.difficulty_bits).map_err(|reason| {
            LedgerError::Rejected {
                index: block.index,
                reason,
            }
        })?;
        self.chain.push(block);
        Ok(())
    }

    /// Replaces the local chain with the network's canonical one.
    pub fn sync(&mut self, peers: &[Vec<LedgerBlock>]) -> Result<(), LedgerError> {
        self.chain = resolve(peers, self.difficulty_bits)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{StatusCode, Timestamp};
    use crate::protocol::UnitReport;
    use std::collections::BTreeMap;

    fn report(i: u64) -> StatusReport {
        StatusReport {
            timestamp: Timestamp(1000 * i),
            ip: "10.0.0.1".into(),
            player_name: "alice".into(),
            cmds: BTreeMap::new(),
            units: vec![UnitReport {
                code: StatusCode::Up,
                id: "ab".repeat(32),
                health: 100.0 - i as f64,
                port: 3001,
            }],
        }
    }

    fn chain(n: u64, bits: u8) -> Vec<LedgerBlock> {
        let mut ledger = Ledger::new(bits).unwrap();
        for i in 0..n {
            ledger.append(&report(i)).unwrap();
        }
        ledger.blocks().to_vec()
    }

    #[test]
    fn zero_difficulty_takes_first_nonce() {
        let g = genesis(&report(0), 0).unwrap();
        let b = make_block(&g, &report(1), 0).unwrap();
        assert_eq!((g.nonce, b.nonce), (0, 0));
        assert_eq!(b.index, 1);
        assert_eq!(b.prev_hash, g.hash);
    }

    #[test]
    fn difficulty_eight_gives_zero_first_byte() {
        let g = genesis(&report(0), 0).unwrap();
        let b = make_block(&g, &report(1), 8).unwrap();
        assert_eq!(b.hash.0[0], 0);
        // brute-force oracle: no smaller nonce satisfies the target
        for nonce in 0..b.nonce {
            assert_ne!(block_hash(1, &g.hash, &b.payload, nonce).0[0], 0);
        }
    }

    #[test]
    fn blocks_are_deterministic() {
        assert_eq!(chain(3, 4), chain(3, 4));
    }

    #[test]
    fn difficulty_cap() {
        assert!(matches!(genesis(&report(0), 25), Err(LedgerError::Difficulty(25))));
    }

    #[test]
    fn untampered_chain_verifies() {
        let c = chain(10, 0);
        assert_eq!(
            verify_chain(&c, 0),
            ChainVerdict {
                valid: true,
                first_bad_index: None
            }
        );
        assert!(!verify_chain(&[], 0).valid);
    }

    #[test]
    fn health_edit_detected_at_its_block() {
        let mut c = chain(10, 0);
        let mut r = c[5].report().unwrap();
        r.units[0].health = 1.0;
        c[5].payload = canonical_json(&r).unwrap();
        assert_eq!(verify_chain(&c, 0).first_bad_index, Some(5));
    }

    #[test]
    fn reorder_detected_at_first_inversion() {
        let mut c = chain(10, 0);
        c.swap(3, 4);
        assert_eq!(verify_chain(&c, 0).first_bad_index, Some(3));
    }

    #[test]
    fn resolve_longest_then_lowest_tip() {
        let short = chain(5, 0);
        let long = chain(7, 0);
        assert_eq!(resolve(&[short.clone(), long.clone()], 0).unwrap(), long);

        let mut ledger = Ledger::new(0).unwrap();
        for i in 10..15 {
            ledger.append(&report(i)).unwrap();
        }
        let other = ledger.blocks().to_vec();
        let expected = if short.last().unwrap().hash < other.last().unwrap().hash {
            short.clone()
        } else {
            other.clone()
        };
        assert_eq!(resolve(&[short.clone(), other.clone()], 0).unwrap(), expected);
        assert_eq!(resolve(&[other, short], 0).unwrap(), expected);
    }

    #[test]
    fn resolve_skips_invalid_longest() {
        let a = chain(5, 0);
        let b = chain(6, 0);
        let mut c = chain(8, 0);
        c[2].nonce += 1;
        assert_eq!(resolve(&[a, b.clone(), c.clone()], 0).unwrap(), b);
        assert!(matches!(resolve(&[c], 0), Err(LedgerError::NoValidChain(1))));
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.bin");
        let mut ledger = Ledger::open(&path, 2).unwrap();
        for i in 0..4 {
            ledger.append(&report(i)).unwrap();
        }
        let back = read_chain_file(&path).unwrap();
        assert_eq!(back, ledger.blocks());
        let reopened = Ledger::open(&path, 2).unwrap();
        assert!(reopened.verify().valid);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            read_chain_bytes(&bytes),
            Err(LedgerError::Corrupt { index: 3, .. })
        ));
    }

    #[test]
    fn peers_reject_bad_links() {
        let c = chain(3, 0);
        let mut peer = Peer::new("p", 0);
        peer.receive(c[0].clone()).unwrap();
        assert!(peer.receive(c[2].clone()).is_err());
        peer.receive(c[1].clone()).unwrap();
        let mut forged = c[2].clone();
        forged.payload = canonical_json(&report(99)).unwrap();
        assert!(peer.receive(forged).is_err());
        peer.receive(c[2].clone()).unwrap();
        assert_eq!(peer.chain, c);
    }
}
