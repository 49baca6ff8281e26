//! Merkle map: an ordered key/value map with a SHA-256 Merkle commitment.
//!
//! Leaves are the map entries sorted by key (ascending byte order) and the
//! tree above them is a balanced binary fold: adjacent nodes are hashed
//! pairwise, an odd node at the end of a level is promoted to the next level
//! unhashed. Hash inputs are domain-separated so a leaf can never collide
//! with an internal node, and the empty map has its own fixed root.
//!
//! The byte encoding produced by [`MerkleMap::serialize`] is stable: it is
//! stored on chains and must round-trip bit-exactly across versions.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

// domain separators for hash inputs
const LEAF_PREFIX: u8 = 0x00;
const NODE_PREFIX: u8 = 0x01;
const EMPTY_PREFIX: u8 = 0x02;

/// A 32-byte SHA-256 digest.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct HashDigest([u8; 32]);

impl HashDigest {
    pub const ZERO: HashDigest = HashDigest([0u8; 32]);

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        HashDigest(bytes)
    }

    /// Reads a digest from a slice; fails unless it is exactly 32 bytes.
    pub fn from_slice(bytes: &[u8]) -> Result<Self, MerkleError> {
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| MerkleError::MalformedEncoding(format!("digest must be 32 bytes, got {}", bytes.len())))?;
        Ok(HashDigest(arr))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, MerkleError> {
        let bytes = hex::decode(s).map_err(|e| MerkleError::MalformedEncoding(format!("bad hex digest: {e}")))?;
        Self::from_slice(&bytes)
    }
}

impl fmt::Debug for HashDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HashDigest({})", self.to_hex())
    }
}

impl fmt::Display for HashDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for HashDigest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for HashDigest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        HashDigest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MerkleError {
    #[error("key not present in map")]
    KeyAbsent,
    #[error("malformed encoding: {0}")]
    MalformedEncoding(String),
}

fn sha256(parts: &[&[u8]]) -> HashDigest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    HashDigest(h.finalize().into())
}

/// Root of the empty map: H(0x02).
pub fn empty_map_root() -> HashDigest {
    sha256(&[&[EMPTY_PREFIX]])
}

/// Leaf hash: H(0x00 || len(key) || key || len(value) || value), lengths as
/// 4-byte big-endian.
pub fn leaf_hash(key: &[u8], value: &[u8]) -> HashDigest {
    sha256(&[
        &[LEAF_PREFIX],
        &(key.len() as u32).to_be_bytes(),
        key,
        &(value.len() as u32).to_be_bytes(),
        value,
    ])
}

/// Internal node hash: H(0x01 || left || right).
pub fn internal_hash(left: HashDigest, right: HashDigest) -> HashDigest {
    sha256(&[&[NODE_PREFIX], left.as_bytes(), right.as_bytes()])
}

#[derive(Clone)]
struct Entry {
    value: Vec<u8>,
    leaf: HashDigest, // cached leaf hash, recomputed on every write
}

/// Sorted key/value map with a Merkle root over its entries.
///
/// [`MerkleMap::insert`] has snapshot semantics: it returns a new map and
/// leaves the receiver untouched. Call sites that own the map and mutate it
/// in a loop use [`MerkleMap::insert_in_place`] instead.
#[derive(Clone, Default)]
pub struct MerkleMap {
    entries: BTreeMap<Vec<u8>, Entry>,
}

impl MerkleMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a map from plain entries (used by replay oracles and tests).
    pub fn from_entries<I, K, V>(entries: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<Vec<u8>>,
        V: Into<Vec<u8>>,
    {
        let mut map = MerkleMap::new();
        for (k, v) in entries {
            map.insert_in_place(k.into(), v.into());
        }
        map
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &[u8]) -> Option<&[u8]> {
        self.entries.get(key).map(|e| e.value.as_slice())
    }

    pub fn contains_key(&self, key: &[u8]) -> bool {
        self.entries.contains_key(key)
    }

    /// Entries in ascending key order.
    pub fn iter(&self) -> impl Iterator<Item = (&[u8], &[u8])> {
        self.entries.iter().map(|(k, e)| (k.as_slice(), e.value.as_slice()))
    }

    /// Entries whose key starts with `prefix`, ascending.
    pub fn iter_prefix<'a>(&'a self, prefix: &'a [u8]) -> impl Iterator<Item = (&'a [u8], &'a [u8])> + 'a {
        self.entries
            .range(prefix.to_vec()..)
            .take_while(move |(k, _)| k.starts_with(prefix))
            .map(|(k, e)| (k.as_slice(), e.value.as_slice()))
    }

    /// Returns a new map with the entry inserted; `self` is unchanged.
    pub fn insert(&self, key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>) -> MerkleMap {
        let mut next = self.clone();
        next.insert_in_place(key, value);
        next
    }

    /// Inserts (or replaces) an entry, mutating the map.
    pub fn insert_in_place(&mut self, key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>) {
        let key = key.into();
        let value = value.into();
        let leaf = leaf_hash(&key, &value);
        self.entries.insert(key, Entry { value, leaf });
    }

    fn leaf_level(&self) -> Vec<HashDigest> {
        self.entries.values().map(|e| e.leaf).collect()
    }

    /// Merkle root over the current entries.
    pub fn root(&self) -> HashDigest {
        if self.entries.is_empty() {
            return empty_map_root();
        }
        let mut level = self.leaf_level();
        while level.len() > 1 {
            level = fold_level(&level);
        }
        level[0]
    }

    /// Inclusion proof for `key`, verifiable against [`MerkleMap::root`].
    pub fn prove(&self, key: &[u8]) -> Result<InclusionProof, MerkleError> {
        let entry = self.entries.get(key).ok_or(MerkleError::KeyAbsent)?;
        let mut pos = self
            .entries
            .range::<[u8], _>((std::ops::Bound::Unbounded, std::ops::Bound::Excluded(key)))
            .count();
        let mut level = self.leaf_level();
        let mut path = Vec::new();
        while level.len() > 1 {
            if pos.is_multiple_of(2) {
                // promoted odd node at the level end contributes no step
                if pos + 1 < level.len() {
                    path.push(ProofStep { digest: level[pos + 1], side: SiblingSide::Right });
                }
            } else {
                path.push(ProofStep { digest: level[pos - 1], side: SiblingSide::Left });
            }
            pos /= 2;
            level = fold_level(&level);
        }
        Ok(InclusionProof { key: key.to_vec(), value: entry.value.clone(), path })
    }

    /// Stable byte encoding: 4-byte big-endian entry count, then for each
    /// entry (ascending key order) 4-byte key length, key, 4-byte value
    /// length, value.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.entries.len() as u32).to_be_bytes());
        for (key, entry) in &self.entries {
            out.extend_from_slice(&(key.len() as u32).to_be_bytes());
            out.extend_from_slice(key);
            out.extend_from_slice(&(entry.value.len() as u32).to_be_bytes());
            out.extend_from_slice(&entry.value);
        }
        out
    }

    /// Inverse of [`MerkleMap::serialize`]. Rejects truncated input, keys out
    /// of ascending order (or duplicated), and trailing bytes.
    pub fn deserialize(bytes: &[u8]) -> Result<MerkleMap, MerkleError> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let count = cursor.read_u32()?;
        let mut entries = BTreeMap::new();
        let mut prev_key: Option<Vec<u8>> = None;
        for _ in 0..count {
            let key = cursor.read_chunk()?.to_vec();
            let value = cursor.read_chunk()?.to_vec();
            if let Some(prev) = &prev_key {
                if *prev >= key {
                    return Err(MerkleError::MalformedEncoding(
                        "keys not in strictly ascending order".into(),
                    ));
                }
            }
            prev_key = Some(key.clone());
            let leaf = leaf_hash(&key, &value);
            entries.insert(key, Entry { value, leaf });
        }
        if cursor.pos != bytes.len() {
            return Err(MerkleError::MalformedEncoding(format!(
                "{} trailing bytes after last entry",
                bytes.len() - cursor.pos
            )));
        }
        Ok(MerkleMap { entries })
    }
}

impl fmt::Debug for MerkleMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MerkleMap({} entries, root {})", self.len(), self.root())
    }
}

impl PartialEq for MerkleMap {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.iter().zip(other.iter()).all(|(a, b)| a == b)
    }
}

impl Eq for MerkleMap {}

fn fold_level(level: &[HashDigest]) -> Vec<HashDigest> {
    level
        .chunks(2)
        .map(|pair| if pair.len() == 2 { internal_hash(pair[0], pair[1]) } else { pair[0] })
        .collect()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn read_u32(&mut self) -> Result<u32, MerkleError> {
        let end = self.pos.checked_add(4).filter(|&e| e <= self.bytes.len()).ok_or_else(truncated)?;
        let v = u32::from_be_bytes(self.bytes[self.pos..end].try_into().unwrap());
        self.pos = end;
        Ok(v)
    }

    fn read_chunk(&mut self) -> Result<&'a [u8], MerkleError> {
        let len = self.read_u32()? as usize;
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len()).ok_or_else(truncated)?;
        let chunk = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(chunk)
    }
}

fn truncated() -> MerkleError {
    MerkleError::MalformedEncoding("input truncated".into())
}

/// Which side of the running hash a proof sibling sits on.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SiblingSide {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofStep {
    pub digest: HashDigest,
    pub side: SiblingSide,
}

/// Proof that `key -> value` is present in a map with a given root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionProof {
    #[serde(with = "hex_bytes")]
    pub key: Vec<u8>,
    #[serde(with = "hex_bytes")]
    pub value: Vec<u8>,
    pub path: Vec<ProofStep>,
}

impl InclusionProof {
    /// Recomputes the root from the leaf up; true iff it matches `root`.
    pub fn verify(&self, root: HashDigest) -> bool {
        let mut acc = leaf_hash(&self.key, &self.value);
        for step in &self.path {
            acc = match step.side {
                SiblingSide::Left => internal_hash(step.digest, acc),
                SiblingSide::Right => internal_hash(acc, step.digest),
            };
        }
        acc == root
    }
}

/// What the tree of roots records per tenant chain: the chain's latest state
/// root together with the block it was observed at.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeafRecord {
    pub state_root: HashDigest,
    pub block_number: u64,
    pub block_hash: HashDigest,
}

impl LeafRecord {
    pub const ENCODED_LEN: usize = 72;

    /// Canonical encoding: state_root || 8-byte big-endian block_number ||
    /// block_hash (72 bytes).
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::ENCODED_LEN);
        out.extend_from_slice(self.state_root.as_bytes());
        out.extend_from_slice(&self.block_number.to_be_bytes());
        out.extend_from_slice(self.block_hash.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, MerkleError> {
        if bytes.len() != Self::ENCODED_LEN {
            return Err(MerkleError::MalformedEncoding(format!(
                "leaf record must be {} bytes, got {}",
                Self::ENCODED_LEN,
                bytes.len()
            )));
        }
        Ok(LeafRecord {
            state_root: HashDigest::from_slice(&bytes[0..32])?,
            block_number: u64::from_be_bytes(bytes[32..40].try_into().unwrap()),
            block_hash: HashDigest::from_slice(&bytes[40..72])?,
        })
    }
}

/// Serde helper: byte vectors as hex strings in JSON output.
pub mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(deserializer)?;
        hex::decode(&s).map_err(serde::de::Error::custom)
    }
}
