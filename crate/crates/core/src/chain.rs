//! Single-chain simulator with proof-of-authority block production.
//!
//! Consensus is abstracted away: authorities take turns producing blocks
//! instantly at their scheduled slot, there are no forks and no signatures.
//! What is modeled faithfully is everything the anchoring platform depends
//! on: a pending pool ordered by nonce and gas price, per-block gas
//! accounting, deterministic payload execution over a Merkle-committed
//! key/value state, and commit-after-N-confirmations semantics.
//!
//! A chain is driven entirely by its caller: `produce_block(now)` is invoked
//! on the virtual clock, so runs are reproducible bit for bit.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::anchor::AnchorRecord;
use crate::merkle::{empty_map_root, HashDigest, MerkleMap};
use crate::time::{SimDuration, SimTime};

/// Longest accepted unique id, in bytes.
pub const MAX_UNIQUE_ID_LEN: usize = 64;

/// Key/value pairs returned by prefix reads.
pub type StateEntries = Vec<(Vec<u8>, Vec<u8>)>;

/// State key of the stored serialized tree of roots.
pub const TRIE_LATEST_KEY: &[u8] = b"trie/latest";

/// State key of the most recent anchor record on the public chain.
pub const ANCHOR_LATEST_KEY: &[u8] = b"anchor/latest";

/// Registry key for a registered unique id.
pub fn uid_key(id: &[u8]) -> Vec<u8> {
    let mut k = b"uid/".to_vec();
    k.extend_from_slice(id);
    k
}

/// Registry key for scan event `seq` of a unique id.
pub fn scan_key(id: &[u8], seq: u64) -> Vec<u8> {
    let mut k = scan_prefix(id);
    k.extend_from_slice(&seq.to_be_bytes());
    k
}

/// Key prefix under which all scan events of a unique id live.
pub fn scan_prefix(id: &[u8]) -> Vec<u8> {
    let mut k = b"scan/".to_vec();
    k.extend_from_slice(id);
    k.push(b'/');
    k
}

/// State key of the anchor record for one round on the public chain.
pub fn anchor_round_key(round_id: u64) -> Vec<u8> {
    let mut k = b"anchor/round/".to_vec();
    k.extend_from_slice(&round_id.to_be_bytes());
    k
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChainError {
    #[error("node unavailable")]
    NodeUnavailable,
    #[error("unknown block height {0}")]
    UnknownHeight(u64),
    #[error("unknown transaction handle {0}")]
    UnknownHandle(u64),
    #[error("transaction gas {gas_cost} exceeds block gas limit {gas_limit}")]
    GasExceedsLimit { gas_cost: u64, gas_limit: u64 },
    #[error("invalid chain config: {0}")]
    InvalidConfig(String),
}

/// A 20-byte account address.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AccountId([u8; 20]);

impl AccountId {
    pub const fn from_bytes(bytes: [u8; 20]) -> Self {
        AccountId(bytes)
    }

    /// Deterministic account for a label: first 20 bytes of SHA-256(label).
    pub fn derive(label: &str) -> Self {
        let digest: [u8; 32] = Sha256::digest(label.as_bytes()).into();
        AccountId(digest[..20].try_into().unwrap())
    }

    pub fn as_bytes(&self) -> &[u8; 20] {
        &self.0
    }
}

impl fmt::Debug for AccountId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}", hex::encode(self.0))
    }
}

impl fmt::Display for AccountId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}", hex::encode(self.0))
    }
}

impl Serialize for AccountId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format!("0x{}", hex::encode(self.0)))
    }
}

impl<'de> Deserialize<'de> for AccountId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        let raw = s.strip_prefix("0x").unwrap_or(&s);
        let bytes = hex::decode(raw).map_err(serde::de::Error::custom)?;
        let arr: [u8; 20] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("account id must be 20 bytes"))?;
        Ok(AccountId(arr))
    }
}

/// Gas charged per payload kind. The platform assigns these when composing
/// transactions; the chain only enforces the block gas limit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GasSchedule {
    pub batch_registration: u64,
    pub record_scan: u64,
    pub store_trie: u64,
    pub public_anchor: u64,
}

impl Default for GasSchedule {
    fn default() -> Self {
        GasSchedule {
            batch_registration: 1_050_000,
            record_scan: 100_000,
            store_trie: 500_000,
            public_anchor: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TxPayload {
    RegisterUniqueIds {
        #[serde(with = "hex_id_list")]
        ids: Vec<Vec<u8>>,
    },
    RecordScan {
        #[serde(with = "crate::merkle::hex_bytes")]
        unique_id: Vec<u8>,
        scanned_at: SimTime,
        #[serde(with = "crate::merkle::hex_bytes")]
        meta: Vec<u8>,
    },
    StoreTrie {
        #[serde(with = "crate::merkle::hex_bytes")]
        bytes: Vec<u8>,
    },
    PublicAnchor { record: AnchorRecord },
}

impl TxPayload {
    /// Canonical encoding used for transaction hashing.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            TxPayload::RegisterUniqueIds { ids } => {
                out.push(0x01);
                out.extend_from_slice(&(ids.len() as u32).to_be_bytes());
                for id in ids {
                    out.extend_from_slice(&(id.len() as u32).to_be_bytes());
                    out.extend_from_slice(id);
                }
            }
            TxPayload::RecordScan { unique_id, scanned_at, meta } => {
                out.push(0x02);
                out.extend_from_slice(&(unique_id.len() as u32).to_be_bytes());
                out.extend_from_slice(unique_id);
                out.extend_from_slice(&scanned_at.as_millis().to_be_bytes());
                out.extend_from_slice(&(meta.len() as u32).to_be_bytes());
                out.extend_from_slice(meta);
            }
            TxPayload::StoreTrie { bytes } => {
                out.push(0x03);
                out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
                out.extend_from_slice(bytes);
            }
            TxPayload::PublicAnchor { record } => {
                out.push(0x04);
                out.extend_from_slice(&record.encode());
            }
        }
        out
    }
}

mod hex_id_list {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ids: &[Vec<u8>], serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(ids.iter().map(hex::encode))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Vec<Vec<u8>>, D::Error> {
        let strings = Vec::<String>::deserialize(deserializer)?;
        strings.into_iter().map(|s| hex::decode(&s).map_err(serde::de::Error::custom)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub sender: AccountId,
    pub nonce: u64,
    pub gas_price: u64,
    pub gas_cost: u64,
    pub payload: TxPayload,
    pub submitted_at: SimTime,
}

impl Transaction {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(self.sender.as_bytes());
        out.extend_from_slice(&self.nonce.to_be_bytes());
        out.extend_from_slice(&self.gas_price.to_be_bytes());
        out.extend_from_slice(&self.gas_cost.to_be_bytes());
        out.extend_from_slice(&self.submitted_at.as_millis().to_be_bytes());
        out.extend_from_slice(&self.payload.encode());
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub height: u64,
    pub parent_hash: HashDigest,
    pub timestamp: SimTime,
    pub state_root: HashDigest,
    pub tx_root: HashDigest,
    pub producer: AccountId,
    /// Free-form header bytes; carries the chain seed in the genesis block.
    #[serde(with = "crate::merkle::hex_bytes")]
    pub extra: Vec<u8>,
}

impl BlockHeader {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(self.parent_hash.as_bytes());
        out.extend_from_slice(&self.timestamp.as_millis().to_be_bytes());
        out.extend_from_slice(self.state_root.as_bytes());
        out.extend_from_slice(self.tx_root.as_bytes());
        out.extend_from_slice(self.producer.as_bytes());
        out.extend_from_slice(&(self.extra.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.extra);
        out
    }

    pub fn hash(&self) -> HashDigest {
        HashDigest::from_bytes(Sha256::digest(self.encode()).into())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub header: BlockHeader,
    pub transactions: Vec<Transaction>,
}

impl Block {
    pub fn hash(&self) -> HashDigest {
        self.header.hash()
    }
}

/// Opaque reference to a submitted transaction, unique per chain.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TxHandle(pub u64);

impl fmt::Display for TxHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tx#{}", self.0)
    }
}

/// Lifecycle of a submitted transaction. A transaction is Committed once it
/// is included at height h and the chain height has reached
/// h + confirmations_required - 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TxStatus {
    Pending,
    Included { height: u64 },
    Committed { height: u64 },
    Failed { reason: String },
}

impl TxStatus {
    pub fn is_committed(&self) -> bool {
        matches!(self, TxStatus::Committed { .. })
    }

    /// Included or already committed (i.e. the transaction is on chain and
    /// did not fail).
    pub fn is_on_chain(&self) -> bool {
        matches!(self, TxStatus::Included { .. } | TxStatus::Committed { .. })
    }
}

#[derive(Clone, Debug)]
pub struct ChainConfig {
    /// Distinguishes chains with otherwise identical parameters; embedded in
    /// the genesis header, so it feeds the chain id.
    pub seed: Vec<u8>,
    pub genesis_timestamp: SimTime,
    pub inter_block_time: SimDuration,
    pub gas_limit: u64,
    pub authorities: Vec<AccountId>,
    pub confirmations_required: u64,
    /// Whether blocks are produced on schedule even with an empty pool.
    /// Tenant chains leave this off; the public chain needs it so inclusion
    /// can progress to commitment without waiting for more traffic.
    pub allow_empty_blocks: bool,
}

impl ChainConfig {
    pub fn validate(&self) -> Result<(), ChainError> {
        if self.authorities.is_empty() {
            return Err(ChainError::InvalidConfig("at least one authority required".into()));
        }
        if self.gas_limit == 0 {
            return Err(ChainError::InvalidConfig("gas limit must be positive".into()));
        }
        if self.inter_block_time == SimDuration::ZERO {
            return Err(ChainError::InvalidConfig("inter-block time must be positive".into()));
        }
        if self.confirmations_required == 0 {
            return Err(ChainError::InvalidConfig("confirmations_required must be at least 1".into()));
        }
        Ok(())
    }
}

/// Availability switch for fault injection.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum FailoverMode {
    Unreachable,
    Restored,
}

/// Value stored under `uid/<id>`: who registered the id and when.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrationRecord {
    pub writer: AccountId,
    pub height: u64,
    pub at: SimTime,
}

impl RegistrationRecord {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(36);
        out.extend_from_slice(self.writer.as_bytes());
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(&self.at.as_millis().to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != 36 {
            return None;
        }
        Some(RegistrationRecord {
            writer: AccountId::from_bytes(bytes[0..20].try_into().unwrap()),
            height: u64::from_be_bytes(bytes[20..28].try_into().unwrap()),
            at: SimTime::from_millis(u64::from_be_bytes(bytes[28..36].try_into().unwrap())),
        })
    }
}

/// Value stored under `scan/<id>/<seq>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub writer: AccountId,
    pub height: u64,
    pub scanned_at: SimTime,
    #[serde(with = "crate::merkle::hex_bytes")]
    pub meta: Vec<u8>,
}

impl ScanRecord {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(36 + self.meta.len());
        out.extend_from_slice(self.writer.as_bytes());
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(&self.scanned_at.as_millis().to_be_bytes());
        out.extend_from_slice(&self.meta);
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < 36 {
            return None;
        }
        Some(ScanRecord {
            writer: AccountId::from_bytes(bytes[0..20].try_into().unwrap()),
            height: u64::from_be_bytes(bytes[20..28].try_into().unwrap()),
            scanned_at: SimTime::from_millis(u64::from_be_bytes(bytes[28..36].try_into().unwrap())),
            meta: bytes[36..].to_vec(),
        })
    }
}

enum TxState {
    Pending,
    Cancelled,
    Landed { height: u64, error: Option<String> },
}

struct TxRecord {
    sender: AccountId,
    nonce: u64,
    state: TxState,
}

struct PoolTx {
    handle: TxHandle,
    tx: Transaction,
}

/// One simulated chain. Wrap in [`ChainHandle`] to share it between the
/// gateway, the anchor engine and auditors.
pub struct Chain {
    config: ChainConfig,
    chain_id: HashDigest,
    blocks: Vec<Block>,
    header_hashes: Vec<HashDigest>,
    block_handles: Vec<Vec<TxHandle>>,
    state: MerkleMap,
    /// Append-only write log per key: (height, value), heights ascending.
    versions: HashMap<Vec<u8>, Vec<(u64, Vec<u8>)>>,
    account_nonces: HashMap<AccountId, u64>,
    scan_seqs: HashMap<Vec<u8>, u64>,
    pool: BTreeMap<AccountId, BTreeMap<u64, PoolTx>>,
    records: HashMap<u64, TxRecord>,
    next_handle: u64,
    available: bool,
}

impl Chain {
    pub fn new(config: ChainConfig) -> Result<Self, ChainError> {
        config.validate()?;
        let state = MerkleMap::new();
        let genesis_header = BlockHeader {
            height: 0,
            parent_hash: HashDigest::ZERO,
            timestamp: config.genesis_timestamp,
            state_root: state.root(),
            tx_root: empty_map_root(),
            producer: config.authorities[0],
            extra: config.seed.clone(),
        };
        let chain_id = genesis_header.hash();
        Ok(Chain {
            config,
            chain_id,
            header_hashes: vec![chain_id],
            blocks: vec![Block { header: genesis_header, transactions: Vec::new() }],
            block_handles: vec![Vec::new()],
            state,
            versions: HashMap::new(),
            account_nonces: HashMap::new(),
            scan_seqs: HashMap::new(),
            pool: BTreeMap::new(),
            records: HashMap::new(),
            next_handle: 0,
            available: true,
        })
    }

    /// Hash of the genesis block; identifies the chain.
    pub fn chain_id(&self) -> HashDigest {
        self.chain_id
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn height(&self) -> u64 {
        (self.blocks.len() - 1) as u64
    }

    /// Highest height whose block has reached the configured confirmation
    /// depth.
    pub fn committed_height(&self) -> u64 {
        self.height().saturating_sub(self.config.confirmations_required - 1)
    }

    fn check_available(&self) -> Result<(), ChainError> {
        if self.available {
            Ok(())
        } else {
            Err(ChainError::NodeUnavailable)
        }
    }

    pub fn fail_over(&mut self, mode: FailoverMode) {
        self.available = mode == FailoverMode::Restored;
    }

    pub fn is_available(&self) -> bool {
        self.available
    }

    pub fn latest_header(&self) -> Result<BlockHeader, ChainError> {
        self.check_available()?;
        Ok(self.blocks.last().unwrap().header.clone())
    }

    pub fn get_block(&self, height: u64) -> Result<Block, ChainError> {
        self.check_available()?;
        self.blocks.get(height as usize).cloned().ok_or(ChainError::UnknownHeight(height))
    }

    pub fn header_hash(&self, height: u64) -> Result<HashDigest, ChainError> {
        self.check_available()?;
        self.header_hashes.get(height as usize).copied().ok_or(ChainError::UnknownHeight(height))
    }

    /// Adds a transaction to the pending pool. Nonces ahead of the account's
    /// next expected nonce are accepted and wait in the pool until the gap
    /// closes.
    pub fn submit(&mut self, tx: Transaction) -> Result<TxHandle, ChainError> {
        self.check_available()?;
        if tx.gas_cost > self.config.gas_limit {
            return Err(ChainError::GasExceedsLimit { gas_cost: tx.gas_cost, gas_limit: self.config.gas_limit });
        }
        let handle = TxHandle(self.next_handle);
        self.next_handle += 1;
        self.records.insert(handle.0, TxRecord { sender: tx.sender, nonce: tx.nonce, state: TxState::Pending });
        self.pool.entry(tx.sender).or_default().insert(tx.nonce, PoolTx { handle, tx });
        Ok(handle)
    }

    /// Withdraws a still-pending transaction from the pool. Returns false if
    /// it was already included (or never existed).
    pub fn cancel_pending(&mut self, handle: TxHandle) -> bool {
        let Some(rec) = self.records.get_mut(&handle.0) else { return false };
        if !matches!(rec.state, TxState::Pending) {
            return false;
        }
        let sender = rec.sender;
        let nonce = rec.nonce;
        let Some(queue) = self.pool.get_mut(&sender) else { return false };
        let removed = matches!(queue.get(&nonce), Some(pt) if pt.handle == handle);
        if removed {
            queue.remove(&nonce);
            if queue.is_empty() {
                self.pool.remove(&sender);
            }
            rec.state = TxState::Cancelled;
        }
        removed
    }

    pub fn commit_status(&self, handle: TxHandle) -> Result<TxStatus, ChainError> {
        self.check_available()?;
        let rec = self.records.get(&handle.0).ok_or(ChainError::UnknownHandle(handle.0))?;
        Ok(match &rec.state {
            TxState::Pending => TxStatus::Pending,
            TxState::Cancelled => TxStatus::Failed { reason: "cancelled before inclusion".into() },
            TxState::Landed { height, error: Some(reason) } => {
                TxStatus::Failed { reason: format!("execution failed at height {height}: {reason}") }
            }
            TxState::Landed { height, error: None } => {
                if self.height() >= height + self.config.confirmations_required - 1 {
                    TxStatus::Committed { height: *height }
                } else {
                    TxStatus::Included { height: *height }
                }
            }
        })
    }

    pub fn pending_count(&self) -> usize {
        self.pool.values().map(|q| q.len()).sum()
    }

    /// Latest value under `key`, if any.
    pub fn read_state(&self, key: &[u8]) -> Result<Option<Vec<u8>>, ChainError> {
        self.check_available()?;
        Ok(self.state.get(key).map(|v| v.to_vec()))
    }

    /// Value under `key` as of block `height` (the last write at or below
    /// that height).
    pub fn read_state_at(&self, key: &[u8], height: u64) -> Result<Option<Vec<u8>>, ChainError> {
        self.check_available()?;
        if height > self.height() {
            return Err(ChainError::UnknownHeight(height));
        }
        Ok(self.value_at(key, height))
    }

    fn value_at(&self, key: &[u8], height: u64) -> Option<Vec<u8>> {
        let versions = self.versions.get(key)?;
        let idx = versions.partition_point(|(h, _)| *h <= height);
        if idx == 0 {
            None
        } else {
            Some(versions[idx - 1].1.clone())
        }
    }

    /// Every committed value `key` has held up to and including `height`,
    /// oldest first, paired with the height that wrote it.
    pub fn read_state_versions(&self, key: &[u8], height: u64) -> Result<Vec<(u64, Vec<u8>)>, ChainError> {
        self.check_available()?;
        if height > self.height() {
            return Err(ChainError::UnknownHeight(height));
        }
        Ok(self
            .versions
            .get(key)
            .map(|versions| versions.iter().filter(|(h, _)| *h <= height).cloned().collect())
            .unwrap_or_default())
    }

    /// All entries under `prefix` as of block `height`, ascending by key.
    pub fn read_prefix_at(&self, prefix: &[u8], height: u64) -> Result<StateEntries, ChainError> {
        self.check_available()?;
        if height > self.height() {
            return Err(ChainError::UnknownHeight(height));
        }
        let mut out = Vec::new();
        for (key, _) in self.state.iter_prefix(prefix) {
            if let Some(value) = self.value_at(key, height) {
                out.push((key.to_vec(), value));
            }
        }
        Ok(out)
    }

    /// Attempts to produce a block at virtual time `now`. Returns None when
    /// the slot is not due yet, or when the pool is empty and the chain does
    /// not produce empty blocks.
    pub fn produce_block(&mut self, now: SimTime) -> Option<Block> {
        let last_ts = self.blocks.last().unwrap().header.timestamp;
        if now < last_ts + self.config.inter_block_time {
            return None;
        }
        let selected = self.select_transactions();
        if selected.is_empty() && !self.config.allow_empty_blocks {
            return None;
        }
        let height = self.blocks.len() as u64;

        let mut handles = Vec::with_capacity(selected.len());
        let mut txs = Vec::with_capacity(selected.len());
        for (handle, tx) in selected {
            let result = self.execute_payload(&tx, height, now);
            self.account_nonces.insert(tx.sender, tx.nonce + 1);
            self.records.get_mut(&handle.0).unwrap().state =
                TxState::Landed { height, error: result.err() };
            handles.push(handle);
            txs.push(tx);
        }

        let mut tx_map = MerkleMap::new();
        for (idx, tx) in txs.iter().enumerate() {
            tx_map.insert_in_place((idx as u64).to_be_bytes().to_vec(), tx.encode());
        }

        let header = BlockHeader {
            height,
            parent_hash: *self.header_hashes.last().unwrap(),
            timestamp: now,
            state_root: self.state.root(),
            tx_root: tx_map.root(),
            producer: self.config.authorities[(height as usize) % self.config.authorities.len()],
            extra: Vec::new(),
        };
        let block = Block { header, transactions: txs };
        self.header_hashes.push(block.hash());
        self.blocks.push(block.clone());
        self.block_handles.push(handles);
        Some(block)
    }

    /// Pool drain order: per sender strictly consecutive nonces, across
    /// senders descending gas price (ties: earlier submission, then lower
    /// sender id), packing greedily until the gas limit. A sender whose next
    /// transaction does not fit is skipped entirely so its nonce sequence
    /// stays gapless.
    fn select_transactions(&mut self) -> Vec<(TxHandle, Transaction)> {
        let mut expected: HashMap<AccountId, u64> = self
            .pool
            .keys()
            .map(|s| (*s, self.account_nonces.get(s).copied().unwrap_or(0)))
            .collect();
        let mut blocked: Vec<AccountId> = Vec::new();
        let mut gas_left = self.config.gas_limit;
        let mut selected = Vec::new();
        loop {
            let mut best: Option<(AccountId, u64, u64, SimTime)> = None; // sender, nonce, price, submitted
            for (sender, queue) in &self.pool {
                if blocked.contains(sender) {
                    continue;
                }
                let next_nonce = expected[sender];
                let Some(cand) = queue.get(&next_nonce) else { continue };
                let better = match &best {
                    None => true,
                    Some((bs, _, bp, bt)) => {
                        (cand.tx.gas_price, std::cmp::Reverse(cand.tx.submitted_at), std::cmp::Reverse(*sender))
                            > (*bp, std::cmp::Reverse(*bt), std::cmp::Reverse(*bs))
                    }
                };
                if better {
                    best = Some((*sender, next_nonce, cand.tx.gas_price, cand.tx.submitted_at));
                }
            }
            let Some((sender, nonce, _, _)) = best else { break };
            let gas_cost = self.pool[&sender][&nonce].tx.gas_cost;
            if gas_cost > gas_left {
                blocked.push(sender);
                continue;
            }
            let queue = self.pool.get_mut(&sender).unwrap();
            let pool_tx = queue.remove(&nonce).unwrap();
            if queue.is_empty() {
                self.pool.remove(&sender);
            }
            gas_left -= gas_cost;
            *expected.get_mut(&sender).unwrap() += 1;
            selected.push((pool_tx.handle, pool_tx.tx));
        }
        selected
    }

    /// Applies a payload to the chain state. An Err leaves the state
    /// untouched; the transaction still occupies its gas in the block.
    fn execute_payload(&mut self, tx: &Transaction, height: u64, now: SimTime) -> Result<(), String> {
        match &tx.payload {
            TxPayload::RegisterUniqueIds { ids } => {
                if ids.is_empty() {
                    return Err("empty id batch".into());
                }
                let mut keys = Vec::with_capacity(ids.len());
                for id in ids {
                    if id.is_empty() || id.len() > MAX_UNIQUE_ID_LEN {
                        return Err(format!("invalid id length {}", id.len()));
                    }
                    let key = uid_key(id);
                    if self.state.contains_key(&key) || keys.contains(&key) {
                        return Err(format!("duplicate id {}", hex::encode(id)));
                    }
                    keys.push(key);
                }
                let value = RegistrationRecord { writer: tx.sender, height, at: now }.encode();
                for key in keys {
                    self.write(height, key, value.clone());
                }
                Ok(())
            }
            TxPayload::RecordScan { unique_id, scanned_at, meta } => {
                if !self.state.contains_key(&uid_key(unique_id)) {
                    return Err(format!("unknown unique id {}", hex::encode(unique_id)));
                }
                let seq = self.scan_seqs.entry(unique_id.clone()).or_insert(0);
                let key = scan_key(unique_id, *seq);
                *seq += 1;
                let value =
                    ScanRecord { writer: tx.sender, height, scanned_at: *scanned_at, meta: meta.clone() }.encode();
                self.write(height, key, value);
                Ok(())
            }
            TxPayload::StoreTrie { bytes } => {
                self.write(height, TRIE_LATEST_KEY.to_vec(), bytes.clone());
                Ok(())
            }
            TxPayload::PublicAnchor { record } => {
                let encoded = record.encode();
                self.write(height, ANCHOR_LATEST_KEY.to_vec(), encoded.clone());
                self.write(height, anchor_round_key(record.round_id), encoded);
                Ok(())
            }
        }
    }

    fn write(&mut self, height: u64, key: Vec<u8>, value: Vec<u8>) {
        self.state.insert_in_place(key.clone(), value.clone());
        self.versions.entry(key).or_default().push((height, value));
    }

    /// Transaction handles included in the block at `height`, in block order.
    /// Instrumentation for the experiment driver; not part of the node API.
    pub fn handles_at(&self, height: u64) -> Vec<TxHandle> {
        self.block_handles.get(height as usize).cloned().unwrap_or_default()
    }

    /// Writes one JSON object per block, oldest first.
    pub fn export_trace(&self, w: &mut dyn Write) -> std::io::Result<()> {
        for block in &self.blocks {
            serde_json::to_writer(&mut *w, block)?;
            writeln!(w)?;
        }
        Ok(())
    }

    // ---- fault injection -------------------------------------------------

    /// Rewrites history: flips one byte inside the payload of an already
    /// included transaction. Returns false if the coordinates are out of
    /// range.
    pub fn tamper_block_payload(&mut self, height: u64, tx_index: usize, byte_index: usize) -> bool {
        let Some(block) = self.blocks.get_mut(height as usize) else { return false };
        let Some(tx) = block.transactions.get_mut(tx_index) else { return false };
        let target: Option<&mut Vec<u8>> = match &mut tx.payload {
            TxPayload::RegisterUniqueIds { ids } => ids.first_mut(),
            TxPayload::RecordScan { meta, .. } => Some(meta),
            TxPayload::StoreTrie { bytes } => Some(bytes),
            TxPayload::PublicAnchor { .. } => None,
        };
        match target {
            Some(bytes) if byte_index < bytes.len() => {
                bytes[byte_index] ^= 0x01;
                true
            }
            _ => false,
        }
    }

    /// Flips one byte of the current value under `key`, in place, without a
    /// transaction: models a storage-level rewrite by a malicious operator.
    pub fn tamper_state_value(&mut self, key: &[u8], byte_index: usize) -> bool {
        let Some(current) = self.state.get(key) else { return false };
        if byte_index >= current.len() {
            return false;
        }
        let mut value = current.to_vec();
        value[byte_index] ^= 0x01;
        self.state.insert_in_place(key.to_vec(), value.clone());
        if let Some(versions) = self.versions.get_mut(key) {
            if let Some(last) = versions.last_mut() {
                last.1 = value;
            }
        }
        true
    }
}

/// Shared, lockable handle to a chain. Clones refer to the same chain.
#[derive(Clone)]
pub struct ChainHandle(Arc<Mutex<Chain>>);

impl ChainHandle {
    pub fn new(config: ChainConfig) -> Result<Self, ChainError> {
        Ok(ChainHandle(Arc::new(Mutex::new(Chain::new(config)?))))
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Chain> {
        self.0.lock().expect("chain lock poisoned")
    }

    pub fn chain_id(&self) -> HashDigest {
        self.lock().chain_id()
    }

    pub fn config(&self) -> ChainConfig {
        self.lock().config().clone()
    }

    pub fn height(&self) -> u64 {
        self.lock().height()
    }

    pub fn committed_height(&self) -> u64 {
        self.lock().committed_height()
    }

    pub fn latest_header(&self) -> Result<BlockHeader, ChainError> {
        self.lock().latest_header()
    }

    pub fn get_block(&self, height: u64) -> Result<Block, ChainError> {
        self.lock().get_block(height)
    }

    pub fn header_hash(&self, height: u64) -> Result<HashDigest, ChainError> {
        self.lock().header_hash(height)
    }

    pub fn submit(&self, tx: Transaction) -> Result<TxHandle, ChainError> {
        self.lock().submit(tx)
    }

    pub fn cancel_pending(&self, handle: TxHandle) -> bool {
        self.lock().cancel_pending(handle)
    }

    pub fn commit_status(&self, handle: TxHandle) -> Result<TxStatus, ChainError> {
        self.lock().commit_status(handle)
    }

    pub fn pending_count(&self) -> usize {
        self.lock().pending_count()
    }

    pub fn read_state(&self, key: &[u8]) -> Result<Option<Vec<u8>>, ChainError> {
        self.lock().read_state(key)
    }

    pub fn read_state_at(&self, key: &[u8], height: u64) -> Result<Option<Vec<u8>>, ChainError> {
        self.lock().read_state_at(key, height)
    }

    pub fn read_prefix_at(&self, prefix: &[u8], height: u64) -> Result<StateEntries, ChainError> {
        self.lock().read_prefix_at(prefix, height)
    }

    pub fn read_state_versions(&self, key: &[u8], height: u64) -> Result<Vec<(u64, Vec<u8>)>, ChainError> {
        self.lock().read_state_versions(key, height)
    }

    pub fn produce_block(&self, now: SimTime) -> Option<Block> {
        self.lock().produce_block(now)
    }

    pub fn fail_over(&self, mode: FailoverMode) {
        self.lock().fail_over(mode)
    }

    pub fn is_available(&self) -> bool {
        self.lock().is_available()
    }

    pub fn handles_at(&self, height: u64) -> Vec<TxHandle> {
        self.lock().handles_at(height)
    }

    pub fn export_trace(&self, w: &mut dyn Write) -> std::io::Result<()> {
        self.lock().export_trace(w)
    }

    pub fn tamper_block_payload(&self, height: u64, tx_index: usize, byte_index: usize) -> bool {
        self.lock().tamper_block_payload(height, tx_index, byte_index)
    }

    pub fn tamper_state_value(&self, key: &[u8], byte_index: usize) -> bool {
        self.lock().tamper_state_value(key, byte_index)
    }
}
