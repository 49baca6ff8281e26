//! Independent auditing of anchored tenant state.
//!
//! An audit trusts nothing the platform operator maintains in memory: it
//! reads the latest committed anchor record from the public chain, picks the
//! stored tree of roots on the tenant chain belonging to that record (the
//! newest stored tree may be a generation ahead while a round's public
//! anchor is still confirming), and replays the tenant chain from genesis
//! to recompute the state root the leaf claims. Three checks must all hold
//! for a Pass:
//!
//! * root_check: the stored tree's root equals the anchored root,
//! * leaf_check: the leaf's state root matches the replayed chain at the
//!   leaf's block (and the block hash matches that block's header),
//! * proof_check: an inclusion proof for the leaf verifies against the
//!   anchored root.
//!
//! The replay is pinned to the leaf's block number, so audits are stable
//! while chains keep growing, and the whole process is read-only.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::anchor::AnchorRecord;
use crate::chain::{
    scan_key, uid_key, ChainError, ChainHandle, RegistrationRecord, ScanRecord, Transaction, TxPayload,
    ANCHOR_LATEST_KEY, MAX_UNIQUE_ID_LEN, TRIE_LATEST_KEY,
};
use crate::chain::anchor_round_key;
use crate::merkle::{HashDigest, LeafRecord, MerkleMap};
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuditError {
    #[error("no anchor record committed yet")]
    NoAnchorYet,
    #[error("node unavailable")]
    NodeUnavailable,
}

impl From<ChainError> for AuditError {
    fn from(_: ChainError) -> Self {
        AuditError::NodeUnavailable
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum LeafCheck {
    Match,
    Mismatch { expected: HashDigest, found: HashDigest },
    /// The tenant has no leaf in the stored tree (or the tree was unreadable).
    LeafAbsent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum RootCheck {
    Match,
    Mismatch { anchored: HashDigest, stored: HashDigest },
    TrieUnreadable { reason: String },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProofCheck {
    Valid,
    Invalid,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub tenant_chain_id: HashDigest,
    /// Round whose anchor record was audited.
    pub round_id: u64,
    pub anchored_root: HashDigest,
    pub root_check: RootCheck,
    pub leaf_check: LeafCheck,
    pub proof_check: ProofCheck,
    pub verdict: Verdict,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

/// Audits one tenant against the latest committed anchor record.
pub fn audit_tenant(tenant: &ChainHandle, public: &ChainHandle) -> Result<AuditReport, AuditError> {
    let anchor = latest_committed_anchor(public)?.ok_or(AuditError::NoAnchorYet)?;

    // stored tree, read from committed tenant state
    let tenant_committed = tenant.committed_height();
    let versions = tenant.read_state_versions(TRIE_LATEST_KEY, tenant_committed)?;
    let mut tree = match versions.last() {
        None => Err("no stored tree".to_string()),
        Some((_, bytes)) => MerkleMap::deserialize(bytes).map_err(|e| e.to_string()),
    };
    // a round stores the updated tree on tenant chains while its public
    // anchor is still confirming, so the newest stored tree can run one
    // generation ahead of the committed record; audit the version the
    // record actually anchors, and only report the newest on no match
    if !matches!(&tree, Ok(t) if t.root() == anchor.root) {
        for (_, bytes) in versions.iter().rev().skip(1) {
            if let Ok(candidate) = MerkleMap::deserialize(bytes) {
                if candidate.root() == anchor.root {
                    tree = Ok(candidate);
                    break;
                }
            }
        }
    }

    let root_check = match &tree {
        Err(reason) => RootCheck::TrieUnreadable { reason: reason.clone() },
        Ok(tree) => {
            let stored = tree.root();
            if stored == anchor.root {
                RootCheck::Match
            } else {
                RootCheck::Mismatch { anchored: anchor.root, stored }
            }
        }
    };

    let chain_id = tenant.chain_id();
    let leaf = tree
        .as_ref()
        .ok()
        .and_then(|tree| tree.get(chain_id.as_bytes()))
        .and_then(|bytes| LeafRecord::decode(bytes).ok());

    let leaf_check = match leaf {
        None => LeafCheck::LeafAbsent,
        Some(leaf) => replay_leaf_check(tenant, &leaf)?,
    };

    let proof_check = match &tree {
        Err(_) => ProofCheck::Invalid,
        Ok(tree) => match tree.prove(chain_id.as_bytes()) {
            Ok(proof) if proof.verify(anchor.root) => ProofCheck::Valid,
            _ => ProofCheck::Invalid,
        },
    };

    let verdict = if root_check == RootCheck::Match
        && leaf_check == LeafCheck::Match
        && proof_check == ProofCheck::Valid
    {
        Verdict::Pass
    } else {
        Verdict::Fail
    };

    Ok(AuditReport {
        tenant_chain_id: chain_id,
        round_id: anchor.round_id,
        anchored_root: anchor.root,
        root_check,
        leaf_check,
        proof_check,
        verdict,
    })
}

/// The leaf's block must exist with the recorded hash, and replaying the
/// chain up to it must reproduce the recorded state root.
fn replay_leaf_check(tenant: &ChainHandle, leaf: &LeafRecord) -> Result<LeafCheck, AuditError> {
    let header_hash = match tenant.header_hash(leaf.block_number) {
        Ok(hash) => hash,
        Err(ChainError::UnknownHeight(_)) => {
            // chain is shorter than the leaf claims: recorded history vanished
            return Ok(LeafCheck::Mismatch { expected: leaf.block_hash, found: HashDigest::ZERO });
        }
        Err(e) => return Err(e.into()),
    };
    if header_hash != leaf.block_hash {
        return Ok(LeafCheck::Mismatch { expected: leaf.block_hash, found: header_hash });
    }
    let replayed = recompute_state_root(tenant, leaf.block_number)?;
    if replayed == leaf.state_root {
        Ok(LeafCheck::Match)
    } else {
        Ok(LeafCheck::Mismatch { expected: leaf.state_root, found: replayed })
    }
}

/// Replays every block up to and including `up_to` through an independent
/// copy of the execution rules and returns the resulting state root. This is
/// the auditor's own path; it shares nothing with the state the chain keeps.
pub fn recompute_state_root(tenant: &ChainHandle, up_to: u64) -> Result<HashDigest, AuditError> {
    let mut entries: BTreeMap<Vec<u8>, Vec<u8>> = BTreeMap::new();
    let mut scan_seqs: HashMap<Vec<u8>, u64> = HashMap::new();
    for height in 0..=up_to {
        let block = tenant.get_block(height)?;
        for tx in &block.transactions {
            replay_payload(&mut entries, &mut scan_seqs, tx, height, block.header.timestamp);
        }
    }
    Ok(MerkleMap::from_entries(entries).root())
}

/// One transaction's effect on replayed state; invalid payloads change
/// nothing, mirroring how the chain executed them.
fn replay_payload(
    entries: &mut BTreeMap<Vec<u8>, Vec<u8>>,
    scan_seqs: &mut HashMap<Vec<u8>, u64>,
    tx: &Transaction,
    height: u64,
    block_time: SimTime,
) {
    match &tx.payload {
        TxPayload::RegisterUniqueIds { ids } => {
            if ids.is_empty() {
                return;
            }
            let mut keys = Vec::with_capacity(ids.len());
            for id in ids {
                if id.is_empty() || id.len() > MAX_UNIQUE_ID_LEN {
                    return;
                }
                let key = uid_key(id);
                if entries.contains_key(&key) || keys.contains(&key) {
                    return;
                }
                keys.push(key);
            }
            let value = RegistrationRecord { writer: tx.sender, height, at: block_time }.encode();
            for key in keys {
                entries.insert(key, value.clone());
            }
        }
        TxPayload::RecordScan { unique_id, scanned_at, meta } => {
            if !entries.contains_key(&uid_key(unique_id)) {
                return;
            }
            let seq = scan_seqs.entry(unique_id.clone()).or_insert(0);
            let key = scan_key(unique_id, *seq);
            *seq += 1;
            let value =
                ScanRecord { writer: tx.sender, height, scanned_at: *scanned_at, meta: meta.clone() }.encode();
            entries.insert(key, value);
        }
        TxPayload::StoreTrie { bytes } => {
            entries.insert(TRIE_LATEST_KEY.to_vec(), bytes.clone());
        }
        TxPayload::PublicAnchor { record } => {
            let encoded = record.encode();
            entries.insert(ANCHOR_LATEST_KEY.to_vec(), encoded.clone());
            entries.insert(anchor_round_key(record.round_id), encoded);
        }
    }
}

fn latest_committed_anchor(public: &ChainHandle) -> Result<Option<AnchorRecord>, AuditError> {
    let committed = public.committed_height();
    match public.read_state_at(ANCHOR_LATEST_KEY, committed)? {
        None => Ok(None),
        // an undecodable record means no usable anchor has committed
        Some(bytes) => Ok(AnchorRecord::decode(&bytes).ok()),
    }
}

/// Audits a tenant once per committed anchor record, keyed by round id, so
/// re-polling never produces duplicate reports.
pub struct ContinuousAuditor {
    tenant: ChainHandle,
    public: ChainHandle,
    last_audited: Option<u64>,
    reports: Vec<AuditReport>,
}

impl ContinuousAuditor {
    pub fn new(tenant: ChainHandle, public: ChainHandle) -> Self {
        ContinuousAuditor { tenant, public, last_audited: None, reports: Vec::new() }
    }

    /// Checks for a new committed anchor and audits it. Returns the new
    /// report, if one was produced. Transient node failures are retried on
    /// the next poll.
    pub fn poll(&mut self) -> Option<&AuditReport> {
        let anchor = latest_committed_anchor(&self.public).ok()??;
        if self.last_audited == Some(anchor.round_id) {
            return None;
        }
        match audit_tenant(&self.tenant, &self.public) {
            Ok(report) => {
                self.last_audited = Some(report.round_id);
                self.reports.push(report);
                self.reports.last()
            }
            Err(_) => None,
        }
    }

    pub fn reports(&self) -> &[AuditReport] {
        &self.reports
    }

    pub fn tenant_chain_id(&self) -> HashDigest {
        self.tenant.chain_id()
    }
}
