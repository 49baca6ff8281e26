//! Anchor engine: periodically collects every tenant chain's latest state
//! root into the tree of roots and anchors that tree's root on the public
//! chain.
//!
//! A round walks five steps: verify the previously anchored root against the
//! maintained tree, query all registered tenants (a tenant that times out
//! keeps its previous leaf), recompute the tree root, submit the anchor
//! record to the public chain together with a serialized copy of the tree to
//! every reachable tenant, and finally wait for the public transaction to
//! commit. The engine holds a lock for the whole round; scheduler ticks that
//! arrive while a round is in flight are recorded as skipped, so rounds never
//! overlap and every anchor record's previous_root links to the record
//! before it.
//!
//! Anchor transactions are priced above the configured application maximum
//! so their inclusion does not queue behind tenant load; a flag turns that
//! off to measure what happens without prioritization.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::chain::{AccountId, ChainHandle, GasSchedule, Transaction, TxHandle, TxPayload, TxStatus, ANCHOR_LATEST_KEY};
use crate::merkle::{empty_map_root, HashDigest, LeafRecord, MerkleError, MerkleMap};
use crate::time::{SimDuration, SimTime};

/// What one successful round leaves on the public chain.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub root: HashDigest,
    /// Root of the previous successful record; the empty-map root for the
    /// first record ever anchored.
    pub previous_root: HashDigest,
    pub round_id: u64,
    pub anchored_at: SimTime,
}

impl AnchorRecord {
    pub const ENCODED_LEN: usize = 80;

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::ENCODED_LEN);
        out.extend_from_slice(self.root.as_bytes());
        out.extend_from_slice(self.previous_root.as_bytes());
        out.extend_from_slice(&self.round_id.to_be_bytes());
        out.extend_from_slice(&self.anchored_at.as_millis().to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, MerkleError> {
        if bytes.len() != Self::ENCODED_LEN {
            return Err(MerkleError::MalformedEncoding(format!(
                "anchor record must be {} bytes, got {}",
                Self::ENCODED_LEN,
                bytes.len()
            )));
        }
        Ok(AnchorRecord {
            root: HashDigest::from_slice(&bytes[0..32])?,
            previous_root: HashDigest::from_slice(&bytes[32..64])?,
            round_id: u64::from_be_bytes(bytes[64..72].try_into().unwrap()),
            anchored_at: SimTime::from_millis(u64::from_be_bytes(bytes[72..80].try_into().unwrap())),
        })
    }
}

/// Per-tenant outcome of the query step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TenantRoundStatus {
    /// First time this tenant appears in the tree.
    Added { leaf: LeafRecord },
    Updated { leaf: LeafRecord },
    /// Query succeeded but the chain has not moved since the last round.
    Unchanged,
    /// Query did not answer within the timeout; the previous leaf stands.
    TimedOut,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundFailure {
    /// The anchored root on the public chain does not match the engine's
    /// maintained tree; requires operator intervention.
    StateDiverged,
    NoTenantsRegistered,
    /// The public anchor transaction did not commit before the deadline.
    PublicCommitTimeout,
    /// The public chain rejected the submission or was unreachable.
    PublicChainUnavailable,
}

impl std::fmt::Display for RoundFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RoundFailure::StateDiverged => "state diverged",
            RoundFailure::NoTenantsRegistered => "no tenants registered",
            RoundFailure::PublicCommitTimeout => "public commit timeout",
            RoundFailure::PublicChainUnavailable => "public chain unavailable",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum RoundOutcome {
    Success,
    /// Tick arrived while a round was in flight; nothing was sent.
    Skipped,
    Failed { failure: RoundFailure },
}

/// Full record of one scheduler tick: a started round or a skip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round_id: u64,
    pub started: SimTime,
    pub finished: SimTime,
    pub outcome: RoundOutcome,
    pub per_tenant: BTreeMap<HashDigest, TenantRoundStatus>,
    pub public_tx: Option<TxStatus>,
    pub tenant_store_txs: BTreeMap<HashDigest, TxStatus>,
}

impl RoundReport {
    pub fn duration(&self) -> SimDuration {
        self.finished - self.started
    }

    pub fn is_success(&self) -> bool {
        matches!(self.outcome, RoundOutcome::Success)
    }

    pub fn is_skip(&self) -> bool {
        matches!(self.outcome, RoundOutcome::Skipped)
    }
}

/// Result of one scheduler tick.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TickResult {
    Started { round_id: u64 },
    /// The lock was held by this still-running round.
    Skipped { in_flight: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EngineError {
    #[error("tenant already registered: {0}")]
    DuplicateTenant(String),
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    /// Spacing of scheduler ticks; consumed by the driver that calls
    /// [`AnchorEngine::schedule_tick`].
    pub anchor_interval: SimDuration,
    /// Budget for the per-tenant query step. An unreachable tenant costs the
    /// round exactly this long, concurrently with the other queries.
    pub query_timeout: SimDuration,
    /// How long to wait for the public anchor to commit before the round is
    /// abandoned and the tree rolled back.
    pub commit_deadline: SimDuration,
    /// Price anchor transactions above every application transaction.
    pub fee_prioritization: bool,
    pub app_max_gas_price: u64,
    /// Price used when prioritization is off.
    pub base_gas_price: u64,
    pub anchor_account: AccountId,
    pub gas: GasSchedule,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            anchor_interval: SimDuration::from_secs(60),
            query_timeout: SimDuration::from_secs(3),
            commit_deadline: SimDuration::from_secs(300),
            fee_prioritization: true,
            app_max_gas_price: 100,
            base_gas_price: 50,
            anchor_account: AccountId::derive("anchor-account"),
            gas: GasSchedule::default(),
        }
    }
}

struct Tenant {
    name: String,
    chain: ChainHandle,
    chain_id: HashDigest,
}

enum Phase {
    /// Queries are resolved; transactions go out once the clock reaches `at`
    /// (round start plus the query timeout when any tenant timed out).
    AwaitSubmit { at: SimTime },
    AwaitCommit { deadline: SimTime },
}

struct InFlight {
    round_id: u64,
    started: SimTime,
    phase: Phase,
    working: MerkleMap,
    record: AnchorRecord,
    per_tenant: BTreeMap<HashDigest, TenantRoundStatus>,
    public_handle: Option<TxHandle>,
    /// chain_id -> submitted store handle; None when the tenant was
    /// unreachable at submission time.
    store_handles: BTreeMap<HashDigest, Option<TxHandle>>,
}

/// The anchoring component. Single instance per platform; owns the tree of
/// roots and the anchor account.
pub struct AnchorEngine {
    config: EngineConfig,
    public: ChainHandle,
    tenants: Vec<Tenant>,
    /// Registrations picked up at the next round boundary.
    staged: Vec<Tenant>,
    committed_tree: MerkleMap,
    latest_anchor: Option<AnchorRecord>,
    history: Vec<RoundReport>,
    next_round_id: u64,
    in_flight: Option<InFlight>,
    nonces: HashMap<HashDigest, u64>,
}

impl AnchorEngine {
    pub fn new(config: EngineConfig, public: ChainHandle) -> Self {
        AnchorEngine {
            config,
            public,
            tenants: Vec::new(),
            staged: Vec::new(),
            committed_tree: MerkleMap::new(),
            latest_anchor: None,
            history: Vec::new(),
            next_round_id: 1,
            in_flight: None,
            nonces: HashMap::new(),
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Registers a tenant chain; it participates from the next round on.
    pub fn register_tenant(&mut self, name: &str, chain: ChainHandle) -> Result<(), EngineError> {
        let chain_id = chain.chain_id();
        let clash = self
            .tenants
            .iter()
            .chain(self.staged.iter())
            .find(|t| t.chain_id == chain_id || t.name == name);
        if let Some(t) = clash {
            return Err(EngineError::DuplicateTenant(t.name.clone()));
        }
        self.staged.push(Tenant { name: name.to_string(), chain, chain_id });
        Ok(())
    }

    pub fn tenant_count(&self) -> usize {
        self.tenants.len() + self.staged.len()
    }

    /// Name and chain id of every registered tenant, registration order.
    pub fn tenant_ids(&self) -> Vec<(String, HashDigest)> {
        self.tenants
            .iter()
            .chain(self.staged.iter())
            .map(|t| (t.name.clone(), t.chain_id))
            .collect()
    }

    /// Latest successfully committed anchor record.
    pub fn latest_anchor(&self) -> Option<AnchorRecord> {
        self.latest_anchor
    }

    /// Root of the maintained tree of roots (last committed state).
    pub fn tree_root(&self) -> HashDigest {
        self.committed_tree.root()
    }

    pub fn committed_tree(&self) -> &MerkleMap {
        &self.committed_tree
    }

    pub fn round_history(&self) -> &[RoundReport] {
        &self.history
    }

    /// Round id of the in-flight round, if the lock is held.
    pub fn in_flight(&self) -> Option<u64> {
        self.in_flight.as_ref().map(|fl| fl.round_id)
    }

    /// Next virtual instant at which [`AnchorEngine::poll`] has time-driven
    /// work (a deferred submission or a commit deadline).
    pub fn next_wake(&self) -> Option<SimTime> {
        self.in_flight.as_ref().map(|fl| match fl.phase {
            Phase::AwaitSubmit { at } => at,
            Phase::AwaitCommit { deadline } => deadline,
        })
    }

    /// One JSON object per round report, oldest first.
    pub fn export_round_history(&self, w: &mut dyn Write) -> std::io::Result<()> {
        for report in &self.history {
            serde_json::to_writer(&mut *w, report)?;
            writeln!(w)?;
        }
        Ok(())
    }

    /// Scheduler tick: starts a round, or records a skip when one is already
    /// in flight. Skips consume no round id.
    pub fn schedule_tick(&mut self, now: SimTime) -> TickResult {
        if let Some(fl) = &self.in_flight {
            let in_flight = fl.round_id;
            self.history.push(RoundReport {
                round_id: in_flight,
                started: now,
                finished: now,
                outcome: RoundOutcome::Skipped,
                per_tenant: BTreeMap::new(),
                public_tx: None,
                tenant_store_txs: BTreeMap::new(),
            });
            return TickResult::Skipped { in_flight };
        }
        let round_id = self.start_round(now);
        self.poll(now);
        TickResult::Started { round_id }
    }

    fn start_round(&mut self, now: SimTime) -> u64 {
        self.tenants.append(&mut self.staged);
        let round_id = self.next_round_id;
        self.next_round_id += 1;

        if self.tenants.is_empty() {
            self.fail_immediately(round_id, now, RoundFailure::NoTenantsRegistered);
            return round_id;
        }

        // Step 1: the previously anchored root must match the maintained tree.
        match self.read_latest_public_anchor() {
            Err(_) => {
                self.fail_immediately(round_id, now, RoundFailure::PublicChainUnavailable);
                return round_id;
            }
            Ok(on_chain) => {
                let anchored_root = on_chain.map(|r| r.root);
                let maintained = match self.latest_anchor {
                    Some(_) => Some(self.committed_tree.root()),
                    None => None,
                };
                if anchored_root != maintained {
                    self.fail_immediately(round_id, now, RoundFailure::StateDiverged);
                    return round_id;
                }
            }
        }

        // Step 2: query every tenant; timeouts leave the previous leaf alone.
        let mut working = self.committed_tree.clone();
        let mut per_tenant = BTreeMap::new();
        let mut any_timeout = false;
        for tenant in &self.tenants {
            match tenant.chain.latest_header() {
                Ok(header) => {
                    let leaf = LeafRecord {
                        state_root: header.state_root,
                        block_number: header.height,
                        block_hash: header.hash(),
                    };
                    let key = tenant.chain_id.as_bytes().to_vec();
                    let status = match working.get(&key) {
                        None => TenantRoundStatus::Added { leaf },
                        Some(prev) if prev == leaf.encode().as_slice() => TenantRoundStatus::Unchanged,
                        Some(_) => TenantRoundStatus::Updated { leaf },
                    };
                    if !matches!(status, TenantRoundStatus::Unchanged) {
                        working.insert_in_place(key, leaf.encode());
                    }
                    per_tenant.insert(tenant.chain_id, status);
                }
                Err(_) => {
                    any_timeout = true;
                    per_tenant.insert(tenant.chain_id, TenantRoundStatus::TimedOut);
                }
            }
        }
        // Queries run concurrently: one unreachable tenant costs the round a
        // single query timeout, however many tenants answered instantly.
        let submit_at = if any_timeout { now + self.config.query_timeout } else { now };

        // Step 3: recompute the root the record will anchor.
        let record = AnchorRecord {
            root: working.root(),
            previous_root: self.latest_anchor.map(|r| r.root).unwrap_or_else(empty_map_root),
            round_id,
            anchored_at: submit_at,
        };

        self.in_flight = Some(InFlight {
            round_id,
            started: now,
            phase: Phase::AwaitSubmit { at: submit_at },
            working,
            record,
            per_tenant,
            public_handle: None,
            store_handles: BTreeMap::new(),
        });
        round_id
    }

    /// Drives the in-flight round forward. Call whenever virtual time
    /// advances; cheap when idle.
    pub fn poll(&mut self, now: SimTime) {
        if matches!(self.in_flight.as_ref().map(|fl| &fl.phase), Some(Phase::AwaitSubmit { at }) if now >= *at) {
            self.submit_round(now);
        }
        if matches!(self.in_flight.as_ref().map(|fl| &fl.phase), Some(Phase::AwaitCommit { .. })) {
            self.check_completion(now);
        }
    }

    /// Step 4: one anchor transaction to the public chain, one StoreTrie to
    /// every tenant reachable right now.
    fn submit_round(&mut self, now: SimTime) {
        let mut fl = self.in_flight.take().expect("submit_round without in-flight round");
        fl.record.anchored_at = now;

        let gas_price = if self.config.fee_prioritization {
            self.config.app_max_gas_price + 1
        } else {
            self.config.base_gas_price
        };

        let public_tx = Transaction {
            sender: self.config.anchor_account,
            nonce: self.next_nonce(self.public.chain_id()),
            gas_price,
            gas_cost: self.config.gas.public_anchor,
            payload: TxPayload::PublicAnchor { record: fl.record },
            submitted_at: now,
        };
        match self.public.submit(public_tx) {
            Ok(handle) => {
                self.bump_nonce(self.public.chain_id());
                fl.public_handle = Some(handle);
            }
            Err(_) => {
                self.finalize(fl, now, RoundOutcome::Failed { failure: RoundFailure::PublicChainUnavailable });
                return;
            }
        }

        let tree_bytes = fl.working.serialize();
        let targets: Vec<(HashDigest, ChainHandle)> =
            self.tenants.iter().map(|t| (t.chain_id, t.chain.clone())).collect();
        for (chain_id, chain) in targets {
            let store_tx = Transaction {
                sender: self.config.anchor_account,
                nonce: self.next_nonce(chain_id),
                gas_price,
                gas_cost: self.config.gas.store_trie,
                payload: TxPayload::StoreTrie { bytes: tree_bytes.clone() },
                submitted_at: now,
            };
            match chain.submit(store_tx) {
                Ok(handle) => {
                    self.bump_nonce(chain_id);
                    fl.store_handles.insert(chain_id, Some(handle));
                }
                Err(_) => {
                    fl.store_handles.insert(chain_id, None);
                }
            }
        }

        fl.phase = Phase::AwaitCommit { deadline: now + self.config.commit_deadline };
        self.in_flight = Some(fl);
    }

    /// Step 5: success once the public anchor is committed and every
    /// submitted StoreTrie is on its chain; timeout rolls the tree back.
    fn check_completion(&mut self, now: SimTime) {
        let fl = self.in_flight.as_ref().expect("check_completion without in-flight round");
        let Phase::AwaitCommit { deadline } = fl.phase else { return };

        let public_handle = fl.public_handle.expect("commit phase without public handle");
        let public_status = self.public.commit_status(public_handle).ok();
        let public_committed = matches!(&public_status, Some(s) if s.is_committed());

        let mut stores_done = true;
        for (chain_id, handle) in &fl.store_handles {
            let Some(handle) = handle else { continue }; // unreachable at submission: not awaited
            let tenant = self.tenants.iter().find(|t| t.chain_id == *chain_id).unwrap();
            match tenant.chain.commit_status(*handle) {
                Ok(status) if status.is_on_chain() => {}
                _ => {
                    stores_done = false;
                    break;
                }
            }
        }

        if public_committed && stores_done {
            let fl = self.in_flight.take().unwrap();
            self.committed_tree = fl.working.clone();
            self.latest_anchor = Some(fl.record);
            self.finalize(fl, now, RoundOutcome::Success);
        } else if now >= deadline {
            let fl = self.in_flight.take().unwrap();
            // roll back: drop the working tree, withdraw whatever is still
            // pending so the abandoned round leaves no trace on any chain;
            // a withdrawn transaction releases its nonce or every later
            // submission would sit behind the gap forever
            if self.public.cancel_pending(public_handle) {
                self.unbump_nonce(self.public.chain_id());
            }
            for (chain_id, handle) in &fl.store_handles {
                let Some(handle) = handle else { continue };
                let chain =
                    self.tenants.iter().find(|t| t.chain_id == *chain_id).map(|t| t.chain.clone());
                if let Some(chain) = chain {
                    if chain.cancel_pending(*handle) {
                        self.unbump_nonce(*chain_id);
                    }
                }
            }
            self.finalize(fl, now, RoundOutcome::Failed { failure: RoundFailure::PublicCommitTimeout });
        }
    }

    fn finalize(&mut self, fl: InFlight, now: SimTime, outcome: RoundOutcome) {
        let public_tx = fl.public_handle.and_then(|h| self.public.commit_status(h).ok());
        let mut tenant_store_txs = BTreeMap::new();
        for (chain_id, handle) in &fl.store_handles {
            let status = match handle {
                None => TxStatus::Failed { reason: "node unavailable at submission".into() },
                Some(handle) => {
                    let tenant = self.tenants.iter().find(|t| t.chain_id == *chain_id).unwrap();
                    tenant
                        .chain
                        .commit_status(*handle)
                        .unwrap_or(TxStatus::Failed { reason: "node unavailable".into() })
                }
            };
            tenant_store_txs.insert(*chain_id, status);
        }
        self.history.push(RoundReport {
            round_id: fl.round_id,
            started: fl.started,
            finished: now,
            outcome,
            per_tenant: fl.per_tenant,
            public_tx,
            tenant_store_txs,
        });
    }

    fn fail_immediately(&mut self, round_id: u64, now: SimTime, failure: RoundFailure) {
        self.history.push(RoundReport {
            round_id,
            started: now,
            finished: now,
            outcome: RoundOutcome::Failed { failure },
            per_tenant: BTreeMap::new(),
            public_tx: None,
            tenant_store_txs: BTreeMap::new(),
        });
    }

    /// Latest anchor record visible at the public chain's committed height.
    pub fn read_latest_public_anchor(&self) -> Result<Option<AnchorRecord>, MerkleError> {
        let committed = self.public.committed_height();
        let bytes = self
            .public
            .read_state_at(ANCHOR_LATEST_KEY, committed)
            .map_err(|e| MerkleError::MalformedEncoding(e.to_string()))?;
        match bytes {
            None => Ok(None),
            Some(bytes) => AnchorRecord::decode(&bytes).map(Some),
        }
    }

    fn next_nonce(&self, chain_id: HashDigest) -> u64 {
        self.nonces.get(&chain_id).copied().unwrap_or(0)
    }

    fn bump_nonce(&mut self, chain_id: HashDigest) {
        *self.nonces.entry(chain_id).or_insert(0) += 1;
    }

    fn unbump_nonce(&mut self, chain_id: HashDigest) {
        if let Some(nonce) = self.nonces.get_mut(&chain_id) {
            *nonce = nonce.saturating_sub(1);
        }
    }

    /// Fault injection: flips one byte of a leaf in the maintained tree, so
    /// the next round's verification step sees a divergence.
    pub fn tamper_tree_leaf(&mut self, chain_id: HashDigest, byte_index: usize) -> bool {
        let key = chain_id.as_bytes().to_vec();
        let Some(value) = self.committed_tree.get(&key) else { return false };
        if byte_index >= value.len() {
            return false;
        }
        let mut tampered = value.to_vec();
        tampered[byte_index] ^= 0x01;
        self.committed_tree.insert_in_place(key, tampered);
        true
    }
}
