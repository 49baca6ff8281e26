//! Write gateway in front of the tenant chains.
//!
//! All application writes flow through here: tenants never hold chain
//! accounts and never sign transactions themselves. The gateway owns a small
//! pool of trigger accounts per tenant chain, routes each write to the next
//! trigger round-robin, and keeps a gapless local nonce per trigger so
//! concurrent submissions from the same pool never collide.
//!
//! Reads are served from committed chain state so callers only ever see
//! entries that can no longer be reorged away.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::chain::{
    scan_prefix, uid_key, AccountId, ChainError, ChainHandle, GasSchedule, RegistrationRecord,
    ScanRecord, Transaction, TxHandle, TxPayload, TxStatus, MAX_UNIQUE_ID_LEN,
};
use crate::merkle::hex_bytes;
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("credential not recognized or not allowed for this operation")]
    Unauthorized,
    #[error("unknown tenant {0}")]
    UnknownTenant(String),
    #[error("tenant {0} already registered")]
    DuplicateTenant(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch of {size} exceeds the maximum of {max}")]
    BatchTooLarge { size: usize, max: usize },
    #[error("invalid unique id: {0}")]
    InvalidId(String),
    #[error("unique id already registered: {0}")]
    DuplicateId(String),
    #[error("unknown unique id")]
    UnknownUniqueId,
    #[error(transparent)]
    Chain(#[from] ChainError),
}

/// Who a credential acts as. Writers operate on every tenant; readers and
/// auditors are scoped to one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "kebab-case")]
pub enum Role {
    PlatformWriter,
    TenantReader { tenant: String },
    AuditorReader { tenant: String },
}

impl Role {
    fn may_write(&self) -> bool {
        matches!(self, Role::PlatformWriter)
    }

    fn may_read(&self, tenant: &str) -> bool {
        match self {
            Role::PlatformWriter => true,
            Role::TenantReader { tenant: scope } | Role::AuditorReader { tenant: scope } => scope == tenant,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum RequestKind {
    Write,
    Read,
}

/// Where a request was routed: writes land on a trigger account, reads go
/// straight to the tenant's node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Route {
    Trigger { index: usize, account: AccountId },
    ReadNode,
}

/// A scan event as reported by a trigger device.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanEvent {
    #[serde(with = "hex_bytes")]
    pub unique_id: Vec<u8>,
    pub scanned_at: SimTime,
    #[serde(with = "hex_bytes")]
    pub meta: Vec<u8>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryKind {
    Registered,
    Scanned,
}

/// One entry in a unique id's committed history: its registration followed
/// by every scan, in scan order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub kind: HistoryKind,
    pub writer: AccountId,
    pub height: u64,
    pub at: SimTime,
    #[serde(with = "hex_bytes")]
    pub meta: Vec<u8>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub triggers_per_tenant: usize,
    pub batch_max: usize,
    pub default_gas_price: u64,
    pub gas: GasSchedule,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            triggers_per_tenant: 3,
            batch_max: 20,
            default_gas_price: 50,
            gas: GasSchedule::default(),
        }
    }
}

struct Trigger {
    account: AccountId,
    next_nonce: u64,
    submitted: u64,
}

struct TenantRuntime {
    chain: ChainHandle,
    triggers: Vec<Trigger>,
    cursor: usize,
}

impl TenantRuntime {
    fn next_trigger(&mut self) -> usize {
        let index = self.cursor % self.triggers.len();
        self.cursor += 1;
        index
    }
}

pub struct Gateway {
    config: GatewayConfig,
    tenants: BTreeMap<String, TenantRuntime>,
    credentials: HashMap<String, Role>,
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> Self {
        Gateway { config, tenants: BTreeMap::new(), credentials: HashMap::new() }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn add_credential(&mut self, token: impl Into<String>, role: Role) {
        self.credentials.insert(token.into(), role);
    }

    pub fn add_tenant(&mut self, name: impl Into<String>, chain: ChainHandle) -> Result<(), GatewayError> {
        let name = name.into();
        if self.tenants.contains_key(&name) {
            return Err(GatewayError::DuplicateTenant(name));
        }
        let triggers = (0..self.config.triggers_per_tenant)
            .map(|i| Trigger {
                account: AccountId::derive(&format!("{name}/trigger-{i}")),
                next_nonce: 0,
                submitted: 0,
            })
            .collect();
        self.tenants.insert(name, TenantRuntime { chain, triggers, cursor: 0 });
        Ok(())
    }

    pub fn tenant_names(&self) -> Vec<String> {
        self.tenants.keys().cloned().collect()
    }

    pub fn tenant_chain(&self, tenant: &str) -> Option<ChainHandle> {
        self.tenants.get(tenant).map(|rt| rt.chain.clone())
    }

    /// Per-trigger (account, submissions, next nonce), for inspection.
    pub fn trigger_stats(&self, tenant: &str) -> Option<Vec<(AccountId, u64, u64)>> {
        self.tenants
            .get(tenant)
            .map(|rt| rt.triggers.iter().map(|t| (t.account, t.submitted, t.next_nonce)).collect())
    }

    /// Routes a request without executing it. Writes advance the tenant's
    /// round-robin cursor.
    pub fn route(&mut self, tenant: &str, kind: RequestKind) -> Result<Route, GatewayError> {
        let rt = self.tenants.get_mut(tenant).ok_or_else(|| GatewayError::UnknownTenant(tenant.into()))?;
        Ok(match kind {
            RequestKind::Write => {
                let index = rt.next_trigger();
                Route::Trigger { index, account: rt.triggers[index].account }
            }
            RequestKind::Read => Route::ReadNode,
        })
    }

    /// Registers a batch of unique ids on the tenant's chain. The whole
    /// batch is rejected if any id is malformed or already registered.
    pub fn create_unique_ids(
        &mut self,
        token: &str,
        tenant: &str,
        ids: Vec<Vec<u8>>,
        now: SimTime,
    ) -> Result<TxHandle, GatewayError> {
        self.authorize(token, tenant, RequestKind::Write)?;
        let rt = self.tenants.get_mut(tenant).ok_or_else(|| GatewayError::UnknownTenant(tenant.into()))?;
        if ids.is_empty() {
            return Err(GatewayError::EmptyBatch);
        }
        if ids.len() > self.config.batch_max {
            return Err(GatewayError::BatchTooLarge { size: ids.len(), max: self.config.batch_max });
        }
        for (i, id) in ids.iter().enumerate() {
            if id.is_empty() || id.len() > MAX_UNIQUE_ID_LEN {
                return Err(GatewayError::InvalidId(format!(
                    "id at index {i} has length {}, allowed 1..={MAX_UNIQUE_ID_LEN}",
                    id.len()
                )));
            }
            if ids[..i].contains(id) {
                return Err(GatewayError::DuplicateId(hex::encode(id)));
            }
            if rt.chain.read_state(&uid_key(id))?.is_some() {
                return Err(GatewayError::DuplicateId(hex::encode(id)));
            }
        }
        let index = rt.next_trigger();
        let trigger = &mut rt.triggers[index];
        let tx = Transaction {
            sender: trigger.account,
            nonce: trigger.next_nonce,
            gas_price: self.config.default_gas_price,
            gas_cost: self.config.gas.batch_registration,
            payload: TxPayload::RegisterUniqueIds { ids },
            submitted_at: now,
        };
        let handle = rt.chain.submit(tx)?;
        trigger.next_nonce += 1;
        trigger.submitted += 1;
        Ok(handle)
    }

    /// Appends a scan event to an already-registered unique id.
    pub fn record_scan(
        &mut self,
        token: &str,
        tenant: &str,
        event: ScanEvent,
        now: SimTime,
    ) -> Result<TxHandle, GatewayError> {
        self.authorize(token, tenant, RequestKind::Write)?;
        let rt = self.tenants.get_mut(tenant).ok_or_else(|| GatewayError::UnknownTenant(tenant.into()))?;
        if rt.chain.read_state(&uid_key(&event.unique_id))?.is_none() {
            return Err(GatewayError::UnknownUniqueId);
        }
        let index = rt.next_trigger();
        let trigger = &mut rt.triggers[index];
        let tx = Transaction {
            sender: trigger.account,
            nonce: trigger.next_nonce,
            gas_price: self.config.default_gas_price,
            gas_cost: self.config.gas.record_scan,
            payload: TxPayload::RecordScan {
                unique_id: event.unique_id,
                scanned_at: event.scanned_at,
                meta: event.meta,
            },
            submitted_at: now,
        };
        let handle = rt.chain.submit(tx)?;
        trigger.next_nonce += 1;
        trigger.submitted += 1;
        Ok(handle)
    }

    /// Returns a unique id's committed history: the registration entry
    /// first, then scans in the order they were recorded. Every entry names
    /// the trigger account that wrote it.
    pub fn read_history(
        &self,
        token: &str,
        tenant: &str,
        unique_id: &[u8],
    ) -> Result<Vec<HistoryEntry>, GatewayError> {
        self.authorize(token, tenant, RequestKind::Read)?;
        let rt = self.tenants.get(tenant).ok_or_else(|| GatewayError::UnknownTenant(tenant.into()))?;
        let committed = rt.chain.committed_height();
        let registration = rt
            .chain
            .read_state_at(&uid_key(unique_id), committed)?
            .ok_or(GatewayError::UnknownUniqueId)?;
        let registration =
            RegistrationRecord::decode(&registration).ok_or(GatewayError::UnknownUniqueId)?;
        let mut entries = vec![HistoryEntry {
            kind: HistoryKind::Registered,
            writer: registration.writer,
            height: registration.height,
            at: registration.at,
            meta: Vec::new(),
        }];
        for (_, value) in rt.chain.read_prefix_at(&scan_prefix(unique_id), committed)? {
            if let Some(scan) = ScanRecord::decode(&value) {
                entries.push(HistoryEntry {
                    kind: HistoryKind::Scanned,
                    writer: scan.writer,
                    height: scan.height,
                    at: scan.scanned_at,
                    meta: scan.meta,
                });
            }
        }
        Ok(entries)
    }

    /// Commit status of a previously submitted transaction.
    pub fn tx_status(&self, token: &str, tenant: &str, handle: TxHandle) -> Result<TxStatus, GatewayError> {
        self.authorize(token, tenant, RequestKind::Read)?;
        let rt = self.tenants.get(tenant).ok_or_else(|| GatewayError::UnknownTenant(tenant.into()))?;
        Ok(rt.chain.commit_status(handle)?)
    }

    /// Checks that `token` may read `tenant` without performing a read.
    pub fn authorize_read(&self, token: &str, tenant: &str) -> Result<(), GatewayError> {
        self.authorize(token, tenant, RequestKind::Read)
    }

    fn authorize(&self, token: &str, tenant: &str, kind: RequestKind) -> Result<(), GatewayError> {
        let role = self.credentials.get(token).ok_or(GatewayError::Unauthorized)?;
        let allowed = match kind {
            RequestKind::Write => role.may_write(),
            RequestKind::Read => role.may_read(tenant),
        };
        if allowed {
            Ok(())
        } else {
            Err(GatewayError::Unauthorized)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::ChainConfig;
    use crate::time::SimDuration;

    const WRITER: &str = "writer-token";
    const READER_A: &str = "reader-a";
    const AUDITOR_A: &str = "auditor-a";

    fn chain(seed: &[u8]) -> ChainHandle {
        ChainHandle::new(ChainConfig {
            seed: seed.to_vec(),
            genesis_timestamp: SimTime::ZERO,
            inter_block_time: SimDuration::from_secs(1),
            gas_limit: 8_000_000,
            authorities: vec![AccountId::derive("auth")],
            confirmations_required: 1,
            allow_empty_blocks: false,
        })
        .unwrap()
    }

    fn gateway() -> Gateway {
        let mut gw = Gateway::new(GatewayConfig::default());
        gw.add_tenant("tenant-a", chain(b"tenant-a")).unwrap();
        gw.add_tenant("tenant-b", chain(b"tenant-b")).unwrap();
        gw.add_credential(WRITER, Role::PlatformWriter);
        gw.add_credential(READER_A, Role::TenantReader { tenant: "tenant-a".into() });
        gw.add_credential(AUDITOR_A, Role::AuditorReader { tenant: "tenant-a".into() });
        gw
    }

    fn produce(gw: &Gateway, tenant: &str, at_secs: u64) {
        gw.tenant_chain(tenant).unwrap().produce_block(SimTime::from_secs(at_secs));
    }

    #[test]
    fn only_the_platform_writer_may_write() {
        let mut gw = gateway();
        for token in [READER_A, AUDITOR_A, "nonsense"] {
            let err = gw
                .create_unique_ids(token, "tenant-a", vec![b"id".to_vec()], SimTime::ZERO)
                .unwrap_err();
            assert_eq!(err, GatewayError::Unauthorized, "token {token}");
        }
        gw.create_unique_ids(WRITER, "tenant-a", vec![b"id".to_vec()], SimTime::ZERO).unwrap();
    }

    #[test]
    fn readers_are_scoped_to_their_tenant() {
        let mut gw = gateway();
        gw.create_unique_ids(WRITER, "tenant-a", vec![b"id".to_vec()], SimTime::ZERO).unwrap();
        produce(&gw, "tenant-a", 1);
        assert!(gw.read_history(READER_A, "tenant-a", b"id").is_ok());
        assert!(gw.read_history(AUDITOR_A, "tenant-a", b"id").is_ok());
        assert!(gw.read_history(WRITER, "tenant-a", b"id").is_ok());
        assert_eq!(gw.read_history(READER_A, "tenant-b", b"id").unwrap_err(), GatewayError::Unauthorized);
        assert_eq!(gw.read_history(AUDITOR_A, "tenant-b", b"id").unwrap_err(), GatewayError::Unauthorized);
    }

    #[test]
    fn writes_rotate_across_the_trigger_pool() {
        let mut gw = gateway();
        for i in 0..6 {
            gw.create_unique_ids(WRITER, "tenant-a", vec![format!("id-{i}").into_bytes()], SimTime::ZERO)
                .unwrap();
        }
        let stats = gw.trigger_stats("tenant-a").unwrap();
        assert_eq!(stats.len(), 3);
        for (_, submitted, next_nonce) in stats {
            assert_eq!(submitted, 2);
            assert_eq!(next_nonce, 2);
        }
    }

    #[test]
    fn trigger_nonces_stay_gapless_under_interleaving() {
        let mut gw = gateway();
        gw.create_unique_ids(WRITER, "tenant-a", vec![b"seed-id".to_vec()], SimTime::ZERO).unwrap();
        produce(&gw, "tenant-a", 1);
        for i in 0..7 {
            let event = ScanEvent {
                unique_id: b"seed-id".to_vec(),
                scanned_at: SimTime::from_secs(i),
                meta: vec![i as u8],
            };
            gw.record_scan(WRITER, "tenant-a", event, SimTime::from_secs(i)).unwrap();
        }
        produce(&gw, "tenant-a", 2);
        // 8 writes over 3 triggers: nonces 0..n per trigger with no gaps
        let stats = gw.trigger_stats("tenant-a").unwrap();
        let total: u64 = stats.iter().map(|(_, s, _)| s).sum();
        assert_eq!(total, 8);
        for (_, submitted, next_nonce) in stats {
            assert_eq!(submitted, next_nonce);
        }
        let history = gw.read_history(WRITER, "tenant-a", b"seed-id").unwrap();
        assert_eq!(history.len(), 8);
    }

    #[test]
    fn batch_limits_are_enforced() {
        let mut gw = gateway();
        assert_eq!(
            gw.create_unique_ids(WRITER, "tenant-a", vec![], SimTime::ZERO).unwrap_err(),
            GatewayError::EmptyBatch
        );
        let oversized: Vec<Vec<u8>> = (0..21).map(|i| format!("id-{i}").into_bytes()).collect();
        assert_eq!(
            gw.create_unique_ids(WRITER, "tenant-a", oversized, SimTime::ZERO).unwrap_err(),
            GatewayError::BatchTooLarge { size: 21, max: 20 }
        );
        let full: Vec<Vec<u8>> = (0..20).map(|i| format!("id-{i}").into_bytes()).collect();
        gw.create_unique_ids(WRITER, "tenant-a", full, SimTime::ZERO).unwrap();
    }

    #[test]
    fn malformed_ids_are_rejected() {
        let mut gw = gateway();
        let err = gw.create_unique_ids(WRITER, "tenant-a", vec![vec![]], SimTime::ZERO).unwrap_err();
        assert!(matches!(err, GatewayError::InvalidId(_)));
        let err =
            gw.create_unique_ids(WRITER, "tenant-a", vec![vec![7u8; 65]], SimTime::ZERO).unwrap_err();
        assert!(matches!(err, GatewayError::InvalidId(_)));
        gw.create_unique_ids(WRITER, "tenant-a", vec![vec![7u8; 64]], SimTime::ZERO).unwrap();
    }

    #[test]
    fn duplicate_ids_reject_the_whole_batch() {
        let mut gw = gateway();
        gw.create_unique_ids(WRITER, "tenant-a", vec![b"taken".to_vec()], SimTime::ZERO).unwrap();
        produce(&gw, "tenant-a", 1);

        // duplicate within the batch itself
        let err = gw
            .create_unique_ids(
                WRITER,
                "tenant-a",
                vec![b"x".to_vec(), b"x".to_vec()],
                SimTime::from_secs(1),
            )
            .unwrap_err();
        assert_eq!(err, GatewayError::DuplicateId(hex::encode(b"x")));

        // duplicate against committed state, batch partner must not land
        let err = gw
            .create_unique_ids(
                WRITER,
                "tenant-a",
                vec![b"fresh".to_vec(), b"taken".to_vec()],
                SimTime::from_secs(1),
            )
            .unwrap_err();
        assert_eq!(err, GatewayError::DuplicateId(hex::encode(b"taken")));
        produce(&gw, "tenant-a", 2);
        assert_eq!(gw.read_history(WRITER, "tenant-a", b"fresh").unwrap_err(), GatewayError::UnknownUniqueId);
    }

    #[test]
    fn scans_require_a_registered_id() {
        let mut gw = gateway();
        let event =
            ScanEvent { unique_id: b"ghost".to_vec(), scanned_at: SimTime::ZERO, meta: Vec::new() };
        assert_eq!(
            gw.record_scan(WRITER, "tenant-a", event, SimTime::ZERO).unwrap_err(),
            GatewayError::UnknownUniqueId
        );
    }

    #[test]
    fn history_is_registration_then_scans_in_order() {
        let mut gw = gateway();
        gw.create_unique_ids(WRITER, "tenant-a", vec![b"pallet".to_vec()], SimTime::ZERO).unwrap();
        produce(&gw, "tenant-a", 1);
        for i in 0..3u8 {
            let event = ScanEvent {
                unique_id: b"pallet".to_vec(),
                scanned_at: SimTime::from_secs(10 + i as u64),
                meta: vec![i],
            };
            gw.record_scan(WRITER, "tenant-a", event, SimTime::from_secs(10 + i as u64)).unwrap();
        }
        produce(&gw, "tenant-a", 11);

        let history = gw.read_history(READER_A, "tenant-a", b"pallet").unwrap();
        assert_eq!(history.len(), 4);
        assert_eq!(history[0].kind, HistoryKind::Registered);
        assert_eq!(history[0].height, 1);
        for (i, entry) in history[1..].iter().enumerate() {
            assert_eq!(entry.kind, HistoryKind::Scanned);
            assert_eq!(entry.meta, vec![i as u8]);
            assert_eq!(entry.at, SimTime::from_secs(10 + i as u64));
        }
        // each entry names the trigger account that wrote it
        let triggers: Vec<AccountId> =
            gw.trigger_stats("tenant-a").unwrap().iter().map(|(a, _, _)| *a).collect();
        for entry in &history {
            assert!(triggers.contains(&entry.writer));
        }
        // round-robin: registration by trigger 0, scans by 1, 2, 0
        assert_eq!(history[0].writer, triggers[0]);
        assert_eq!(history[1].writer, triggers[1]);
        assert_eq!(history[2].writer, triggers[2]);
        assert_eq!(history[3].writer, triggers[0]);
    }

    #[test]
    fn history_reads_only_committed_state() {
        let mut gw = gateway();
        gw.create_unique_ids(WRITER, "tenant-a", vec![b"pending".to_vec()], SimTime::ZERO).unwrap();
        // not yet in a block
        assert_eq!(
            gw.read_history(WRITER, "tenant-a", b"pending").unwrap_err(),
            GatewayError::UnknownUniqueId
        );
        produce(&gw, "tenant-a", 1);
        assert_eq!(gw.read_history(WRITER, "tenant-a", b"pending").unwrap().len(), 1);
    }

    #[test]
    fn tenants_are_isolated() {
        let mut gw = gateway();
        gw.create_unique_ids(WRITER, "tenant-a", vec![b"only-a".to_vec()], SimTime::ZERO).unwrap();
        produce(&gw, "tenant-a", 1);
        assert_eq!(
            gw.read_history(WRITER, "tenant-b", b"only-a").unwrap_err(),
            GatewayError::UnknownUniqueId
        );
        // same id can exist independently on the other chain
        gw.create_unique_ids(WRITER, "tenant-b", vec![b"only-a".to_vec()], SimTime::ZERO).unwrap();
        produce(&gw, "tenant-b", 1);
        assert_eq!(gw.read_history(WRITER, "tenant-b", b"only-a").unwrap().len(), 1);
    }

    #[test]
    fn unknown_tenant_is_reported() {
        let mut gw = gateway();
        let err =
            gw.create_unique_ids(WRITER, "tenant-z", vec![b"id".to_vec()], SimTime::ZERO).unwrap_err();
        assert_eq!(err, GatewayError::UnknownTenant("tenant-z".into()));
    }

    #[test]
    fn routing_reports_where_requests_go() {
        let mut gw = gateway();
        assert_eq!(gw.route("tenant-a", RequestKind::Read).unwrap(), Route::ReadNode);
        let first = gw.route("tenant-a", RequestKind::Write).unwrap();
        let second = gw.route("tenant-a", RequestKind::Write).unwrap();
        match (first, second) {
            (Route::Trigger { index: 0, .. }, Route::Trigger { index: 1, .. }) => {}
            other => panic!("unexpected routes {other:?}"),
        }
    }

    #[test]
    fn unavailable_node_surfaces_and_nonce_is_untouched() {
        let mut gw = gateway();
        gw.tenant_chain("tenant-a").unwrap().fail_over(crate::chain::FailoverMode::Unreachable);
        let err =
            gw.create_unique_ids(WRITER, "tenant-a", vec![b"id".to_vec()], SimTime::ZERO).unwrap_err();
        assert_eq!(err, GatewayError::Chain(ChainError::NodeUnavailable));
        let stats = gw.trigger_stats("tenant-a").unwrap();
        assert!(stats.iter().all(|(_, submitted, nonce)| *submitted == 0 && *nonce == 0));
        gw.tenant_chain("tenant-a").unwrap().fail_over(crate::chain::FailoverMode::Restored);
        gw.create_unique_ids(WRITER, "tenant-a", vec![b"id".to_vec()], SimTime::ZERO).unwrap();
    }
}
