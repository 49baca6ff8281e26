//! Multi-tenant blockchain anchoring.
//!
//! Each tenant runs its own permissioned chain; a platform-side anchor
//! engine periodically collects every tenant's latest state root into a
//! Merkle tree of roots, anchors that tree's root on a shared public chain,
//! and stores the serialized tree back onto every tenant chain so tenants
//! and third parties can audit the platform without trusting it.
//!
//! The crate is organized around that loop:
//!
//! * [`merkle`]: the Merkle map used for chain state, the tree of roots,
//!   and inclusion proofs,
//! * [`chain`]: a deterministic proof-of-authority chain simulator,
//! * [`anchor`]: the anchor engine and its round scheduler,
//! * [`audit`]: independent verification of anchored state,
//! * [`gateway`]: the write path in front of the tenant chains,
//! * [`platform`]: everything composed behind one virtual clock,
//! * [`httpd`]: a small HTTP front end over a running platform.

pub mod anchor;
pub mod audit;
pub mod chain;
pub mod config;
pub mod gateway;
pub mod httpd;
pub mod merkle;
pub mod platform;
pub mod time;

pub use anchor::{AnchorEngine, AnchorRecord, EngineConfig, RoundFailure, RoundOutcome, RoundReport};
pub use audit::{audit_tenant, AuditError, AuditReport, ContinuousAuditor, Verdict};
pub use chain::{
    AccountId, Block, BlockHeader, Chain, ChainConfig, ChainError, ChainHandle, FailoverMode,
    GasSchedule, Transaction, TxHandle, TxPayload, TxStatus,
};
pub use config::{ConfigError, PlatformConfig, PLATFORM_WRITER_TOKEN};
pub use gateway::{Gateway, GatewayConfig, GatewayError, HistoryEntry, Role, ScanEvent};
pub use merkle::{empty_map_root, HashDigest, InclusionProof, LeafRecord, MerkleError, MerkleMap};
pub use platform::{Platform, PlatformEvent, TenantNode};
pub use time::{SimDuration, SimTime};
