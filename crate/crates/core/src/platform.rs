//! Composition root: chains, gateway, anchor engine and auditors wired
//! together behind a single virtual clock.
//!
//! `advance_to` replays every due event in timestamp order. Events that
//! share a timestamp run in a fixed order (tenant blocks by tenant index,
//! then the public block, then the anchor engine, then auditors), so a run
//! is fully determined by its configuration.

use crate::anchor::{AnchorEngine, EngineConfig, RoundReport};
use crate::audit::{AuditReport, ContinuousAuditor};
use crate::chain::{AccountId, Block, ChainHandle};
use crate::config::{ConfigError, PlatformConfig};
use crate::gateway::Gateway;
use crate::time::{SimDuration, SimTime};

pub struct TenantNode {
    pub name: String,
    pub chain: ChainHandle,
}

/// Observable moments during a run, in the order they happen.
pub enum PlatformEvent<'a> {
    TenantBlock { tenant_index: usize, block: &'a Block },
    PublicBlock { block: &'a Block },
    AuditCompleted { tenant_index: usize, report: &'a AuditReport },
}

pub struct Platform {
    pub config: PlatformConfig,
    pub public: ChainHandle,
    pub tenants: Vec<TenantNode>,
    pub gateway: Gateway,
    pub engine: AnchorEngine,
    pub auditors: Vec<ContinuousAuditor>,
    now: SimTime,
    tenant_inter: Vec<SimDuration>,
    public_inter: SimDuration,
    next_tenant_slot: Vec<SimTime>,
    next_public_slot: SimTime,
    anchor_interval: SimDuration,
    next_anchor_tick: Option<SimTime>,
    audit_interval: SimDuration,
    next_audit_poll: Option<SimTime>,
}

impl Platform {
    pub fn from_config(config: PlatformConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let public = ChainHandle::new(config.public_chain_config())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let mut tenants = Vec::with_capacity(config.tenants.len());
        let mut gateway = Gateway::new(config.gateway.clone());
        for section in &config.tenants {
            let chain = ChainHandle::new(config.tenant_chain_config(section))
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            gateway
                .add_tenant(&section.name, chain.clone())
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            tenants.push(TenantNode { name: section.name.clone(), chain });
        }
        for cred in &config.credentials {
            gateway.add_credential(&cred.token, cred.role.clone());
        }

        let engine_config = EngineConfig {
            anchor_interval: SimDuration::from_millis(config.anchor.interval_ms),
            query_timeout: SimDuration::from_millis(config.anchor.query_timeout_ms),
            commit_deadline: SimDuration::from_millis(config.anchor.commit_deadline_ms),
            fee_prioritization: config.anchor.fee_prioritization,
            app_max_gas_price: config.anchor.app_max_gas_price,
            base_gas_price: config.anchor.base_gas_price,
            anchor_account: AccountId::derive("anchor-account"),
            gas: config.gateway.gas.clone(),
        };
        let mut engine = AnchorEngine::new(engine_config, public.clone());
        for node in &tenants {
            engine
                .register_tenant(&node.name, node.chain.clone())
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }

        let auditors = if config.audit.enabled {
            tenants.iter().map(|node| ContinuousAuditor::new(node.chain.clone(), public.clone())).collect()
        } else {
            Vec::new()
        };

        let tenant_inter: Vec<SimDuration> =
            config.tenants.iter().map(|t| SimDuration::from_millis(t.inter_block_ms)).collect();
        let public_inter = SimDuration::from_millis(config.public_chain.inter_block_ms);
        let anchor_interval = SimDuration::from_millis(config.anchor.interval_ms);
        let audit_interval = SimDuration::from_millis(config.audit.interval_ms);

        Ok(Platform {
            next_tenant_slot: tenant_inter.iter().map(|d| SimTime::ZERO + *d).collect(),
            next_public_slot: SimTime::ZERO + public_inter,
            next_anchor_tick: config.anchor.enabled.then_some(SimTime::ZERO + anchor_interval),
            next_audit_poll: config.audit.enabled.then_some(SimTime::ZERO + audit_interval),
            config,
            public,
            tenants,
            gateway,
            engine,
            auditors,
            now: SimTime::ZERO,
            tenant_inter,
            public_inter,
            anchor_interval,
            audit_interval,
        })
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn tenant_index(&self, name: &str) -> Option<usize> {
        self.tenants.iter().position(|t| t.name == name)
    }

    /// Replays all events up to and including `target`, invoking the
    /// observer for each block and audit as it lands.
    pub fn advance_to(&mut self, target: SimTime, mut observer: impl FnMut(PlatformEvent<'_>)) {
        while let Some(when) = self.next_due(target) {
            self.now = when;
            self.step_at(when, &mut observer);
        }
        if target > self.now {
            self.now = target;
        }
    }

    pub fn advance_quiet(&mut self, target: SimTime) {
        self.advance_to(target, |_| {});
    }

    fn next_due(&self, target: SimTime) -> Option<SimTime> {
        let mut next: Option<SimTime> = None;
        let mut consider = |candidate: SimTime| match next {
            Some(best) if best <= candidate => {}
            _ => next = Some(candidate),
        };
        for slot in &self.next_tenant_slot {
            consider(*slot);
        }
        consider(self.next_public_slot);
        if let Some(tick) = self.next_anchor_tick {
            consider(tick);
        }
        if let Some(poll) = self.next_audit_poll {
            consider(poll);
        }
        if let Some(wake) = self.engine.next_wake() {
            consider(wake);
        }
        next.filter(|when| *when <= target)
    }

    fn step_at(&mut self, now: SimTime, observer: &mut impl FnMut(PlatformEvent<'_>)) {
        for index in 0..self.tenants.len() {
            if self.next_tenant_slot[index] == now {
                if let Some(block) = self.tenants[index].chain.produce_block(now) {
                    observer(PlatformEvent::TenantBlock { tenant_index: index, block: &block });
                }
                self.next_tenant_slot[index] = now + self.tenant_inter[index];
            }
        }
        if self.next_public_slot == now {
            if let Some(block) = self.public.produce_block(now) {
                observer(PlatformEvent::PublicBlock { block: &block });
            }
            self.next_public_slot = now + self.public_inter;
        }
        self.engine.poll(now);
        if self.next_anchor_tick == Some(now) {
            self.engine.schedule_tick(now);
            self.next_anchor_tick = Some(now + self.anchor_interval);
        }
        if self.next_audit_poll == Some(now) {
            for index in 0..self.auditors.len() {
                if let Some(report) = self.auditors[index].poll() {
                    observer(PlatformEvent::AuditCompleted { tenant_index: index, report });
                }
            }
            self.next_audit_poll = Some(now + self.audit_interval);
        }
    }

    /// Starts an anchor round immediately and drives the platform until the
    /// engine settles, returning the round's report.
    pub fn run_round_to_completion(&mut self) -> Option<RoundReport> {
        let before = self.engine.round_history().len();
        self.engine.schedule_tick(self.now);
        self.engine.poll(self.now);
        while self.engine.in_flight().is_some() {
            let step = self.now + self.public_inter;
            self.advance_quiet(step);
        }
        self.engine.round_history().get(before..).and_then(|new| new.last()).cloned()
    }
}
