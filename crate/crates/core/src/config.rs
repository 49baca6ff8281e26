//! Platform configuration, loadable from TOML.
//!
//! Two built-in presets cover the usual cases: `desk` is a small fast
//! profile for local runs (1s tenant blocks, 8M gas) and `paper` matches a
//! production-like deployment (5s tenant blocks, 80M gas). Everything the
//! presets set can also be written out explicitly in a config file.

use serde::{Deserialize, Serialize};

use crate::chain::{AccountId, ChainConfig};
use crate::gateway::{GatewayConfig, Role};
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSection {
    pub seed: String,
    pub inter_block_ms: u64,
    pub gas_limit: u64,
    pub authorities: usize,
    pub confirmations_required: u64,
}

impl Default for ChainSection {
    fn default() -> Self {
        ChainSection {
            seed: "public-chain".into(),
            inter_block_ms: 15_000,
            gas_limit: 80_000_000,
            authorities: 3,
            confirmations_required: 2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TenantSection {
    pub name: String,
    #[serde(default = "default_tenant_inter_block_ms")]
    pub inter_block_ms: u64,
    #[serde(default = "default_tenant_gas_limit")]
    pub gas_limit: u64,
    #[serde(default = "default_tenant_authorities")]
    pub authorities: usize,
    #[serde(default = "default_tenant_confirmations")]
    pub confirmations_required: u64,
}

fn default_tenant_inter_block_ms() -> u64 {
    1_000
}

fn default_tenant_gas_limit() -> u64 {
    8_000_000
}

fn default_tenant_authorities() -> usize {
    3
}

fn default_tenant_confirmations() -> u64 {
    1
}

impl TenantSection {
    pub fn named(name: impl Into<String>) -> Self {
        TenantSection {
            name: name.into(),
            inter_block_ms: default_tenant_inter_block_ms(),
            gas_limit: default_tenant_gas_limit(),
            authorities: default_tenant_authorities(),
            confirmations_required: default_tenant_confirmations(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorSection {
    pub enabled: bool,
    pub interval_ms: u64,
    pub query_timeout_ms: u64,
    pub commit_deadline_ms: u64,
    pub fee_prioritization: bool,
    pub app_max_gas_price: u64,
    pub base_gas_price: u64,
}

impl Default for AnchorSection {
    fn default() -> Self {
        AnchorSection {
            enabled: true,
            interval_ms: 60_000,
            query_timeout_ms: 3_000,
            commit_deadline_ms: 300_000,
            fee_prioritization: true,
            app_max_gas_price: 100,
            base_gas_price: 50,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditSection {
    pub enabled: bool,
    pub interval_ms: u64,
}

impl Default for AuditSection {
    fn default() -> Self {
        AuditSection { enabled: true, interval_ms: 15_000 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CredentialSection {
    pub token: String,
    #[serde(flatten)]
    pub role: Role,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatformConfig {
    pub public_chain: ChainSection,
    pub tenants: Vec<TenantSection>,
    pub anchor: AnchorSection,
    pub audit: AuditSection,
    pub gateway: GatewayConfig,
    pub credentials: Vec<CredentialSection>,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        PlatformConfig::desk(1)
    }
}

impl PlatformConfig {
    /// Small local profile: 1s tenant blocks, 8M gas, 15s public blocks.
    pub fn desk(tenant_count: usize) -> Self {
        let tenants: Vec<TenantSection> = tenant_names(tenant_count)
            .into_iter()
            .map(TenantSection::named)
            .collect();
        let credentials = standard_credentials(&tenants);
        PlatformConfig {
            public_chain: ChainSection::default(),
            tenants,
            anchor: AnchorSection::default(),
            audit: AuditSection::default(),
            gateway: GatewayConfig::default(),
            credentials,
        }
    }

    /// Production-like profile: 5s tenant blocks, 80M gas.
    pub fn paper(tenant_count: usize) -> Self {
        let mut config = PlatformConfig::desk(tenant_count);
        for tenant in &mut config.tenants {
            tenant.inter_block_ms = 5_000;
            tenant.gas_limit = 80_000_000;
        }
        config.anchor.interval_ms = 600_000;
        config.audit.interval_ms = 60_000;
        config
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: PlatformConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (i, tenant) in self.tenants.iter().enumerate() {
            if tenant.name.is_empty() {
                return Err(ConfigError::Invalid(format!("tenant {i} has an empty name")));
            }
            if self.tenants[..i].iter().any(|t| t.name == tenant.name) {
                return Err(ConfigError::Invalid(format!("duplicate tenant name {}", tenant.name)));
            }
        }
        for (section, chain) in self.chain_sections() {
            if chain.inter_block_ms == 0 {
                return Err(ConfigError::Invalid(format!("{section}: inter_block_ms must be positive")));
            }
            if chain.gas_limit == 0 {
                return Err(ConfigError::Invalid(format!("{section}: gas_limit must be positive")));
            }
            if chain.authorities == 0 {
                return Err(ConfigError::Invalid(format!("{section}: authorities must be positive")));
            }
            if chain.confirmations_required == 0 {
                return Err(ConfigError::Invalid(format!(
                    "{section}: confirmations_required must be positive"
                )));
            }
        }
        if self.anchor.interval_ms == 0 {
            return Err(ConfigError::Invalid("anchor.interval_ms must be positive".into()));
        }
        if self.anchor.commit_deadline_ms == 0 {
            return Err(ConfigError::Invalid("anchor.commit_deadline_ms must be positive".into()));
        }
        if self.audit.enabled && self.audit.interval_ms == 0 {
            return Err(ConfigError::Invalid("audit.interval_ms must be positive".into()));
        }
        if self.gateway.triggers_per_tenant == 0 {
            return Err(ConfigError::Invalid("gateway.triggers_per_tenant must be positive".into()));
        }
        if self.gateway.batch_max == 0 {
            return Err(ConfigError::Invalid("gateway.batch_max must be positive".into()));
        }
        for (i, cred) in self.credentials.iter().enumerate() {
            if cred.token.is_empty() {
                return Err(ConfigError::Invalid(format!("credential {i} has an empty token")));
            }
            let scope = match &cred.role {
                Role::PlatformWriter => None,
                Role::TenantReader { tenant } | Role::AuditorReader { tenant } => Some(tenant),
            };
            if let Some(tenant) = scope {
                if !self.tenants.iter().any(|t| &t.name == tenant) {
                    return Err(ConfigError::Invalid(format!(
                        "credential {} is scoped to unknown tenant {tenant}",
                        cred.token
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn public_chain_config(&self) -> ChainConfig {
        let section = &self.public_chain;
        ChainConfig {
            seed: section.seed.as_bytes().to_vec(),
            genesis_timestamp: SimTime::ZERO,
            inter_block_time: SimDuration::from_millis(section.inter_block_ms),
            gas_limit: section.gas_limit,
            authorities: derive_authorities(&section.seed, section.authorities),
            confirmations_required: section.confirmations_required,
            // the public chain produces on every slot so anchor transactions
            // always make commit progress
            allow_empty_blocks: true,
        }
    }

    pub fn tenant_chain_config(&self, tenant: &TenantSection) -> ChainConfig {
        ChainConfig {
            seed: tenant.name.as_bytes().to_vec(),
            genesis_timestamp: SimTime::ZERO,
            inter_block_time: SimDuration::from_millis(tenant.inter_block_ms),
            gas_limit: tenant.gas_limit,
            authorities: derive_authorities(&tenant.name, tenant.authorities),
            confirmations_required: tenant.confirmations_required,
            allow_empty_blocks: false,
        }
    }

    fn chain_sections(&self) -> Vec<(String, ChainSection)> {
        let mut sections = vec![("public_chain".to_string(), self.public_chain.clone())];
        for tenant in &self.tenants {
            sections.push((
                format!("tenant {}", tenant.name),
                ChainSection {
                    seed: tenant.name.clone(),
                    inter_block_ms: tenant.inter_block_ms,
                    gas_limit: tenant.gas_limit,
                    authorities: tenant.authorities,
                    confirmations_required: tenant.confirmations_required,
                },
            ));
        }
        sections
    }
}

fn tenant_names(count: usize) -> Vec<String> {
    (0..count).map(|i| format!("tenant-{}", (b'a' + (i % 26) as u8) as char)).collect()
}

/// Writer token plus one reader and one auditor token per tenant.
pub fn standard_credentials(tenants: &[TenantSection]) -> Vec<CredentialSection> {
    let mut credentials =
        vec![CredentialSection { token: "platform-writer-token".into(), role: Role::PlatformWriter }];
    for tenant in tenants {
        credentials.push(CredentialSection {
            token: format!("reader-{}", tenant.name),
            role: Role::TenantReader { tenant: tenant.name.clone() },
        });
        credentials.push(CredentialSection {
            token: format!("auditor-{}", tenant.name),
            role: Role::AuditorReader { tenant: tenant.name.clone() },
        });
    }
    credentials
}

fn derive_authorities(seed: &str, count: usize) -> Vec<AccountId> {
    (0..count).map(|i| AccountId::derive(&format!("{seed}/authority-{i}"))).collect()
}

pub const PLATFORM_WRITER_TOKEN: &str = "platform-writer-token";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_preset_round_trips_through_toml() {
        let config = PlatformConfig::desk(2);
        let text = config.to_toml();
        let parsed = PlatformConfig::from_toml(&text).unwrap();
        assert_eq!(parsed.tenants.len(), 2);
        assert_eq!(parsed.tenants[0].name, "tenant-a");
        assert_eq!(parsed.tenants[1].inter_block_ms, 1_000);
        assert_eq!(parsed.anchor.interval_ms, 60_000);
        assert_eq!(parsed.credentials.len(), 5);
    }

    #[test]
    fn paper_preset_scales_blocks_and_gas() {
        let config = PlatformConfig::paper(1);
        assert_eq!(config.tenants[0].inter_block_ms, 5_000);
        assert_eq!(config.tenants[0].gas_limit, 80_000_000);
        assert_eq!(config.public_chain.inter_block_ms, 15_000);
        assert_eq!(config.public_chain.confirmations_required, 2);
    }

    #[test]
    fn minimal_file_fills_in_defaults() {
        let text = r#"
            [[tenants]]
            name = "plant-7"

            [[credentials]]
            token = "writer"
            role = "platform-writer"

            [[credentials]]
            token = "viewer"
            role = "tenant-reader"
            tenant = "plant-7"
        "#;
        let config = PlatformConfig::from_toml(text).unwrap();
        assert_eq!(config.tenants[0].gas_limit, 8_000_000);
        assert_eq!(config.public_chain.inter_block_ms, 15_000);
        assert!(config.anchor.fee_prioritization);
        assert_eq!(config.credentials[1].role, Role::TenantReader { tenant: "plant-7".into() });
    }

    #[test]
    fn bad_configs_are_rejected() {
        let dup = r#"
            [[tenants]]
            name = "a"
            [[tenants]]
            name = "a"
        "#;
        assert!(matches!(PlatformConfig::from_toml(dup), Err(ConfigError::Invalid(_))));

        let unknown_scope = r#"
            [[tenants]]
            name = "a"
            [[credentials]]
            token = "t"
            role = "tenant-reader"
            tenant = "missing"
        "#;
        assert!(matches!(PlatformConfig::from_toml(unknown_scope), Err(ConfigError::Invalid(_))));

        let typo = r#"
            [public_chain]
            inter_block_secs = 15
        "#;
        assert!(matches!(PlatformConfig::from_toml(typo), Err(ConfigError::Parse(_))));

        let zero = r#"
            [[tenants]]
            name = "a"
            inter_block_ms = 0
        "#;
        assert!(matches!(PlatformConfig::from_toml(zero), Err(ConfigError::Invalid(_))));
    }
}
