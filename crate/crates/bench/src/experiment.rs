//! Experiment definitions and the event-driven run loop.
//!
//! An experiment drives a whole platform on its virtual clock: per-tenant
//! load generators submit batch registrations through the gateway while
//! chains produce blocks, the anchor engine runs rounds, and auditors poll.
//! Everything is scheduled on the same clock, so a run is a pure function
//! of (config, seed).
//!
//! The four standard profiles:
//!
//! * test 1: steady load below the inclusion cap, one tenant
//! * test 2: boundary load ramping linearly down to the cap, one tenant
//! * test 3: sustained overload at 1.45x the cap, one tenant, then a quiet
//!   tail so the backlog can drain
//! * test 4: three tenants each running the test-3 profile
//!
//! The cap is floor(gas_limit / batch_gas) / inter_block_time: 7 tps at
//! desk scale, 15.2 tps at full scale.

use anchorage_core::chain::TxPayload;
use anchorage_core::config::{ConfigError, PlatformConfig, PLATFORM_WRITER_TOKEN};
use anchorage_core::platform::{Platform, PlatformEvent};
use anchorage_core::time::SimTime;
use serde::{Deserialize, Serialize};

use crate::metrics::{BlockStat, MetricsSeries, MinuteRow};
use crate::rng::SimRng;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Linear load segment: tps interpolates from `tps_start` at `start_secs`
/// to `tps_end` at `end_secs`. Outside all segments the rate is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadSegment {
    pub start_secs: u64,
    pub end_secs: u64,
    pub tps_start: f64,
    pub tps_end: f64,
}

impl LoadSegment {
    pub fn steady(start_secs: u64, end_secs: u64, tps: f64) -> Self {
        LoadSegment { start_secs, end_secs, tps_start: tps, tps_end: tps }
    }

    fn rate_at(&self, at_ms: u64) -> Option<f64> {
        let (start, end) = (self.start_secs * 1_000, self.end_secs * 1_000);
        if at_ms < start || at_ms >= end {
            return None;
        }
        let f = (at_ms - start) as f64 / (end - start) as f64;
        Some(self.tps_start + (self.tps_end - self.tps_start) * f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TenantLoad {
    pub tenant: String,
    pub segments: Vec<LoadSegment>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub label: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub duration_secs: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub platform: PlatformConfig,
    pub loads: Vec<TenantLoad>,
}

fn default_seed() -> u64 {
    42
}

fn default_batch_size() -> usize {
    20
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| ExperimentError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.platform.validate()?;
        if self.duration_secs == 0 {
            return Err(ExperimentError::Invalid("duration_secs must be positive".into()));
        }
        if self.batch_size == 0 || self.batch_size > self.platform.gateway.batch_max {
            return Err(ExperimentError::Invalid(format!(
                "batch_size must be in 1..={}",
                self.platform.gateway.batch_max
            )));
        }
        for (i, load) in self.loads.iter().enumerate() {
            if !self.platform.tenants.iter().any(|t| t.name == load.tenant) {
                return Err(ExperimentError::Invalid(format!(
                    "load targets unknown tenant {}",
                    load.tenant
                )));
            }
            if self.loads[..i].iter().any(|l| l.tenant == load.tenant) {
                return Err(ExperimentError::Invalid(format!(
                    "two load profiles for tenant {}",
                    load.tenant
                )));
            }
            let mut prev_end = 0;
            for seg in &load.segments {
                if seg.start_secs >= seg.end_secs {
                    return Err(ExperimentError::Invalid("segment start must precede end".into()));
                }
                if seg.start_secs < prev_end {
                    return Err(ExperimentError::Invalid("segments must not overlap".into()));
                }
                if seg.end_secs > self.duration_secs {
                    return Err(ExperimentError::Invalid("segment extends past duration".into()));
                }
                if seg.tps_start < 0.0 || seg.tps_end < 0.0 {
                    return Err(ExperimentError::Invalid("negative load rate".into()));
                }
                prev_end = seg.end_secs;
            }
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Paper,
}

impl Scale {
    pub fn platform(&self, tenant_count: usize) -> PlatformConfig {
        match self {
            Scale::Desk => PlatformConfig::desk(tenant_count),
            Scale::Paper => PlatformConfig::paper(tenant_count),
        }
    }

    /// floor(gas_limit / batch_gas) / inter_block_time for the profile.
    pub fn cap_tps(&self) -> f64 {
        match self {
            Scale::Desk => 7.0,
            Scale::Paper => 15.2,
        }
    }
}

/// Standard experiment profiles. Times scale with the profile: desk runs
/// load for 10 virtual minutes, full-scale runs use the hour-long shape.
pub fn test_profile(test: u8, scale: Scale, seed: u64) -> Result<ExperimentConfig, ExperimentError> {
    let cap = scale.cap_tps();
    let (load_secs, tail_secs) = match (test, scale) {
        (1, Scale::Desk) => (600, 0),
        (1, Scale::Paper) => (3_600, 0),
        (2, Scale::Desk) => (600, 120),
        (2, Scale::Paper) => (3_600, 300),
        (3 | 4, Scale::Desk) => (600, 360),
        (3 | 4, Scale::Paper) => (3_540, 1_860),
        _ => return Err(ExperimentError::Invalid(format!("no such test: {test}"))),
    };
    let segment = match test {
        1 => LoadSegment::steady(0, load_secs, 0.9 * cap),
        // boundary load: start just above the cap and ramp down onto it
        2 => LoadSegment { start_secs: 0, end_secs: load_secs, tps_start: 1.184 * cap, tps_end: cap },
        3 | 4 => LoadSegment::steady(0, load_secs, 1.45 * cap),
        _ => unreachable!(),
    };
    let tenant_count = if test == 4 { 3 } else { 1 };
    let platform = scale.platform(tenant_count);
    let loads = platform
        .tenants
        .iter()
        .map(|t| TenantLoad { tenant: t.name.clone(), segments: vec![segment] })
        .collect();
    let scale_name = match scale {
        Scale::Desk => "desk",
        Scale::Paper => "paper",
    };
    Ok(ExperimentConfig {
        label: format!("test{test}-{scale_name}"),
        seed,
        duration_secs: load_secs + tail_secs,
        batch_size: 20,
        platform,
        loads,
    })
}

/// Jittered arrival generator for one tenant.
struct Generator {
    tenant: String,
    tenant_index: usize,
    segments: Vec<LoadSegment>,
    rng: SimRng,
    next_at: Option<SimTime>,
    seq: u64,
}

impl Generator {
    fn new(load: &TenantLoad, seed: u64, tenant_index: usize) -> Self {
        let mut generator = Generator {
            tenant: load.tenant.clone(),
            tenant_index,
            segments: load.segments.clone(),
            rng: SimRng::derive(seed, &load.tenant),
            next_at: None,
            seq: 0,
        };
        generator.schedule_after(0);
        generator
    }

    fn rate_at(&self, at_ms: u64) -> f64 {
        self.segments.iter().find_map(|s| s.rate_at(at_ms)).unwrap_or(0.0)
    }

    /// Next arrival strictly after `from_ms`; gaps are 1000/rate scaled by
    /// jitter drawn from U[0.75, 1.25).
    fn schedule_after(&mut self, from_ms: u64) {
        let mut cursor = from_ms;
        loop {
            let rate = self.rate_at(cursor);
            if rate > 1e-9 {
                let jitter = self.rng.uniform(0.75, 1.25);
                let gap = ((1_000.0 / rate) * jitter).round().max(1.0) as u64;
                let candidate = cursor + gap;
                if self.rate_at(candidate) > 1e-9 {
                    self.next_at = Some(SimTime::from_millis(candidate));
                    return;
                }
                // fell into a gap between segments; restart from the next one
                cursor = candidate;
            }
            match self
                .segments
                .iter()
                .map(|s| s.start_secs * 1_000)
                .filter(|&start| start > cursor)
                .min()
            {
                Some(start) => cursor = start,
                None => {
                    self.next_at = None;
                    return;
                }
            }
        }
    }

    fn make_batch(&mut self, batch_size: usize) -> Vec<Vec<u8>> {
        (0..batch_size)
            .map(|_| {
                let id = format!("{}-{:08x}", self.tenant, self.seq);
                self.seq += 1;
                id.into_bytes()
            })
            .collect()
    }
}

struct Collector {
    minutes: Vec<MinuteRow>,
    tenant_minutes: Vec<Vec<MinuteRow>>,
    latencies: Vec<Vec<(u64, u64)>>,
    blocks: Vec<BlockStat>,
    audits: Vec<(usize, anchorage_core::audit::AuditReport)>,
}

impl Collector {
    fn new(tenant_count: usize, minute_count: usize) -> Self {
        let blank: Vec<MinuteRow> = (0..minute_count)
            .map(|i| MinuteRow { minute: i as u32 + 1, ..MinuteRow::default() })
            .collect();
        Collector {
            minutes: blank.clone(),
            tenant_minutes: vec![blank; tenant_count],
            latencies: vec![Vec::new(); tenant_count],
            blocks: Vec::new(),
            audits: Vec::new(),
        }
    }

    fn minute_index(&self, at_ms: u64) -> usize {
        let index = if at_ms == 0 { 0 } else { (at_ms - 1) / 60_000 } as usize;
        index.min(self.minutes.len() - 1)
    }

    fn note_sent(&mut self, tenant: usize, at: SimTime) {
        let index = self.minute_index(at.as_millis());
        self.minutes[index].sent += 1;
        self.tenant_minutes[tenant][index].sent += 1;
    }

    fn note_error(&mut self, tenant: usize, at: SimTime) {
        let index = self.minute_index(at.as_millis());
        self.minutes[index].errors += 1;
        self.tenant_minutes[tenant][index].errors += 1;
    }

    fn absorb(&mut self, event: PlatformEvent<'_>) {
        match event {
            PlatformEvent::TenantBlock { tenant_index, block } => {
                let at_ms = block.header.timestamp.as_millis();
                let minute = self.minute_index(at_ms);
                let mut app = 0;
                for tx in &block.transactions {
                    if matches!(
                        tx.payload,
                        TxPayload::RegisterUniqueIds { .. } | TxPayload::RecordScan { .. }
                    ) {
                        app += 1;
                        self.minutes[minute].included += 1;
                        self.tenant_minutes[tenant_index][minute].included += 1;
                        let latency = block.header.timestamp - tx.submitted_at;
                        self.latencies[tenant_index]
                            .push((tx.submitted_at.as_millis(), latency.as_millis()));
                    }
                }
                self.blocks.push(BlockStat {
                    tenant: Some(tenant_index),
                    height: block.header.height,
                    at_ms,
                    tx_count: block.transactions.len(),
                    app_tx_count: app,
                });
            }
            PlatformEvent::PublicBlock { block } => {
                self.blocks.push(BlockStat {
                    tenant: None,
                    height: block.header.height,
                    at_ms: block.header.timestamp.as_millis(),
                    tx_count: block.transactions.len(),
                    app_tx_count: 0,
                });
            }
            PlatformEvent::AuditCompleted { tenant_index, report } => {
                self.audits.push((tenant_index, report.clone()));
            }
        }
    }
}

/// Runs the experiment to completion on the virtual clock.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsSeries, ExperimentError> {
    config.validate()?;
    let mut platform = Platform::from_config(config.platform.clone())?;
    let tenant_names: Vec<String> = platform.tenants.iter().map(|t| t.name.clone()).collect();
    let duration = SimTime::from_secs(config.duration_secs);
    let minute_count = config.duration_secs.div_ceil(60) as usize;

    let mut collector = Collector::new(tenant_names.len(), minute_count);
    let mut generators: Vec<Generator> = config
        .loads
        .iter()
        .map(|load| {
            let index = tenant_names.iter().position(|n| n == &load.tenant).unwrap();
            Generator::new(load, config.seed, index)
        })
        .collect();

    loop {
        let due = generators.iter().filter_map(|g| g.next_at).min();
        let Some(at) = due else { break };
        if at > duration {
            break;
        }
        platform.advance_to(at, |event| collector.absorb(event));
        for generator in &mut generators {
            if generator.next_at != Some(at) {
                continue;
            }
            let ids = generator.make_batch(config.batch_size);
            collector.note_sent(generator.tenant_index, at);
            if platform
                .gateway
                .create_unique_ids(PLATFORM_WRITER_TOKEN, &generator.tenant, ids, at)
                .is_err()
            {
                collector.note_error(generator.tenant_index, at);
            }
            generator.schedule_after(at.as_millis());
        }
    }
    platform.advance_to(duration, |event| collector.absorb(event));

    let tenant_section = &config.platform.tenants[0];
    Ok(MetricsSeries {
        label: config.label.clone(),
        seed: config.seed,
        duration_secs: config.duration_secs,
        batch_size: config.batch_size,
        tenant_names,
        minutes: collector.minutes,
        tenant_minutes: collector.tenant_minutes,
        latencies: collector.latencies,
        blocks: collector.blocks,
        rounds: platform.engine.round_history().to_vec(),
        audits: collector.audits,
        batches_per_block: tenant_section.gas_limit / config.platform.gateway.gas.batch_registration,
        tenant_block_ms: tenant_section.inter_block_ms,
    })
}
