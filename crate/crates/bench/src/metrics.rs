//! Measurement output of a run: per-minute counters, block stats, anchor
//! round records, and the CSV/JSONL export formats.
//!
//! A minute bucket covers `(start, start+60s]`; the row for minute `m`
//! holds everything that happened after `(m-1) * 60s` up to and including
//! `m * 60s`. Throughput is reported in transactions per second, where one
//! transaction is one batch registration (or one scan), not one unique id.

use std::fmt;
use std::io::Write;
use std::path::Path;

use anchorage_core::anchor::{RoundOutcome, RoundReport};
use anchorage_core::audit::AuditReport;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("bad csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw counts for one elapsed minute.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinuteRow {
    pub minute: u32,
    pub sent: u64,
    pub included: u64,
    pub errors: u64,
}

impl MinuteRow {
    pub fn sent_tps(&self) -> f64 {
        self.sent as f64 / 60.0
    }

    pub fn included_tps(&self) -> f64 {
        self.included as f64 / 60.0
    }
}

/// One produced block as seen by the run observer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockStat {
    /// Tenant index, or `None` for the public chain.
    pub tenant: Option<usize>,
    pub height: u64,
    pub at_ms: u64,
    pub tx_count: usize,
    /// Gateway transactions only (registrations and scans).
    pub app_tx_count: usize,
}

/// Everything measured during one experiment run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSeries {
    pub label: String,
    pub seed: u64,
    pub duration_secs: u64,
    pub batch_size: usize,
    pub tenant_names: Vec<String>,
    /// Aggregate counters, one row per elapsed minute.
    pub minutes: Vec<MinuteRow>,
    /// Same bucketing, one series per tenant.
    pub tenant_minutes: Vec<Vec<MinuteRow>>,
    /// Per tenant: (submitted_at_ms, latency_ms) of every included gateway
    /// transaction, in inclusion order.
    pub latencies: Vec<Vec<(u64, u64)>>,
    pub blocks: Vec<BlockStat>,
    pub rounds: Vec<RoundReport>,
    pub audits: Vec<(usize, AuditReport)>,
    /// How many batch registrations fit into one tenant block.
    pub batches_per_block: u64,
    pub tenant_block_ms: u64,
}

impl MetricsSeries {
    pub fn total_sent(&self) -> u64 {
        self.minutes.iter().map(|r| r.sent).sum()
    }

    pub fn total_included(&self) -> u64 {
        self.minutes.iter().map(|r| r.included).sum()
    }

    pub fn total_errors(&self) -> u64 {
        self.minutes.iter().map(|r| r.errors).sum()
    }

    /// sent - included - errored; what is still queued when the run ends.
    pub fn final_backlog(&self) -> u64 {
        self.total_sent() - self.total_included() - self.total_errors()
    }

    /// The highest throughput one tenant chain can sustain.
    pub fn tenant_cap_tps(&self) -> f64 {
        self.batches_per_block as f64 * 1000.0 / self.tenant_block_ms as f64
    }

    fn backlog_before(rows: &[MinuteRow], index: usize) -> u64 {
        rows[..index]
            .iter()
            .fold(0i64, |acc, r| acc + r.sent as i64 - r.included as i64 - r.errors as i64)
            .max(0) as u64
    }

    /// Minutes where inclusion was capacity-bound throughout: either a full
    /// minute of work was already queued at the start, or the queue was
    /// nonempty and arrivals alone exceeded what the chain can include.
    pub fn saturated_minutes(&self, rows: &[MinuteRow], per_block: u64) -> Vec<usize> {
        let blocks_per_minute = (60_000 / self.tenant_block_ms).max(1);
        let cap_minute = per_block * blocks_per_minute;
        (0..rows.len())
            .filter(|&i| {
                let backlog = Self::backlog_before(rows, i);
                backlog >= cap_minute || (backlog >= per_block && rows[i].sent >= cap_minute)
            })
            .collect()
    }

    /// Median included tps over the saturated window, if any.
    pub fn plateau_tps(&self) -> Option<f64> {
        let per_block = self.batches_per_block * self.tenant_names.len() as u64;
        let saturated = self.saturated_minutes(&self.minutes, per_block);
        median(saturated.iter().map(|&i| self.minutes[i].included_tps()))
    }

    /// Median included tps for one tenant over its own saturated window.
    pub fn tenant_plateau_tps(&self, tenant: usize) -> Option<f64> {
        let rows = &self.tenant_minutes[tenant];
        let saturated = self.saturated_minutes(rows, self.batches_per_block);
        median(saturated.iter().map(|&i| rows[i].included_tps()))
    }

    pub fn csv_rows(&self) -> Vec<CsvRow> {
        self.minutes
            .iter()
            .map(|r| CsvRow {
                minute: r.minute,
                sent_tps: r.sent_tps(),
                included_tps: r.included_tps(),
                errors: r.errors,
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        rows_to_csv(&self.csv_rows())
    }

    pub fn tenant_csv(&self, tenant: usize) -> String {
        let rows: Vec<CsvRow> = self.tenant_minutes[tenant]
            .iter()
            .map(|r| CsvRow {
                minute: r.minute,
                sent_tps: r.sent_tps(),
                included_tps: r.included_tps(),
                errors: r.errors,
            })
            .collect();
        rows_to_csv(&rows)
    }
}

fn median(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut values: Vec<f64> = values.collect();
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 { values[mid] } else { (values[mid - 1] + values[mid]) / 2.0 })
}

/// One exported CSV row. tps values round-trip exactly through the file
/// because they are printed with the shortest representation that parses
/// back to the same f64.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CsvRow {
    pub minute: u32,
    pub sent_tps: f64,
    pub included_tps: f64,
    pub errors: u64,
}

pub const CSV_HEADER: &str = "minute,sent_tps,included_tps,errors";

fn rows_to_csv(rows: &[CsvRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.minute, row.sent_tps, row.included_tps, row.errors
        ));
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>, MetricsError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == CSV_HEADER => {}
        other => return Err(MetricsError::Csv(format!("bad header: {other:?}"))),
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(MetricsError::Csv(format!("line {}: expected 4 fields", n + 2)));
        }
        let parse = |what: &str, s: &str| -> Result<f64, MetricsError> {
            s.parse().map_err(|_| MetricsError::Csv(format!("line {}: bad {what} {s:?}", n + 2)))
        };
        rows.push(CsvRow {
            minute: fields[0]
                .parse()
                .map_err(|_| MetricsError::Csv(format!("line {}: bad minute", n + 2)))?,
            sent_tps: parse("sent_tps", fields[1])?,
            included_tps: parse("included_tps", fields[2])?,
            errors: fields[3]
                .parse()
                .map_err(|_| MetricsError::Csv(format!("line {}: bad errors", n + 2)))?,
        });
    }
    Ok(rows)
}

pub fn export_csv(series: &MetricsSeries, path: &Path) -> Result<(), MetricsError> {
    Ok(std::fs::write(path, series.to_csv())?)
}

/// Line-delimited JSON, one anchor round record per line.
pub fn export_rounds(rounds: &[RoundReport], path: &Path) -> Result<(), MetricsError> {
    let mut file = std::fs::File::create(path)?;
    for round in rounds {
        serde_json::to_writer(&mut file, round).map_err(|e| MetricsError::Csv(e.to_string()))?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn parse_rounds(text: &str) -> Result<Vec<RoundReport>, MetricsError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| MetricsError::Csv(e.to_string())))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub label: String,
    pub total_sent: u64,
    pub total_included: u64,
    pub total_errors: u64,
    pub final_backlog: u64,
    pub plateau_tps: Option<f64>,
    /// plateau x batch size: unique ids created per second at saturation.
    pub id_rate_per_sec: Option<f64>,
    pub rounds_started: usize,
    pub rounds_succeeded: usize,
    pub rounds_failed: usize,
    pub ticks_skipped: usize,
    pub round_ms_min: Option<u64>,
    pub round_ms_max: Option<u64>,
    pub audits_pass: usize,
    pub audits_fail: usize,
}

pub fn summarize(series: &MetricsSeries) -> Summary {
    let durations: Vec<u64> = series
        .rounds
        .iter()
        .filter(|r| !r.is_skip())
        .map(|r| r.duration().as_millis())
        .collect();
    let plateau = series.plateau_tps();
    Summary {
        label: series.label.clone(),
        total_sent: series.total_sent(),
        total_included: series.total_included(),
        total_errors: series.total_errors(),
        final_backlog: series.final_backlog(),
        plateau_tps: plateau,
        id_rate_per_sec: plateau.map(|p| p * series.batch_size as f64),
        rounds_started: series.rounds.iter().filter(|r| !r.is_skip()).count(),
        rounds_succeeded: series.rounds.iter().filter(|r| r.is_success()).count(),
        rounds_failed: series
            .rounds
            .iter()
            .filter(|r| matches!(r.outcome, RoundOutcome::Failed { .. }))
            .count(),
        ticks_skipped: series.rounds.iter().filter(|r| r.is_skip()).count(),
        round_ms_min: durations.iter().min().copied(),
        round_ms_max: durations.iter().max().copied(),
        audits_pass: series.audits.iter().filter(|(_, r)| r.passed()).count(),
        audits_fail: series.audits.iter().filter(|(_, r)| !r.passed()).count(),
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "run:       {}", self.label)?;
        writeln!(
            f,
            "traffic:   sent={} included={} errors={} backlog={}",
            self.total_sent, self.total_included, self.total_errors, self.final_backlog
        )?;
        match self.plateau_tps {
            Some(p) => writeln!(
                f,
                "plateau:   {p:.3} tps ({:.1} ids/s)",
                self.id_rate_per_sec.unwrap_or(0.0)
            )?,
            None => writeln!(f, "plateau:   never saturated")?,
        }
        writeln!(
            f,
            "anchoring: rounds={} ok={} failed={} skipped_ticks={}",
            self.rounds_started, self.rounds_succeeded, self.rounds_failed, self.ticks_skipped
        )?;
        if let (Some(lo), Some(hi)) = (self.round_ms_min, self.round_ms_max) {
            writeln!(f, "round ms:  min={lo} max={hi}")?;
        }
        write!(f, "audits:    pass={} fail={}", self.audits_pass, self.audits_fail)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series_with(minutes: Vec<MinuteRow>) -> MetricsSeries {
        MetricsSeries {
            label: "t".into(),
            seed: 1,
            duration_secs: minutes.len() as u64 * 60,
            batch_size: 20,
            tenant_names: vec!["tenant-a".into()],
            tenant_minutes: vec![minutes.clone()],
            latencies: vec![Vec::new()],
            minutes,
            blocks: Vec::new(),
            rounds: Vec::new(),
            audits: Vec::new(),
            batches_per_block: 7,
            tenant_block_ms: 1_000,
        }
    }

    fn row(minute: u32, sent: u64, included: u64) -> MinuteRow {
        MinuteRow { minute, sent, included, errors: 0 }
    }

    #[test]
    fn csv_round_trips_exactly() {
        let series = series_with(vec![row(1, 540, 420), row(2, 610, 420), row(3, 0, 330)]);
        let text = series.to_csv();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        let parsed = parse_csv(&text).unwrap();
        assert_eq!(parsed, series.csv_rows());
        // re-export is byte identical
        assert_eq!(series.to_csv(), text);
    }

    #[test]
    fn bad_csv_is_rejected() {
        assert!(parse_csv("nope\n1,2,3,4\n").is_err());
        assert!(parse_csv("minute,sent_tps,included_tps,errors\n1,2,3\n").is_err());
        assert!(parse_csv("minute,sent_tps,included_tps,errors\n1,x,3,4\n").is_err());
    }

    #[test]
    fn plateau_is_the_median_over_saturated_minutes() {
        // minute 1 starts empty, minutes 2..4 start with a backlog
        let series = series_with(vec![
            row(1, 600, 420),
            row(2, 600, 420),
            row(3, 600, 426),
            row(4, 0, 420),
        ]);
        assert_eq!(series.saturated_minutes(&series.minutes, 7), vec![1, 2, 3]);
        assert_eq!(series.plateau_tps(), Some(7.0));
        assert_eq!(series.tenant_cap_tps(), 7.0);
    }

    #[test]
    fn backlog_never_goes_negative_in_the_accounting() {
        let series = series_with(vec![row(1, 10, 10), row(2, 5, 5)]);
        assert_eq!(series.final_backlog(), 0);
        assert!(series.plateau_tps().is_none());
    }
}
