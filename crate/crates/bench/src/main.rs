use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anchorage_bench::experiment::{run_experiment, test_profile, ExperimentConfig, Scale};
use anchorage_bench::metrics::{
    export_csv, export_rounds, parse_csv, parse_rounds, summarize, MetricsSeries, MinuteRow,
};
use anchorage_core::audit::audit_tenant;
use anchorage_core::config::{PlatformConfig, PLATFORM_WRITER_TOKEN};
use anchorage_core::httpd;
use anchorage_core::platform::Platform;
use anchorage_core::time::SimDuration;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bench", about = "Anchoring platform load tests and tooling", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ScaleArg {
    /// 1s tenant blocks, 8M gas: seconds of wall time
    Desk,
    /// 5s tenant blocks, 80M gas: the full-scale profile
    Paper,
}

impl From<ScaleArg> for Scale {
    fn from(value: ScaleArg) -> Scale {
        match value {
            ScaleArg::Desk => Scale::Desk,
            ScaleArg::Paper => Scale::Paper,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a load test and print (optionally export) its metrics
    Run {
        /// Standard profile 1..=4
        #[arg(long, conflicts_with = "config")]
        test: Option<u8>,
        #[arg(long, value_enum, default_value_t = ScaleArg::Desk)]
        scale: ScaleArg,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Directory for metrics.csv, rounds.jsonl, summary.json
        #[arg(long)]
        out: Option<PathBuf>,
        /// Full experiment config (TOML); replaces --test/--scale
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Recompute the summary from an exported run directory
    Summarize {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Boot a small platform, anchor once, and audit every tenant
    Audit {
        #[arg(long, default_value_t = 1)]
        tenants: usize,
    },
    /// Anchor engine operations
    Anchor {
        #[command(subcommand)]
        command: AnchorCommand,
    },
    /// Serve the HTTP API from a platform advanced in wall time
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, default_value_t = 1)]
        tenants: usize,
    },
}

#[derive(Subcommand)]
enum AnchorCommand {
    /// Run one anchor round to completion and print its record
    RunOnce {
        #[arg(long, default_value_t = 1)]
        tenants: usize,
    },
}

/// Die quietly when stdout is a closed pipe (`bench run ... | head`)
/// instead of panicking on the failed print.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() {
    reset_sigpipe();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { test, scale, seed, out, config } => {
            cmd_run(test, scale.into(), seed, out.as_deref(), config.as_deref())
        }
        Command::Summarize { dir } => cmd_summarize(&dir),
        Command::Audit { tenants } => cmd_audit(tenants),
        Command::Anchor { command: AnchorCommand::RunOnce { tenants } } => cmd_run_once(tenants),
        Command::Serve { addr, tenants } => cmd_serve(&addr, tenants),
    };
    if let Err(message) = result {
        eprintln!("error: {message}");
        std::process::exit(1);
    }
}

fn cmd_run(
    test: Option<u8>,
    scale: Scale,
    seed: u64,
    out: Option<&Path>,
    config_path: Option<&Path>,
) -> Result<(), String> {
    let config = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
            ExperimentConfig::from_toml(&text).map_err(|e| e.to_string())?
        }
        None => test_profile(test.unwrap_or(1), scale, seed).map_err(|e| e.to_string())?,
    };
    eprintln!("running {} ({}s virtual)", config.label, config.duration_secs);
    let series = run_experiment(&config).map_err(|e| e.to_string())?;
    if let Some(dir) = out {
        export_run(&config, &series, dir).map_err(|e| e.to_string())?;
        eprintln!("exported to {}", dir.display());
    }
    println!("{}", summarize(&series));
    Ok(())
}

fn export_run(
    config: &ExperimentConfig,
    series: &MetricsSeries,
    dir: &Path,
) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("config.toml"), config.to_toml()).map_err(|e| e.to_string())?;
    export_csv(series, &dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    if series.tenant_names.len() > 1 {
        for (i, name) in series.tenant_names.iter().enumerate() {
            std::fs::write(dir.join(format!("metrics.{name}.csv")), series.tenant_csv(i))
                .map_err(|e| e.to_string())?;
        }
    }
    export_rounds(&series.rounds, &dir.join("rounds.jsonl")).map_err(|e| e.to_string())?;
    let audits =
        series.audits.iter().map(|a| serde_json::to_string(a).unwrap()).collect::<Vec<_>>();
    std::fs::write(dir.join("audits.jsonl"), audits.join("\n") + "\n")
        .map_err(|e| e.to_string())?;
    let summary = serde_json::to_string_pretty(&summarize(series)).unwrap();
    std::fs::write(dir.join("summary.json"), summary).map_err(|e| e.to_string())
}

/// Rebuilds enough of the series from an export to recompute its summary.
fn cmd_summarize(dir: &Path) -> Result<(), String> {
    let read = |name: &str| {
        std::fs::read_to_string(dir.join(name)).map_err(|e| format!("{name}: {e}"))
    };
    let config = ExperimentConfig::from_toml(&read("config.toml")?).map_err(|e| e.to_string())?;
    let rows = parse_csv(&read("metrics.csv")?).map_err(|e| e.to_string())?;
    let rounds = parse_rounds(&read("rounds.jsonl")?).map_err(|e| e.to_string())?;
    let audits: Vec<(usize, anchorage_core::audit::AuditReport)> = read("audits.jsonl")?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;

    let minutes: Vec<MinuteRow> = rows
        .iter()
        .map(|r| MinuteRow {
            minute: r.minute,
            sent: (r.sent_tps * 60.0).round() as u64,
            included: (r.included_tps * 60.0).round() as u64,
            errors: r.errors,
        })
        .collect();
    let tenant_names: Vec<String> =
        config.platform.tenants.iter().map(|t| t.name.clone()).collect();
    let tenant_minutes: Vec<Vec<MinuteRow>> = tenant_names
        .iter()
        .map(|name| {
            let path = dir.join(format!("metrics.{name}.csv"));
            if !path.exists() {
                return Ok(minutes.clone());
            }
            let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
            Ok(parse_csv(&text)
                .map_err(|e| e.to_string())?
                .iter()
                .map(|r| MinuteRow {
                    minute: r.minute,
                    sent: (r.sent_tps * 60.0).round() as u64,
                    included: (r.included_tps * 60.0).round() as u64,
                    errors: r.errors,
                })
                .collect())
        })
        .collect::<Result<_, String>>()?;

    let series = MetricsSeries {
        label: config.label.clone(),
        seed: config.seed,
        duration_secs: config.duration_secs,
        batch_size: config.batch_size,
        tenant_names,
        minutes,
        tenant_minutes,
        latencies: Vec::new(),
        blocks: Vec::new(),
        rounds,
        audits,
        batches_per_block: config.platform.tenants[0].gas_limit
            / config.platform.gateway.gas.batch_registration,
        tenant_block_ms: config.platform.tenants[0].inter_block_ms,
    };
    println!("{}", summarize(&series));
    Ok(())
}

/// Small end-to-end demo: traffic, one round, one audit per tenant.
fn seeded_platform(tenant_count: usize) -> Result<Platform, String> {
    let mut config = PlatformConfig::desk(tenant_count);
    config.anchor.enabled = false;
    config.audit.enabled = false;
    let mut platform = Platform::from_config(config).map_err(|e| e.to_string())?;
    for name in platform.tenants.iter().map(|t| t.name.clone()).collect::<Vec<_>>() {
        let now = platform.now();
        let ids = (0..5).map(|i| format!("{name}-seed-{i}").into_bytes()).collect();
        platform
            .gateway
            .create_unique_ids(PLATFORM_WRITER_TOKEN, &name, ids, now)
            .map_err(|e| e.to_string())?;
    }
    let target = platform.now() + SimDuration::from_secs(2);
    platform.advance_quiet(target);
    Ok(platform)
}

fn cmd_audit(tenant_count: usize) -> Result<(), String> {
    let mut platform = seeded_platform(tenant_count)?;
    platform.run_round_to_completion().ok_or("anchor round did not produce a record")?;
    let mut all_pass = true;
    for node in &platform.tenants {
        let report = audit_tenant(&node.chain, &platform.public).map_err(|e| e.to_string())?;
        all_pass &= report.passed();
        println!("{}", serde_json::to_string_pretty(&report).unwrap());
    }
    if all_pass {
        Ok(())
    } else {
        Err("audit failed".into())
    }
}

fn cmd_run_once(tenant_count: usize) -> Result<(), String> {
    let mut platform = seeded_platform(tenant_count)?;
    let report =
        platform.run_round_to_completion().ok_or("anchor round did not produce a record")?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    if report.is_success() {
        Ok(())
    } else {
        Err("round did not succeed".into())
    }
}

fn cmd_serve(addr: &str, tenant_count: usize) -> Result<(), String> {
    let platform = Platform::from_config(PlatformConfig::desk(tenant_count))
        .map_err(|e| e.to_string())?;
    let platform = Arc::new(Mutex::new(platform));
    let server = httpd::serve(Arc::clone(&platform), addr).map_err(|e| e.to_string())?;
    println!("listening on http://{}", server.addr());
    println!("  POST /tenants/{{tenant}}/unique-ids   (Bearer {PLATFORM_WRITER_TOKEN})");
    println!("  POST /tenants/{{tenant}}/scans");
    println!("  GET  /tenants/{{tenant}}/history/{{id}}");
    println!("  GET  /tenants/{{tenant}}/audit");
    println!("  GET  /anchors/latest");
    println!("  GET  /status");

    // the virtual clock tracks wall time while serving
    let started = std::time::Instant::now();
    loop {
        std::thread::sleep(std::time::Duration::from_millis(100));
        let elapsed = started.elapsed().as_millis() as u64;
        let mut platform = platform.lock().unwrap();
        let target = anchorage_core::time::SimTime::from_millis(elapsed);
        platform.advance_quiet(target);
    }
}
