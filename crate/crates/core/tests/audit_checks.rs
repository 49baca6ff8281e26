use anchorage_core::audit::{audit_tenant, AuditError, LeafCheck, ProofCheck, RootCheck, Verdict};
use anchorage_core::chain::{uid_key, FailoverMode, TxPayload, TRIE_LATEST_KEY};
use anchorage_core::config::{PlatformConfig, PLATFORM_WRITER_TOKEN};
use anchorage_core::merkle::LeafRecord;
use anchorage_core::platform::{Platform, PlatformEvent};
use anchorage_core::time::{SimDuration, SimTime};

fn manual_platform(tenant_count: usize) -> Platform {
    let mut config = PlatformConfig::desk(tenant_count);
    config.anchor.enabled = false;
    config.audit.enabled = false;
    Platform::from_config(config).unwrap()
}

fn register(platform: &mut Platform, tenant: &str, id: &str) {
    let now = platform.now();
    platform
        .gateway
        .create_unique_ids(PLATFORM_WRITER_TOKEN, tenant, vec![id.as_bytes().to_vec()], now)
        .unwrap();
}

fn secs(s: u64) -> SimTime {
    SimTime::from_secs(s)
}

#[test]
fn continuous_audits_pass_and_cover_each_round_once() {
    let mut platform = Platform::from_config(PlatformConfig::desk(2)).unwrap();
    register(&mut platform, "tenant-a", "pallet-1");
    register(&mut platform, "tenant-b", "pallet-2");
    let mut seen: Vec<(usize, u64, Verdict)> = Vec::new();
    platform.advance_to(secs(220), |event| {
        if let PlatformEvent::AuditCompleted { tenant_index, report } = event {
            seen.push((tenant_index, report.round_id, report.verdict));
        }
    });

    assert!(seen.iter().all(|(_, _, verdict)| *verdict == Verdict::Pass), "{seen:?}");
    for tenant in 0..2 {
        let rounds: Vec<u64> =
            seen.iter().filter(|(t, _, _)| *t == tenant).map(|(_, r, _)| *r).collect();
        assert!(rounds.len() >= 2, "tenant {tenant} audited {rounds:?}");
        let mut deduped = rounds.clone();
        deduped.dedup();
        assert_eq!(rounds, deduped, "every audited round appears exactly once");
        assert!(rounds.windows(2).all(|w| w[0] < w[1]));
    }
    // the observer stream and the auditors' own records agree
    for (index, auditor) in platform.auditors.iter().enumerate() {
        assert_eq!(
            auditor.reports().len(),
            seen.iter().filter(|(t, _, _)| *t == index).count()
        );
    }
}

#[test]
fn unreachable_nodes_surface_as_errors_not_verdicts() {
    let mut platform = manual_platform(1);
    register(&mut platform, "tenant-a", "x");
    platform.advance_quiet(secs(2));
    platform.run_round_to_completion().unwrap();

    let tenant = platform.tenants[0].chain.clone();
    let public = platform.public.clone();
    assert_eq!(audit_tenant(&tenant, &public).unwrap().verdict, Verdict::Pass);

    tenant.fail_over(FailoverMode::Unreachable);
    assert_eq!(audit_tenant(&tenant, &public).unwrap_err(), AuditError::NodeUnavailable);
    tenant.fail_over(FailoverMode::Restored);

    public.fail_over(FailoverMode::Unreachable);
    assert_eq!(audit_tenant(&tenant, &public).unwrap_err(), AuditError::NodeUnavailable);
    public.fail_over(FailoverMode::Restored);
    assert_eq!(audit_tenant(&tenant, &public).unwrap().verdict, Verdict::Pass);
}

#[test]
fn continuous_auditor_retries_after_an_outage_without_duplicates() {
    let mut platform = Platform::from_config(PlatformConfig::desk(1)).unwrap();
    register(&mut platform, "tenant-a", "x");
    platform.advance_quiet(secs(100));
    let after_first = platform.auditors[0].reports().len();
    assert!(after_first >= 1);

    platform.tenants[0].chain.fail_over(FailoverMode::Unreachable);
    platform.advance_quiet(secs(160));
    assert_eq!(platform.auditors[0].reports().len(), after_first, "no reports while down");

    platform.tenants[0].chain.fail_over(FailoverMode::Restored);
    platform.advance_quiet(secs(250));
    let reports = platform.auditors[0].reports();
    assert!(reports.len() > after_first, "resumed after restore");
    let ids: Vec<u64> = reports.iter().map(|r| r.round_id).collect();
    assert!(ids.windows(2).all(|w| w[0] < w[1]), "{ids:?}");
    assert!(reports.iter().all(|r| r.passed()));
}

#[test]
fn tenant_missing_a_query_still_passes_its_next_audit() {
    let mut platform = manual_platform(3);
    for name in ["tenant-a", "tenant-b", "tenant-c"] {
        register(&mut platform, name, &format!("{name}-item"));
    }
    platform.advance_quiet(secs(2));
    assert!(platform.run_round_to_completion().unwrap().is_success());
    let b_id = platform.tenants[1].chain.chain_id();
    let stale_leaf = platform.engine.committed_tree().get(b_id.as_bytes()).unwrap().to_vec();

    register(&mut platform, "tenant-b", "late-item");
    platform.advance_quiet(platform.now() + SimDuration::from_secs(5));

    // tenant-b misses the query but is back before submissions go out
    platform.tenants[1].chain.fail_over(FailoverMode::Unreachable);
    let tick_at = platform.now();
    platform.engine.schedule_tick(tick_at);
    platform.advance_quiet(tick_at + SimDuration::from_secs(1));
    platform.tenants[1].chain.fail_over(FailoverMode::Restored);
    while platform.engine.in_flight().is_some() {
        let next = platform.now() + SimDuration::from_secs(5);
        platform.advance_quiet(next);
    }

    let report = platform.engine.round_history().last().unwrap().clone();
    assert!(report.is_success());
    assert_eq!(
        report.per_tenant[&b_id],
        anchorage_core::anchor::TenantRoundStatus::TimedOut
    );
    // the store went out to all three tenants, including the one that
    // missed the query
    assert!(report.tenant_store_txs.values().all(|s| s.is_on_chain()));
    assert_eq!(
        platform.engine.committed_tree().get(b_id.as_bytes()).unwrap(),
        stale_leaf.as_slice(),
        "missed query leaves the previous leaf in place"
    );

    // the stale leaf still audits cleanly: pinned replay, valid proof
    let leaf = LeafRecord::decode(&stale_leaf).unwrap();
    assert!(leaf.block_number < platform.tenants[1].chain.height());
    for node in &platform.tenants {
        let report = audit_tenant(&node.chain, &platform.public).unwrap();
        assert_eq!(report.verdict, Verdict::Pass, "{}: {report:?}", node.name);
    }
}

#[test]
fn rewritten_block_history_fails_the_replay_check() {
    let mut platform = manual_platform(1);
    register(&mut platform, "tenant-a", "genuine-id");
    platform.advance_quiet(secs(2));
    platform.run_round_to_completion().unwrap();

    let tenant = &platform.tenants[0].chain;
    assert_eq!(audit_tenant(tenant, &platform.public).unwrap().verdict, Verdict::Pass);
    assert!(tenant.tamper_block_payload(1, 0, 2), "flip one byte of the registered id");

    let report = audit_tenant(tenant, &platform.public).unwrap();
    assert_eq!(report.verdict, Verdict::Fail);
    assert!(matches!(report.leaf_check, LeafCheck::Mismatch { .. }), "{report:?}");
    // the stored tree itself was not touched, so the other checks hold
    assert_eq!(report.root_check, RootCheck::Match);
    assert_eq!(report.proof_check, ProofCheck::Valid);
}

#[test]
fn tampered_registry_state_fails_the_audit_of_the_next_anchor() {
    let mut platform = manual_platform(1);
    register(&mut platform, "tenant-a", "asset-1");
    platform.advance_quiet(secs(2));
    platform.run_round_to_completion().unwrap();

    let tenant = platform.tenants[0].chain.clone();
    assert!(tenant.tamper_state_value(&uid_key(b"asset-1"), 0));

    // the poisoned state flows into the next block's root and gets anchored
    register(&mut platform, "tenant-a", "asset-2");
    platform.advance_quiet(platform.now() + SimDuration::from_secs(2));
    assert!(platform.run_round_to_completion().unwrap().is_success());

    let report = audit_tenant(&tenant, &platform.public).unwrap();
    assert_eq!(report.verdict, Verdict::Fail);
    assert!(
        matches!(report.leaf_check, LeafCheck::Mismatch { .. }),
        "replay from genuine blocks cannot reproduce the tampered root: {report:?}"
    );
}

#[test]
fn tampered_stored_tree_fails_root_and_proof_checks() {
    let mut platform = manual_platform(1);
    register(&mut platform, "tenant-a", "x");
    platform.advance_quiet(secs(2));
    platform.run_round_to_completion().unwrap();

    let tenant = platform.tenants[0].chain.clone();
    // flip a byte inside the leaf value region: still a well-formed tree,
    // but its root no longer matches the anchored root
    assert!(tenant.tamper_state_value(TRIE_LATEST_KEY, 50));

    let report = audit_tenant(&tenant, &platform.public).unwrap();
    assert_eq!(report.verdict, Verdict::Fail);
    assert!(matches!(report.root_check, RootCheck::Mismatch { .. }), "{report:?}");
    assert_eq!(report.proof_check, ProofCheck::Invalid);
}

#[test]
fn audits_never_write_to_any_chain() {
    let mut platform = manual_platform(2);
    register(&mut platform, "tenant-a", "x");
    platform.advance_quiet(secs(2));
    platform.run_round_to_completion().unwrap();

    let snapshot = |platform: &Platform| {
        let mut state = Vec::new();
        for node in &platform.tenants {
            state.push((node.chain.height(), node.chain.latest_header().unwrap().state_root));
        }
        state.push((platform.public.height(), platform.public.latest_header().unwrap().state_root));
        state
    };
    let before = snapshot(&platform);
    for node in &platform.tenants {
        audit_tenant(&node.chain, &platform.public).unwrap();
    }
    assert_eq!(snapshot(&platform), before);
    // no transactions were even submitted
    assert_eq!(platform.public.pending_count(), 0);
    for node in &platform.tenants {
        assert_eq!(node.chain.pending_count(), 0);
    }
}

#[test]
fn history_shorter_than_the_anchored_leaf_is_a_mismatch() {
    // build two platforms from one config: anchor the longer history, then
    // audit a chain that never saw those blocks
    let mut platform = manual_platform(1);
    register(&mut platform, "tenant-a", "x");
    platform.advance_quiet(secs(2));
    platform.run_round_to_completion().unwrap();

    let fresh = manual_platform(1);
    // same chain id (same seed), but still at genesis: no stored tree, no
    // replayable history for the anchored leaf
    assert_eq!(fresh.tenants[0].chain.chain_id(), platform.tenants[0].chain.chain_id());
    let report = audit_tenant(&fresh.tenants[0].chain, &platform.public).unwrap();
    assert_eq!(report.verdict, Verdict::Fail);
    assert!(matches!(report.root_check, RootCheck::TrieUnreadable { .. }), "{report:?}");
    assert_eq!(report.leaf_check, LeafCheck::LeafAbsent);
}

#[test]
fn anchor_transactions_are_visible_on_the_public_chain() {
    let mut platform = manual_platform(1);
    register(&mut platform, "tenant-a", "x");
    platform.advance_quiet(secs(2));
    let report = platform.run_round_to_completion().unwrap();

    let mut payloads = 0;
    for height in 0..=platform.public.height() {
        for tx in platform.public.get_block(height).unwrap().transactions {
            if let TxPayload::PublicAnchor { record } = tx.payload {
                payloads += 1;
                assert_eq!(record.round_id, report.round_id);
                assert_eq!(record.root, platform.engine.tree_root());
            }
        }
    }
    assert_eq!(payloads, 1);
}

#[test]
fn audits_inside_a_rounds_commit_window_use_the_anchored_generation() {
    let mut platform = manual_platform(1);
    register(&mut platform, "tenant-a", "pallet-1");
    let target = platform.now() + SimDuration::from_secs(2);
    platform.advance_quiet(target);
    assert!(platform.run_round_to_completion().unwrap().is_success());

    // second round: its store transaction reaches the tenant chain within a
    // block, while the public anchor spends another half minute confirming
    register(&mut platform, "tenant-a", "pallet-2");
    let target = platform.now() + SimDuration::from_secs(2);
    platform.advance_quiet(target);
    let tick_at = platform.now();
    platform.engine.schedule_tick(tick_at);
    platform.advance_quiet(tick_at + SimDuration::from_secs(3));
    assert!(platform.engine.in_flight().is_some(), "round should still be confirming");

    let tenant = platform.tenants[0].chain.clone();
    let stored = tenant
        .read_state_at(TRIE_LATEST_KEY, tenant.committed_height())
        .unwrap()
        .expect("updated tree already stored");
    assert_ne!(stored, platform.engine.committed_tree().serialize(), "one generation ahead");

    let mid = audit_tenant(&tenant, &platform.public).unwrap();
    assert_eq!(mid.round_id, 1);
    assert_eq!(mid.verdict, Verdict::Pass, "{mid:?}");

    // once the round commits, the audit follows the new anchor
    while platform.engine.in_flight().is_some() {
        let next = platform.now() + SimDuration::from_secs(5);
        platform.advance_quiet(next);
    }
    let after = audit_tenant(&tenant, &platform.public).unwrap();
    assert_eq!(after.round_id, 2);
    assert_eq!(after.verdict, Verdict::Pass, "{after:?}");
}
