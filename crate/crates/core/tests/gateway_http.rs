use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::{Arc, Mutex};

use anchorage_core::chain::FailoverMode;
use anchorage_core::config::{PlatformConfig, PLATFORM_WRITER_TOKEN};
use anchorage_core::httpd::{serve, ServerHandle};
use anchorage_core::platform::Platform;
use anchorage_core::time::SimDuration;

fn boot(tenant_count: usize) -> (Arc<Mutex<Platform>>, ServerHandle) {
    let mut config = PlatformConfig::desk(tenant_count);
    config.anchor.enabled = false;
    config.audit.enabled = false;
    let platform = Arc::new(Mutex::new(Platform::from_config(config).unwrap()));
    let server = serve(Arc::clone(&platform), "127.0.0.1:0").unwrap();
    (platform, server)
}

fn http(
    addr: SocketAddr,
    method: &str,
    path: &str,
    token: Option<&str>,
    body: Option<&str>,
) -> (u16, String) {
    let mut stream = TcpStream::connect(addr).unwrap();
    let mut request = format!("{method} {path} HTTP/1.1\r\nHost: test\r\n");
    if let Some(token) = token {
        request.push_str(&format!("Authorization: Bearer {token}\r\n"));
    }
    let body = body.unwrap_or("");
    request.push_str(&format!("Content-Length: {}\r\n\r\n{body}", body.len()));
    stream.write_all(request.as_bytes()).unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    let status = response.split_whitespace().nth(1).unwrap().parse().unwrap();
    let body = response.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    (status, body)
}

fn seal_block(platform: &Mutex<Platform>) {
    let mut platform = platform.lock().unwrap();
    let target = platform.now() + SimDuration::from_secs(2);
    platform.advance_quiet(target);
}

#[test]
fn writes_require_a_valid_bearer_token() {
    let (_platform, server) = boot(1);
    let body = r#"{"ids":["crate-1"]}"#;
    let (status, _) = http(server.addr(), "POST", "/tenants/tenant-a/unique-ids", None, Some(body));
    assert_eq!(status, 401);
    let (status, _) =
        http(server.addr(), "POST", "/tenants/tenant-a/unique-ids", Some("nope"), Some(body));
    assert_eq!(status, 401);
    let (status, _) = http(
        server.addr(),
        "POST",
        "/tenants/tenant-a/unique-ids",
        Some(PLATFORM_WRITER_TOKEN),
        Some(body),
    );
    assert_eq!(status, 200);
}

#[test]
fn registered_ids_show_up_in_history_once_committed() {
    let (platform, server) = boot(1);
    let (status, body) = http(
        server.addr(),
        "POST",
        "/tenants/tenant-a/unique-ids",
        Some(PLATFORM_WRITER_TOKEN),
        Some(r#"{"ids":["crate-7"]}"#),
    );
    assert_eq!(status, 200, "{body}");
    assert!(body.contains("handle"));

    // nothing committed yet
    let (status, _) = http(
        server.addr(),
        "GET",
        "/tenants/tenant-a/history/crate-7",
        Some(PLATFORM_WRITER_TOKEN),
        None,
    );
    assert_eq!(status, 404);

    seal_block(&platform);
    let (status, body) = http(
        server.addr(),
        "GET",
        "/tenants/tenant-a/history/crate-7",
        Some(PLATFORM_WRITER_TOKEN),
        None,
    );
    assert_eq!(status, 200);
    assert!(body.contains(r#""unique_id":"crate-7""#), "{body}");
    assert!(body.contains(r#""kind":"registered""#), "{body}");
}

#[test]
fn scans_append_to_history_in_order() {
    let (platform, server) = boot(1);
    http(
        server.addr(),
        "POST",
        "/tenants/tenant-a/unique-ids",
        Some(PLATFORM_WRITER_TOKEN),
        Some(r#"{"ids":["box 9"]}"#),
    );
    seal_block(&platform);
    let (status, body) = http(
        server.addr(),
        "POST",
        "/tenants/tenant-a/scans",
        Some(PLATFORM_WRITER_TOKEN),
        Some(r#"{"unique_id":"box 9","meta":"646f636b"}"#),
    );
    assert_eq!(status, 200, "{body}");
    seal_block(&platform);

    // the id needs escaping in the path
    let (status, body) = http(
        server.addr(),
        "GET",
        "/tenants/tenant-a/history/box%209",
        Some(PLATFORM_WRITER_TOKEN),
        None,
    );
    assert_eq!(status, 200, "{body}");
    let parsed: serde_json::Value = serde_json::from_str(&body).unwrap();
    let entries = parsed["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[0]["kind"], "registered");
    assert_eq!(entries[1]["kind"], "scanned");
}

#[test]
fn error_statuses_map_onto_gateway_failures() {
    let (platform, server) = boot(1);
    let writer = Some(PLATFORM_WRITER_TOKEN);

    let (status, _) =
        http(server.addr(), "POST", "/tenants/nobody/unique-ids", writer, Some(r#"{"ids":["x"]}"#));
    assert_eq!(status, 404, "unknown tenant");

    let (status, _) =
        http(server.addr(), "POST", "/tenants/tenant-a/unique-ids", writer, Some(r#"{"ids":[]}"#));
    assert_eq!(status, 400, "empty batch");

    let (status, _) =
        http(server.addr(), "POST", "/tenants/tenant-a/unique-ids", writer, Some("not json"));
    assert_eq!(status, 400, "malformed body");

    let (status, _) = http(
        server.addr(),
        "GET",
        "/tenants/tenant-a/history/never-registered",
        writer,
        None,
    );
    assert_eq!(status, 404, "unknown unique id");

    http(server.addr(), "POST", "/tenants/tenant-a/unique-ids", writer, Some(r#"{"ids":["dup"]}"#));
    seal_block(&platform);
    let (status, _) =
        http(server.addr(), "POST", "/tenants/tenant-a/unique-ids", writer, Some(r#"{"ids":["dup"]}"#));
    assert_eq!(status, 409, "already registered");

    let (status, _) = http(server.addr(), "GET", "/nope", writer, None);
    assert_eq!(status, 404, "unknown route");

    let (status, _) = http(server.addr(), "DELETE", "/status", None, None);
    assert_eq!(status, 405, "unsupported method");
}

#[test]
fn reader_tokens_are_scoped_to_their_tenant() {
    let (platform, server) = boot(2);
    http(
        server.addr(),
        "POST",
        "/tenants/tenant-a/unique-ids",
        Some(PLATFORM_WRITER_TOKEN),
        Some(r#"{"ids":["crate-1"]}"#),
    );
    seal_block(&platform);

    let (status, _) = http(
        server.addr(),
        "GET",
        "/tenants/tenant-a/history/crate-1",
        Some("reader-tenant-a"),
        None,
    );
    assert_eq!(status, 200);
    let (status, _) = http(
        server.addr(),
        "GET",
        "/tenants/tenant-a/history/crate-1",
        Some("reader-tenant-b"),
        None,
    );
    assert_eq!(status, 401, "other tenant's reader is rejected");
    let (status, _) = http(
        server.addr(),
        "POST",
        "/tenants/tenant-a/unique-ids",
        Some("reader-tenant-a"),
        Some(r#"{"ids":["crate-2"]}"#),
    );
    assert_eq!(status, 401, "readers cannot write");
}

#[test]
fn audit_and_anchor_endpoints_follow_the_anchor_lifecycle() {
    let (platform, server) = boot(1);
    let (status, _) = http(server.addr(), "GET", "/anchors/latest", None, None);
    assert_eq!(status, 404, "nothing anchored yet");
    let (status, _) =
        http(server.addr(), "GET", "/tenants/tenant-a/audit", Some("auditor-tenant-a"), None);
    assert_eq!(status, 404, "no anchor to audit against");
    let (status, _) =
        http(server.addr(), "GET", "/tenants/tenant-a/audit", Some("auditor-tenant-b"), None);
    assert_eq!(status, 401, "unknown auditor token");

    {
        let mut platform = platform.lock().unwrap();
        let now = platform.now();
        platform
            .gateway
            .create_unique_ids(PLATFORM_WRITER_TOKEN, "tenant-a", vec![b"crate-1".to_vec()], now)
            .unwrap();
        let target = now + SimDuration::from_secs(2);
        platform.advance_quiet(target);
        assert!(platform.run_round_to_completion().unwrap().is_success());
    }

    let (status, body) = http(server.addr(), "GET", "/anchors/latest", None, None);
    assert_eq!(status, 200);
    assert!(body.contains("root"), "{body}");

    let (status, body) =
        http(server.addr(), "GET", "/tenants/tenant-a/audit", Some("auditor-tenant-a"), None);
    assert_eq!(status, 200);
    assert!(body.contains(r#""verdict":"pass""#), "{body}");

    let (status, body) = http(server.addr(), "GET", "/status", None, None);
    assert_eq!(status, 200);
    assert!(body.contains(r#""anchored_rounds":1"#), "{body}");
    assert!(body.contains("tenant-a"), "{body}");
}

#[test]
fn an_unavailable_node_maps_to_service_unavailable() {
    let (platform, server) = boot(1);
    {
        // anchor once so the audit endpoint gets past the no-anchor case
        let mut platform = platform.lock().unwrap();
        let target = platform.now() + SimDuration::from_secs(2);
        platform.advance_quiet(target);
        assert!(platform.run_round_to_completion().unwrap().is_success());
        platform.tenants[0].chain.fail_over(FailoverMode::Unreachable);
    }
    let (status, _) = http(
        server.addr(),
        "POST",
        "/tenants/tenant-a/unique-ids",
        Some(PLATFORM_WRITER_TOKEN),
        Some(r#"{"ids":["crate-1"]}"#),
    );
    assert_eq!(status, 503);
    let (status, _) =
        http(server.addr(), "GET", "/tenants/tenant-a/audit", Some("auditor-tenant-a"), None);
    assert_eq!(status, 503);
}
