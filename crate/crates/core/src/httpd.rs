//! Minimal HTTP/1.1 front end for a running platform.
//!
//! One thread accepts connections, each request is served from a short-lived
//! handler thread, and every response closes its connection. The surface is
//! deliberately small:
//!
//! ```text
//! POST /tenants/{tenant}/unique-ids   {"ids": ["..."]}
//! POST /tenants/{tenant}/scans        {"unique_id": "...", "meta": "...", "scanned_at_ms": n}
//! GET  /tenants/{tenant}/history/{id}
//! GET  /tenants/{tenant}/audit
//! GET  /anchors/latest
//! GET  /status
//! ```
//!
//! Writes and tenant reads require `Authorization: Bearer <token>`; the
//! anchor and status endpoints are open since that data is public anyway.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::audit::{audit_tenant, AuditError};
use crate::chain::ChainError;
use crate::gateway::{GatewayError, ScanEvent};
use crate::platform::Platform;
use crate::time::SimTime;

const MAX_BODY: usize = 1 << 20;

pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds `addr` and serves the platform until the handle is dropped.
pub fn serve(platform: Arc<Mutex<Platform>>, addr: &str) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let accept_shutdown = Arc::clone(&shutdown);
    let accept_thread = std::thread::spawn(move || {
        while !accept_shutdown.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let platform = Arc::clone(&platform);
                    std::thread::spawn(move || {
                        let _ = handle_connection(stream, &platform);
                    });
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(_) => break,
            }
        }
    });
    Ok(ServerHandle { addr, shutdown, accept_thread: Some(accept_thread) })
}

struct Request {
    method: String,
    path: String,
    bearer: Option<String>,
    body: Vec<u8>,
}

fn handle_connection(mut stream: TcpStream, platform: &Mutex<Platform>) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let request = match read_request(&mut stream) {
        Ok(Some(request)) => request,
        Ok(None) => return Ok(()),
        Err(_) => {
            return write_response(&mut stream, 400, &error_body("malformed request"));
        }
    };
    let (status, body) = dispatch(&request, platform);
    write_response(&mut stream, status, &body)
}

fn read_request(stream: &mut impl Read) -> io::Result<Option<Request>> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 1024];
    let header_end = loop {
        if let Some(pos) = find_header_end(&buf) {
            break pos;
        }
        if buf.len() > MAX_BODY {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "headers too large"));
        }
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            if buf.is_empty() {
                return Ok(None);
            }
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated request"));
        }
        buf.extend_from_slice(&chunk[..n]);
    };

    let header_text = std::str::from_utf8(&buf[..header_end])
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "non-utf8 headers"))?;
    let mut lines = header_text.split("\r\n");
    let request_line = lines.next().unwrap_or_default();
    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    if method.is_empty() || !path.starts_with('/') {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad request line"));
    }

    let mut bearer = None;
    let mut content_length = 0usize;
    for line in lines {
        let Some((name, value)) = line.split_once(':') else { continue };
        let value = value.trim();
        match name.to_ascii_lowercase().as_str() {
            "authorization" => {
                bearer = value.strip_prefix("Bearer ").map(|t| t.to_string());
            }
            "content-length" => {
                content_length = value
                    .parse()
                    .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "bad content-length"))?;
            }
            _ => {}
        }
    }
    if content_length > MAX_BODY {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "body too large"));
    }

    let mut body = buf[header_end + 4..].to_vec();
    while body.len() < content_length {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated body"));
        }
        body.extend_from_slice(&chunk[..n]);
    }
    body.truncate(content_length);
    Ok(Some(Request { method, path, bearer, body }))
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}

fn write_response(stream: &mut impl Write, status: u16, body: &str) -> io::Result<()> {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        401 => "Unauthorized",
        404 => "Not Found",
        405 => "Method Not Allowed",
        409 => "Conflict",
        503 => "Service Unavailable",
        _ => "Unknown",
    };
    write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}

fn error_body(message: &str) -> String {
    serde_json::json!({ "error": message }).to_string()
}

fn dispatch(request: &Request, platform: &Mutex<Platform>) -> (u16, String) {
    let segments: Vec<String> = request
        .path
        .split('/')
        .filter(|s| !s.is_empty())
        .map(percent_decode)
        .collect();
    let segments: Vec<&str> = segments.iter().map(|s| s.as_str()).collect();
    let token = request.bearer.as_deref().unwrap_or("");

    match (request.method.as_str(), segments.as_slice()) {
        ("POST", ["tenants", tenant, "unique-ids"]) => {
            let ids = match parse_ids(&request.body) {
                Ok(ids) => ids,
                Err(message) => return (400, error_body(&message)),
            };
            let mut platform = platform.lock().unwrap();
            let now = platform.now();
            match platform.gateway.create_unique_ids(token, tenant, ids, now) {
                Ok(handle) => (200, serde_json::json!({ "handle": handle.0 }).to_string()),
                Err(e) => gateway_error(&e),
            }
        }
        ("POST", ["tenants", tenant, "scans"]) => {
            let mut platform = platform.lock().unwrap();
            let now = platform.now();
            let event = match parse_scan(&request.body, now) {
                Ok(event) => event,
                Err(message) => return (400, error_body(&message)),
            };
            match platform.gateway.record_scan(token, tenant, event, now) {
                Ok(handle) => (200, serde_json::json!({ "handle": handle.0 }).to_string()),
                Err(e) => gateway_error(&e),
            }
        }
        ("GET", ["tenants", tenant, "history", id]) => {
            let platform = platform.lock().unwrap();
            match platform.gateway.read_history(token, tenant, id.as_bytes()) {
                Ok(entries) => (
                    200,
                    serde_json::json!({ "unique_id": id, "entries": entries }).to_string(),
                ),
                Err(e) => gateway_error(&e),
            }
        }
        ("GET", ["tenants", tenant, "audit"]) => {
            let platform = platform.lock().unwrap();
            if let Err(e) = platform.gateway.authorize_read(token, tenant) {
                return gateway_error(&e);
            }
            let Some(index) = platform.tenant_index(tenant) else {
                return (404, error_body(&format!("unknown tenant {tenant}")));
            };
            match audit_tenant(&platform.tenants[index].chain, &platform.public) {
                Ok(report) => (200, serde_json::to_string(&report).unwrap()),
                Err(AuditError::NoAnchorYet) => (404, error_body("no anchor record committed yet")),
                Err(AuditError::NodeUnavailable) => (503, error_body("node unavailable")),
            }
        }
        ("GET", ["anchors", "latest"]) => {
            let platform = platform.lock().unwrap();
            match platform.engine.read_latest_public_anchor() {
                Ok(Some(record)) => (200, serde_json::to_string(&record).unwrap()),
                Ok(None) => (404, error_body("no anchor record committed yet")),
                Err(_) => (503, error_body("node unavailable")),
            }
        }
        ("GET", ["status"]) => {
            let platform = platform.lock().unwrap();
            let tenants: Vec<serde_json::Value> = platform
                .tenants
                .iter()
                .map(|node| {
                    serde_json::json!({
                        "name": node.name,
                        "height": node.chain.height(),
                        "chain_id": node.chain.chain_id(),
                    })
                })
                .collect();
            let body = serde_json::json!({
                "now_ms": platform.now().as_millis(),
                "public_height": platform.public.height(),
                "anchored_rounds": platform.engine.round_history().iter().filter(|r| r.is_success()).count(),
                "tenants": tenants,
            });
            (200, body.to_string())
        }
        ("POST", _) | ("GET", _) => (404, error_body("no such route")),
        _ => (405, error_body("method not allowed")),
    }
}

fn gateway_error(error: &GatewayError) -> (u16, String) {
    let status = match error {
        GatewayError::Unauthorized => 401,
        GatewayError::UnknownTenant(_) | GatewayError::UnknownUniqueId => 404,
        GatewayError::DuplicateId(_) => 409,
        GatewayError::EmptyBatch
        | GatewayError::BatchTooLarge { .. }
        | GatewayError::InvalidId(_)
        | GatewayError::DuplicateTenant(_) => 400,
        GatewayError::Chain(ChainError::NodeUnavailable) => 503,
        GatewayError::Chain(_) => 400,
    };
    (status, error_body(&error.to_string()))
}

fn parse_ids(body: &[u8]) -> Result<Vec<Vec<u8>>, String> {
    #[derive(serde::Deserialize)]
    struct Body {
        ids: Vec<String>,
    }
    let body: Body =
        serde_json::from_slice(body).map_err(|e| format!("bad request body: {e}"))?;
    Ok(body.ids.into_iter().map(String::into_bytes).collect())
}

fn parse_scan(body: &[u8], now: SimTime) -> Result<ScanEvent, String> {
    #[derive(serde::Deserialize)]
    struct Body {
        unique_id: String,
        #[serde(default)]
        meta: String,
        #[serde(default)]
        scanned_at_ms: Option<u64>,
    }
    let body: Body =
        serde_json::from_slice(body).map_err(|e| format!("bad request body: {e}"))?;
    Ok(ScanEvent {
        unique_id: body.unique_id.into_bytes(),
        scanned_at: body.scanned_at_ms.map(SimTime::from_millis).unwrap_or(now),
        meta: body.meta.into_bytes(),
    })
}

fn percent_decode(segment: &str) -> String {
    let bytes = segment.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' && i + 2 < bytes.len() {
            let hi = (bytes[i + 1] as char).to_digit(16);
            let lo = (bytes[i + 2] as char).to_digit(16);
            if let (Some(hi), Some(lo)) = (hi, lo) {
                out.push((hi * 16 + lo) as u8);
                i += 3;
                continue;
            }
        }
        out.push(bytes[i]);
        i += 1;
    }
    String::from_utf8_lossy(&out).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn requests_parse_method_path_auth_and_body() {
        let raw = b"POST /tenants/a/scans HTTP/1.1\r\nAuthorization: Bearer tok-1\r\nContent-Length: 4\r\n\r\nbody";
        let request = read_request(&mut &raw[..]).unwrap().unwrap();
        assert_eq!(request.method, "POST");
        assert_eq!(request.path, "/tenants/a/scans");
        assert_eq!(request.bearer.as_deref(), Some("tok-1"));
        assert_eq!(request.body, b"body");
    }

    #[test]
    fn percent_encoding_decodes_in_path_segments() {
        assert_eq!(percent_decode("pallet%2d7"), "pallet-7");
        assert_eq!(percent_decode("plain"), "plain");
        assert_eq!(percent_decode("bad%zz"), "bad%zz");
    }

    #[test]
    fn responses_carry_length_and_close() {
        let mut out = Vec::new();
        write_response(&mut out, 404, "{\"error\":\"x\"}").unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("HTTP/1.1 404 Not Found\r\n"));
        assert!(text.contains("Content-Length: 13\r\n"));
        assert!(text.contains("Connection: close\r\n"));
        assert!(text.ends_with("{\"error\":\"x\"}"));
    }
}
