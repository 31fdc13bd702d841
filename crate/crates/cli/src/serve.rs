//! A small blocking HTTP server for shared rating sessions.
//!
//! `GET /tasks` returns the task JSONL, `GET /schema` the annotation schema,
//! and `POST /annotations` appends a JSONL batch of annotation records after
//! validating every line. A batch with any invalid line is rejected whole.

use std::fs::OpenOptions;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;

use serde_json::json;

use scene_elab::metrics::AnnotationRecord;
use scene_elab::tasks::annotation_schema;

const MAX_BODY: usize = 16 << 20;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub requests: usize,
    pub accepted: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub content_type: &'static str,
    pub body: String,
}

impl Response {
    fn json(status: u16, body: serde_json::Value) -> Self {
        Response {
            status,
            content_type: "application/json",
            body: body.to_string(),
        }
    }
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        204 => "No Content",
        400 => "Bad Request",
        404 => "Not Found",
        405 => "Method Not Allowed",
        413 => "Payload Too Large",
        _ => "Internal Server Error",
    }
}

/// Parses and validates an annotation batch. Returns the records or a
/// message naming the first bad line.
pub fn parse_batch(body: &str) -> Result<Vec<AnnotationRecord>, String> {
    let mut out = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        rec.validate().map_err(|e| format!("line {}: {e}", i + 1))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err("empty batch".into());
    }
    Ok(out)
}

/// Routes one request. Accepted annotations are appended to `annotations`.
pub fn handle(method: &str, path: &str, body: &str, tasks: &Path, annotations: &Path) -> (Response, usize) {
    let path = path.split('?').next().unwrap_or(path);
    match (method, path) {
        ("GET", "/tasks") => match std::fs::read_to_string(tasks) {
            Ok(text) => (
                Response {
                    status: 200,
                    content_type: "application/x-ndjson",
                    body: text,
                },
                0,
            ),
            Err(e) => (Response::json(500, json!({ "error": e.to_string() })), 0),
        },
        ("GET", "/schema") => (Response::json(200, annotation_schema()), 0),
        ("POST", "/annotations") => match parse_batch(body) {
            Ok(records) => {
                let mut text = String::new();
                for r in &records {
                    text.push_str(&serde_json::to_string(r).expect("json"));
                    text.push('\n');
                }
                let appended = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(annotations)
                    .and_then(|mut f| f.write_all(text.as_bytes()));
                match appended {
                    Ok(()) => (Response::json(200, json!({ "accepted": records.len() })), records.len()),
                    Err(e) => (Response::json(500, json!({ "error": e.to_string() })), 0),
                }
            }
            Err(e) => (Response::json(400, json!({ "error": e })), 0),
        },
        ("OPTIONS", _) => (
            Response {
                status: 204,
                content_type: "text/plain",
                body: String::new(),
            },
            0,
        ),
        (_, "/tasks" | "/schema" | "/annotations") => {
            (Response::json(405, json!({ "error": "method not allowed" })), 0)
        }
        _ => (Response::json(404, json!({ "error": "not found" })), 0),
    }
}

fn read_request(stream: &mut TcpStream) -> io::Result<Result<(String, String, String), Response>> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let mut parts = line.split_whitespace();
    let (Some(method), Some(target)) = (parts.next(), parts.next()) else {
        return Ok(Err(Response::json(400, json!({ "error": "bad request line" }))));
    };
    let (method, target) = (method.to_string(), target.to_string());
    let mut length = 0usize;
    loop {
        let mut header = String::new();
        if reader.read_line(&mut header)? == 0 || header.trim().is_empty() {
            break;
        }
        if let Some((name, value)) = header.split_once(':') {
            if name.trim().eq_ignore_ascii_case("content-length") {
                length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    if length > MAX_BODY {
        return Ok(Err(Response::json(413, json!({ "error": "body too large" }))));
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body)?;
    match String::from_utf8(body) {
        Ok(body) => Ok(Ok((method, target, body))),
        Err(_) => Ok(Err(Response::json(400, json!({ "error": "body is not UTF-8" })))),
    }
}

fn write_response(stream: &mut TcpStream, r: &Response) -> io::Result<()> {
    write!(
        stream,
        "HTTP/1.1 {} {}\r\nContent-Type: {}\r\nContent-Length: {}\r\nAccess-Control-Allow-Origin: *\r\n\
         Access-Control-Allow-Methods: GET, POST, OPTIONS\r\nAccess-Control-Allow-Headers: Content-Type\r\n\
         Connection: close\r\n\r\n",
        r.status,
        reason(r.status),
        r.content_type,
        r.body.len()
    )?;
    stream.write_all(r.body.as_bytes())?;
    stream.flush()
}

/// Serves requests one at a time until `max_requests` have been handled
/// (forever when `None`).
pub fn serve(
    listener: TcpListener,
    tasks: &Path,
    annotations: &Path,
    max_requests: Option<usize>,
) -> io::Result<ServeStats> {
    let mut stats = ServeStats::default();
    for stream in listener.incoming() {
        let mut stream = stream?;
        let (response, accepted) = match read_request(&mut stream) {
            Ok(Ok((method, target, body))) => handle(&method, &target, &body, tasks, annotations),
            Ok(Err(r)) => (r, 0),
            Err(e) => (Response::json(400, json!({ "error": e.to_string() })), 0),
        };
        // a client that hung up is not a server failure
        let _ = write_response(&mut stream, &response);
        stats.requests += 1;
        stats.accepted += accepted;
        if max_requests.is_some_and(|m| stats.requests >= m) {
            break;
        }
    }
    Ok(stats)
}
