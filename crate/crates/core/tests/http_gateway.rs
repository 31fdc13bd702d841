use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use scene_elab::gateway::{
    Embedder, Gateway, GatewayError, GenerationRequest, HttpBackend, HttpEmbedder, HttpOptions, PromptTemplate,
};

struct Reply {
    status: u16,
    body: &'static str,
    delay_ms: u64,
}

fn reply(status: u16, body: &'static str) -> Reply {
    Reply {
        status,
        body,
        delay_ms: 0,
    }
}

/// Serves the scripted replies in order, one per connection, and records
/// each request body.
fn mock(script: Vec<Reply>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/gen", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for r in script {
            let Ok((mut stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(String::from_utf8(body).unwrap());
            thread::sleep(Duration::from_millis(r.delay_ms));
            let _ = write!(
                stream,
                "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                r.status,
                r.body.len(),
                r.body
            );
        }
    });
    (url, seen)
}

fn opts(timeout_ms: u64, retries: u32) -> HttpOptions {
    HttpOptions {
        timeout: Duration::from_millis(timeout_ms),
        max_in_flight: 2,
        max_retries: retries,
        backoff: Duration::from_millis(5),
    }
}

fn gateway(url: &str, o: HttpOptions) -> Gateway {
    Gateway::new(
        PromptTemplate::builtin("macaw-angles").unwrap(),
        Arc::new(HttpBackend::new(url, o)),
    )
}

#[test]
fn sends_rendered_prompt_and_decodes_answer() {
    let (url, seen) = mock(vec![reply(200, r#"{"text":"$answer$ = grateful"}"#)]);
    let gw = gateway(&url, opts(2000, 0));
    let req = GenerationRequest::new("How would Sam feel?")
        .unwrap()
        .with_options(vec!["grateful".into(), "angry".into()])
        .unwrap();
    let resp = gw.generate(&req).unwrap();
    assert_eq!(resp.answer, "grateful");
    let body: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
    assert_eq!(body["prompt"], gw.render(&req));
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["max_tokens"], 64);
}

#[test]
fn retries_server_errors_then_succeeds() {
    let (url, seen) = mock(vec![
        reply(503, "{}"),
        reply(429, "{}"),
        reply(200, r#"{"text":"yes"}"#),
    ]);
    let gw = gateway(&url, opts(2000, 3));
    let resp = gw.generate(&GenerationRequest::new("q?").unwrap()).unwrap();
    assert_eq!(resp.answer, "yes");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn gives_up_after_retry_budget() {
    let (url, _) = mock(vec![reply(500, "{}"), reply(500, "{}")]);
    let gw = gateway(&url, opts(2000, 1));
    match gw.generate(&GenerationRequest::new("q?").unwrap()) {
        Err(GatewayError::EndpointUnreachable { prompt, detail, .. }) => {
            assert!(prompt.contains("q?"));
            assert!(detail.contains("500"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn unreachable_endpoint_carries_prompt() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let gw = gateway(&format!("http://127.0.0.1:{port}/gen"), opts(500, 0));
    let err = gw.generate(&GenerationRequest::new("who?").unwrap()).unwrap_err();
    assert!(matches!(err, GatewayError::EndpointUnreachable { .. }), "{err:?}");
    assert!(err.is_transient());
}

#[test]
fn slow_endpoint_times_out() {
    let (url, _) = mock(vec![Reply {
        status: 200,
        body: r#"{"text":"late"}"#,
        delay_ms: 800,
    }]);
    let gw = gateway(&url, opts(150, 0));
    let err = gw.generate(&GenerationRequest::new("q?").unwrap()).unwrap_err();
    assert!(matches!(err, GatewayError::Timeout { .. }), "{err:?}");
}

#[test]
fn malformed_and_client_errors_are_not_retried() {
    let (url, seen) = mock(vec![reply(200, r#"{"txt":"x"}"#), reply(400, "{}")]);
    let gw = gateway(&url, opts(2000, 3));
    let err = gw.generate(&GenerationRequest::new("q?").unwrap()).unwrap_err();
    assert!(matches!(err, GatewayError::MalformedResponse { .. }), "{err:?}");
    let err = gw.generate(&GenerationRequest::new("q?").unwrap()).unwrap_err();
    assert!(matches!(err, GatewayError::MalformedResponse { .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn embedder_checks_dimension() {
    let (url, seen) = mock(vec![
        reply(200, r#"{"vector":[0.5,-1.0,2.0]}"#),
        reply(200, r#"{"vector":[1.0]}"#),
    ]);
    let emb = HttpEmbedder::new(&url, Some(3), opts(2000, 0));
    let v = emb.embed("a dog barked").unwrap();
    assert_eq!(v.values(), &[0.5, -1.0, 2.0]);
    assert_eq!(
        emb.embed("again").unwrap_err(),
        GatewayError::DimensionMismatch { expected: 3, got: 1 }
    );
    let body: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
    assert_eq!(body, serde_json::json!({"text": "a dog barked"}));
}
