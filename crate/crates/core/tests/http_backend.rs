use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use metamem::backend::{BackendError, HttpBackend, LanguageModel, Role};

/// Serves `statuses` in order, one connection each, then stops.
fn stub(statuses: Vec<u16>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for status in statuses {
            let Ok((stream, _)) = listener.accept() else {
                return;
            };
            counter.fetch_add(1, Ordering::SeqCst);
            let mut reader = BufReader::new(stream);
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
            assert_eq!(req["messages"][0]["role"], "user");
            let payload = if status == 200 {
                r#"{"choices":[{"message":{"content":"pong"}}]}"#
            } else {
                "busy"
            };
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}",
                payload.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/v1"), hits)
}

#[test]
fn retries_transient_statuses() {
    let (url, hits) = stub(vec![503, 429, 200]);
    let backend = HttpBackend::new("stub", &url, "m")
        .unwrap()
        .with_backoff(Duration::from_millis(1));
    assert_eq!(backend.complete(Role::Respond, "ping").unwrap(), "pong");
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn gives_up_after_configured_retries() {
    let (url, hits) = stub(vec![500, 500, 500, 200]);
    let backend = HttpBackend::new("stub", &url, "m")
        .unwrap()
        .with_backoff(Duration::from_millis(1));
    let err = backend.complete(Role::Respond, "ping").unwrap_err();
    assert!(matches!(err, BackendError::Status { status: 500, .. }), "{err}");
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, hits) = stub(vec![400, 200]);
    let backend = HttpBackend::new("stub", &url, "m")
        .unwrap()
        .with_backoff(Duration::from_millis(1));
    assert!(backend.complete(Role::Respond, "ping").is_err());
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}
