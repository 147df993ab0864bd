//! Remote gateway and retriever clients against a local HTTP stub.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use rolegraph_core::gateway::{Gateway, GatewayError, GenerationRequest, RemoteBackend, RemoteConfig, RoleId};
use rolegraph_core::retrieval::{RemoteRetriever, RetrievalError, Retriever};

/// What the stub does with one connection.
enum Reply {
    /// Close without answering.
    Hangup,
    Status(u16, &'static str),
}

struct Stub {
    url: String,
    bodies: Arc<Mutex<Vec<String>>>,
    handle: thread::JoinHandle<()>,
}

fn read_request(stream: &mut std::net::TcpStream) -> String {
    let mut reader = BufReader::new(stream);
    let mut length = 0;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        if line == "\r\n" || line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                length = value.trim().parse().unwrap();
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    String::from_utf8(body).unwrap()
}

fn serve(replies: Vec<Reply>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let seen = Arc::clone(&bodies);
    let handle = thread::spawn(move || {
        for reply in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let body = read_request(&mut stream);
            seen.lock().unwrap().push(body);
            if let Reply::Status(code, payload) = reply {
                let head = format!(
                    "HTTP/1.1 {code} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
                    payload.len()
                );
                stream.write_all(head.as_bytes()).unwrap();
                stream.write_all(payload.as_bytes()).unwrap();
            }
        }
    });
    Stub { url, bodies, handle }
}

fn gateway(url: &str) -> Gateway {
    let config = RemoteConfig { base_url: url.to_string(), model: "stub-model".into(), token: Some("t0k".into()), timeout_secs: 5 };
    Gateway::new(Arc::new(RemoteBackend::new(config).unwrap()))
}

const CHAT_OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"Christopher Nolan"}}]}"#;

#[test]
fn chat_completion_round_trip() {
    let stub = serve(vec![Reply::Status(200, CHAT_OK)]);
    let out = gateway(&stub.url).generate(&GenerationRequest::new(RoleId::SubAnswer, "Who directed Inception?")).unwrap();
    assert_eq!(out.text, "Christopher Nolan");
    stub.handle.join().unwrap();
    let body: serde_json::Value = serde_json::from_str(&stub.bodies.lock().unwrap()[0]).unwrap();
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["messages"][0]["content"], "Who directed Inception?");
    assert_eq!(body["temperature"], 0.0);
}

#[test]
fn hangup_is_retried_once() {
    let stub = serve(vec![Reply::Hangup, Reply::Status(200, CHAT_OK)]);
    let out = gateway(&stub.url).generate(&GenerationRequest::new(RoleId::Reasoner, "q")).unwrap();
    assert_eq!(out.text, "Christopher Nolan");
    stub.handle.join().unwrap();
    assert_eq!(stub.bodies.lock().unwrap().len(), 2);
}

#[test]
fn two_hangups_fail() {
    let stub = serve(vec![Reply::Hangup, Reply::Hangup]);
    let err = gateway(&stub.url).generate(&GenerationRequest::new(RoleId::Reasoner, "q")).unwrap_err();
    assert!(matches!(err, GatewayError::BackendUnreachable(_)), "{err:?}");
    stub.handle.join().unwrap();
}

#[test]
fn status_errors_are_not_retried() {
    let stub = serve(vec![Reply::Status(503, "overloaded")]);
    let err = gateway(&stub.url).generate(&GenerationRequest::new(RoleId::Reasoner, "q")).unwrap_err();
    match err {
        GatewayError::BackendError { status, body } => {
            assert_eq!(status, 503);
            assert_eq!(body, "overloaded");
        }
        other => panic!("unexpected {other:?}"),
    }
    stub.handle.join().unwrap();
    assert_eq!(stub.bodies.lock().unwrap().len(), 1);
}

#[test]
fn malformed_chat_body() {
    let stub = serve(vec![Reply::Status(200, r#"{"choices":[]}"#)]);
    let err = gateway(&stub.url).generate(&GenerationRequest::new(RoleId::Reasoner, "q")).unwrap_err();
    assert!(matches!(err, GatewayError::MalformedResponse(_)), "{err:?}");
    stub.handle.join().unwrap();
}

#[test]
fn remote_retriever_sorts_dedups_and_truncates() {
    let payload = r#"[{"id":"a","title":"A","text":"x","score":0.1},
        {"id":"b","title":"B","text":"y","score":0.9},
        {"id":"b","title":"B","text":"y","score":0.5},
        {"id":"c","title":"C","text":"z","score":0.4}]"#;
    let stub = serve(vec![Reply::Status(200, payload)]);
    let retriever = RemoteRetriever::new(stub.url.clone(), 5).unwrap();
    let ids: Vec<String> = retriever.search("rivers", 2).unwrap().into_iter().map(|p| p.id).collect();
    assert_eq!(ids, ["b", "c"]);
    stub.handle.join().unwrap();
    let body: serde_json::Value = serde_json::from_str(&stub.bodies.lock().unwrap()[0]).unwrap();
    assert_eq!(body, serde_json::json!({"query": "rivers", "top_k": 2}));
}

#[test]
fn remote_retriever_errors() {
    let stub = serve(vec![Reply::Status(500, "boom"), Reply::Status(200, "not json")]);
    let retriever = RemoteRetriever::new(stub.url.clone(), 5).unwrap();
    assert!(matches!(retriever.search("q", 3), Err(RetrievalError::BadResponse(m)) if m.contains("500")));
    assert!(matches!(retriever.search("q", 3), Err(RetrievalError::BadResponse(_))));
    assert!(matches!(retriever.search("  ", 3), Err(RetrievalError::EmptyQuery)));
    stub.handle.join().unwrap();

    let closed = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", closed.local_addr().unwrap());
    drop(closed);
    let unreachable = RemoteRetriever::new(url, 2).unwrap();
    assert!(matches!(unreachable.search("q", 3), Err(RetrievalError::EndpointUnreachable(_))));
}
