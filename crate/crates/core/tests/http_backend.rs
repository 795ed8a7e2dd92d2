//! The HTTP encoder client against an in-process server.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;


use hetrel_core::encoder::{EmbeddingCache, EncodeRequest, Encoder, EncoderBackend, HttpBackend, Pooling};
use hetrel_core::Error;
use serde_json::{json, Value};
use tiny_http::{Header, Response, Server};

#[derive(Clone, Copy)]
enum Mode {
    Healthy,
    /// `/v1/encode` answers 503.
    Unavailable,
    /// `/v1/encode` reports a different dimension than the handshake.
    WrongDim,
}

/// Serves `/v1/info` and `/v1/encode` until the process exits. Returns
/// the base URL and a counter of encode requests.
fn serve(mode: Mode, dim: usize) -> (String, Arc<AtomicUsize>) {
    let server = Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for mut req in server.incoming_requests() {
            let json_header = Header::from_bytes("Content-Type", "application/json").unwrap();
            let reply = |body: Value| Response::from_string(body.to_string()).with_header(json_header.clone());
            match req.url() {
                "/v1/info" => {
                    let _ = req.respond(reply(json!({"name": "test-lm", "dim": dim})));
                }
                "/v1/encode" => {
                    counter.fetch_add(1, Ordering::SeqCst);
                    let mut body = String::new();
                    req.as_reader().read_to_string(&mut body).unwrap();
                    let v: Value = serde_json::from_str(&body).unwrap();
                    let text_len = v["text"].as_str().unwrap().len() as f64;
                    let n_ph = v["placeholders"].as_array().unwrap().len() as f64;
                    let pooling_last = v["pooling"] == "last";
                    let emb: Vec<f64> = (0..dim)
                        .map(|i| text_len + n_ph * 100.0 + i as f64 + if pooling_last { 0.5 } else { 0.0 })
                        .collect();
                    let resp = match mode {
                        Mode::Healthy => reply(json!({"embedding": emb, "dim": dim})),
                        Mode::WrongDim => reply(json!({"embedding": emb, "dim": dim + 1})),
                        Mode::Unavailable => reply(json!({"error": "busy"})).with_status_code(503),
                    };
                    let _ = req.respond(resp);
                }
                _ => {
                    let _ = req.respond(Response::empty(404));
                }
            }
        }
    });
    (url, hits)
}


fn request<'a>(text: &'a str, ph: &'a [Vec<f64>], pooling: Pooling) -> EncodeRequest<'a> {
    EncodeRequest { template_id: "node_text", text, placeholders: ph, pooling }
}

#[test]
fn handshake_and_encode() {
    let (url, hits) = serve(Mode::Healthy, 4);
    let b = HttpBackend::connect(&url).unwrap();
    assert_eq!(b.name(), "test-lm");
    assert_eq!(b.dim(), 4);
    let v = b.encode(&request("abc", &[], Pooling::Mean)).unwrap();
    assert_eq!(v, vec![3.0, 4.0, 5.0, 6.0]);
    let ph = vec![vec![0.0; 4], vec![1.0; 4]];
    let v = b.encode(&request("abc", &ph, Pooling::Last)).unwrap();
    assert_eq!(v, vec![203.5, 204.5, 205.5, 206.5]);
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn cache_avoids_second_request() {
    let (url, hits) = serve(Mode::Healthy, 3);
    let enc = Encoder::new(Arc::new(HttpBackend::connect(&url).unwrap()), Arc::new(EmbeddingCache::in_memory()));
    let (a, called_a) = enc.encode_text("hello").unwrap();
    let (b, called_b) = enc.encode_text("hello").unwrap();
    assert_eq!(a, b);
    assert!(called_a && !called_b);
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    assert_eq!(enc.call_count(), 1);
}

#[test]
fn server_errors_are_transport_errors() {
    let (url, _) = serve(Mode::Unavailable, 3);
    let b = HttpBackend::connect(&url).unwrap();
    assert!(matches!(b.encode(&request("x", &[], Pooling::Mean)), Err(Error::Transport(_))));
}

#[test]
fn dimension_mismatch_is_rejected() {
    let (url, _) = serve(Mode::WrongDim, 3);
    let b = HttpBackend::connect(&url).unwrap();
    assert!(matches!(b.encode(&request("x", &[], Pooling::Mean)), Err(Error::Encoder(_))));
}

#[test]
fn unreachable_endpoint() {
    // bind then drop to get a port nobody listens on
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = HttpBackend::connect(&format!("http://127.0.0.1:{port}")).err().unwrap();
    assert!(matches!(err, Error::Transport(_)), "{err}");
}
