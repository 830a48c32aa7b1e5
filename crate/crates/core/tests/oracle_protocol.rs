use std::collections::HashSet;
use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{json, Value};

use sfuda_core::data::{ImageTensor, Seed};
use sfuda_core::nn::build_small_cnn;
use sfuda_core::oracle::{OracleServer, OracleService, SourceEnsemble};

fn images(n: usize, offset: f32) -> ImageTensor {
    ImageTensor::new(ndarray::Array4::from_shape_fn((n, 8, 8, 3), |(i, p, q, c)| {
        ((i * 13 + p * 5 + q * 3 + c) as f32 * 0.0417 + offset).fract()
    }))
    .unwrap()
}

/// Server whose ensemble protects `protected`.
fn server(protected: &ImageTensor) -> String {
    let models = (0..2).map(|s| build_small_cnn([8, 8, 3], 4, Seed(s)).unwrap()).collect();
    let forbidden: HashSet<_> = protected.content_digests().into_iter().collect();
    let service = OracleService::new(SourceEnsemble::new(models, forbidden).unwrap());
    let server = OracleServer::bind("127.0.0.1:0", Arc::new(service)).unwrap();
    let addr = server.local_addr().unwrap().to_string();
    server.spawn();
    addr
}

/// Hand-rolled client: 4-byte big-endian length, then JSON.
struct Raw(TcpStream);

impl Raw {
    fn send_bytes(&mut self, payload: &[u8]) -> Value {
        self.0.write_all(&(payload.len() as u32).to_be_bytes()).unwrap();
        self.0.write_all(payload).unwrap();
        let mut len = [0u8; 4];
        self.0.read_exact(&mut len).unwrap();
        let mut body = vec![0u8; u32::from_be_bytes(len) as usize];
        self.0.read_exact(&mut body).unwrap();
        serde_json::from_slice(&body).unwrap()
    }

    fn send(&mut self, v: Value) -> Value {
        self.send_bytes(&serde_json::to_vec(&v).unwrap())
    }
}

fn submit(session: &Value, x: &ImageTensor) -> Value {
    let bytes: Vec<u8> = x.view().iter().flat_map(|v| v.to_le_bytes()).collect();
    let [w, h, c] = x.image_shape();
    json!({"op": "submit", "session": session, "shape": [x.len(), w, h, c], "data": STANDARD.encode(bytes)})
}

fn assert_no_floats(v: &Value) {
    match v {
        Value::Number(n) => assert!(n.is_u64(), "non-integer number {n} in a response"),
        Value::Array(items) => items.iter().for_each(assert_no_floats),
        Value::Object(map) => map.values().for_each(assert_no_floats),
        _ => {}
    }
}

#[test]
fn responses_carry_hard_labels_only() {
    let protected = images(3, 0.5);
    let mut c = Raw(TcpStream::connect(server(&protected)).unwrap());
    let opened = c.send(json!({"op": "open"}));
    assert_no_floats(&opened);
    let session = opened["session"].clone();
    let accepted = c.send(submit(&session, &images(5, 0.0)));
    assert_eq!(accepted, json!({"accepted": 5}));
    let rejected = c.send(submit(&session, &protected.slice(1, 2)));
    assert_eq!(rejected["rejected"].as_array().unwrap().len(), 1);
    assert!(rejected["rejected"][0].is_string());
    let labels = c.send(json!({"op": "finalize", "session": session}));
    assert_no_floats(&labels);
    let labels = labels["labels"].as_array().unwrap();
    assert_eq!(labels.len(), 5);
    assert!(labels.iter().all(|l| l.as_u64().unwrap() < 4));
}

#[test]
fn malformed_requests_get_errors_and_the_connection_survives() {
    let mut c = Raw(TcpStream::connect(server(&images(1, 0.5))).unwrap());
    assert!(c.send_bytes(b"not json")["error"].is_string());
    assert!(c.send(json!({"op": "finalize", "session": 999}))["error"].is_string());
    let session = c.send(json!({"op": "open"}))["session"].clone();
    let mut bad = submit(&session, &images(2, 0.0));
    bad["shape"] = json!([3, 8, 8, 3]);
    assert!(c.send(bad)["error"].as_str().unwrap().contains("shape"));
    assert!(c.send(json!({"op": "finalize", "session": session}))["error"].is_string());
    assert!(c.send(json!({"op": "open"}))["session"].is_u64());
}
