//! Remote embedding and environment protocols against local stubs.

use std::io::{BufRead, BufReader, Cursor, Read, Write};
use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use also_core::environment::remote::{RemoteEnvironment, StepRequest, PROTOCOL_VERSION};
use also_core::environment::{normalize_reward, EnvError, SocialEnvironment};
use also_core::featurizer::{embed_batch, EmbeddingProvider, FeatureError, FeatureVector};
use serde_json::json;

/// Serves `replies` to successive HTTP requests and returns the request bodies.
fn http_stub(replies: Vec<String>) -> (String, thread::JoinHandle<Vec<serde_json::Value>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = format!("http://{}/embed", listener.local_addr().unwrap());
    let handle = thread::spawn(move || {
        let mut bodies = Vec::new();
        for reply in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            bodies.push(serde_json::from_slice(&body).unwrap());
            let mut out = stream;
            write!(
                out,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.len(),
                reply
            )
            .unwrap();
        }
        bodies
    });
    (addr, handle)
}

fn remote(endpoint: String, dim: usize) -> EmbeddingProvider {
    EmbeddingProvider::Remote {
        dim,
        endpoint,
        model: Some("stub".into()),
        timeout_ms: 5_000,
        retries: 0,
    }
}

#[test]
fn remote_embeddings_round_trip() {
    let reply = json!({"vectors": [[3.0, 4.0, 0.0], [0.0, 0.0, 2.0]]}).to_string();
    let (addr, server) = http_stub(vec![reply]);
    let out: Vec<FeatureVector<f64>> = embed_batch(&remote(addr, 3), &["first", "", "second"]).unwrap();
    let bodies = server.join().unwrap();
    assert_eq!(bodies[0], json!({"model": "stub", "input": ["first", "second"]}));
    assert_eq!(out.len(), 3);
    assert!(out[1].is_zero());
    assert_eq!(out[0].dim(), 3);
    assert_eq!(out[2].dim(), 3);
}

#[test]
fn remote_embeddings_reject_wrong_dimension() {
    let reply = json!({"vectors": [[1.0, 2.0]]}).to_string();
    let (addr, server) = http_stub(vec![reply]);
    let err = embed_batch::<f64>(&remote(addr, 3), &["x"]).unwrap_err();
    server.join().unwrap();
    assert!(
        matches!(err, FeatureError::DimensionMismatch { expected: 3, got: 2 }),
        "{err}"
    );
}

#[test]
fn remote_embeddings_reject_missing_vectors() {
    let (addr, server) = http_stub(vec![json!({"data": []}).to_string()]);
    let err = embed_batch::<f64>(&remote(addr, 3), &["x"]).unwrap_err();
    server.join().unwrap();
    assert!(matches!(err, FeatureError::BadResponse(_)), "{err}");
}

fn reply(dims: [f64; 7], utterance: &str, done: bool) -> String {
    json!({"version": PROTOCOL_VERSION, "raw_dims": dims, "opponent_utterance": utterance, "done": done}).to_string()
}

#[test]
fn remote_environment_exchanges_lines() {
    let dims = [5.0, 0.0, 5.0, -5.0, -5.0, 0.0, 5.0];
    let input = format!("{}\n{}\n", reply(dims, "ok", false), reply(dims, "bye", true));
    let mut env = RemoteEnvironment::new(Cursor::new(input), Vec::new(), 4, 20);
    let a = env.step_with_persona(Some(2), None, "persona text").unwrap();
    assert_eq!(a.turn, 1);
    assert_eq!(a.reward, normalize_reward(&dims).unwrap());
    assert_eq!(a.opponent_utterance, "ok");
    env.step_with_persona(None, None, "plain").unwrap();
    assert_eq!(
        env.step_with_persona(Some(0), None, "x"),
        Err(EnvError::EpisodeExhausted { turns: 2 })
    );
    assert!(env.expected_rewards().is_none());

    let (_, written) = env.into_parts();
    let lines: Vec<StepRequest> = String::from_utf8(written)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].kind, "step");
    assert_eq!(lines[0].agent_arm, Some(2));
    assert_eq!(lines[0].augmented_persona_text, "persona text");
    assert_eq!(lines[1].agent_arm, None);
    assert_eq!(lines[1].turn, 2);
}

#[test]
fn remote_environment_rejects_bad_replies() {
    let cases = [
        json!({"version": 2, "raw_dims": [0, 0, 0, 0, 0, 0, 0]}).to_string(),
        json!({"version": 1, "raw_dims": [0, 0, 0]}).to_string(),
        json!({"version": 1, "raw_dims": [11, 0, 0, 0, 0, 0, 0]}).to_string(),
        "not json".to_string(),
    ];
    for case in cases {
        let mut env = RemoteEnvironment::new(Cursor::new(format!("{case}\n")), Vec::new(), 4, 20);
        assert!(env.step_with_persona(Some(0), None, "p").is_err(), "{case}");
    }
    let mut env = RemoteEnvironment::new(Cursor::new(String::new()), Vec::new(), 4, 20);
    assert!(matches!(env.step_with_persona(Some(0), None, "p"), Err(EnvError::Remote(_))));
    let mut env = RemoteEnvironment::new(Cursor::new(String::new()), Vec::new(), 4, 20);
    assert_eq!(
        env.step_with_persona(Some(9), None, "p"),
        Err(EnvError::ArmOutOfRange { arm: 9, arms: 4 })
    );
}

#[test]
fn remote_environment_over_tcp() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let server = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut out = stream;
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let req: StepRequest = serde_json::from_str(&line).unwrap();
        writeln!(out, "{}", reply([10.0, 5.0, 10.0, 0.0, 0.0, 5.0, 10.0], "fine", false)).unwrap();
        req
    });
    let mut env = RemoteEnvironment::connect(&addr, 12, 20, Duration::from_secs(5)).unwrap();
    let rec = env.step_with_persona(Some(7), None, "hello").unwrap();
    assert_eq!(rec.reward, 1.0);
    assert_eq!(server.join().unwrap().agent_arm, Some(7));
}
