//! Remote victim and generator clients against a local fixture server.

use evasion_core::corpus::{CodeSample, Label, Language};
use evasion_core::featureid::ImportantFeature;
use evasion_core::snippetgen::{
    build_prompt, generate_snippet, optimize_prompt, GenerationError, RemoteGenerator, ReplayGenerator,
};
use evasion_core::targetzoo::{remote_victim, OracleError, ReplayVictim, VictimOracle};
use serde_json::Value;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

struct Request {
    headers: Vec<(String, String)>,
    body: Value,
}

impl Request {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

/// What the fixture does with the n-th request (0-based).
type Handler = dyn Fn(usize, &Request) -> (u16, String, Duration) + Send + Sync;

struct Fixture {
    url: String,
    hits: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
    seen: Arc<Mutex<Vec<Request>>>,
}

fn read_request(stream: &mut TcpStream) -> Option<Request> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut headers = Vec::new();
    let mut length = 0usize;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (k, v) = h.split_once(':')?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.eq_ignore_ascii_case("content-length") {
            length = v.parse().ok()?;
        }
        headers.push((k, v));
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body).ok()?;
    Some(Request {
        headers,
        body: serde_json::from_slice(&body).unwrap_or(Value::Null),
    })
}

fn serve(handler: Arc<Handler>) -> Fixture {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let active = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let seen = Arc::new(Mutex::new(Vec::new()));
    let (h2, p2, s2) = (hits.clone(), peak.clone(), seen.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let (handler, hits, active, peak, seen) =
                (handler.clone(), h2.clone(), active.clone(), p2.clone(), s2.clone());
            thread::spawn(move || {
                let Some(req) = read_request(&mut stream) else { return };
                let n = hits.fetch_add(1, Ordering::SeqCst);
                let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                let (status, body, delay) = handler(n, &req);
                seen.lock().unwrap().push(req);
                thread::sleep(delay);
                active.fetch_sub(1, Ordering::SeqCst);
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            });
        }
    });
    Fixture { url, hits, peak, seen }
}

fn sample() -> CodeSample {
    CodeSample::new(
        "t1",
        "int f(char *b)\n{\n    gets(b);\n    return 0;\n}\n",
        Label::Vulnerable,
        Language::C,
    )
}

const FAST: Duration = Duration::from_millis(0);

#[test]
fn victim_round_trip_and_replay() {
    let fx = serve(Arc::new(|_, _| (200, r#"{"probability": 0.9}"#.into(), FAST)));
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("victim.jsonl");
    let v = remote_victim(fx.url.clone(), Duration::from_secs(5), Some("k".into()))
        .recording_to(&log)
        .unwrap();
    assert_eq!(v.predict(&sample()).unwrap(), 0.9);
    assert_eq!(v.query_count(), 1);
    {
        let seen = fx.seen.lock().unwrap();
        assert_eq!(seen[0].header("authorization"), Some("Bearer k"));
        assert_eq!(seen[0].body["language"], "c");
        assert_eq!(seen[0].body["source"], sample().source.as_str());
    }
    let replay = ReplayVictim::load(&log).unwrap();
    assert_eq!(replay.predict(&sample()).unwrap(), 0.9);
    let other = CodeSample::new("t2", "int g() { return 1; }", Label::Vulnerable, Language::C);
    assert!(matches!(replay.predict(&other), Err(OracleError::MissingReplay(_))));
    assert_eq!(fx.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn three_timeouts_surface_a_retryable_error() {
    let fx = serve(Arc::new(|_, _| {
        (200, r#"{"probability": 0.9}"#.into(), Duration::from_millis(600))
    }));
    let v = remote_victim(fx.url.clone(), Duration::from_millis(100), None).with_backoff(3, Duration::from_millis(5));
    assert!(matches!(v.predict(&sample()), Err(OracleError::Retryable(_))));
    // Give the last request time to register.
    thread::sleep(Duration::from_millis(50));
    assert_eq!(fx.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn server_errors_are_retried_then_succeed() {
    let fx = serve(Arc::new(|n, _| {
        if n < 2 {
            (503, "{}".into(), FAST)
        } else {
            (200, r#"{"probability": 0.25}"#.into(), FAST)
        }
    }));
    let v = remote_victim(fx.url.clone(), Duration::from_secs(5), None).with_backoff(3, Duration::from_millis(5));
    assert_eq!(v.predict(&sample()).unwrap(), 0.25);
    assert_eq!(fx.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn malformed_and_client_errors_are_not_retried() {
    let fx = serve(Arc::new(|n, _| match n {
        0 => (200, r#"{"probability": 1.5}"#.into(), FAST),
        1 => (200, r#"{"p": 0.1}"#.into(), FAST),
        _ => (404, "{}".into(), FAST),
    }));
    let v = remote_victim(fx.url.clone(), Duration::from_secs(5), None).with_backoff(3, Duration::from_millis(5));
    assert!(matches!(v.predict(&sample()), Err(OracleError::Protocol(_))));
    assert!(matches!(v.predict(&sample()), Err(OracleError::Protocol(_))));
    assert!(matches!(v.predict(&sample()), Err(OracleError::Failed(_))));
    assert_eq!(fx.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn in_flight_requests_are_bounded() {
    let fx = serve(Arc::new(|_, _| {
        (200, r#"{"probability": 0.5}"#.into(), Duration::from_millis(60))
    }));
    let v = Arc::new(remote_victim(fx.url.clone(), Duration::from_secs(5), None).with_max_in_flight(2));
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let v = v.clone();
            thread::spawn(move || v.predict(&sample()).unwrap())
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(fx.hits.load(Ordering::SeqCst), 8);
    assert!(fx.peak.load(Ordering::SeqCst) <= 2);
}

#[test]
fn generator_records_and_replays() {
    let fx = serve(Arc::new(|_, req: &Request| {
        assert_eq!(req.body["temperature"], 0.0);
        let reply = serde_json::json!({ "text": "```c\nstatic int a_q = 0;\nconst int b_q = 1;\n```" });
        (200, reply.to_string(), FAST)
    }));
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("gen.jsonl");
    let host = sample();
    let features = [ImportantFeature::manual("static"), ImportantFeature::manual("const")];
    let prompt = optimize_prompt(&build_prompt(&features, &host, 2, 0).unwrap());
    let live = RemoteGenerator::new(fx.url.clone(), Some("g".into()), Duration::from_secs(5), 4)
        .recording_to(&log)
        .unwrap();
    let a = generate_snippet(&live, &prompt).unwrap();
    assert_eq!(a.lines, ["static int a_q = 0;", "const int b_q = 1;"]);
    assert_eq!(fx.seen.lock().unwrap()[0].body["prompt"], prompt.render().as_str());

    let replay = ReplayGenerator::load(&log).unwrap();
    assert_eq!(generate_snippet(&replay, &prompt).unwrap(), a);
    let other = optimize_prompt(&build_prompt(&features, &host, 2, 1).unwrap());
    assert!(matches!(
        generate_snippet(&replay, &other),
        Err(GenerationError::MissingReplay(_))
    ));
    assert_eq!(fx.hits.load(Ordering::SeqCst), 1);
}
