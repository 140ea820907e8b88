//! Blocking JSON-over-HTTP plumbing shared by the remote generator and the
//! remote victim: error classification, retry with exponential backoff, an
//! in-flight limiter, and append-only replay logs.

use serde::Serialize;
use serde_json::Value;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum HttpError {
    /// Timeouts, connection failures, 5xx and 429 responses.
    Retryable(String),
    /// The server answered but the body was not what the protocol expects.
    Protocol(String),
    /// Anything retrying will not fix (4xx other than 429).
    Fatal(String),
}

#[derive(Debug, Clone)]
pub(crate) struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_backoff: Duration::from_millis(200),
        }
    }
}

pub(crate) fn agent(timeout: Duration) -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(timeout).build()
}

pub(crate) fn post_json(agent: &ureq::Agent, url: &str, key: Option<&str>, body: &Value) -> Result<Value, HttpError> {
    let mut req = agent.post(url).set("Content-Type", "application/json");
    if let Some(key) = key {
        req = req.set("Authorization", &format!("Bearer {key}"));
    }
    match req.send_json(body) {
        Ok(resp) => resp
            .into_json::<Value>()
            .map_err(|e| HttpError::Protocol(format!("response is not JSON: {e}"))),
        Err(ureq::Error::Status(code, _)) if code >= 500 || code == 429 => {
            Err(HttpError::Retryable(format!("HTTP {code}")))
        }
        Err(ureq::Error::Status(code, _)) => Err(HttpError::Fatal(format!("HTTP {code}"))),
        Err(ureq::Error::Transport(t)) => Err(HttpError::Retryable(t.to_string())),
    }
}

/// Runs `call` until it succeeds, fails non-retryably, or the attempts run
/// out. The wait doubles after every retryable failure.
pub(crate) fn with_retries<T>(
    policy: &RetryPolicy,
    mut call: impl FnMut() -> Result<T, HttpError>,
) -> Result<T, HttpError> {
    let mut wait = policy.base_backoff;
    let mut attempt = 1;
    loop {
        match call() {
            Err(HttpError::Retryable(msg)) if attempt < policy.max_attempts => {
                log_retry(attempt, &msg);
                std::thread::sleep(wait);
                wait *= 2;
                attempt += 1;
            }
            Err(HttpError::Retryable(msg)) => {
                return Err(HttpError::Retryable(format!("{msg} (after {attempt} attempts)")))
            }
            other => return other,
        }
    }
}

fn log_retry(attempt: u32, msg: &str) {
    if std::env::var_os("EVASION_HTTP_DEBUG").is_some() {
        eprintln!("retrying after attempt {attempt}: {msg}");
    }
}

/// Counting semaphore bounding concurrent in-flight requests.
pub(crate) struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

pub(crate) struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore {
            free: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Append-only JSON-lines log of request/response exchanges.
pub(crate) struct ReplayLog {
    file: Mutex<File>,
}

impl ReplayLog {
    pub fn append_to(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(ReplayLog { file: Mutex::new(file) })
    }

    pub fn record<T: Serialize>(&self, entry: &T) -> std::io::Result<()> {
        let mut line = serde_json::to_string(entry).map_err(std::io::Error::other)?;
        line.push('\n');
        let mut f = self.file.lock().unwrap();
        f.write_all(line.as_bytes())?;
        f.flush()
    }
}
