//! Models living in another process, reached over newline-delimited JSON.
//!
//! Request, one per image: `{"id": <u64>, "image": "<base64 PNG>"}`.
//! Response: `{"id": <u64>, "probs": [p0, p1]}` or `{"id": <u64|null>, "error": "..."}`.
//! Responses may arrive in any order; they are matched to requests by id.
//!
//! The same bodies are used over HTTP: one POST per image, the response body is one
//! response object.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{default_class_names, ModelAdapter};
use crate::error::{Error, Result};
use crate::image::{ProbabilityVector, RasterImage};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Environment variable overriding the per-batch timeout, in seconds.
pub const TIMEOUT_ENV: &str = "FUNDUS_LIME_MODEL_TIMEOUT";

/// Tolerance on |sum(probs) - 1| for responses from external models.
pub const RESPONSE_SUM_TOLERANCE: f64 = 1e-3;

/// Timeout from [`TIMEOUT_ENV`], else [`DEFAULT_TIMEOUT`].
pub fn timeout_from_env() -> Result<Duration> {
    match std::env::var(TIMEOUT_ENV) {
        Ok(s) => {
            let secs: f64 = s
                .trim()
                .parse()
                .map_err(|_| Error::contract(format!("{TIMEOUT_ENV}={s:?} is not a number of seconds")))?;
            if !(secs > 0.0) || !secs.is_finite() {
                return Err(Error::contract(format!("{TIMEOUT_ENV} must be positive")));
            }
            Ok(Duration::from_secs_f64(secs))
        }
        Err(_) => Ok(DEFAULT_TIMEOUT),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub id: u64,
    pub image: String,
}

impl PredictRequest {
    pub fn new(id: u64, image: &RasterImage) -> Result<Self> {
        Ok(Self {
            id,
            image: BASE64.encode(image.encode_png()?),
        })
    }

    pub fn decode_image(&self) -> Result<RasterImage> {
        let bytes = BASE64
            .decode(&self.image)
            .map_err(|e| Error::contract(format!("bad base64 image: {e}")))?;
        RasterImage::decode(&bytes)
    }
}

/// A parsed response line: `(id, outcome)`; `id` is `None` when the line names no request.
fn parse_response(line: &str, classes: usize) -> (Option<u64>, Result<ProbabilityVector>) {
    let protocol = |message: &str| Error::Protocol {
        message: message.to_string(),
        line: line.to_string(),
    };
    let value: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return (None, Err(protocol(&format!("malformed JSON: {e}")))),
    };
    let id = value.get("id").and_then(Value::as_u64);
    if let Some(err) = value.get("error") {
        let msg = err.as_str().map_or_else(|| err.to_string(), str::to_string);
        return (id, Err(protocol(&format!("model reported an error: {msg}"))));
    }
    let Some(id) = id else {
        return (None, Err(protocol("response has no integer id")));
    };
    let probs: Option<Vec<f64>> = value
        .get("probs")
        .and_then(Value::as_array)
        .and_then(|a| a.iter().map(Value::as_f64).collect());
    let Some(probs) = probs else {
        return (Some(id), Err(protocol("response has no numeric probs array")));
    };
    if probs.len() != classes {
        return (
            Some(id),
            Err(Error::Validation(format!(
                "expected {classes} probabilities, got {}",
                probs.len()
            ))),
        );
    }
    (Some(id), ProbabilityVector::normalized(probs, RESPONSE_SUM_TOLERANCE))
}

type Outcome = (usize, Result<ProbabilityVector>);
type Pending = Arc<Mutex<HashMap<u64, (usize, Sender<Outcome>)>>>;

/// One child process serving predictions over stdin/stdout.
///
/// Writes are serialized through one lock; a reader thread routes responses to waiting
/// callers by id, so several threads may call `predict` at once.
pub struct ProcessAdapter {
    id: String,
    class_names: Vec<String>,
    timeout: Duration,
    child: Mutex<Child>,
    stdin: Mutex<Option<ChildStdin>>,
    pending: Pending,
    closed: Arc<Mutex<Option<String>>>,
    next_id: AtomicU64,
    reader: Option<JoinHandle<()>>,
}

impl ProcessAdapter {
    /// Spawns `command_line` (split shell-style, no shell involved).
    pub fn spawn(command_line: &str, timeout: Duration) -> Result<Self> {
        let argv = shlex::split(command_line)
            .filter(|a| !a.is_empty())
            .ok_or_else(|| Error::Spec(format!("cannot parse command line {command_line:?}")))?;
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Transport(format!("cannot start {:?}: {e}", argv[0])))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");

        let pending: Pending = Arc::default();
        let closed: Arc<Mutex<Option<String>>> = Arc::default();
        let classes = default_class_names().len();
        let reader = {
            let pending = Arc::clone(&pending);
            let closed = Arc::clone(&closed);
            std::thread::spawn(move || read_loop(stdout, classes, &pending, &closed))
        };

        Ok(Self {
            id: format!("proc:{command_line}"),
            class_names: default_class_names(),
            timeout,
            child: Mutex::new(child),
            stdin: Mutex::new(Some(stdin)),
            pending,
            closed,
            next_id: AtomicU64::new(1),
            reader: Some(reader),
        })
    }

    fn fail_if_closed(&self) -> Result<()> {
        match &*self.closed.lock().expect("lock") {
            Some(reason) => Err(Error::Transport(reason.clone())),
            None => Ok(()),
        }
    }
}

fn read_loop(stdout: impl Read, classes: usize, pending: &Pending, closed: &Mutex<Option<String>>) {
    let reader = BufReader::new(stdout);
    for line in reader.lines() {
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                *closed.lock().expect("lock") = Some(format!("reading model output failed: {e}"));
                break;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let (id, outcome) = parse_response(&line, classes);
        let mut pending = pending.lock().expect("lock");
        match id.and_then(|id| pending.remove(&id)) {
            Some((pos, tx)) => {
                let _ = tx.send((pos, outcome));
            }
            None => {
                // a late answer to an abandoned request is dropped; an error that cannot
                // be routed fails every waiting request
                let Err(err) = outcome else {
                    log::warn!("ignoring response for unknown request: {line}");
                    continue;
                };
                let message = match &err {
                    Error::Protocol { message, .. } => message.clone(),
                    other => other.to_string(),
                };
                for (_, (pos, tx)) in pending.drain() {
                    let _ = tx.send((
                        pos,
                        Err(Error::Protocol {
                            message: message.clone(),
                            line: line.clone(),
                        }),
                    ));
                }
            }
        }
    }
    let mut closed = closed.lock().expect("lock");
    if closed.is_none() {
        *closed = Some("model process closed its output".into());
    }
    drop(closed);
    for (_, (pos, tx)) in pending.lock().expect("lock").drain() {
        let _ = tx.send((pos, Err(Error::Transport("model process exited".into()))));
    }
}

impl ModelAdapter for ProcessAdapter {
    fn id(&self) -> &str {
        &self.id
    }

    fn class_names(&self) -> &[String] {
        &self.class_names
    }

    fn predict(&self, images: &[RasterImage]) -> Result<Vec<ProbabilityVector>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        self.fail_if_closed()?;
        let deadline = Instant::now() + self.timeout;
        let (tx, rx) = mpsc::channel();
        let mut ids = Vec::with_capacity(images.len());
        let mut payload = Vec::new();
        for (pos, img) in images.iter().enumerate() {
            let id = self.next_id.fetch_add(1, Ordering::Relaxed);
            serde_json::to_writer(&mut payload, &PredictRequest::new(id, img)?)?;
            payload.push(b'\n');
            ids.push(id);
            self.pending.lock().expect("lock").insert(id, (pos, tx.clone()));
        }
        drop(tx);
        let forget = |ids: &[u64]| {
            let mut pending = self.pending.lock().expect("lock");
            for id in ids {
                pending.remove(id);
            }
        };

        if let Err(e) = self.fail_if_closed() {
            forget(&ids);
            return Err(e);
        }

        let write = {
            let mut stdin = self.stdin.lock().expect("lock");
            match stdin.as_mut() {
                Some(s) => s.write_all(&payload).and_then(|_| s.flush()),
                None => Err(std::io::Error::other("stdin closed")),
            }
        };
        if let Err(e) = write {
            forget(&ids);
            return Err(Error::Transport(format!("writing to model process failed: {e}")));
        }

        let mut out: Vec<Option<ProbabilityVector>> = vec![None; images.len()];
        let mut first_err = None;
        for _ in 0..images.len() {
            let wait = deadline.saturating_duration_since(Instant::now());
            match rx.recv_timeout(wait) {
                Ok((pos, Ok(p))) => out[pos] = Some(p),
                Ok((_, Err(e))) => {
                    first_err.get_or_insert(e);
                }
                Err(RecvTimeoutError::Timeout) => {
                    forget(&ids);
                    return Err(Error::Transport(format!(
                        "model did not answer within {:.1}s",
                        self.timeout.as_secs_f64()
                    )));
                }
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        forget(&ids);
        if let Some(e) = first_err {
            return Err(e);
        }
        out.into_iter()
            .map(|p| p.ok_or_else(|| Error::Transport("model process exited".into())))
            .collect()
    }
}

impl Drop for ProcessAdapter {
    fn drop(&mut self) {
        // closing stdin lets a well-behaved server exit on its own
        self.stdin.lock().expect("lock").take();
        let mut child = self.child.lock().expect("lock");
        let deadline = Instant::now() + Duration::from_millis(500);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = child.try_wait() {
                break;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        if let Ok(None) = child.try_wait() {
            let _ = child.kill();
            let _ = child.wait();
        }
        drop(child);
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

/// Model behind an HTTP endpoint; one POST per image.
pub struct HttpAdapter {
    id: String,
    class_names: Vec<String>,
    url: String,
    timeout: Duration,
    agent: ureq::Agent,
    next_id: AtomicU64,
}

impl HttpAdapter {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let url = url.into();
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            id: format!("http:{url}"),
            class_names: default_class_names(),
            url,
            timeout,
            agent,
            next_id: AtomicU64::new(1),
        }
    }

    fn post(&self, request: &PredictRequest) -> Result<ProbabilityVector> {
        let body = serde_json::to_string(request)?;
        let mut resp = self
            .agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(body.as_str())
            .map_err(|e| Error::Transport(format!("POST {} failed: {e}", self.url)))?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport(format!("reading response from {} failed: {e}", self.url)))?;
        let line = text.trim();
        if !status.is_success() {
            let excerpt: String = line.chars().take(200).collect();
            return Err(Error::Transport(format!("{} answered {status}: {excerpt}", self.url)));
        }
        let (id, outcome) = parse_response(line, self.class_names.len());
        let p = outcome?;
        if id != Some(request.id) {
            return Err(Error::Protocol {
                message: format!("expected response id {}", request.id),
                line: line.to_string(),
            });
        }
        Ok(p)
    }
}

impl ModelAdapter for HttpAdapter {
    fn id(&self) -> &str {
        &self.id
    }

    fn class_names(&self) -> &[String] {
        &self.class_names
    }

    fn predict(&self, images: &[RasterImage]) -> Result<Vec<ProbabilityVector>> {
        let deadline = Instant::now() + self.timeout;
        images
            .iter()
            .map(|img| {
                if Instant::now() > deadline {
                    return Err(Error::Transport(format!(
                        "batch exceeded {:.1}s",
                        self.timeout.as_secs_f64()
                    )));
                }
                let id = self.next_id.fetch_add(1, Ordering::Relaxed);
                self.post(&PredictRequest::new(id, img)?)
            })
            .collect()
    }
}
