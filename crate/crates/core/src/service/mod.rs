//! Patch-only inference over TCP. The client runs the PEM locally and sends
//! nothing but 8-bit patch pixels; the server holds the model and the
//! decision threshold.

pub mod fuzz;
pub mod protocol;

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use thiserror::Error;

use crate::model::{decide, DecisionConfig, Model, ModelError};
use crate::pem::{extract_face, FaceRecord, PatchSet, PemConfig, PemError};
pub use protocol::{ErrorCode, HealthStatus, PredictionResponse};
use protocol::{MsgType, Violation, FRAME_HEADER_LEN, MAX_PATCHES};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(2_000);
/// Patches per request sent by [`Client::predict_remote`].
pub const REMOTE_K: usize = 2;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot bind {0}: {1}")]
    Bind(String, io::Error),
    #[error("request timed out")]
    Timeout,
    #[error("connection error: {0}")]
    Connection(io::Error),
    #[error("i/o error: {0}")]
    Io(io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    Request(String),
    #[error("server error {name} ({code}): {message}")]
    Remote { code: u16, name: &'static str, message: String },
    #[error(transparent)]
    Pem(#[from] PemError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ServiceError {
    pub(crate) fn from_io(e: io::Error) -> Self {
        use io::ErrorKind::*;
        match e.kind() {
            TimedOut | WouldBlock => ServiceError::Timeout,
            ConnectionRefused | ConnectionReset | ConnectionAborted | BrokenPipe | UnexpectedEof | NotConnected => {
                ServiceError::Connection(e)
            }
            _ => ServiceError::Io(e),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ServerConfig {
    pub decision: DecisionConfig,
    pub max_connections: usize,
    /// Idle time after which a connection is dropped.
    pub read_timeout: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            decision: DecisionConfig::default(),
            max_connections: 64,
            read_timeout: Duration::from_secs(10),
        }
    }
}

/// Counters shared by all connection handlers.
#[derive(Debug, Default)]
pub struct ServerStats {
    pub connections: AtomicU64,
    pub predictions: AtomicU64,
    pub error_frames: AtomicU64,
    pub rejected_busy: AtomicU64,
    pub handler_panics: AtomicU64,
}

struct Shared {
    model: Model,
    digest: [u8; 32],
    cfg: ServerConfig,
    stats: ServerStats,
    active: AtomicUsize,
}

/// A running server. Dropping it stops the accept loop.
pub struct Server {
    addr: SocketAddr,
    shared: Arc<Shared>,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

/// Binds `bind` and starts accepting connections on a background thread.
pub fn serve(model: Model, cfg: ServerConfig, bind: impl ToSocketAddrs + std::fmt::Debug) -> Result<Server, ServiceError> {
    let branches = model.config().branches;
    if !(1..=MAX_PATCHES).contains(&branches) {
        return Err(ServiceError::Request(format!(
            "model has {branches} branches; the protocol carries 1..={MAX_PATCHES} patches"
        )));
    }
    if cfg.max_connections == 0 {
        return Err(ServiceError::Request("max_connections must be positive".into()));
    }
    let label = format!("{bind:?}");
    let listener = TcpListener::bind(bind).map_err(|e| ServiceError::Bind(label.clone(), e))?;
    let addr = listener.local_addr().map_err(|e| ServiceError::Bind(label, e))?;
    let shared = Arc::new(Shared {
        digest: model.digest(),
        model,
        cfg,
        stats: ServerStats::default(),
        active: AtomicUsize::new(0),
    });
    let stop = Arc::new(AtomicBool::new(false));
    let accept = {
        let (shared, stop) = (shared.clone(), stop.clone());
        thread::Builder::new()
            .name("spf-accept".into())
            .spawn(move || accept_loop(listener, shared, stop))
            .map_err(ServiceError::Io)?
    };
    info!("serving on {addr}, threshold {}", cfg.decision.threshold);
    Ok(Server {
        addr,
        shared,
        stop,
        accept: Some(accept),
    })
}

impl Server {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> &ServerStats {
        &self.shared.stats
    }

    pub fn model_digest(&self) -> [u8; 32] {
        self.shared.digest
    }

    /// Blocks until the accept loop exits, which only happens on shutdown.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Stops accepting. Connections already open finish their current message.
    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        if let Some(h) = self.accept.take() {
            self.stop.store(true, Ordering::SeqCst);
            // wake the blocking accept
            let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(500));
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop_accepting();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>, stop: Arc<AtomicBool>) {
    for conn in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let mut stream = match conn {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        shared.stats.connections.fetch_add(1, Ordering::Relaxed);
        if shared.active.fetch_add(1, Ordering::SeqCst) >= shared.cfg.max_connections {
            shared.active.fetch_sub(1, Ordering::SeqCst);
            shared.stats.rejected_busy.fetch_add(1, Ordering::Relaxed);
            let _ = stream.write_all(&protocol::encode_error(&Violation::new(ErrorCode::Busy, "connection limit reached")));
            let _ = stream.shutdown(Shutdown::Both);
            continue;
        }
        let shared = shared.clone();
        let spawned = thread::Builder::new().name("spf-conn".into()).spawn(move || {
            let result = panic::catch_unwind(AssertUnwindSafe(|| handle_connection(stream, &shared)));
            if result.is_err() {
                shared.stats.handler_panics.fetch_add(1, Ordering::Relaxed);
            }
            shared.active.fetch_sub(1, Ordering::SeqCst);
        });
        if let Err(e) = spawned {
            warn!("cannot spawn connection handler: {e}");
        }
    }
}

enum Outcome {
    Reply(Vec<u8>),
    Reject(Violation),
}

fn handle_connection(mut stream: TcpStream, shared: &Shared) {
    let _ = stream.set_read_timeout(Some(shared.cfg.read_timeout));
    let _ = stream.set_write_timeout(Some(shared.cfg.read_timeout));
    let _ = stream.set_nodelay(true);
    loop {
        let mut header = [0u8; FRAME_HEADER_LEN];
        match read_full(&mut stream, &mut header) {
            Ok(true) => {}
            Ok(false) | Err(_) => return,
        }
        let outcome = match protocol::parse_header(&header) {
            Err(v) => Outcome::Reject(v),
            Ok((ty, len)) => {
                let mut body = vec![0u8; len];
                if stream.read_exact(&mut body).is_err() {
                    return;
                }
                dispatch(ty, &body, shared)
            }
        };
        let (bytes, close) = match outcome {
            Outcome::Reply(b) => (b, false),
            Outcome::Reject(v) => {
                debug!("rejecting request: {} {}", v.code.name(), v.message);
                shared.stats.error_frames.fetch_add(1, Ordering::Relaxed);
                (protocol::encode_error(&v), true)
            }
        };
        if stream.write_all(&bytes).is_err() {
            return;
        }
        if close {
            close_after_error(stream);
            return;
        }
    }
}

/// Half-closes, then discards what the peer already sent so the close does not
/// turn into a reset that could destroy the error frame in flight.
fn close_after_error(mut stream: TcpStream) {
    let _ = stream.shutdown(Shutdown::Write);
    let _ = stream.set_read_timeout(Some(Duration::from_millis(200)));
    let mut sink = [0u8; 8192];
    let mut drained = 0usize;
    while drained < protocol::MAX_BODY_LEN {
        match stream.read(&mut sink) {
            Ok(0) | Err(_) => break,
            Ok(n) => drained += n,
        }
    }
}

/// Fills `buf`; `Ok(false)` when the peer closed before sending anything.
fn read_full(stream: &mut TcpStream, buf: &mut [u8]) -> io::Result<bool> {
    let mut got = 0;
    while got < buf.len() {
        match stream.read(&mut buf[got..]) {
            Ok(0) if got == 0 => return Ok(false),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

fn dispatch(ty: u8, body: &[u8], shared: &Shared) -> Outcome {
    match MsgType::from_u8(ty) {
        Some(MsgType::Predict) => predict(body, shared),
        Some(MsgType::Health) => match protocol::decode_health_request(body) {
            Ok(()) => Outcome::Reply(
                HealthStatus {
                    version: protocol::PROTOCOL_VERSION,
                    branches: shared.model.config().branches as u8,
                    patch_size: shared.model.config().patch_size as u16,
                    threshold: shared.cfg.decision.threshold,
                    model_digest: shared.digest,
                }
                .encode(),
            ),
            Err(v) => Outcome::Reject(v),
        },
        _ => Outcome::Reject(Violation::new(ErrorCode::BadType, format!("unsupported message type {ty}"))),
    }
}

fn predict(body: &[u8], shared: &Shared) -> Outcome {
    let req = match protocol::decode_predict(body) {
        Ok(r) => r,
        Err(v) => return Outcome::Reject(v),
    };
    let cfg = shared.model.config();
    if req.patches.len() != cfg.branches {
        return Outcome::Reject(Violation::new(
            ErrorCode::Arity,
            format!("model takes {} patches, request has {}", cfg.branches, req.patches.len()),
        ));
    }
    if req.patch_size != cfg.patch_size {
        return Outcome::Reject(Violation::new(
            ErrorCode::Shape,
            format!("model takes {}px patches, request has {}px", cfg.patch_size, req.patch_size),
        ));
    }
    let start = Instant::now();
    let score = match shared.model.forward_batch(&req.patches) {
        Ok(s) => s[0],
        Err(e) => return Outcome::Reject(Violation::new(ErrorCode::Internal, e.to_string())),
    };
    let inference_ms = start.elapsed().as_secs_f32() * 1e3;
    shared.stats.predictions.fetch_add(1, Ordering::Relaxed);
    Outcome::Reply(
        PredictionResponse {
            id: req.id,
            p_bona_fide: score.p_bona_fide,
            label: decide(&score, &shared.cfg.decision),
            inference_ms,
            model_digest: shared.digest,
        }
        .encode(),
    )
}

/// Synchronous client; one connection per call.
#[derive(Debug, Clone)]
pub struct Client {
    addr: SocketAddr,
    timeout: Duration,
}

impl Client {
    pub fn new(addr: SocketAddr) -> Self {
        Client {
            addr,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    fn exchange(&self, request: &[u8]) -> Result<(MsgType, Vec<u8>), ServiceError> {
        let mut stream = TcpStream::connect_timeout(&self.addr, self.timeout).map_err(ServiceError::from_io)?;
        stream.set_read_timeout(Some(self.timeout)).map_err(ServiceError::Io)?;
        stream.set_write_timeout(Some(self.timeout)).map_err(ServiceError::Io)?;
        let _ = stream.set_nodelay(true);
        stream.write_all(request).map_err(ServiceError::from_io)?;
        let (ty, body) = protocol::read_frame(&mut stream)?
            .ok_or_else(|| ServiceError::Connection(io::ErrorKind::UnexpectedEof.into()))?;
        if ty == MsgType::Error {
            let (code, message) = protocol::decode_error(&body);
            let name = ErrorCode::from_u16(code).map_or("UNKNOWN", ErrorCode::name);
            return Err(ServiceError::Remote { code, name, message });
        }
        Ok((ty, body))
    }

    /// Sends a patch set and waits for the id-matched prediction.
    pub fn predict(&self, id: u64, patches: &PatchSet) -> Result<PredictionResponse, ServiceError> {
        let request = protocol::encode_predict(id, patches)?;
        let (ty, body) = self.exchange(&request)?;
        if ty != MsgType::Predict {
            return Err(ServiceError::Protocol(format!("expected a predict response, got {ty:?}")));
        }
        let resp = PredictionResponse::decode(&body).map_err(|v| ServiceError::Protocol(v.message))?;
        if resp.id != id {
            return Err(ServiceError::Protocol(format!("response id {} for request {id}", resp.id)));
        }
        Ok(resp)
    }

    pub fn health(&self) -> Result<HealthStatus, ServiceError> {
        let (ty, body) = self.exchange(&protocol::encode_health_request())?;
        if ty != MsgType::Health {
            return Err(ServiceError::Protocol(format!("expected a health response, got {ty:?}")));
        }
        HealthStatus::decode(&body).map_err(|v| ServiceError::Protocol(v.message))
    }

    /// Aligns the face, selects two patches and submits them. The face image
    /// itself never reaches the request buffer. `seed` doubles as the request id.
    pub fn predict_remote(&self, face: &FaceRecord, pem: &PemConfig, seed: u64) -> Result<PredictionResponse, ServiceError> {
        let patches = extract_face(face, REMOTE_K, pem, seed)?;
        self.predict(seed, &patches)
    }
}

#[cfg(test)]
mod tests;
