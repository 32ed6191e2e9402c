//! Parameter server for distributed stochastic EM.
//!
//! The server owns the [`SufficientStats`] and applies pushed updates one at a
//! time, choosing the step size itself. Workers pull a snapshot, compute an
//! update on their own mini-batch and push it back.
//!
//! Frames are a 4-byte big-endian length, a version byte and a UTF-8 record of
//! `key=value` lines. Reals are written with 17 significant digits so they
//! survive the round trip exactly.

use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use ndarray::Array2;
use thiserror::Error;

use crate::model::{MStepDuals, ModelState};
use crate::stochastic::{global_update, BatchUpdate, StochasticConfig, StochasticContext, SufficientStats};

pub const PROTOCOL_VERSION: u8 = 1;
const MAX_FRAME: usize = 1 << 30;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unsupported protocol version {0}")]
    Version(u8),
    #[error("frame of {0} bytes exceeds the limit")]
    FrameTooLarge(usize),
    #[error("server {addr} unreachable after {attempts} attempts")]
    Unreachable { addr: String, attempts: u32 },
    #[error("unexpected reply: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckCode {
    Ok = 0,
    /// Push computed from a snapshot older than the staleness bound; dropped.
    Stale = 1,
    Malformed = 2,
}

impl AckCode {
    fn from_u8(v: u8) -> Option<AckCode> {
        match v {
            0 => Some(AckCode::Ok),
            1 => Some(AckCode::Stale),
            2 => Some(AckCode::Malformed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Push {
    pub worker: u64,
    /// Round counter of the pushing worker.
    pub batch: u64,
    /// `t` of the snapshot the update was computed from.
    pub t_base: u64,
    pub update: BatchUpdate,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { worker: u64 },
    ModelReq { worker: u64 },
    ModelSnapshot(SufficientStats),
    StatsPush(Push),
    Ack { code: AckCode, t: u64 },
    Shutdown,
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "HELLO",
            Message::ModelReq { .. } => "MODEL_REQ",
            Message::ModelSnapshot(_) => "MODEL_SNAPSHOT",
            Message::StatsPush(_) => "STATS_PUSH",
            Message::Ack { .. } => "ACK",
            Message::Shutdown => "SHUTDOWN",
        }
    }
}

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

fn reals(vals: impl IntoIterator<Item = f64>) -> String {
    vals.into_iter().map(real).collect::<Vec<_>>().join(" ")
}

fn matrix(m: &Array2<f64>) -> String {
    let mut s = format!("{} {}", m.nrows(), m.ncols());
    if !m.is_empty() {
        s.push(' ');
        s.push_str(&reals(m.iter().copied()));
    }
    s
}

/// Payload bytes (version byte included) of `msg`.
pub fn encode(msg: &Message) -> Vec<u8> {
    let mut lines = vec![format!("kind={}", msg.kind())];
    match msg {
        Message::Hello { worker } | Message::ModelReq { worker } => lines.push(format!("worker={worker}")),
        Message::ModelSnapshot(st) => {
            lines.push(format!("t={}", st.t));
            lines.push(format!("theta={}", matrix(&st.theta)));
            lines.push(format!("phi={}", matrix(&st.phi)));
            lines.push(format!("phi_prime={}", matrix(&st.phi_prime)));
            lines.push(format!("h={} {}", st.h.len(), reals(st.h.iter().copied())).trim_end().to_string());
        }
        Message::StatsPush(p) => {
            lines.push(format!("worker={}", p.worker));
            lines.push(format!("batch={}", p.batch));
            lines.push(format!("t_base={}", p.t_base));
            lines.push(format!("rows={}", p.update.theta_rows.len()));
            for (node, row) in &p.update.theta_rows {
                lines.push(format!("row={node} {}", reals(row.iter().copied())).trim_end().to_string());
            }
            lines.push(format!("phi={}", matrix(&p.update.phi)));
            lines.push(format!("phi_prime={}", matrix(&p.update.phi_prime)));
            lines.push(format!("latent={}", p.update.h.len()));
            for &(i, v) in &p.update.h {
                lines.push(format!("h={i} {}", real(v)));
            }
        }
        Message::Ack { code, t } => {
            lines.push(format!("code={}", *code as u8));
            lines.push(format!("t={t}"));
        }
        Message::Shutdown => {}
    }
    let mut out = vec![PROTOCOL_VERSION];
    out.extend_from_slice(lines.join("\n").as_bytes());
    out
}

struct Record<'a> {
    fields: Vec<(&'a str, &'a str)>,
    pos: usize,
}

fn bad(msg: impl Into<String>) -> ServerError {
    ServerError::Malformed(msg.into())
}

impl<'a> Record<'a> {
    fn next(&mut self, key: &str) -> Result<&'a str, ServerError> {
        let (k, v) = self
            .fields
            .get(self.pos)
            .ok_or_else(|| bad(format!("missing field {key}")))?;
        if *k != key {
            return Err(bad(format!("expected field {key}, found {k}")));
        }
        self.pos += 1;
        Ok(v)
    }

    fn int(&mut self, key: &str) -> Result<u64, ServerError> {
        let v = self.next(key)?;
        v.parse().map_err(|_| bad(format!("{key}: bad integer {v:?}")))
    }

    fn finish(&self) -> Result<(), ServerError> {
        match self.fields.get(self.pos) {
            Some((k, _)) => Err(bad(format!("unexpected field {k}"))),
            None => Ok(()),
        }
    }
}

fn parse_reals<'a>(it: impl Iterator<Item = &'a str>) -> Result<Vec<f64>, ServerError> {
    it.map(|t| t.parse::<f64>().map_err(|_| bad(format!("bad real {t:?}"))))
        .collect()
}

fn parse_count(tok: Option<&str>) -> Result<usize, ServerError> {
    let t = tok.ok_or_else(|| bad("missing count"))?;
    t.parse().map_err(|_| bad(format!("bad count {t:?}")))
}

fn parse_matrix(v: &str) -> Result<Array2<f64>, ServerError> {
    let mut it = v.split_ascii_whitespace();
    let r = parse_count(it.next())?;
    let c = parse_count(it.next())?;
    let vals = parse_reals(it)?;
    Array2::from_shape_vec((r, c), vals).map_err(|e| bad(format!("matrix shape: {e}")))
}

/// Inverse of [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Message, ServerError> {
    let (&version, body) = bytes.split_first().ok_or_else(|| bad("empty frame"))?;
    if version != PROTOCOL_VERSION {
        return Err(ServerError::Version(version));
    }
    let text = std::str::from_utf8(body).map_err(|e| bad(format!("not UTF-8: {e}")))?;
    let fields = text
        .lines()
        .map(|l| l.split_once('=').ok_or_else(|| bad(format!("line without '=': {l:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rec = Record { fields, pos: 0 };
    let msg = match rec.next("kind")? {
        "HELLO" => Message::Hello { worker: rec.int("worker")? },
        "MODEL_REQ" => Message::ModelReq { worker: rec.int("worker")? },
        "MODEL_SNAPSHOT" => {
            let t = rec.int("t")?;
            let theta = parse_matrix(rec.next("theta")?)?;
            let phi = parse_matrix(rec.next("phi")?)?;
            let phi_prime = parse_matrix(rec.next("phi_prime")?)?;
            let hv = rec.next("h")?;
            let mut it = hv.split_ascii_whitespace();
            let n = parse_count(it.next())?;
            let h = parse_reals(it)?;
            if h.len() != n {
                return Err(bad(format!("h: expected {n} values, found {}", h.len())));
            }
            Message::ModelSnapshot(SufficientStats {
                theta,
                phi,
                phi_prime,
                h,
                t,
            })
        }
        "STATS_PUSH" => {
            let worker = rec.int("worker")?;
            let batch = rec.int("batch")?;
            let t_base = rec.int("t_base")?;
            let rows = rec.int("rows")? as usize;
            let mut theta_rows = Vec::with_capacity(rows.min(1 << 20));
            for _ in 0..rows {
                let v = rec.next("row")?;
                let mut it = v.split_ascii_whitespace();
                let node = parse_count(it.next())?;
                theta_rows.push((node, parse_reals(it)?));
            }
            let phi = parse_matrix(rec.next("phi")?)?;
            let phi_prime = parse_matrix(rec.next("phi_prime")?)?;
            let latent = rec.int("latent")? as usize;
            let mut h = Vec::with_capacity(latent.min(1 << 20));
            for _ in 0..latent {
                let v = rec.next("h")?;
                let mut it = v.split_ascii_whitespace();
                let i = parse_count(it.next())?;
                let val = parse_reals(it)?;
                if val.len() != 1 {
                    return Err(bad("h entry needs one value"));
                }
                h.push((i, val[0]));
            }
            Message::StatsPush(Push {
                worker,
                batch,
                t_base,
                update: BatchUpdate {
                    theta_rows,
                    phi,
                    phi_prime,
                    h,
                },
            })
        }
        "ACK" => {
            let c = rec.int("code")?;
            let code = u8::try_from(c)
                .ok()
                .and_then(AckCode::from_u8)
                .ok_or_else(|| bad(format!("unknown ack code {c}")))?;
            Message::Ack { code, t: rec.int("t")? }
        }
        "SHUTDOWN" => Message::Shutdown,
        other => return Err(bad(format!("unknown kind {other:?}"))),
    };
    rec.finish()?;
    Ok(msg)
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> io::Result<()> {
    let payload = encode(msg);
    w.write_all(&(payload.len() as u32).to_be_bytes())?;
    w.write_all(&payload)?;
    w.flush()
}

/// Reads one frame's payload.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Vec<u8>, ServerError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(ServerError::FrameTooLarge(len));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    /// Snapshot requests wait until this many workers said hello.
    pub workers_expected: usize,
    pub max_staleness: u64,
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint interval in applied updates; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Time handlers get to finish once the budget is spent.
    pub drain_timeout: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            workers_expected: 1,
            max_staleness: 16,
            checkpoint: None,
            checkpoint_every: 0,
            drain_timeout: Duration::from_secs(5),
        }
    }
}

/// One applied update, in application order.
#[derive(Debug, Clone, PartialEq)]
pub struct AppliedUpdate {
    /// Value of `t` after the update.
    pub t: u64,
    pub rho: f64,
    pub worker: u64,
    pub batch: u64,
    pub t_base: u64,
    pub update: BatchUpdate,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ServerMetrics {
    pub applied: u64,
    pub stale_dropped: u64,
    pub malformed: u64,
    pub max_staleness_seen: u64,
    pub total_staleness: u64,
    pub hellos: usize,
}

#[derive(Debug, Clone)]
pub struct ServerOutput {
    pub state: ModelState,
    pub stats: SufficientStats,
    pub log: Vec<AppliedUpdate>,
    pub metrics: ServerMetrics,
}

struct Shared {
    stats: SufficientStats,
    log: Vec<AppliedUpdate>,
    metrics: ServerMetrics,
    done: bool,
}

struct Inner {
    shared: Mutex<Shared>,
    wake: Condvar,
    budget: u64,
    schedule: crate::stochastic::StepSchedule,
    cfg: ServerConfig,
    template: ModelState,
}

impl Inner {
    fn lock(&self) -> std::sync::MutexGuard<'_, Shared> {
        self.shared.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn checkpoint(&self, stats: &SufficientStats) {
        if let Some(path) = &self.cfg.checkpoint {
            let mut state = self.template.clone();
            stats.derive_into(&mut state);
            if let Err(e) = state.save(path) {
                warn!("checkpoint {}: {e}", path.display());
            }
        }
    }

    fn apply(&self, push: Push) -> Message {
        let mut sh = self.lock();
        if sh.done {
            return Message::Shutdown;
        }
        let t = sh.stats.t;
        if push.t_base > t || !shape_matches(&sh.stats, &push.update) {
            sh.metrics.malformed += 1;
            return Message::Ack {
                code: AckCode::Malformed,
                t,
            };
        }
        let staleness = t - push.t_base;
        if staleness > self.cfg.max_staleness {
            sh.metrics.stale_dropped += 1;
            debug!("dropping push from worker {} with staleness {staleness}", push.worker);
            return Message::Ack { code: AckCode::Stale, t };
        }
        let rho = self.schedule.rho(t + 1);
        global_update(&mut sh.stats, &push.update, rho);
        let t = sh.stats.t;
        sh.metrics.applied += 1;
        sh.metrics.total_staleness += staleness;
        sh.metrics.max_staleness_seen = sh.metrics.max_staleness_seen.max(staleness);
        sh.log.push(AppliedUpdate {
            t,
            rho,
            worker: push.worker,
            batch: push.batch,
            t_base: push.t_base,
            update: push.update,
        });
        if self.cfg.checkpoint_every > 0 && t % self.cfg.checkpoint_every == 0 {
            self.checkpoint(&sh.stats);
        }
        if t >= self.budget {
            info!("iteration budget {} reached", self.budget);
            sh.done = true;
            self.wake.notify_all();
        }
        Message::Ack { code: AckCode::Ok, t }
    }

    fn handle(&self, mut stream: TcpStream) {
        loop {
            let payload = match read_frame(&mut stream) {
                Ok(p) => p,
                Err(ServerError::FrameTooLarge(n)) => {
                    warn!("closing connection after oversized frame ({n} bytes)");
                    return;
                }
                Err(_) => return,
            };
            let (reply, close) = match decode(&payload) {
                Err(e) => {
                    let mut sh = self.lock();
                    sh.metrics.malformed += 1;
                    warn!("{e}");
                    (
                        Message::Ack {
                            code: AckCode::Malformed,
                            t: sh.stats.t,
                        },
                        false,
                    )
                }
                Ok(Message::Hello { worker }) => {
                    let mut sh = self.lock();
                    sh.metrics.hellos += 1;
                    info!("worker {worker} connected");
                    self.wake.notify_all();
                    (
                        Message::Ack {
                            code: AckCode::Ok,
                            t: sh.stats.t,
                        },
                        false,
                    )
                }
                Ok(Message::ModelReq { .. }) => {
                    let sh = self.lock();
                    let sh = self
                        .wake
                        .wait_while(sh, |s| !s.done && s.metrics.hellos < self.cfg.workers_expected)
                        .unwrap_or_else(|e| e.into_inner());
                    if sh.done {
                        (Message::Shutdown, true)
                    } else {
                        (Message::ModelSnapshot(sh.stats.clone()), false)
                    }
                }
                Ok(Message::StatsPush(p)) => {
                    let r = self.apply(p);
                    let close = r == Message::Shutdown;
                    (r, close)
                }
                Ok(Message::Shutdown) => {
                    let mut sh = self.lock();
                    info!("shutdown requested");
                    sh.done = true;
                    self.wake.notify_all();
                    (
                        Message::Ack {
                            code: AckCode::Ok,
                            t: sh.stats.t,
                        },
                        true,
                    )
                }
                Ok(other) => {
                    let mut sh = self.lock();
                    sh.metrics.malformed += 1;
                    warn!("unexpected {} from a worker", other.kind());
                    (
                        Message::Ack {
                            code: AckCode::Malformed,
                            t: sh.stats.t,
                        },
                        false,
                    )
                }
            };
            if write_frame(&mut stream, &reply).is_err() || close {
                return;
            }
        }
    }
}

fn shape_matches(stats: &SufficientStats, u: &BatchUpdate) -> bool {
    let (n, k) = stats.theta.dim();
    u.phi.dim() == stats.phi.dim()
        && u.phi_prime.dim() == stats.phi_prime.dim()
        && u.theta_rows.iter().all(|(p, row)| *p < n && row.len() == k)
        && u.h.iter().all(|&(i, _)| i < stats.h.len())
}

pub struct Server {
    listener: TcpListener,
    inner: Arc<Inner>,
}

impl Server {
    /// Binds `addr`. `template` supplies everything of the model besides the
    /// statistics (node ids, hyperparameters, weights).
    pub fn bind<A: ToSocketAddrs>(
        addr: A,
        stats: SufficientStats,
        template: ModelState,
        train: &StochasticConfig,
        cfg: ServerConfig,
    ) -> Result<Server, ServerError> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        Ok(Server {
            listener,
            inner: Arc::new(Inner {
                shared: Mutex::new(Shared {
                    stats,
                    log: Vec::new(),
                    metrics: ServerMetrics::default(),
                    done: false,
                }),
                wake: Condvar::new(),
                budget: train.iterations,
                schedule: train.schedule,
                cfg,
                template,
            }),
        })
    }

    pub fn local_addr(&self) -> io::Result<std::net::SocketAddr> {
        self.listener.local_addr()
    }

    /// Serves until the iteration budget is spent or a SHUTDOWN arrives, then
    /// writes the final checkpoint and closes every connection.
    pub fn run(self) -> Result<ServerOutput, ServerError> {
        let mut handlers: Vec<(thread::JoinHandle<()>, TcpStream)> = Vec::new();
        if self.inner.budget == 0 {
            self.inner.lock().done = true;
        }
        loop {
            if self.inner.lock().done {
                break;
            }
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    debug!("connection from {peer}");
                    stream.set_nonblocking(false)?;
                    stream.set_nodelay(true)?;
                    let keep = stream.try_clone()?;
                    let inner = Arc::clone(&self.inner);
                    handlers.push((thread::spawn(move || inner.handle(stream)), keep));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
                Err(e) => return Err(e.into()),
            }
        }
        drop(self.listener);
        let deadline = Instant::now() + self.inner.cfg.drain_timeout;
        while Instant::now() < deadline && handlers.iter().any(|(h, _)| !h.is_finished()) {
            thread::sleep(Duration::from_millis(2));
        }
        for (h, s) in handlers {
            let _ = s.shutdown(Shutdown::Both);
            let _ = h.join();
        }
        let sh = self.inner.lock();
        self.inner.checkpoint(&sh.stats);
        let mut state = self.inner.template.clone();
        sh.stats.derive_into(&mut state);
        Ok(ServerOutput {
            state,
            stats: sh.stats.clone(),
            log: sh.log.clone(),
            metrics: sh.metrics.clone(),
        })
    }
}

/// Applies a server log to `initial` through the local update rule.
pub fn replay(initial: &SufficientStats, log: &[AppliedUpdate]) -> SufficientStats {
    let mut stats = initial.clone();
    for entry in log {
        global_update(&mut stats, &entry.update, entry.rho);
    }
    stats
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkerConfig {
    pub worker_id: u64,
    /// Connection attempts before giving up.
    pub connect_attempts: u32,
    /// First reconnect delay; doubled after each failure.
    pub backoff: Duration,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        WorkerConfig {
            worker_id: 0,
            connect_attempts: 5,
            backoff: Duration::from_millis(100),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WorkerReport {
    pub pushes: u64,
    pub accepted: u64,
    pub stale: u64,
    pub rejected: u64,
}

fn connect(addr: &str, cfg: &WorkerConfig) -> Result<TcpStream, ServerError> {
    let mut delay = cfg.backoff;
    for attempt in 1..=cfg.connect_attempts.max(1) {
        match TcpStream::connect(addr) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) => {
                debug!("connect {addr} attempt {attempt}: {e}");
                if attempt < cfg.connect_attempts {
                    thread::sleep(delay);
                    delay = delay.saturating_mul(2);
                }
            }
        }
    }
    Err(ServerError::Unreachable {
        addr: addr.to_string(),
        attempts: cfg.connect_attempts.max(1),
    })
}

fn request(stream: &mut TcpStream, msg: &Message) -> Result<Message, ServerError> {
    write_frame(stream, msg)?;
    decode(&read_frame(stream)?)
}

enum Session {
    Finished,
    Lost,
}

/// Worker loop: pull a snapshot, compute the update of batch
/// `(worker_id, round)`, push it, repeat until the server shuts down.
///
/// `state` must carry the model fields the statistics do not (node ids,
/// hyperparameters); it is overwritten from every snapshot.
pub fn work(
    addr: &str,
    ctx: &StochasticContext,
    mut state: ModelState,
    cfg: &WorkerConfig,
) -> Result<WorkerReport, ServerError> {
    let mut report = WorkerReport::default();
    let mut duals = MStepDuals::default();
    let mut round = 0u64;
    loop {
        let mut stream = connect(addr, cfg)?;
        match session(&mut stream, ctx, &mut state, cfg.worker_id, &mut round, &mut duals, &mut report) {
            Ok(Session::Finished) => return Ok(report),
            Ok(Session::Lost) => {}
            Err(ServerError::Io(e)) => warn!("connection lost: {e}; reconnecting"),
            Err(e) => return Err(e),
        }
    }
}

fn session(
    stream: &mut TcpStream,
    ctx: &StochasticContext,
    state: &mut ModelState,
    worker: u64,
    round: &mut u64,
    duals: &mut MStepDuals,
    report: &mut WorkerReport,
) -> Result<Session, ServerError> {
    match request(stream, &Message::Hello { worker })? {
        Message::Ack { .. } => {}
        Message::Shutdown => return Ok(Session::Finished),
        other => return Err(ServerError::Protocol(other.kind().to_string())),
    }
    loop {
        let stats = match request(stream, &Message::ModelReq { worker })? {
            Message::ModelSnapshot(s) => s,
            Message::Shutdown => return Ok(Session::Finished),
            Message::Ack {
                code: AckCode::Malformed,
                ..
            } => return Ok(Session::Lost),
            other => return Err(ServerError::Protocol(other.kind().to_string())),
        };
        if stats.theta.dim() != state.pi.dim() || stats.h.len() != state.h.len() {
            return Err(ServerError::Protocol("snapshot does not match the local model".into()));
        }
        stats.derive_into(state);
        let batch = ctx
            .sample(worker, *round)
            .ok_or_else(|| ServerError::Protocol("no training pairs in sampled batches".into()))?;
        let update = ctx.compute_update(state, &batch, duals);
        let push = Push {
            worker,
            batch: *round,
            t_base: stats.t,
            update,
        };
        *round += 1;
        report.pushes += 1;
        match request(stream, &Message::StatsPush(push))? {
            Message::Ack { code: AckCode::Ok, .. } => report.accepted += 1,
            Message::Ack {
                code: AckCode::Stale, ..
            } => report.stale += 1,
            Message::Ack { .. } => report.rejected += 1,
            Message::Shutdown => return Ok(Session::Finished),
            other => return Err(ServerError::Protocol(other.kind().to_string())),
        }
    }
}

/// Asks the server at `addr` to stop.
pub fn send_shutdown(addr: &str) -> Result<(), ServerError> {
    let mut stream = TcpStream::connect(addr)?;
    match request(&mut stream, &Message::Shutdown)? {
        Message::Ack { .. } | Message::Shutdown => Ok(()),
        other => Err(ServerError::Protocol(other.kind().to_string())),
    }
}
