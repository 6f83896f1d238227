//! Server daemon and client-side query helper.
//!
//! Each server listens for clients on its own address. The two servers share
//! one persistent peer link: CS1 listens on the peer address and CS2 dials
//! it, reconnecting whenever the link is lost.
//!
//! A client query has three steps on each server connection:
//!
//! 1. `client-upload` (session = query id, payload = query share) → empty
//!    `client-upload` acknowledgement.
//! 2. `client-query` (session = query id) → the server runs the pipeline with
//!    its peer under session id = query id.
//! 3. The server answers `client-result` (payload = result share) or `error`.
//!
//! Queries run one at a time. Every query consumes the next unused
//! correlation file from the server's directory; used files are renamed with
//! a `.used` suffix so a restart never reuses them.

use std::collections::HashMap;
use std::fs;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::{info, warn};

use crate::client::read_db_share;
use crate::dealer::{read_correlation_header, read_correlations};
use crate::engine::{Session, SessionStats};
use crate::error::{Error, Result};
use crate::protocol::{execute_query, QueryShare, ResultShare};
use crate::ring::{Party, Ring};
use crate::shuffle::SharedDatabase;
use crate::transport::{read_frame, write_frame, Frame, MsgType, TcpTransport};

const POLL: Duration = Duration::from_millis(10);
const TIMEOUT_PREFIX: &str = "timeout: ";

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub role: Party,
    /// Address clients connect to.
    pub client_addr: String,
    /// CS1: address to listen on for the peer. CS2: CS1's peer address.
    pub peer_addr: String,
    pub db_path: PathBuf,
    /// Directory of this party's correlation files (`*.p1` or `*.p2`).
    pub corr_dir: PathBuf,
    /// Injected one-way delay on the peer link.
    pub delay: Duration,
    /// How long to wait for the peer before failing a query.
    pub timeout: Duration,
}

/// Correlation file extension for a party.
pub fn corr_extension(party: Party) -> &'static str {
    match party {
        Party::P1 => "p1",
        Party::P2 => "p2",
    }
}

/// Unused correlation files for `party` in `dir`, in name order.
pub fn pending_correlation_files(dir: &Path, party: Party) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("correlation directory {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some(corr_extension(party)))
        .collect();
    files.sort();
    Ok(files)
}

type PeerLink = Arc<Mutex<Option<TcpTransport>>>;

struct State {
    config: ServerConfig,
    db: SharedDatabase<Ring>,
    pending: Mutex<HashMap<u64, QueryShare<Ring>>>,
    peer: PeerLink,
    /// Set while a query holds the peer link.
    peer_busy: AtomicBool,
    /// Serializes query execution.
    run_lock: Mutex<()>,
    last_stats: Mutex<Option<SessionStats>>,
    shutdown: AtomicBool,
}

/// A running server; dropping it does not stop the threads, call
/// [`ServerHandle::shutdown`].
pub struct ServerHandle {
    pub client_addr: SocketAddr,
    /// Bound peer address (CS1 only).
    pub peer_addr: Option<SocketAddr>,
    state: Arc<State>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) {
        self.state.shutdown.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        if let Some(link) = self.state.peer.lock().unwrap().take() {
            link.close();
        }
    }

    pub fn peer_connected(&self) -> bool {
        self.state.peer.lock().unwrap().is_some()
    }

    /// Peer-link statistics of the last successful query.
    pub fn last_stats(&self) -> Option<SessionStats> {
        *self.state.last_stats.lock().unwrap()
    }

    /// Blocks until the server stops (it never does on its own).
    pub fn join(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

/// Validates the configuration and starts the server threads.
pub fn spawn_server(config: ServerConfig) -> Result<ServerHandle> {
    let db = read_db_share::<Ring>(&config.db_path, Some(config.role))
        .map_err(|e| Error::Config(format!("table share {}: {e}", config.db_path.display())))?;
    let files = pending_correlation_files(&config.corr_dir, config.role)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no unused correlation files in {}", config.corr_dir.display())));
    }
    for f in &files {
        let h = read_correlation_header(f).map_err(|e| Error::Config(format!("{}: {e}", f.display())))?;
        if h.party != config.role || (h.n as usize, h.m as usize) != (db.n(), db.m()) {
            return Err(Error::Config(format!(
                "{} is for {:?} on a {}x{} table; this server is {:?} with a {}x{} table",
                f.display(),
                h.party,
                h.n,
                h.m,
                config.role,
                db.n(),
                db.m()
            )));
        }
    }
    let client_listener = TcpListener::bind(&config.client_addr)
        .map_err(|e| Error::Config(format!("bind {}: {e}", config.client_addr)))?;
    client_listener.set_nonblocking(true)?;
    let client_addr = client_listener.local_addr()?;

    let state = Arc::new(State {
        config: config.clone(),
        db,
        pending: Mutex::new(HashMap::new()),
        peer: Arc::new(Mutex::new(None)),
        peer_busy: AtomicBool::new(false),
        run_lock: Mutex::new(()),
        last_stats: Mutex::new(None),
        shutdown: AtomicBool::new(false),
    });

    let mut threads = Vec::new();
    let mut peer_addr = None;
    match config.role {
        Party::P1 => {
            let l = TcpListener::bind(&config.peer_addr)
                .map_err(|e| Error::Config(format!("bind {}: {e}", config.peer_addr)))?;
            l.set_nonblocking(true)?;
            peer_addr = Some(l.local_addr()?);
            let st = state.clone();
            threads.push(std::thread::spawn(move || peer_accept_loop(st, l)));
        }
        Party::P2 => {
            let st = state.clone();
            threads.push(std::thread::spawn(move || peer_dial_loop(st)));
        }
    }
    let st = state.clone();
    threads.push(std::thread::spawn(move || client_accept_loop(st, client_listener)));
    info!("{:?} serving clients on {client_addr}", config.role);
    Ok(ServerHandle { client_addr, peer_addr, state, threads })
}

/// Runs a server until the process is killed.
pub fn run_server(config: ServerConfig) -> Result<()> {
    spawn_server(config)?.join();
    Ok(())
}

fn new_peer_link(stream: TcpStream, st: &State) -> Result<TcpTransport> {
    stream.set_nonblocking(false)?;
    TcpTransport::new(stream, st.config.delay, Some(st.config.timeout))
}

fn peer_accept_loop(st: Arc<State>, listener: TcpListener) {
    while !st.shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, addr)) => match new_peer_link(stream, &st) {
                Ok(link) => {
                    info!("peer connected from {addr}");
                    *st.peer.lock().unwrap() = Some(link);
                }
                Err(e) => warn!("peer link setup failed: {e}"),
            },
            Err(_) => std::thread::sleep(POLL),
        }
    }
}

fn peer_dial_loop(st: Arc<State>) {
    while !st.shutdown.load(Ordering::SeqCst) {
        if !st.peer_busy.load(Ordering::SeqCst) && st.peer.lock().unwrap().is_none() {
            if let Ok(stream) = TcpStream::connect(&st.config.peer_addr) {
                match new_peer_link(stream, &st) {
                    Ok(link) => {
                        info!("connected to peer at {}", st.config.peer_addr);
                        *st.peer.lock().unwrap() = Some(link);
                    }
                    Err(e) => warn!("peer link setup failed: {e}"),
                }
            }
        }
        std::thread::sleep(POLL * 5);
    }
}

fn client_accept_loop(st: Arc<State>, listener: TcpListener) {
    let mut workers = Vec::new();
    while !st.shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let st = st.clone();
                workers.push(std::thread::spawn(move || {
                    if let Err(e) = serve_client(&st, stream) {
                        if !matches!(e, Error::Closed) {
                            warn!("client connection: {e}");
                        }
                    }
                }));
            }
            Err(_) => std::thread::sleep(POLL),
        }
        workers.retain(|w| !w.is_finished());
    }
    for w in workers {
        let _ = w.join();
    }
}

fn serve_client(st: &State, stream: TcpStream) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(POLL * 10))?;
    let mut reader = std::io::BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    loop {
        if st.shutdown.load(Ordering::SeqCst) {
            return Ok(());
        }
        let frame = match read_frame(&mut reader) {
            Ok(f) => f,
            Err(Error::Timeout(_)) => continue,
            Err(e) => return Err(e),
        };
        let qid = frame.session_id;
        let reply = match frame.msg_type {
            MsgType::ClientUpload => match QueryShare::<Ring>::from_bytes(&frame.payload) {
                Ok(q) if q.party == st.config.role => {
                    st.pending.lock().unwrap().insert(qid, q);
                    Frame::new(MsgType::ClientUpload, qid, 0, Vec::new())
                }
                Ok(_) => error_frame(qid, &Error::PartyMismatch("query share is for the other server".into())),
                Err(e) => error_frame(qid, &e),
            },
            MsgType::ClientQuery => match answer_query(st, qid) {
                Ok(r) => Frame::new(MsgType::ClientResult, qid, 0, r.to_bytes()),
                Err(e) => {
                    warn!("query {qid} failed: {e}");
                    error_frame(qid, &e)
                }
            },
            other => error_frame(qid, &Error::Protocol(format!("unexpected {other:?} from client"))),
        };
        write_frame(&mut writer, &reply)?;
    }
}

fn error_frame(qid: u64, e: &Error) -> Frame {
    let text = match e {
        Error::Timeout(_) => format!("{TIMEOUT_PREFIX}{e}"),
        _ => e.to_string(),
    };
    Frame::new(MsgType::Error, qid, 0, text.into_bytes())
}

fn wait_for_peer(st: &State) -> Result<TcpTransport> {
    let deadline = Instant::now() + st.config.timeout;
    loop {
        if let Some(link) = st.peer.lock().unwrap().take() {
            st.peer_busy.store(true, Ordering::SeqCst);
            return Ok(link);
        }
        if Instant::now() >= deadline {
            return Err(Error::Timeout(format!("peer server unreachable after {:?}", st.config.timeout)));
        }
        std::thread::sleep(POLL);
    }
}

fn answer_query(st: &State, qid: u64) -> Result<ResultShare<Ring>> {
    let _guard = st.run_lock.lock().unwrap();
    let query = st
        .pending
        .lock()
        .unwrap()
        .remove(&qid)
        .ok_or_else(|| Error::Protocol(format!("no query share uploaded for query {qid}")))?;
    let mut link = wait_for_peer(st)?;
    let file = pending_correlation_files(&st.config.corr_dir, st.config.role)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Config("correlation files exhausted".into()))?;
    let corr = read_correlations::<Ring>(&file, Some(st.config.role))?;
    let used = file.with_extension(format!("{}.used", corr_extension(st.config.role)));
    fs::rename(&file, &used)?;
    let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();

    let result = {
        let mut session = Session::new(qid, &mut link, corr);
        let mut hello = qid.to_le_bytes().to_vec();
        hello.extend_from_slice(stem.as_bytes());
        let outcome = session.handshake(&hello).and_then(|_| execute_query(&mut session, &st.db, &query));
        match outcome {
            Ok(o) => {
                info!(
                    "query {qid}: |C|={} |S|={} rounds={} sent={}B",
                    o.candidates,
                    o.result.len(),
                    o.stats.rounds,
                    o.stats.bytes_sent
                );
                *st.last_stats.lock().unwrap() = Some(o.stats);
                Ok(o.result)
            }
            Err(e) => {
                warn!("query {qid} aborted at round {}: {e}", session.round());
                session.abort(&e.to_string());
                Err(e)
            }
        }
    };
    match result {
        Ok(r) => {
            st.peer.lock().unwrap().get_or_insert(link);
            st.peer_busy.store(false, Ordering::SeqCst);
            Ok(r)
        }
        Err(e) => {
            // the link may hold stray frames; let the servers reconnect
            link.close();
            st.peer_busy.store(false, Ordering::SeqCst);
            Err(e)
        }
    }
}

/// Client side: uploads both query shares, triggers the query on both
/// servers and collects the two result shares. The servers are contacted in
/// parallel; if both fail, a timeout reported by a live server is preferred
/// over a connection error to a dead one.
pub fn remote_query(
    servers: [&str; 2],
    qid: u64,
    shares: (&QueryShare<Ring>, &QueryShare<Ring>),
    timeout: Duration,
) -> Result<(ResultShare<Ring>, ResultShare<Ring>)> {
    let (a, b) = std::thread::scope(|s| {
        let other = s.spawn(|| query_server(servers[1], qid, shares.1, timeout));
        let a = query_server(servers[0], qid, shares.0, timeout);
        (a, other.join().unwrap_or_else(|_| Err(Error::Protocol("client worker panicked".into()))))
    });
    match (a, b) {
        (Ok(a), Ok(b)) => Ok((a, b)),
        (Err(e @ Error::Timeout(_)), _) | (_, Err(e @ Error::Timeout(_))) => Err(e),
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

/// Uploads one query share to one server and waits for its result share.
/// The server needs its peer to answer, so this blocks until both servers
/// have been asked.
pub fn query_server(addr: &str, qid: u64, share: &QueryShare<Ring>, timeout: Duration) -> Result<ResultShare<Ring>> {
    let mut conn = TcpStream::connect(addr).map_err(|e| Error::Transport(format!("connect {addr}: {e}")))?;
    conn.set_nodelay(true)?;
    write_frame(&mut conn, &Frame::new(MsgType::ClientUpload, qid, 0, share.to_bytes()))?;
    conn.set_read_timeout(Some(timeout))?;
    expect_reply(&mut conn, MsgType::ClientUpload)?;
    write_frame(&mut conn, &Frame::new(MsgType::ClientQuery, qid, 0, Vec::new()))?;
    // the server itself gives up on its peer after its own timeout
    conn.set_read_timeout(None)?;
    ResultShare::from_bytes(&expect_reply(&mut conn, MsgType::ClientResult)?)
}

fn expect_reply(conn: &mut TcpStream, ty: MsgType) -> Result<Vec<u8>> {
    let f = read_frame(conn)?;
    match f.msg_type {
        t if t == ty => Ok(f.payload),
        MsgType::Error => {
            let text = String::from_utf8_lossy(&f.payload).into_owned();
            match text.strip_prefix(TIMEOUT_PREFIX) {
                Some(rest) => Err(Error::Timeout(rest.to_string())),
                None => Err(Error::Remote(text)),
            }
        }
        other => Err(Error::Protocol(format!("expected {ty:?} from server, got {other:?}"))),
    }
}
