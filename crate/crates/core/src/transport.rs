//! Framed message transport.
//!
//! Every message on every link is one frame:
//!
//! ```text
//! length: u32 | msg_type: u8 | session_id: u64 | round: u32 | payload
//! ```
//!
//! `length` counts payload bytes only; the 13 bytes after it are fixed, so a
//! frame occupies `17 + length` bytes on the wire. Integers are
//! little-endian.
//!
//! Message types:
//!
//! | code | name             | family          | direction        |
//! |------|------------------|-----------------|------------------|
//! | 0x01 | handshake        | handshake       | server <-> server |
//! | 0x02 | corr-sync        | correlation sync| server <-> server |
//! | 0x10 | engine-beaver    | engine round    | server <-> server |
//! | 0x11 | engine-and       | engine round    | server <-> server |
//! | 0x20 | shuffle-z2       | shuffle         | CS2 -> CS1       |
//! | 0x21 | shuffle-z1       | shuffle         | CS1 -> CS2       |
//! | 0x30 | open-arith       | open batch      | server <-> server |
//! | 0x31 | open-bits        | open batch      | server <-> server |
//! | 0x32 | open-delta-hat   | open batch      | server <-> server |
//! | 0x33 | open-phi1-masked | open batch      | server <-> server |
//! | 0x34 | open-phi2        | open batch      | server <-> server |
//! | 0x40 | client-upload    | client          | client <-> server |
//! | 0x41 | client-query     | client          | client -> server |
//! | 0x42 | client-result    | client          | server -> client |
//! | 0x7f | error            | error           | any               |
//!
//! The message type doubles as the engine's op tag: a receiver that expects
//! one operation and gets another aborts the session.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

pub const FRAME_HEADER_LEN: usize = 17;
/// Upper bound on a single payload; larger length fields are treated as
/// stream corruption.
pub const MAX_PAYLOAD: usize = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Handshake = 0x01,
    CorrSync = 0x02,
    EngineBeaver = 0x10,
    EngineAnd = 0x11,
    ShuffleZ2 = 0x20,
    ShuffleZ1 = 0x21,
    OpenArith = 0x30,
    OpenBits = 0x31,
    OpenDeltaHat = 0x32,
    OpenPhi1Masked = 0x33,
    OpenPhi2 = 0x34,
    ClientUpload = 0x40,
    ClientQuery = 0x41,
    ClientResult = 0x42,
    Error = 0x7f,
}

impl MsgType {
    pub const ALL: [MsgType; 15] = [
        MsgType::Handshake,
        MsgType::CorrSync,
        MsgType::EngineBeaver,
        MsgType::EngineAnd,
        MsgType::ShuffleZ2,
        MsgType::ShuffleZ1,
        MsgType::OpenArith,
        MsgType::OpenBits,
        MsgType::OpenDeltaHat,
        MsgType::OpenPhi1Masked,
        MsgType::OpenPhi2,
        MsgType::ClientUpload,
        MsgType::ClientQuery,
        MsgType::ClientResult,
        MsgType::Error,
    ];

    pub fn from_u8(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| *t as u8 == code)
    }

    pub fn is_open(self) -> bool {
        matches!(
            self,
            MsgType::OpenArith | MsgType::OpenBits | MsgType::OpenDeltaHat | MsgType::OpenPhi1Masked | MsgType::OpenPhi2
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub session_id: u64,
    pub round: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, session_id: u64, round: u32, payload: Vec<u8>) -> Self {
        Frame { msg_type, session_id, round, payload }
    }

    pub fn wire_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.session_id.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(k) => got += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(got)
}

fn io_error(e: io::Error) -> Error {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => Error::Timeout("no frame from peer".into()),
        io::ErrorKind::ConnectionReset | io::ErrorKind::BrokenPipe | io::ErrorKind::UnexpectedEof => Error::Closed,
        _ => Error::Io(e),
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<usize> {
    let bytes = frame.encode();
    w.write_all(&bytes).map_err(io_error)?;
    Ok(bytes.len())
}

/// Reads one frame. A clean end of stream before the first header byte is
/// [`Error::Closed`]; an end of stream anywhere inside a frame is a transport
/// error.
pub fn read_frame(r: &mut impl Read) -> Result<Frame> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    let got = read_full(r, &mut header).map_err(io_error)?;
    if got == 0 {
        return Err(Error::Closed);
    }
    if got < FRAME_HEADER_LEN {
        return Err(Error::Transport(format!("stream ended inside a frame header ({got} bytes)")));
    }
    let len = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let code = header[4];
    let msg_type =
        MsgType::from_u8(code).ok_or_else(|| Error::Protocol(format!("unknown message type 0x{code:02x}")))?;
    if len > MAX_PAYLOAD {
        return Err(Error::Transport(format!("frame payload of {len} bytes exceeds limit")));
    }
    let session_id = u64::from_le_bytes(header[5..13].try_into().unwrap());
    let round = u32::from_le_bytes(header[13..17].try_into().unwrap());
    let mut payload = vec![0u8; len];
    let got = read_full(r, &mut payload).map_err(io_error)?;
    if got < len {
        return Err(Error::Transport(format!("stream ended inside a frame payload ({got} of {len} bytes)")));
    }
    Ok(Frame { msg_type, session_id, round, payload })
}

/// Byte and frame counters kept by each transport endpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TransportStats {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub frames_sent: u64,
    pub frames_received: u64,
}

pub trait Transport: Send {
    fn send(&mut self, frame: Frame) -> Result<()>;
    fn recv(&mut self) -> Result<Frame>;
    fn stats(&self) -> TransportStats;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&mut self, frame: Frame) -> Result<()> {
        (**self).send(frame)
    }

    fn recv(&mut self) -> Result<Frame> {
        (**self).recv()
    }

    fn stats(&self) -> TransportStats {
        (**self).stats()
    }
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn send(&mut self, frame: Frame) -> Result<()> {
        (**self).send(frame)
    }

    fn recv(&mut self) -> Result<Frame> {
        (**self).recv()
    }

    fn stats(&self) -> TransportStats {
        (**self).stats()
    }
}

fn sleep_until(t: Instant) {
    let now = Instant::now();
    if t > now {
        std::thread::sleep(t - now);
    }
}

/// One end of an in-process duplex link. Frames travel as encoded bytes, so
/// decoding errors surface exactly as they would on a socket.
pub struct InMemTransport {
    tx: Sender<(Instant, Vec<u8>)>,
    rx: Receiver<(Instant, Vec<u8>)>,
    delay: Duration,
    timeout: Option<Duration>,
    stats: TransportStats,
}

/// Two connected in-memory endpoints with a one-way delay of `delay` per
/// frame.
pub fn inmem_transport_pair(delay: Duration) -> (InMemTransport, InMemTransport) {
    let (tx_a, rx_b) = mpsc::channel();
    let (tx_b, rx_a) = mpsc::channel();
    let mk = |tx, rx| InMemTransport { tx, rx, delay, timeout: None, stats: TransportStats::default() };
    (mk(tx_a, rx_a), mk(tx_b, rx_b))
}

impl InMemTransport {
    pub fn set_timeout(&mut self, timeout: Option<Duration>) {
        self.timeout = timeout;
    }

    /// Injects raw bytes as if the peer had written them (fault tests).
    pub fn inject_raw(&self, bytes: Vec<u8>) -> Result<()> {
        self.tx.send((Instant::now(), bytes)).map_err(|_| Error::Closed)
    }
}

impl Transport for InMemTransport {
    fn send(&mut self, frame: Frame) -> Result<()> {
        let bytes = frame.encode();
        let len = bytes.len() as u64;
        self.tx.send((Instant::now() + self.delay, bytes)).map_err(|_| Error::Closed)?;
        self.stats.bytes_sent += len;
        self.stats.frames_sent += 1;
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame> {
        let (at, bytes) = match self.timeout {
            Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => Error::Timeout("no frame from peer".into()),
                RecvTimeoutError::Disconnected => Error::Closed,
            })?,
            None => self.rx.recv().map_err(|_| Error::Closed)?,
        };
        sleep_until(at);
        let mut slice = bytes.as_slice();
        let frame = read_frame(&mut slice)?;
        if !slice.is_empty() {
            return Err(Error::Transport(format!("{} stray bytes after frame", slice.len())));
        }
        self.stats.bytes_received += bytes.len() as u64;
        self.stats.frames_received += 1;
        Ok(frame)
    }

    fn stats(&self) -> TransportStats {
        self.stats
    }
}

/// TCP endpoint. Writes go through a dedicated writer thread so that both
/// parties can send a large batch at the same time without deadlocking on
/// full socket buffers; the same thread applies the injected delay.
pub struct TcpTransport {
    reader: BufReader<TcpStream>,
    stream: TcpStream,
    writer: Option<Sender<(Instant, Vec<u8>)>>,
    writer_thread: Option<JoinHandle<()>>,
    delay: Duration,
    stats: TransportStats,
}

impl TcpTransport {
    pub fn new(stream: TcpStream, delay: Duration, timeout: Option<Duration>) -> Result<Self> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(timeout)?;
        let write_half = stream.try_clone()?;
        let (tx, rx) = mpsc::channel::<(Instant, Vec<u8>)>();
        let writer_thread = std::thread::Builder::new().name("frame-writer".into()).spawn(move || {
            let mut w = BufWriter::new(write_half);
            while let Ok((at, bytes)) = rx.recv() {
                sleep_until(at);
                if w.write_all(&bytes).is_err() {
                    break;
                }
                // only flush once the queue is drained
                let mut ok = true;
                while let Ok((at, bytes)) = rx.try_recv() {
                    sleep_until(at);
                    if w.write_all(&bytes).is_err() {
                        ok = false;
                        break;
                    }
                }
                if !ok || w.flush().is_err() {
                    break;
                }
            }
            let _ = w.flush();
        })?;
        Ok(TcpTransport {
            reader: BufReader::with_capacity(1 << 16, stream.try_clone()?),
            stream,
            writer: Some(tx),
            writer_thread: Some(writer_thread),
            delay,
            stats: TransportStats::default(),
        })
    }

    pub fn connect(addr: &str, delay: Duration, timeout: Option<Duration>) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::Transport(format!("connect {addr}: {e}")))?;
        Self::new(stream, delay, timeout)
    }

    pub fn set_timeout(&mut self, timeout: Option<Duration>) -> Result<()> {
        self.stream.set_read_timeout(timeout)?;
        Ok(())
    }

    /// Flushes queued frames and closes the connection.
    pub fn close(mut self) {
        self.finish_writer();
        let _ = self.stream.shutdown(Shutdown::Both);
    }

    fn finish_writer(&mut self) {
        self.writer.take();
        if let Some(h) = self.writer_thread.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        self.finish_writer();
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, frame: Frame) -> Result<()> {
        let bytes = frame.encode();
        let len = bytes.len() as u64;
        self.writer
            .as_ref()
            .ok_or(Error::Closed)?
            .send((Instant::now() + self.delay, bytes))
            .map_err(|_| Error::Closed)?;
        self.stats.bytes_sent += len;
        self.stats.frames_sent += 1;
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame> {
        let frame = read_frame(&mut self.reader)?;
        self.stats.bytes_received += frame.wire_len() as u64;
        self.stats.frames_received += 1;
        Ok(frame)
    }

    fn stats(&self) -> TransportStats {
        self.stats
    }
}

/// Two TCP endpoints connected over the loopback interface.
pub fn tcp_loopback_pair(delay: Duration, timeout: Option<Duration>) -> Result<(TcpTransport, TcpTransport)> {
    let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let dial = std::thread::spawn(move || TcpStream::connect(addr));
    let (a, _) = listener.accept()?;
    let b = dial.join().map_err(|_| Error::Transport("dial thread panicked".into()))??;
    Ok((TcpTransport::new(a, delay, timeout)?, TcpTransport::new(b, delay, timeout)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameRecord {
    pub direction: Direction,
    pub frame: Frame,
}

/// Shared, append-only log of frames seen by a [`Recorded`] transport.
pub type FrameLog = Arc<Mutex<Vec<FrameRecord>>>;

/// Wraps a transport and logs every frame crossing it.
pub struct Recorded<T> {
    inner: T,
    log: FrameLog,
}

impl<T: Transport> Recorded<T> {
    pub fn new(inner: T) -> (Self, FrameLog) {
        let log = FrameLog::default();
        (Recorded { inner, log: log.clone() }, log)
    }

    pub fn into_inner(self) -> T {
        self.inner
    }
}

impl<T: Transport> Transport for Recorded<T> {
    fn send(&mut self, frame: Frame) -> Result<()> {
        self.log.lock().unwrap().push(FrameRecord { direction: Direction::Sent, frame: frame.clone() });
        self.inner.send(frame)
    }

    fn recv(&mut self) -> Result<Frame> {
        let frame = self.inner.recv()?;
        self.log.lock().unwrap().push(FrameRecord { direction: Direction::Received, frame: frame.clone() });
        Ok(frame)
    }

    fn stats(&self) -> TransportStats {
        self.inner.stats()
    }
}
