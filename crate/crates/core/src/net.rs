//! Framed message connections over TCP, a small thread-per-connection
//! server, and the bandwidth throttle used to emulate slow links.

use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};

use crate::error::{Error, Result};
use crate::protocol::{encode, Blob, FrameDecoder, Message};

const READ_CHUNK: usize = 256 << 10;
const THROTTLE_SLICE: usize = 64 << 10;

/// Bytes-per-second limit shared by every clone; 0 means unlimited.
///
/// Pacing keeps a virtual clock of when the link becomes free, so
/// concurrent users split the rate and an idle link banks no credit.
#[derive(Debug, Clone, Default)]
pub struct Throttle {
    inner: Arc<ThrottleInner>,
}

#[derive(Debug, Default)]
struct ThrottleInner {
    rate: AtomicU64,
    free_at: Mutex<Option<Instant>>,
}

impl Throttle {
    pub fn unlimited() -> Self {
        Self::default()
    }

    pub fn with_rate(bytes_per_sec: u64) -> Self {
        let t = Self::default();
        t.set_rate(bytes_per_sec);
        t
    }

    pub fn set_rate(&self, bytes_per_sec: u64) {
        self.inner.rate.store(bytes_per_sec, Ordering::Relaxed);
    }

    pub fn rate(&self) -> u64 {
        self.inner.rate.load(Ordering::Relaxed)
    }

    /// Blocks until `bytes` more bytes fit under the rate.
    pub fn pace(&self, bytes: usize) {
        let rate = self.rate();
        if rate == 0 || bytes == 0 {
            return;
        }
        let cost = Duration::from_secs_f64(bytes as f64 / rate as f64);
        let until = {
            let mut free_at = self.inner.free_at.lock().unwrap();
            let now = Instant::now();
            let start = match *free_at {
                Some(t) if t > now => t,
                _ => now,
            };
            let end = start + cost;
            *free_at = Some(end);
            end
        };
        let now = Instant::now();
        if until > now {
            thread::sleep(until - now);
        }
    }

    fn write_all(&self, stream: &mut TcpStream, bytes: &[u8]) -> std::io::Result<()> {
        if self.rate() == 0 {
            return stream.write_all(bytes);
        }
        for slice in bytes.chunks(THROTTLE_SLICE) {
            stream.write_all(slice)?;
            self.pace(slice.len());
        }
        Ok(())
    }
}

/// A bidirectional message stream.
pub struct Connection {
    stream: TcpStream,
    decoder: FrameDecoder,
    throttle: Option<Throttle>,
    read_buf: Vec<u8>,
    peer: Option<SocketAddr>,
}

impl Connection {
    pub fn new(stream: TcpStream) -> Self {
        let _ = stream.set_nodelay(true);
        let peer = stream.peer_addr().ok();
        Self {
            stream,
            decoder: FrameDecoder::new(),
            throttle: None,
            read_buf: vec![0u8; READ_CHUNK],
            peer,
        }
    }

    pub fn connect(addr: &str) -> Result<Self> {
        Self::connect_timeout(addr, Duration::from_secs(5))
    }

    pub fn connect_timeout(addr: &str, timeout: Duration) -> Result<Self> {
        let mut last = None;
        for sa in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&sa, timeout) {
                Ok(s) => return Ok(Self::new(s)),
                Err(e) => last = Some(e),
            }
        }
        Err(last
            .map(Error::Io)
            .unwrap_or_else(|| Error::invalid(format!("address {addr} did not resolve"))))
    }

    pub fn with_throttle(mut self, throttle: Throttle) -> Self {
        self.throttle = Some(throttle);
        self
    }

    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> Result<()> {
        self.stream.set_read_timeout(timeout)?;
        Ok(())
    }

    pub fn peer(&self) -> Option<SocketAddr> {
        self.peer
    }

    pub fn send(&mut self, msg: &Message) -> Result<()> {
        let bytes = encode(msg)?;
        let res = match &self.throttle {
            Some(t) => t.write_all(&mut self.stream, &bytes),
            None => self.stream.write_all(&bytes),
        };
        res.map_err(|e| match e.kind() {
            std::io::ErrorKind::BrokenPipe | std::io::ErrorKind::ConnectionReset => {
                Error::Disconnected
            }
            _ => Error::Io(e),
        })
    }

    /// Blocks until a full message arrives.
    pub fn recv(&mut self) -> Result<Message> {
        loop {
            if let Some(msg) = self.decoder.next_message()? {
                return Ok(msg);
            }
            let n = match self.stream.read(&mut self.read_buf) {
                Ok(0) => return Err(Error::Disconnected),
                Ok(n) => n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e)
                    if matches!(
                        e.kind(),
                        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                    ) =>
                {
                    return Err(Error::Timeout("read".into()))
                }
                Err(e) if e.kind() == std::io::ErrorKind::ConnectionReset => {
                    return Err(Error::Disconnected)
                }
                Err(e) => return Err(Error::Io(e)),
            };
            self.decoder.push(&self.read_buf[..n]);
        }
    }

    /// Receives a message, turning an `Error` frame into `Err`.
    pub fn recv_ok(&mut self) -> Result<Message> {
        match self.recv()? {
            Message::Error { code, reason } => Err(Error::Remote { code, reason }),
            m => Ok(m),
        }
    }

    /// Request/response round trip.
    pub fn call(&mut self, msg: &Message) -> Result<Message> {
        self.send(msg)?;
        self.recv_ok()
    }

    pub fn shutdown(&self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

/// One-shot request to `addr`.
pub fn request(addr: &str, msg: &Message) -> Result<Message> {
    Connection::connect(addr)?.call(msg)
}

/// Expects a bare `Ok` reply.
pub fn expect_ok(reply: Message) -> Result<()> {
    match reply {
        Message::Ok {} => Ok(()),
        other => Err(unexpected(&other)),
    }
}

pub fn unexpected(msg: &Message) -> Error {
    Error::remote(
        crate::protocol::ErrorCode::Protocol,
        format!("unexpected {} message", msg.name()),
    )
}

/// Sends `data` as a sequence of chunk messages built by `make(offset, chunk)`.
/// An empty buffer still produces one (empty) chunk.
pub fn send_chunks(
    conn: &mut Connection,
    data: &[u8],
    chunk_size: usize,
    mut make: impl FnMut(u64, Blob) -> Message,
) -> Result<()> {
    if data.is_empty() {
        return conn.send(&make(0, Blob::default()));
    }
    for (i, chunk) in data.chunks(chunk_size.max(1)).enumerate() {
        conn.send(&make((i * chunk_size) as u64, Blob(chunk.to_vec())))?;
    }
    Ok(())
}

/// Accepts connections and serves each one on its own thread.
pub struct Server {
    addr: SocketAddr,
    stopped: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    pub fn spawn<H>(bind: &str, name: &str, handler: H) -> Result<Server>
    where
        H: Fn(Connection) + Send + Sync + 'static,
    {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let stopped = Arc::new(AtomicBool::new(false));
        let conns: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
        let handler = Arc::new(handler);
        let thread_name = format!("{name}-accept");
        let accept = {
            let stopped = stopped.clone();
            let conns = conns.clone();
            let name = name.to_string();
            thread::Builder::new().name(thread_name).spawn(move || {
                for incoming in listener.incoming() {
                    if stopped.load(Ordering::SeqCst) {
                        break;
                    }
                    let stream = match incoming {
                        Ok(s) => s,
                        Err(e) => {
                            warn!("event=accept_error server={name} error={e}");
                            continue;
                        }
                    };
                    if let Ok(clone) = stream.try_clone() {
                        let mut guard = conns.lock().unwrap();
                        guard.retain(|s| s.peer_addr().is_ok());
                        guard.push(clone);
                    }
                    let handler = handler.clone();
                    let conn_name = format!("{name}-conn");
                    let spawned = thread::Builder::new()
                        .name(conn_name)
                        .spawn(move || handler(Connection::new(stream)));
                    if let Err(e) = spawned {
                        warn!("event=spawn_error server={name} error={e}");
                    }
                }
                debug!("event=server_stopped server={name}");
            })?
        };
        Ok(Server {
            addr,
            stopped,
            conns,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped.load(Ordering::SeqCst)
    }

    /// Stops accepting and severs every open connection.
    pub fn stop(&mut self) {
        if self.stopped.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        for s in self.conns.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AppId;

    fn echo_server() -> Server {
        Server::spawn("127.0.0.1:0", "echo", |mut conn| {
            while let Ok(m) = conn.recv() {
                if conn.send(&m).is_err() {
                    break;
                }
            }
        })
        .unwrap()
    }

    #[test]
    fn round_trip_over_loopback() {
        let server = echo_server();
        let mut c = Connection::connect(&server.endpoint()).unwrap();
        let msg = Message::ProbeAgents { app_id: AppId(5) };
        assert_eq!(c.call(&msg).unwrap(), msg);
    }

    #[test]
    fn error_frames_become_errors() {
        let server = echo_server();
        let mut c = Connection::connect(&server.endpoint()).unwrap();
        let err = c
            .call(&Message::error(crate::protocol::ErrorCode::Missing, "gone"))
            .unwrap_err();
        assert_eq!(err.code(), Some(crate::protocol::ErrorCode::Missing));
    }

    #[test]
    fn stop_severs_connections() {
        let mut server = echo_server();
        let mut c = Connection::connect(&server.endpoint()).unwrap();
        c.call(&Message::Ok {}).unwrap();
        server.stop();
        assert!(c.call(&Message::Ok {}).is_err());
    }

    #[test]
    fn throttle_is_shared_between_users() {
        let throttle = Throttle::with_rate(8 << 20);
        let t0 = Instant::now();
        let workers: Vec<_> = (0..2)
            .map(|_| {
                let t = throttle.clone();
                thread::spawn(move || {
                    for _ in 0..16 {
                        t.pace(64 << 10);
                    }
                })
            })
            .collect();
        for w in workers {
            w.join().unwrap();
        }
        // 2 MiB in total at 8 MiB/s
        assert!(t0.elapsed() >= Duration::from_millis(230), "{:?}", t0.elapsed());
    }

    #[test]
    fn throttle_paces_writes() {
        let server = echo_server();
        let throttle = Throttle::with_rate(4 << 20);
        let mut c = Connection::connect(&server.endpoint())
            .unwrap()
            .with_throttle(throttle);
        let msg = Message::PeerData {
            crc: 0,
            data: Blob(vec![0u8; 1 << 20]),
        };
        let t0 = Instant::now();
        c.call(&msg).unwrap();
        c.call(&msg).unwrap();
        // 2 MiB at 4 MiB/s
        assert!(t0.elapsed() >= Duration::from_millis(450), "{:?}", t0.elapsed());
    }
}
