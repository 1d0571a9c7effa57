//! Rendezvous net channels.
//!
//! A channel is named by its input end (`ip:port/channel`). Every writer holds
//! its own connection to the input end's port; each message is one frame and
//! the write completes only when the reading process has accepted the message
//! and the reader's ACK frame has come back. Many-to-one input ends deliver in
//! arrival order across writers.
//!
//! Two transports share this logic: TCP, and an in-process loopback used for
//! single-machine runs. Both carry the same frames and ACK discipline.
//!
//! Opening a writer is a handshake: the writer sends an ACK frame carrying
//! `open` on the target channel, and the listener answers with an empty ACK
//! (accepted) or a reason (`no-channel`, `writer-rejected`).

mod envelope;
mod frame;
mod transport;

use std::collections::{HashMap, VecDeque};
use std::io;
use std::net::SocketAddrV4;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

pub use envelope::{Envelope, EnvelopeError};
pub use frame::{decode_frame, encode_frame, read_frame, write_frame, Frame, FrameError, FrameKind, MAX_PAYLOAD};
pub use crate::topology::ChannelAddress;

use transport::{Acceptor, Duplex, LoopbackHub, TcpAcceptor};

const OPEN: &[u8] = b"open";
const REFUSE_NO_CHANNEL: &[u8] = b"no-channel";
const REFUSE_WRITER: &[u8] = b"writer-rejected";

#[derive(Debug, Error)]
pub enum NetError {
    #[error("{0} is already in use")]
    AddressInUse(ChannelAddress),
    #[error("{0} is one-to-one and already has a writer")]
    WriterRejected(ChannelAddress),
    #[error("no listener at {0}")]
    NoListener(ChannelAddress),
    #[error("peer at {0} closed the channel")]
    PeerClosed(ChannelAddress),
    #[error("every writer to {0} has closed")]
    AllWritersClosed(ChannelAddress),
    #[error("timed out waiting on {0}")]
    Timeout(ChannelAddress),
    #[error("unexpected {kind:?} frame on {address}")]
    UnexpectedFrame { address: ChannelAddress, kind: FrameKind },
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arity {
    OneToOne,
    ManyToOne,
}

/// How long, and how often, an output end retries a connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConnectPolicy {
    pub window: Duration,
    pub step: Duration,
}

impl Default for ConnectPolicy {
    fn default() -> Self {
        Self { window: Duration::from_secs(10), step: Duration::from_millis(50) }
    }
}

pub type WriterId = u64;

static NEXT_WRITER: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Incoming {
    pub writer: WriterId,
    pub kind: FrameKind,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelEvent {
    Message(Incoming),
    WriterClosed(WriterId),
}

/// Live sockets, ends and runtime threads of one [`Network`].
#[derive(Debug, Default)]
struct Handles(AtomicUsize);

struct HandleGuard(Arc<Handles>);

impl HandleGuard {
    fn new(h: &Arc<Handles>) -> Self {
        h.0.fetch_add(1, Ordering::SeqCst);
        Self(h.clone())
    }
}

impl Drop for HandleGuard {
    fn drop(&mut self) {
        self.0 .0.fetch_sub(1, Ordering::SeqCst);
    }
}

enum Transport {
    Tcp,
    Loopback(Arc<LoopbackHub>),
}

struct NetInner {
    transport: Transport,
    ports: Mutex<HashMap<SocketAddrV4, Arc<PortListener>>>,
    handles: Arc<Handles>,
    policy: Mutex<ConnectPolicy>,
}

/// A channel runtime instance: either real TCP or an isolated in-process
/// loopback world.
#[derive(Clone)]
pub struct Network {
    inner: Arc<NetInner>,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.inner.transport {
            Transport::Tcp => "tcp",
            Transport::Loopback(_) => "loopback",
        };
        f.debug_struct("Network").field("transport", &kind).field("open_handles", &self.open_handles()).finish()
    }
}

impl Network {
    fn new(transport: Transport) -> Self {
        Self {
            inner: Arc::new(NetInner {
                transport,
                ports: Mutex::new(HashMap::new()),
                handles: Arc::default(),
                policy: Mutex::new(ConnectPolicy::default()),
            }),
        }
    }

    pub fn tcp() -> Self {
        Self::new(Transport::Tcp)
    }

    pub fn loopback() -> Self {
        Self::new(Transport::Loopback(Arc::default()))
    }

    pub fn is_loopback(&self) -> bool {
        matches!(self.inner.transport, Transport::Loopback(_))
    }

    pub fn with_connect_policy(self, policy: ConnectPolicy) -> Self {
        self.set_connect_policy(policy);
        self
    }

    pub fn set_connect_policy(&self, policy: ConnectPolicy) {
        *self.inner.policy.lock().unwrap() = policy;
    }

    pub fn connect_policy(&self) -> ConnectPolicy {
        *self.inner.policy.lock().unwrap()
    }

    /// Sockets, channel ends and runtime threads still alive.
    pub fn open_handles(&self) -> usize {
        self.inner.handles.0.load(Ordering::SeqCst)
    }

    pub fn create_input_end(&self, address: ChannelAddress, arity: Arity) -> Result<InputEnd, NetError> {
        let key = SocketAddrV4::new(address.ip, address.port);
        let mut ports = self.inner.ports.lock().unwrap();
        let listener = match ports.get(&key) {
            Some(l) => l.clone(),
            None => {
                let acceptor: Arc<dyn Acceptor> = match &self.inner.transport {
                    Transport::Tcp => Arc::new(TcpAcceptor::bind(key).map_err(|e| bind_error(e, address))?),
                    Transport::Loopback(hub) => hub.bind(key).map_err(|e| bind_error(e, address))?,
                };
                let l = PortListener::start(acceptor, &self.inner.handles);
                ports.insert(key, l.clone());
                l
            }
        };
        let mut table = listener.table.lock().unwrap();
        if table.contains_key(&address.channel) {
            return Err(NetError::AddressInUse(address));
        }
        let queue = Arc::new(ChannelQueue {
            address,
            arity,
            state: Mutex::new(QueueState::default()),
            ready: Condvar::new(),
        });
        table.insert(address.channel, queue.clone());
        Ok(InputEnd { net: self.clone(), key, queue, _guard: HandleGuard::new(&self.inner.handles) })
    }

    pub fn connect_output_end(&self, address: ChannelAddress) -> Result<OutputEnd, NetError> {
        let policy = self.connect_policy();
        self.connect_output_end_within(address, policy.window)
    }

    /// Connects to a listening input end, retrying until `window` has passed.
    pub fn connect_output_end_within(&self, address: ChannelAddress, window: Duration) -> Result<OutputEnd, NetError> {
        let step = self.connect_policy().step;
        let key = SocketAddrV4::new(address.ip, address.port);
        let deadline = Instant::now() + window;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            let attempt = match &self.inner.transport {
                Transport::Tcp => transport::tcp_connect(key, remaining.min(Duration::from_secs(1))),
                Transport::Loopback(hub) => hub.connect(key),
            };
            if let Ok(mut conn) = attempt {
                match open_handshake(&mut *conn, address.channel) {
                    Handshake::Accepted => {
                        return Ok(OutputEnd { address, conn, _guard: HandleGuard::new(&self.inner.handles) })
                    }
                    Handshake::WriterRejected => return Err(NetError::WriterRejected(address)),
                    Handshake::Retry => conn.shutdown(),
                }
            }
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Err(NetError::NoListener(address));
            }
            thread::sleep(step.min(remaining));
        }
    }

    fn release_channel(&self, key: SocketAddrV4, channel: u16) {
        let mut ports = self.inner.ports.lock().unwrap();
        let Some(listener) = ports.get(&key).cloned() else { return };
        let now_empty = {
            let mut table = listener.table.lock().unwrap();
            table.remove(&channel);
            table.is_empty()
        };
        if now_empty {
            ports.remove(&key);
            drop(ports);
            listener.stop();
        }
    }
}

fn bind_error(e: io::Error, address: ChannelAddress) -> NetError {
    if e.kind() == io::ErrorKind::AddrInUse {
        NetError::AddressInUse(address)
    } else {
        NetError::Io(e)
    }
}

enum Handshake {
    Accepted,
    WriterRejected,
    Retry,
}

fn open_handshake(conn: &mut dyn Duplex, channel: u16) -> Handshake {
    if write_frame(conn, FrameKind::Ack, channel, OPEN).is_err() {
        return Handshake::Retry;
    }
    match read_frame(conn) {
        Ok(Some(f)) if f.kind == FrameKind::Ack && f.payload.is_empty() => Handshake::Accepted,
        Ok(Some(f)) if f.kind == FrameKind::Ack && f.payload == REFUSE_WRITER => Handshake::WriterRejected,
        _ => Handshake::Retry,
    }
}

type ChannelTable = Mutex<HashMap<u16, Arc<ChannelQueue>>>;
type LiveConns = Mutex<HashMap<u64, Box<dyn Duplex>>>;

/// Accepts connections for every input end on one (ip, port).
struct PortListener {
    table: Arc<ChannelTable>,
    live: Arc<LiveConns>,
    acceptor: Arc<dyn Acceptor>,
    accept_thread: Mutex<Option<JoinHandle<()>>>,
    _guard: HandleGuard,
}

impl PortListener {
    fn start(acceptor: Arc<dyn Acceptor>, handles: &Arc<Handles>) -> Arc<Self> {
        let table: Arc<ChannelTable> = Arc::default();
        let live: Arc<LiveConns> = Arc::default();
        let thread = {
            let (acceptor, table, live, handles) = (acceptor.clone(), table.clone(), live.clone(), handles.clone());
            let guard = HandleGuard::new(&handles);
            thread::Builder::new()
                .name("netchan-accept".into())
                .spawn(move || accept_loop(&*acceptor, table, live, handles, guard))
                .expect("spawn accept thread")
        };
        Arc::new(Self {
            table,
            live,
            acceptor,
            accept_thread: Mutex::new(Some(thread)),
            _guard: HandleGuard::new(handles),
        })
    }

    fn stop(&self) {
        self.acceptor.close();
        for conn in self.live.lock().unwrap().values() {
            conn.shutdown();
        }
        if let Some(t) = self.accept_thread.lock().unwrap().take() {
            let _ = t.join();
        }
    }
}

fn accept_loop(
    acceptor: &dyn Acceptor,
    table: Arc<ChannelTable>,
    live: Arc<LiveConns>,
    handles: Arc<Handles>,
    _guard: HandleGuard,
) {
    let mut workers: Vec<JoinHandle<()>> = Vec::new();
    while let Some(conn) = acceptor.accept() {
        workers.retain(|h| !h.is_finished());
        let id = NEXT_WRITER.fetch_add(1, Ordering::Relaxed);
        match conn.try_clone_box() {
            Ok(c) => {
                live.lock().unwrap().insert(id, c);
            }
            Err(e) => {
                log::warn!("dropping connection: {e}");
                continue;
            }
        }
        let (table, live) = (table.clone(), live.clone());
        let guard = HandleGuard::new(&handles);
        let spawned = thread::Builder::new()
            .name("netchan-conn".into())
            .spawn(move || {
                serve_connection(conn, id, &table);
                live.lock().unwrap().remove(&id);
                drop(guard);
            });
        match spawned {
            Ok(h) => workers.push(h),
            Err(e) => log::warn!("could not spawn connection thread: {e}"),
        }
    }
    // Closing: the owner has shut every live connection down.
    for h in workers {
        let _ = h.join();
    }
}

fn serve_connection(mut conn: Box<dyn Duplex>, writer: WriterId, table: &ChannelTable) {
    let channel = match read_frame(&mut *conn) {
        Ok(Some(f)) if f.kind == FrameKind::Ack && f.payload == OPEN => f.channel,
        _ => return,
    };
    let Some(queue) = table.lock().unwrap().get(&channel).cloned() else {
        let _ = write_frame(&mut *conn, FrameKind::Ack, channel, REFUSE_NO_CHANNEL);
        return;
    };
    {
        let mut st = queue.state.lock().unwrap();
        if st.closed {
            drop(st);
            let _ = write_frame(&mut *conn, FrameKind::Ack, channel, REFUSE_NO_CHANNEL);
            return;
        }
        if queue.arity == Arity::OneToOne && !st.writers.is_empty() {
            drop(st);
            let _ = write_frame(&mut *conn, FrameKind::Ack, channel, REFUSE_WRITER);
            return;
        }
        let Ok(ack_half) = conn.try_clone_box() else { return };
        st.writers.insert(writer, Arc::new(Mutex::new(ack_half)));
        st.connected_total += 1;
    }
    if write_frame(&mut *conn, FrameKind::Ack, channel, &[]).is_ok() {
        loop {
            match read_frame(&mut *conn) {
                Ok(Some(frame)) if frame.channel == channel && frame.kind != FrameKind::Ack => {
                    let mut st = queue.state.lock().unwrap();
                    if st.closed {
                        break;
                    }
                    st.arrivals.push_back(Arrival::Frame { writer, frame });
                    queue.ready.notify_all();
                }
                Ok(Some(frame)) => {
                    log::warn!("{}: dropping writer after stray {:?} frame", queue.address, frame.kind);
                    break;
                }
                Ok(None) => break,
                Err(e) => {
                    log::debug!("{}: writer connection ended: {e}", queue.address);
                    break;
                }
            }
        }
    }
    let mut st = queue.state.lock().unwrap();
    st.writers.remove(&writer);
    if !st.closed {
        st.arrivals.push_back(Arrival::Closed { writer });
    }
    queue.ready.notify_all();
}

enum Arrival {
    Frame { writer: WriterId, frame: Frame },
    Closed { writer: WriterId },
}

#[derive(Default)]
struct QueueState {
    arrivals: VecDeque<Arrival>,
    writers: HashMap<WriterId, Arc<Mutex<Box<dyn Duplex>>>>,
    connected_total: usize,
    expected_writers: usize,
    closed: bool,
}

struct ChannelQueue {
    address: ChannelAddress,
    arity: Arity,
    state: Mutex<QueueState>,
    ready: Condvar,
}

/// The reading end of a net channel. Owned by one process at a time.
pub struct InputEnd {
    net: Network,
    key: SocketAddrV4,
    queue: Arc<ChannelQueue>,
    _guard: HandleGuard,
}

impl std::fmt::Debug for InputEnd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InputEnd").field("address", &self.queue.address).field("arity", &self.queue.arity).finish()
    }
}

impl InputEnd {
    pub fn address(&self) -> ChannelAddress {
        self.queue.address
    }

    pub fn arity(&self) -> Arity {
        self.queue.arity
    }

    /// Holds off [`NetError::AllWritersClosed`] until at least `n` writers
    /// have connected, so an early finisher is not taken for the last one.
    pub fn expect_writers(&self, n: usize) {
        self.queue.state.lock().unwrap().expected_writers = n;
        self.queue.ready.notify_all();
    }

    /// Writers currently connected.
    pub fn writer_count(&self) -> usize {
        self.queue.state.lock().unwrap().writers.len()
    }

    /// Next message or writer closure, in arrival order. Accepting a message
    /// releases its writer.
    pub fn recv_event(&mut self, timeout: Option<Duration>) -> Result<ChannelEvent, NetError> {
        self.next(timeout, false)
    }

    /// Next message, skipping writer closures.
    pub fn recv(&mut self) -> Result<Incoming, NetError> {
        self.recv_timeout(None)
    }

    pub fn recv_timeout(&mut self, timeout: Option<Duration>) -> Result<Incoming, NetError> {
        match self.next(timeout, true)? {
            ChannelEvent::Message(m) => Ok(m),
            ChannelEvent::WriterClosed(_) => unreachable!("closures are skipped"),
        }
    }

    /// Next DATA envelope.
    pub fn read(&mut self) -> Result<Envelope, NetError> {
        let m = self.recv()?;
        if m.kind != FrameKind::Data {
            return Err(NetError::UnexpectedFrame { address: self.address(), kind: m.kind });
        }
        Ok(Envelope::decode(&m.payload)?)
    }

    fn next(&mut self, timeout: Option<Duration>, skip_closed: bool) -> Result<ChannelEvent, NetError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let q = &*self.queue;
        let mut st = q.state.lock().unwrap();
        loop {
            while let Some(arrival) = st.arrivals.pop_front() {
                match arrival {
                    Arrival::Frame { writer, frame } => {
                        let ack = st.writers.get(&writer).cloned();
                        drop(st);
                        if let Some(ack) = ack {
                            let mut conn = ack.lock().unwrap();
                            if let Err(e) = write_frame(&mut **conn, FrameKind::Ack, q.address.channel, &[]) {
                                log::debug!("{}: ack to writer {writer} failed: {e}", q.address);
                            }
                        }
                        return Ok(ChannelEvent::Message(Incoming { writer, kind: frame.kind, payload: frame.payload }));
                    }
                    Arrival::Closed { writer } if !skip_closed => return Ok(ChannelEvent::WriterClosed(writer)),
                    Arrival::Closed { .. } => {}
                }
            }
            if st.connected_total >= st.expected_writers.max(1) && st.writers.is_empty() {
                return Err(NetError::AllWritersClosed(q.address));
            }
            st = match deadline {
                None => q.ready.wait(st).unwrap(),
                Some(d) => {
                    let left = d.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        return Err(NetError::Timeout(q.address));
                    }
                    q.ready.wait_timeout(st, left).unwrap().0
                }
            };
        }
    }
}

impl Drop for InputEnd {
    fn drop(&mut self) {
        {
            let mut st = self.queue.state.lock().unwrap();
            st.closed = true;
            st.arrivals.clear();
            for w in st.writers.values() {
                w.lock().unwrap().shutdown();
            }
        }
        self.queue.ready.notify_all();
        self.net.release_channel(self.key, self.queue.address.channel);
    }
}

/// The writing end of a net channel.
pub struct OutputEnd {
    address: ChannelAddress,
    conn: Box<dyn Duplex>,
    _guard: HandleGuard,
}

impl std::fmt::Debug for OutputEnd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OutputEnd").field("address", &self.address).finish()
    }
}

impl OutputEnd {
    pub fn address(&self) -> ChannelAddress {
        self.address
    }

    /// Sends one frame and blocks until the reader has accepted it.
    pub fn send(&mut self, kind: FrameKind, payload: &[u8]) -> Result<(), NetError> {
        let address = self.address;
        let closed = |e: FrameError| match e {
            FrameError::Oversize(_) => NetError::Frame(e),
            _ => NetError::PeerClosed(address),
        };
        write_frame(&mut *self.conn, kind, address.channel, payload).map_err(closed)?;
        match read_frame(&mut *self.conn) {
            Ok(Some(f)) if f.kind == FrameKind::Ack && f.channel == address.channel => Ok(()),
            Ok(Some(f)) => Err(NetError::UnexpectedFrame { address, kind: f.kind }),
            Ok(None) => Err(NetError::PeerClosed(address)),
            Err(e) => Err(closed(e)),
        }
    }

    pub fn write(&mut self, e: &Envelope) -> Result<(), NetError> {
        self.send(FrameKind::Data, &e.encode()?)
    }
}

impl Drop for OutputEnd {
    fn drop(&mut self) {
        self.conn.shutdown();
    }
}
