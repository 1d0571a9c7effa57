//! Byte-stream transports under the channel runtime: TCP, and an in-process
//! loopback whose connections are pairs of blocking byte pipes.

use std::collections::{HashMap, VecDeque};
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, SocketAddrV4, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::time::Duration;

pub(crate) trait Duplex: Read + Write + Send {
    fn try_clone_box(&self) -> io::Result<Box<dyn Duplex>>;
    /// Closes both directions for every clone of this connection.
    fn shutdown(&self);
}

pub(crate) trait Acceptor: Send + Sync {
    /// Blocks for the next connection; `None` once closed.
    fn accept(&self) -> Option<Box<dyn Duplex>>;
    fn close(&self);
}

impl Duplex for TcpStream {
    fn try_clone_box(&self) -> io::Result<Box<dyn Duplex>> {
        Ok(Box::new(self.try_clone()?))
    }

    fn shutdown(&self) {
        let _ = TcpStream::shutdown(self, Shutdown::Both);
    }
}

pub(crate) struct TcpAcceptor {
    listener: TcpListener,
    addr: SocketAddr,
    closed: AtomicBool,
}

impl TcpAcceptor {
    pub(crate) fn bind(addr: SocketAddrV4) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        Ok(Self { listener, addr, closed: AtomicBool::new(false) })
    }
}

impl Acceptor for TcpAcceptor {
    fn accept(&self) -> Option<Box<dyn Duplex>> {
        loop {
            let result = self.listener.accept();
            if self.closed.load(Ordering::SeqCst) {
                return None;
            }
            match result {
                Ok((stream, _)) => {
                    let _ = stream.set_nodelay(true);
                    return Some(Box::new(stream));
                }
                Err(e) => {
                    log::debug!("accept on {} failed: {e}", self.addr);
                    std::thread::sleep(Duration::from_millis(5));
                }
            }
        }
    }

    fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
        // Wake the blocked accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
    }
}

pub(crate) fn tcp_connect(addr: SocketAddrV4, timeout: Duration) -> io::Result<Box<dyn Duplex>> {
    let stream = TcpStream::connect_timeout(&SocketAddr::V4(addr), timeout.max(Duration::from_millis(1)))?;
    stream.set_nodelay(true)?;
    Ok(Box::new(stream))
}

#[derive(Default)]
struct PipeState {
    data: VecDeque<u8>,
    closed: bool,
}

#[derive(Default)]
struct Pipe {
    state: Mutex<PipeState>,
    ready: Condvar,
}

impl Pipe {
    fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.ready.notify_all();
    }
}

struct PipeEndInner {
    rx: Arc<Pipe>,
    tx: Arc<Pipe>,
}

impl Drop for PipeEndInner {
    fn drop(&mut self) {
        self.rx.close();
        self.tx.close();
    }
}

/// One side of an in-process connection. Clones share the side; it closes
/// when the last clone is dropped, like a socket whose last descriptor closes.
#[derive(Clone)]
pub(crate) struct PipeEnd(Arc<PipeEndInner>);

pub(crate) fn pipe_pair() -> (PipeEnd, PipeEnd) {
    let a = Arc::new(Pipe::default());
    let b = Arc::new(Pipe::default());
    (
        PipeEnd(Arc::new(PipeEndInner { rx: a.clone(), tx: b.clone() })),
        PipeEnd(Arc::new(PipeEndInner { rx: b, tx: a })),
    )
}

impl Read for PipeEnd {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        let pipe = &self.0.rx;
        let mut st = pipe.state.lock().unwrap();
        while st.data.is_empty() && !st.closed {
            st = pipe.ready.wait(st).unwrap();
        }
        let n = buf.len().min(st.data.len());
        for (dst, src) in buf.iter_mut().zip(st.data.drain(..n)) {
            *dst = src;
        }
        Ok(n)
    }
}

impl Write for PipeEnd {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let pipe = &self.0.tx;
        let mut st = pipe.state.lock().unwrap();
        if st.closed {
            return Err(io::Error::new(io::ErrorKind::BrokenPipe, "loopback peer closed"));
        }
        st.data.extend(buf);
        pipe.ready.notify_all();
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Duplex for PipeEnd {
    fn try_clone_box(&self) -> io::Result<Box<dyn Duplex>> {
        Ok(Box::new(self.clone()))
    }

    fn shutdown(&self) {
        self.0.rx.close();
        self.0.tx.close();
    }
}

/// In-process stand-in for the set of listening sockets on a machine.
#[derive(Default)]
pub(crate) struct LoopbackHub {
    listeners: Mutex<HashMap<SocketAddrV4, Arc<LoopAcceptor>>>,
}

impl LoopbackHub {
    pub(crate) fn bind(self: &Arc<Self>, addr: SocketAddrV4) -> io::Result<Arc<LoopAcceptor>> {
        let mut map = self.listeners.lock().unwrap();
        if map.contains_key(&addr) {
            return Err(io::Error::new(io::ErrorKind::AddrInUse, format!("{addr} already bound")));
        }
        let acceptor = Arc::new(LoopAcceptor {
            addr,
            hub: Arc::downgrade(self),
            queue: Mutex::new((VecDeque::new(), false)),
            ready: Condvar::new(),
        });
        map.insert(addr, acceptor.clone());
        Ok(acceptor)
    }

    pub(crate) fn connect(&self, addr: SocketAddrV4) -> io::Result<Box<dyn Duplex>> {
        let acceptor = self.listeners.lock().unwrap().get(&addr).cloned();
        let refused = || io::Error::new(io::ErrorKind::ConnectionRefused, format!("nothing listening on {addr}"));
        let acceptor = acceptor.ok_or_else(refused)?;
        let (client, server) = pipe_pair();
        let mut q = acceptor.queue.lock().unwrap();
        if q.1 {
            return Err(refused());
        }
        q.0.push_back(server);
        acceptor.ready.notify_all();
        Ok(Box::new(client))
    }
}

pub(crate) struct LoopAcceptor {
    addr: SocketAddrV4,
    hub: Weak<LoopbackHub>,
    queue: Mutex<(VecDeque<PipeEnd>, bool)>,
    ready: Condvar,
}

impl Acceptor for LoopAcceptor {
    fn accept(&self) -> Option<Box<dyn Duplex>> {
        let mut q = self.queue.lock().unwrap();
        loop {
            if q.1 {
                return None;
            }
            if let Some(conn) = q.0.pop_front() {
                return Some(Box::new(conn));
            }
            q = self.ready.wait(q).unwrap();
        }
    }

    fn close(&self) {
        if let Some(hub) = self.hub.upgrade() {
            hub.listeners.lock().unwrap().remove(&self.addr);
        }
        let mut q = self.queue.lock().unwrap();
        q.1 = true;
        // Pending, never-accepted connections see EOF.
        q.0.clear();
        self.ready.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    #[test]
    fn pipe_carries_bytes_and_closes_on_drop() {
        let (mut a, mut b) = pipe_pair();
        a.write_all(b"hello").unwrap();
        let mut buf = [0u8; 5];
        b.read_exact(&mut buf).unwrap();
        assert_eq!(&buf, b"hello");
        let a2 = a.clone();
        drop(a);
        b.write_all(b"x").unwrap();
        drop(a2);
        assert_eq!(b.read(&mut buf).unwrap(), 0);
        assert!(b.write(b"y").is_err());
    }

    #[test]
    fn loopback_bind_twice_fails() {
        let hub = Arc::new(LoopbackHub::default());
        let addr = SocketAddrV4::new(Ipv4Addr::LOCALHOST, 2000);
        let acc = hub.bind(addr).unwrap();
        assert_eq!(hub.bind(addr).err().unwrap().kind(), io::ErrorKind::AddrInUse);
        acc.close();
        assert!(hub.connect(addr).is_err());
        hub.bind(addr).unwrap();
    }
}
