//! TCP transport for [`StreamMessage`]s.
//!
//! Each client connection gets its own bounded outgoing queue drained by a
//! writer thread. When a queue is full, a new SCENE_UPDATE replaces the
//! oldest queued SCENE_UPDATE; every other kind waits for room, so pose and
//! image messages are never dropped.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::wire::{FrameDecoder, MessageKind, StreamMessage, WireError};

/// Maximum queued messages per client.
pub const DEFAULT_QUEUE_DEPTH: usize = 1024;

struct QueueState {
    items: VecDeque<StreamMessage>,
    closed: bool,
}

pub(crate) struct ClientQueue {
    state: Mutex<QueueState>,
    cv: Condvar,
    depth: usize,
}

impl ClientQueue {
    pub(crate) fn new(depth: usize) -> Self {
        ClientQueue {
            state: Mutex::new(QueueState { items: VecDeque::new(), closed: false }),
            cv: Condvar::new(),
            depth: depth.max(1),
        }
    }

    /// Returns `false` once the queue is closed.
    pub(crate) fn push(&self, msg: StreamMessage) -> bool {
        let mut st = self.state.lock().unwrap();
        loop {
            if st.closed {
                return false;
            }
            if st.items.len() < self.depth {
                st.items.push_back(msg);
                self.cv.notify_all();
                return true;
            }
            if msg.kind == MessageKind::SceneUpdate {
                if let Some(pos) = st.items.iter().position(|m| m.kind == MessageKind::SceneUpdate) {
                    st.items.remove(pos);
                    st.items.push_back(msg);
                    self.cv.notify_all();
                    return true;
                }
            }
            st = self.cv.wait(st).unwrap();
        }
    }

    /// Blocks until a message is available; `None` once closed and drained.
    pub(crate) fn pop(&self) -> Option<StreamMessage> {
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(m) = st.items.pop_front() {
                self.cv.notify_all();
                return Some(m);
            }
            if st.closed {
                return None;
            }
            st = self.cv.wait(st).unwrap();
        }
    }

    pub(crate) fn try_pop(&self) -> Option<StreamMessage> {
        let mut st = self.state.lock().unwrap();
        let m = st.items.pop_front();
        if m.is_some() {
            self.cv.notify_all();
        }
        m
    }

    pub(crate) fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.cv.notify_all();
    }

    pub(crate) fn is_closed(&self) -> bool {
        self.state.lock().unwrap().closed
    }

    #[cfg(test)]
    fn len(&self) -> usize {
        self.state.lock().unwrap().items.len()
    }
}

type Clients = Arc<Mutex<Vec<Arc<ClientQueue>>>>;

/// Serves the stream protocol to any number of clients.
pub struct StreamServer {
    local_addr: SocketAddr,
    clients: Clients,
    inbound: Mutex<Receiver<StreamMessage>>,
    shutdown: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl StreamServer {
    pub fn bind(addr: impl ToSocketAddrs) -> io::Result<Self> {
        Self::bind_with_depth(addr, DEFAULT_QUEUE_DEPTH)
    }

    pub fn bind_with_depth(addr: impl ToSocketAddrs, depth: usize) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local_addr = listener.local_addr()?;
        let clients: Clients = Arc::default();
        let shutdown = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel();

        let accept = {
            let clients = clients.clone();
            let shutdown = shutdown.clone();
            thread::spawn(move || accept_loop(listener, clients, shutdown, tx, depth))
        };
        Ok(StreamServer { local_addr, clients, inbound: Mutex::new(rx), shutdown, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn client_count(&self) -> usize {
        let mut c = self.clients.lock().unwrap();
        c.retain(|q| !q.is_closed());
        c.len()
    }

    /// Queues `msg` for every connected client. With no clients this is a no-op.
    pub fn broadcast(&self, msg: &StreamMessage) {
        let targets: Vec<Arc<ClientQueue>> = self.clients.lock().unwrap().clone();
        for q in targets {
            q.push(msg.clone());
        }
    }

    /// Next message received from any client, if one arrives within `timeout`.
    pub fn recv_timeout(&self, timeout: Duration) -> Option<StreamMessage> {
        self.inbound.lock().unwrap().recv_timeout(timeout).ok()
    }

    pub fn try_recv(&self) -> Option<StreamMessage> {
        self.inbound.lock().unwrap().try_recv().ok()
    }

    pub fn wait_for_clients(&self, n: usize, timeout: Duration) -> bool {
        let deadline = std::time::Instant::now() + timeout;
        while std::time::Instant::now() < deadline {
            if self.client_count() >= n {
                return true;
            }
            thread::sleep(Duration::from_millis(2));
        }
        self.client_count() >= n
    }

    /// Stops accepting, lets queued messages drain and closes all clients.
    pub fn shutdown(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        for q in self.clients.lock().unwrap().iter() {
            q.close();
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for StreamServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, clients: Clients, shutdown: Arc<AtomicBool>, inbound: Sender<StreamMessage>, depth: usize) {
    let mut writers = Vec::new();
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                if let Some(h) = start_client(stream, &clients, inbound.clone(), depth) {
                    writers.push(h);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
            Err(e) => {
                log::warn!("stream server accept failed: {e}");
                thread::sleep(Duration::from_millis(10));
            }
        }
    }
    // writers flush whatever is still queued before the sockets close
    for h in writers {
        let _ = h.join();
    }
}

fn start_client(stream: TcpStream, clients: &Clients, inbound: Sender<StreamMessage>, depth: usize) -> Option<JoinHandle<()>> {
    stream.set_nonblocking(false).ok()?;
    let _ = stream.set_nodelay(true);
    let mut reader = stream.try_clone().ok()?;
    let mut writer = stream;
    let queue = Arc::new(ClientQueue::new(depth));
    clients.lock().unwrap().push(queue.clone());

    let rq = queue.clone();
    thread::spawn(move || {
        let mut dec = FrameDecoder::new();
        let mut buf = vec![0u8; 64 * 1024];
        'read: loop {
            match reader.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    dec.push(&buf[..n]);
                    loop {
                        match dec.next_message() {
                            Ok(Some(m)) => {
                                let _ = inbound.send(m);
                            }
                            Ok(None) => break,
                            Err(e) => {
                                log::warn!("closing client after bad frame: {e}");
                                break 'read;
                            }
                        }
                    }
                }
            }
        }
        rq.close();
    });

    Some(thread::spawn(move || {
        while let Some(m) = queue.pop() {
            let ok = m.encode().map(|b| writer.write_all(&b).is_ok()).unwrap_or(false);
            if !ok {
                queue.close();
                break;
            }
        }
        let _ = writer.flush();
        let _ = writer.shutdown(Shutdown::Both);
    }))
}

/// Binds a server and forwards every message received on `source` to all
/// connected clients until the channel closes.
pub fn serve_stream(addr: impl ToSocketAddrs, source: Receiver<StreamMessage>) -> io::Result<(Arc<StreamServer>, JoinHandle<()>)> {
    let server = Arc::new(StreamServer::bind(addr)?);
    let s = server.clone();
    let pump = thread::spawn(move || {
        for m in source {
            s.broadcast(&m);
        }
    });
    Ok((server, pump))
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamEvent {
    Message(StreamMessage),
    /// The peer sent a frame that violates the protocol; the connection is closed.
    Rejected(WireError),
    Disconnected,
}

/// Client side of the stream. Iterating yields messages in arrival order,
/// then a single [`StreamEvent::Disconnected`].
pub struct StreamClient {
    stream: TcpStream,
    decoder: FrameDecoder,
    buf: Vec<u8>,
    state: ClientState,
}

#[derive(PartialEq)]
enum ClientState {
    Open,
    Closing,
    Done,
}

pub fn connect_stream(addr: impl ToSocketAddrs) -> io::Result<StreamClient> {
    let stream = TcpStream::connect(addr)?;
    let _ = stream.set_nodelay(true);
    Ok(StreamClient { stream, decoder: FrameDecoder::new(), buf: vec![0; 64 * 1024], state: ClientState::Open })
}

impl StreamClient {
    pub fn send(&mut self, msg: &StreamMessage) -> io::Result<()> {
        let bytes = msg.encode().map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        self.stream.write_all(&bytes)
    }

    pub fn set_read_timeout(&self, t: Option<Duration>) -> io::Result<()> {
        self.stream.set_read_timeout(t)
    }
}

impl Iterator for StreamClient {
    type Item = StreamEvent;

    fn next(&mut self) -> Option<StreamEvent> {
        loop {
            match self.state {
                ClientState::Done => return None,
                ClientState::Closing => {
                    self.state = ClientState::Done;
                    return Some(StreamEvent::Disconnected);
                }
                ClientState::Open => {}
            }
            match self.decoder.next_message() {
                Ok(Some(m)) => return Some(StreamEvent::Message(m)),
                Ok(None) => {}
                Err(e) => {
                    let _ = self.stream.shutdown(Shutdown::Both);
                    self.state = ClientState::Closing;
                    return Some(StreamEvent::Rejected(e));
                }
            }
            match self.stream.read(&mut self.buf) {
                Ok(0) => self.state = ClientState::Closing,
                Ok(n) => self.decoder.push(&self.buf[..n]),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(_) => self.state = ClientState::Closing,
            }
        }
    }
}
