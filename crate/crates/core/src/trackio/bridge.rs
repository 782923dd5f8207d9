//! WebSocket bridge for browser consoles.
//!
//! Text payloads (SCENE_UPDATE, STATUS) are forwarded one per WebSocket
//! text message; text messages received from the browser are surfaced as
//! COMMAND messages with the text as payload.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use tungstenite::{Message, WebSocket};

use super::server::{ClientQueue, DEFAULT_QUEUE_DEPTH};
use super::wire::{MessageKind, StreamMessage};

type Clients = Arc<Mutex<Vec<Arc<ClientQueue>>>>;

pub struct WsBridge {
    local_addr: SocketAddr,
    clients: Clients,
    inbound: Mutex<Receiver<StreamMessage>>,
    shutdown: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl WsBridge {
    pub fn bind(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local_addr = listener.local_addr()?;
        let clients: Clients = Arc::default();
        let shutdown = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel();
        let accept = {
            let clients = clients.clone();
            let shutdown = shutdown.clone();
            thread::spawn(move || accept_loop(listener, clients, shutdown, tx))
        };
        Ok(WsBridge { local_addr, clients, inbound: Mutex::new(rx), shutdown, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn client_count(&self) -> usize {
        let mut c = self.clients.lock().unwrap();
        c.retain(|q| !q.is_closed());
        c.len()
    }

    /// Forwards text messages; binary kinds (IMAGE_FRAME) are not bridged.
    pub fn broadcast(&self, msg: &StreamMessage) {
        if msg.kind == MessageKind::ImageFrame || msg.payload_str().is_err() {
            return;
        }
        let targets: Vec<Arc<ClientQueue>> = self.clients.lock().unwrap().clone();
        for q in targets {
            q.push(msg.clone());
        }
    }

    pub fn try_recv(&self) -> Option<StreamMessage> {
        self.inbound.lock().unwrap().try_recv().ok()
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<StreamMessage> {
        self.inbound.lock().unwrap().recv_timeout(timeout).ok()
    }

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

impl Drop for WsBridge {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, clients: Clients, shutdown: Arc<AtomicBool>, inbound: Sender<StreamMessage>) {
    let mut handles = Vec::new();
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let queue = Arc::new(ClientQueue::new(DEFAULT_QUEUE_DEPTH));
                clients.lock().unwrap().push(queue.clone());
                let inbound = inbound.clone();
                let shutdown = shutdown.clone();
                handles.push(thread::spawn(move || {
                    if let Err(e) = serve_client(stream, &queue, &inbound, &shutdown) {
                        log::debug!("websocket client closed: {e}");
                    }
                    queue.close();
                }));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
            Err(e) => {
                log::warn!("websocket accept failed: {e}");
                thread::sleep(Duration::from_millis(10));
            }
        }
    }
    for h in handles {
        let _ = h.join();
    }
}

#[allow(clippy::result_large_err)]
fn serve_client(
    stream: TcpStream,
    queue: &ClientQueue,
    inbound: &Sender<StreamMessage>,
    shutdown: &AtomicBool,
) -> Result<(), tungstenite::Error> {
    stream.set_nonblocking(false)?;
    let mut ws: WebSocket<TcpStream> = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::ConnectionClosed,
    })?;
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(5)))?;
    loop {
        while let Some(m) = queue.try_pop() {
            let text = String::from_utf8_lossy(&m.payload).into_owned();
            ws.send(Message::Text(text))?;
        }
        if shutdown.load(Ordering::SeqCst) || queue.is_closed() {
            let _ = ws.close(None);
            let _ = ws.flush();
            return Ok(());
        }
        match ws.read() {
            Ok(Message::Text(t)) => {
                let _ = inbound.send(StreamMessage::text(MessageKind::Command, &t));
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                ws.flush().or_else(|e| match e {
                    tungstenite::Error::Io(ref io) if io.kind() == io::ErrorKind::WouldBlock => Ok(()),
                    other => Err(other),
                })?;
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_updates_reach_browser_and_commands_come_back() {
        let bridge = WsBridge::bind("127.0.0.1:0").unwrap();
        let url = format!("ws://{}", bridge.local_addr());
        let (mut ws, _) = tungstenite::connect(url).unwrap();
        for _ in 0..500 {
            if bridge.client_count() == 1 {
                break;
            }
            thread::sleep(Duration::from_millis(2));
        }
        bridge.broadcast(&StreamMessage::text(MessageKind::SceneUpdate, r#"{"state":"NAVIGATING"}"#));
        match ws.read().unwrap() {
            Message::Text(t) => assert_eq!(t, r#"{"state":"NAVIGATING"}"#),
            other => panic!("unexpected {other:?}"),
        }
        ws.send(Message::Text(r#"{"cmd":"margin","mm":7}"#.into())).unwrap();
        let cmd = bridge.recv_timeout(Duration::from_secs(2)).expect("command forwarded");
        assert_eq!(cmd.kind, MessageKind::Command);
        assert_eq!(cmd.payload_str().unwrap(), r#"{"cmd":"margin","mm":7}"#);
    }
}
