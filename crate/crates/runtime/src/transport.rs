//! Blocking, ordered, per-peer message delivery: in-process channels and TCP.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::Duration;

use crate::error::{Result, RuntimeError};
use crate::message::{encode, read_message, Message};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Peer {
    Controller,
    Worker(usize),
}

impl std::fmt::Display for Peer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Peer::Controller => write!(f, "controller"),
            Peer::Worker(i) => write!(f, "worker {i}"),
        }
    }
}

/// One endpoint of the cluster. Delivery is FIFO per sender/receiver pair.
pub trait Transport: Send {
    fn send(&mut self, to: Peer, msg: &Message) -> Result<()>;
    /// Blocks until the next message from `from` arrives or the timeout expires.
    fn recv(&mut self, from: Peer) -> Result<Message>;
}

type Inbox = Receiver<Result<Message>>;

fn recv_from(inboxes: &HashMap<Peer, Inbox>, from: Peer, timeout: Duration) -> Result<Message> {
    let rx = inboxes
        .get(&from)
        .ok_or_else(|| RuntimeError::Protocol(format!("no link to {from}")))?;
    match rx.recv_timeout(timeout) {
        Ok(m) => m,
        Err(RecvTimeoutError::Timeout) => Err(RuntimeError::Timeout(format!(
            "no message from {from} within {timeout:?}"
        ))),
        Err(RecvTimeoutError::Disconnected) => Err(RuntimeError::Disconnected(from.to_string())),
    }
}

/// In-process endpoint backed by one channel per ordered pair.
pub struct InProcTransport {
    me: Peer,
    outboxes: HashMap<Peer, Sender<Result<Message>>>,
    inboxes: HashMap<Peer, Inbox>,
    pub timeout: Duration,
}

impl InProcTransport {
    /// Fully connected endpoints for a controller and `n` workers; the
    /// controller's endpoint comes first.
    pub fn mesh(n: usize) -> Vec<InProcTransport> {
        let peers: Vec<Peer> = std::iter::once(Peer::Controller)
            .chain((0..n).map(Peer::Worker))
            .collect();
        let mut ends: Vec<InProcTransport> = peers
            .iter()
            .map(|&me| InProcTransport {
                me,
                outboxes: HashMap::new(),
                inboxes: HashMap::new(),
                timeout: DEFAULT_TIMEOUT,
            })
            .collect();
        for a in 0..peers.len() {
            for b in 0..peers.len() {
                if a != b {
                    let (tx, rx) = channel();
                    ends[a].outboxes.insert(peers[b], tx);
                    ends[b].inboxes.insert(peers[a], rx);
                }
            }
        }
        ends
    }

    pub fn peer(&self) -> Peer {
        self.me
    }
}

impl Transport for InProcTransport {
    fn send(&mut self, to: Peer, msg: &Message) -> Result<()> {
        let tx = self
            .outboxes
            .get(&to)
            .ok_or_else(|| RuntimeError::Protocol(format!("no link to {to}")))?;
        tx.send(Ok(msg.clone()))
            .map_err(|_| RuntimeError::Disconnected(to.to_string()))
    }

    fn recv(&mut self, from: Peer) -> Result<Message> {
        recv_from(&self.inboxes, from, self.timeout)
    }
}

/// TCP endpoint: one connection per peer, each drained by a reader thread.
pub struct TcpTransport {
    writers: HashMap<Peer, BufWriter<TcpStream>>,
    inboxes: HashMap<Peer, Inbox>,
    pub timeout: Duration,
}

fn write_frame(w: &mut BufWriter<TcpStream>, msg: &Message) -> Result<()> {
    w.write_all(&encode(msg))?;
    w.flush()?;
    Ok(())
}

fn spawn_reader(stream: TcpStream) -> Inbox {
    let (tx, rx) = channel();
    thread::spawn(move || {
        let mut r = BufReader::new(stream);
        loop {
            let m = read_message(&mut r);
            let stop = m.is_err();
            if tx.send(m).is_err() || stop {
                break;
            }
        }
    });
    rx
}

fn connect(addr: &str, timeout: Duration) -> Result<TcpStream> {
    let target: SocketAddr = addr
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| RuntimeError::Protocol(format!("cannot resolve {addr}")))?;
    let s = TcpStream::connect_timeout(&target, timeout)?;
    s.set_nodelay(true)?;
    Ok(s)
}

/// Handshake reads are unbuffered so no bytes of later frames are consumed.
fn expect_hello(stream: &TcpStream) -> Result<(usize, String)> {
    match read_message(&mut &*stream)? {
        Message::Hello { worker, listen } => Ok((worker as usize, listen)),
        other => Err(RuntimeError::Protocol(format!(
            "expected Hello, got {}",
            other.kind()
        ))),
    }
}

impl TcpTransport {
    fn from_streams(streams: Vec<(Peer, TcpStream)>, timeout: Duration) -> Result<Self> {
        let mut writers = HashMap::new();
        let mut inboxes = HashMap::new();
        for (peer, s) in streams {
            inboxes.insert(peer, spawn_reader(s.try_clone()?));
            writers.insert(peer, BufWriter::new(s));
        }
        Ok(Self {
            writers,
            inboxes,
            timeout,
        })
    }

    /// Accepts `n` workers on `listener`, then sends everyone the directory
    /// of worker listen addresses.
    pub fn controller(listener: &TcpListener, n: usize, timeout: Duration) -> Result<Self> {
        let mut slots: Vec<Option<(TcpStream, String)>> = (0..n).map(|_| None).collect();
        for _ in 0..n {
            let (s, _) = listener.accept()?;
            s.set_nodelay(true)?;
            let (id, listen) = expect_hello(&s)?;
            match slots.get_mut(id) {
                Some(slot @ None) => *slot = Some((s, listen)),
                _ => {
                    return Err(RuntimeError::Protocol(format!(
                        "unexpected or duplicate worker id {id}"
                    )))
                }
            }
        }
        let slots: Vec<(TcpStream, String)> = slots.into_iter().map(Option::unwrap).collect();
        let dir = Message::Directory {
            addrs: slots.iter().map(|(_, a)| a.clone()).collect(),
        };
        let bytes = encode(&dir);
        for (s, _) in &slots {
            (&*s).write_all(&bytes)?;
        }
        Self::from_streams(
            slots
                .into_iter()
                .enumerate()
                .map(|(i, (s, _))| (Peer::Worker(i), s))
                .collect(),
            timeout,
        )
    }

    /// Registers worker `id` with the controller and links to every other worker.
    pub fn worker(
        id: usize,
        n: usize,
        controller: &str,
        listen: &str,
        timeout: Duration,
    ) -> Result<Self> {
        let listener = TcpListener::bind(listen)?;
        let my_addr = listener.local_addr()?.to_string();
        let ctrl = connect(controller, timeout)?;
        write_frame(
            &mut BufWriter::new(ctrl.try_clone()?),
            &Message::Hello {
                worker: id as u32,
                listen: my_addr,
            },
        )?;
        let addrs = match read_message(&mut &ctrl)? {
            Message::Directory { addrs } if addrs.len() == n => addrs,
            other => {
                return Err(RuntimeError::Protocol(format!(
                    "expected Directory of {n}, got {other:?}"
                )))
            }
        };
        let mut streams = vec![(Peer::Controller, ctrl)];
        for (j, addr) in addrs.iter().enumerate().take(id) {
            let s = connect(addr, timeout)?;
            write_frame(
                &mut BufWriter::new(s.try_clone()?),
                &Message::Hello {
                    worker: id as u32,
                    listen: String::new(),
                },
            )?;
            streams.push((Peer::Worker(j), s));
        }
        for _ in id + 1..n {
            let (s, _) = listener.accept()?;
            s.set_nodelay(true)?;
            let (j, _) = expect_hello(&s)?;
            if j <= id || j >= n || streams.iter().any(|(p, _)| *p == Peer::Worker(j)) {
                return Err(RuntimeError::Protocol(format!(
                    "unexpected link from worker {j}"
                )));
            }
            streams.push((Peer::Worker(j), s));
        }
        Self::from_streams(streams, timeout)
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, to: Peer, msg: &Message) -> Result<()> {
        let w = self
            .writers
            .get_mut(&to)
            .ok_or_else(|| RuntimeError::Protocol(format!("no link to {to}")))?;
        write_frame(w, msg)
    }

    fn recv(&mut self, from: Peer) -> Result<Message> {
        recv_from(&self.inboxes, from, self.timeout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::BalanceUpdate;

    fn bal(i: u64) -> Message {
        Message::BalanceUpdate(BalanceUpdate {
            frame: i,
            interface: 0,
            dp: i as f64 * 0.1,
        })
    }

    #[test]
    fn inproc_is_fifo_per_pair() {
        let mut ends = InProcTransport::mesh(2);
        let mut w1 = ends.pop().unwrap();
        let mut w0 = ends.pop().unwrap();
        let mut c = ends.pop().unwrap();
        for i in 0..5 {
            c.send(Peer::Worker(1), &bal(i)).unwrap();
            w0.send(Peer::Worker(1), &bal(10 + i)).unwrap();
        }
        for i in 0..5 {
            assert_eq!(w1.recv(Peer::Worker(0)).unwrap(), bal(10 + i));
        }
        for i in 0..5 {
            assert_eq!(w1.recv(Peer::Controller).unwrap(), bal(i));
        }
        w0.timeout = Duration::from_millis(10);
        assert!(matches!(
            w0.recv(Peer::Controller),
            Err(RuntimeError::Timeout(_))
        ));
    }

    #[test]
    fn tcp_mesh_delivers_in_order() {
        let n = 3;
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let handles: Vec<_> = (0..n)
            .map(|i| {
                let addr = addr.clone();
                thread::spawn(move || {
                    let mut t =
                        TcpTransport::worker(i, n, &addr, "127.0.0.1:0", DEFAULT_TIMEOUT).unwrap();
                    for j in 0..n {
                        if j != i {
                            for k in 0..3 {
                                t.send(Peer::Worker(j), &bal((i * 100 + k) as u64)).unwrap();
                            }
                        }
                    }
                    for j in 0..n {
                        if j != i {
                            for k in 0..3 {
                                assert_eq!(
                                    t.recv(Peer::Worker(j)).unwrap(),
                                    bal((j * 100 + k) as u64)
                                );
                            }
                        }
                    }
                    t.send(Peer::Controller, &bal(i as u64)).unwrap();
                })
            })
            .collect();
        let mut c = TcpTransport::controller(&listener, n, DEFAULT_TIMEOUT).unwrap();
        for i in 0..n {
            assert_eq!(c.recv(Peer::Worker(i)).unwrap(), bal(i as u64));
        }
        for h in handles {
            h.join().unwrap();
        }
    }
}
