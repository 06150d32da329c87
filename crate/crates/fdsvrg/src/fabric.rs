//! Point-to-point message fabric between endpoints running on separate
//! threads, with per-edge FIFO delivery and scalar accounting.
//!
//! Two backends share one contract. `InProc` uses channels. `Socket` sends
//! frames over localhost TCP:
//!
//! ```text
//! u8 phase | u16 LE sender | u32 LE length | length x f64 LE
//! ```
//!
//! A phase byte of `0xff` with no payload is an abort notice.
//!
//! Every [`Port`] keeps its own ledger of what it sent; merging the ports'
//! ledgers after a run gives the fabric total. Empty messages are control
//! signals and are not charged.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use fdsvrg_core::comm::{CommLedger, Endpoint, Phase, TreePlan};
use fdsvrg_core::error::CommError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    #[default]
    InProc,
    Socket,
}

impl Backend {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "inproc" => Some(Backend::InProc),
            "socket" => Some(Backend::Socket),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Backend::InProc => "inproc",
            Backend::Socket => "socket",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub phase: Phase,
    pub from: Endpoint,
    pub payload: Vec<f64>,
}

const HEADER: usize = 7;
const ABORT_TAG: u8 = 0xff;

/// What travels on an edge: data, or notice that the sender gave up.
#[derive(Debug, Clone, PartialEq)]
pub enum Envelope {
    Data(Message),
    Abort(Endpoint),
}

pub fn encode_abort(from: Endpoint) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER);
    buf.push(ABORT_TAG);
    buf.extend_from_slice(&from.wire_id().to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    buf
}

pub fn encode_frame(phase: Phase, from: Endpoint, payload: &[f64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER + 8 * payload.len());
    buf.push(phase.tag());
    buf.extend_from_slice(&from.wire_id().to_le_bytes());
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Envelope>, CommError> {
    let mut head = [0u8; HEADER];
    match r.read_exact(&mut head) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(_) => return Err(CommError::Frame("header read failed")),
    }
    let from = Endpoint::from_wire_id(u16::from_le_bytes([head[1], head[2]]));
    if head[0] == ABORT_TAG {
        return Ok(Some(Envelope::Abort(from)));
    }
    let phase = Phase::from_tag(head[0]).ok_or(CommError::Frame("unknown phase tag"))?;
    let len = u32::from_le_bytes([head[3], head[4], head[5], head[6]]) as usize;
    let mut body = vec![0u8; 8 * len];
    r.read_exact(&mut body)
        .map_err(|_| CommError::Frame("truncated payload"))?;
    let payload = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Some(Envelope::Data(Message { phase, from, payload })))
}

enum Link {
    Chan(Sender<Envelope>),
    Tcp {
        addr: SocketAddr,
        stream: Option<BufWriter<TcpStream>>,
    },
}

/// One endpoint's handle: sends to any registered endpoint, receives its own
/// inbox.
pub struct Port {
    me: Endpoint,
    links: BTreeMap<Endpoint, Link>,
    inbox: Receiver<Envelope>,
    stash: VecDeque<Message>,
    ledger: CommLedger,
    closed: Arc<AtomicBool>,
    timeout: Duration,
}

impl Port {
    pub fn endpoint(&self) -> Endpoint {
        self.me
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn into_ledger(mut self) -> CommLedger {
        std::mem::take(&mut self.ledger)
    }

    fn deliver(&mut self, to: Endpoint, envelope: Envelope) -> Result<(), CommError> {
        if self.closed.load(Ordering::Acquire) {
            return Err(CommError::Closed);
        }
        match self.links.get_mut(&to).ok_or(CommError::UnknownEndpoint(to))? {
            Link::Chan(tx) => tx.send(envelope).map_err(|_| CommError::Closed),
            Link::Tcp { addr, stream } => {
                if stream.is_none() {
                    let s = TcpStream::connect(*addr).map_err(|_| CommError::Closed)?;
                    s.set_nodelay(true).map_err(|_| CommError::Closed)?;
                    *stream = Some(BufWriter::new(s));
                }
                let s = stream.as_mut().expect("connected above");
                let bytes = match &envelope {
                    Envelope::Data(m) => encode_frame(m.phase, m.from, &m.payload),
                    Envelope::Abort(from) => encode_abort(*from),
                };
                s.write_all(&bytes).map_err(|_| CommError::Closed)?;
                s.flush().map_err(|_| CommError::Closed)
            }
        }
    }

    /// Delivers `payload` to `to` after everything previously sent on the
    /// same edge, and charges its length.
    pub fn send(&mut self, to: Endpoint, phase: Phase, payload: &[f64]) -> Result<(), CommError> {
        let me = self.me;
        let m = Message {
            phase,
            from: me,
            payload: payload.to_vec(),
        };
        self.deliver(to, Envelope::Data(m))?;
        if !payload.is_empty() {
            self.ledger.record(phase, me, to, payload.len() as u64);
        }
        Ok(())
    }

    /// Empty control message; free.
    pub fn signal(&mut self, to: Endpoint, phase: Phase) -> Result<(), CommError> {
        self.send(to, phase, &[])
    }

    /// Tells every other endpoint to give up. Best effort.
    pub fn abort_all(&mut self) {
        let me = self.me;
        let targets: Vec<Endpoint> = self.links.keys().copied().collect();
        for to in targets {
            let _ = self.deliver(to, Envelope::Abort(me));
        }
    }

    fn pull(&mut self, waiting_for: Endpoint) -> Result<Message, CommError> {
        match self.inbox.recv_timeout(self.timeout) {
            Ok(Envelope::Data(m)) => Ok(m),
            Ok(Envelope::Abort(from)) => Err(CommError::Aborted(from)),
            Err(RecvTimeoutError::Timeout) => Err(CommError::Timeout(waiting_for)),
            Err(RecvTimeoutError::Disconnected) => Err(CommError::Closed),
        }
    }

    /// Next message from `from`, holding back messages from anyone else.
    pub fn recv_from(&mut self, from: Endpoint) -> Result<Message, CommError> {
        if let Some(pos) = self.stash.iter().position(|m| m.from == from) {
            return Ok(self.stash.remove(pos).expect("position is in range"));
        }
        loop {
            let m = self.pull(from)?;
            if m.from == from {
                return Ok(m);
            }
            self.stash.push_back(m);
        }
    }

    /// Oldest message from anyone.
    pub fn recv_any(&mut self) -> Result<Message, CommError> {
        match self.stash.pop_front() {
            Some(m) => Ok(m),
            None => self.pull(self.me),
        }
    }
}

impl Drop for Port {
    fn drop(&mut self) {
        for link in self.links.values_mut() {
            if let Link::Tcp { stream: Some(s), .. } = link {
                let _ = s.flush();
                let _ = s.get_ref().shutdown(Shutdown::Write);
            }
        }
    }
}

/// Owns the socket listeners; in-process fabrics need no cleanup.
pub struct Fabric {
    backend: Backend,
    closed: Arc<AtomicBool>,
    listeners: Vec<(SocketAddr, JoinHandle<()>)>,
}

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

impl Fabric {
    /// Registers `endpoints` and returns one port each, in the same order.
    pub fn start(
        backend: Backend,
        endpoints: &[Endpoint],
        timeout: Duration,
    ) -> Result<(Fabric, Vec<Port>), CommError> {
        let closed = Arc::new(AtomicBool::new(false));
        let mut inboxes = Vec::with_capacity(endpoints.len());
        let mut senders = Vec::with_capacity(endpoints.len());
        for _ in endpoints {
            let (tx, rx) = channel();
            senders.push(tx);
            inboxes.push(rx);
        }
        let mut listeners = Vec::new();
        if backend == Backend::Socket {
            for tx in &senders {
                let listener = TcpListener::bind("127.0.0.1:0").map_err(|_| CommError::Closed)?;
                let addr = listener.local_addr().map_err(|_| CommError::Closed)?;
                let tx = tx.clone();
                let stop = Arc::clone(&closed);
                let handle = thread::spawn(move || accept_loop(listener, tx, stop));
                listeners.push((addr, handle));
            }
        }
        let ports = endpoints
            .iter()
            .zip(inboxes)
            .map(|(&me, inbox)| {
                let links = endpoints
                    .iter()
                    .enumerate()
                    .filter(|&(_, &e)| e != me)
                    .map(|(k, &e)| {
                        let link = match backend {
                            Backend::InProc => Link::Chan(senders[k].clone()),
                            Backend::Socket => Link::Tcp {
                                addr: listeners[k].0,
                                stream: None,
                            },
                        };
                        (e, link)
                    })
                    .collect();
                Port {
                    me,
                    links,
                    inbox,
                    stash: VecDeque::new(),
                    ledger: CommLedger::new(),
                    closed: Arc::clone(&closed),
                    timeout,
                }
            })
            .collect();
        Ok((
            Fabric {
                backend,
                closed,
                listeners,
            },
            ports,
        ))
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    /// Refuses further sends and stops the listeners.
    pub fn shutdown(&mut self) {
        self.closed.store(true, Ordering::Release);
        for (addr, handle) in self.listeners.drain(..) {
            // wake the blocking accept
            let _ = TcpStream::connect(addr);
            let _ = handle.join();
        }
    }
}

impl Drop for Fabric {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<Envelope>, stop: Arc<AtomicBool>) {
    for conn in listener.incoming() {
        if stop.load(Ordering::Acquire) {
            break;
        }
        let Ok(conn) = conn else { continue };
        let tx = tx.clone();
        thread::spawn(move || {
            let mut r = BufReader::new(conn);
            while let Ok(Some(m)) = read_frame(&mut r) {
                if tx.send(m).is_err() {
                    break;
                }
            }
        });
    }
}

/// Worker side of the tree-structured global sum. Blocks until the
/// broadcast result reaches this worker. Merges add the sender's partial
/// into the receiver's, in the order fixed by `plan`.
pub fn tree_sum(port: &mut Port, plan: &TreePlan, mut values: Vec<f64>, phase: Phase) -> Result<Vec<f64>, CommError> {
    let Endpoint::Worker(me) = port.endpoint() else {
        return Err(CommError::UnknownEndpoint(port.endpoint()));
    };
    let mut parent = None;
    let mut children = Vec::new();
    for level in plan.levels() {
        if let Some(&(s, _)) = level.iter().find(|&&(_, r)| r == me) {
            let m = port.recv_from(Endpoint::Worker(s))?;
            if m.payload.len() != values.len() {
                return Err(CommError::LengthMismatch {
                    first: values.len(),
                    other: m.payload.len(),
                });
            }
            for (a, b) in values.iter_mut().zip(&m.payload) {
                *a += b;
            }
            children.push(s);
        } else if let Some(&(_, r)) = level.iter().find(|&&(s, _)| s == me) {
            port.send(Endpoint::Worker(r), phase, &values)?;
            parent = Some(Endpoint::Worker(r));
            break;
        }
    }
    let up = parent.unwrap_or(Endpoint::Coordinator);
    if parent.is_none() {
        port.send(Endpoint::Coordinator, phase, &values)?;
    }
    let result = port.recv_from(up)?.payload;
    for &c in children.iter().rev() {
        port.send(Endpoint::Worker(c), phase, &result)?;
    }
    Ok(result)
}

/// Coordinator side: receives the apex's total and sends it back down.
pub fn tree_relay(port: &mut Port, phase: Phase) -> Result<Vec<f64>, CommError> {
    let total = port.recv_from(Endpoint::Worker(1))?.payload;
    port.send(Endpoint::Worker(1), phase, &total)?;
    Ok(total)
}
