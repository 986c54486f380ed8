//! Framed, ordered message exchange between the two compute parties, with
//! per-phase byte and round accounting and a running transcript digest.
//!
//! A frame is a 4-byte little-endian payload length followed by the payload,
//! which is one or more ring tensors in wire form back to back.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use arp_core::RingTensor;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
const MAX_FRAME: usize = 1 << 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PartyId {
    P0,
    P1,
}

impl PartyId {
    pub fn index(self) -> usize {
        match self {
            PartyId::P0 => 0,
            PartyId::P1 => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(PartyId::P0),
            1 => Some(PartyId::P1),
            _ => None,
        }
    }

    pub fn peer(self) -> Self {
        match self {
            PartyId::P0 => PartyId::P1,
            PartyId::P1 => PartyId::P0,
        }
    }
}

/// Coarse protocol stage that traffic is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Input,
    Linear,
    Comparison,
    Polynomial,
    Output,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::Input,
        Phase::Linear,
        Phase::Comparison,
        Phase::Polynomial,
        Phase::Output,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Input => "input",
            Phase::Linear => "linear",
            Phase::Comparison => "comparison",
            Phase::Polynomial => "polynomial",
            Phase::Output => "output",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub rounds: u64,
    /// Ring words sent, excluding headers.
    pub words_sent: u64,
}

impl Counters {
    fn absorb(&mut self, other: &Counters) {
        self.bytes_sent += other.bytes_sent;
        self.bytes_received += other.bytes_received;
        self.rounds += other.rounds;
        self.words_sent += other.words_sent;
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("protocol desync: {0}")]
    Desync(String),
    #[error("timed out waiting for peer")]
    Timeout,
    #[error("peer disconnected")]
    Closed,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("dry channel cannot {0}")]
    Dry(&'static str),
}

enum Backend {
    Memory {
        tx: Sender<Vec<u8>>,
        rx: Receiver<Vec<u8>>,
    },
    Tcp {
        // Writes go through a thread so that both parties can send before
        // either reads without filling socket buffers.
        tx: Option<Sender<Vec<u8>>>,
        writer: Option<JoinHandle<std::io::Result<()>>>,
        stream: TcpStream,
    },
    /// No peer: every receive yields zeros of the expected shape.
    Dry,
}

pub struct Channel {
    party: PartyId,
    bits: u32,
    backend: Backend,
    phase: Phase,
    counters: [Counters; 5],
    digest: Sha256,
    timeout: Duration,
}

impl Channel {
    fn with_backend(party: PartyId, bits: u32, backend: Backend) -> Self {
        Channel {
            party,
            bits,
            backend,
            phase: Phase::Linear,
            counters: [Counters::default(); 5],
            digest: Sha256::new(),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    /// Connected in-process endpoints for party 0 and party 1.
    pub fn memory_pair(bits: u32) -> (Channel, Channel) {
        let (tx0, rx1) = mpsc::channel();
        let (tx1, rx0) = mpsc::channel();
        (
            Channel::with_backend(PartyId::P0, bits, Backend::Memory { tx: tx0, rx: rx0 }),
            Channel::with_backend(PartyId::P1, bits, Backend::Memory { tx: tx1, rx: rx1 }),
        )
    }

    /// Endpoint with no peer, used to trace message shapes.
    pub fn dry(party: PartyId, bits: u32) -> Channel {
        Channel::with_backend(party, bits, Backend::Dry)
    }

    pub fn from_tcp(party: PartyId, bits: u32, stream: TcpStream) -> Result<Channel, TransportError> {
        stream.set_nodelay(true)?;
        let mut write_half = stream.try_clone()?;
        let (tx, rx) = mpsc::channel::<Vec<u8>>();
        let writer = std::thread::spawn(move || {
            for frame in rx {
                write_half.write_all(&frame)?;
            }
            write_half.flush()
        });
        let mut ch = Channel::with_backend(
            party,
            bits,
            Backend::Tcp {
                tx: Some(tx),
                writer: Some(writer),
                stream,
            },
        );
        ch.set_timeout(DEFAULT_TIMEOUT);
        Ok(ch)
    }

    /// Accepts one peer connection.
    pub fn tcp_listen(party: PartyId, bits: u32, addr: impl ToSocketAddrs) -> Result<Channel, TransportError> {
        let listener = TcpListener::bind(addr)?;
        let (stream, _) = listener.accept()?;
        Channel::from_tcp(party, bits, stream)
    }

    /// Connects to a listening peer, retrying until `wait` elapses.
    pub fn tcp_connect(
        party: PartyId,
        bits: u32,
        addr: impl ToSocketAddrs + Clone,
        wait: Duration,
    ) -> Result<Channel, TransportError> {
        let start = Instant::now();
        loop {
            match TcpStream::connect(addr.clone()) {
                Ok(stream) => return Channel::from_tcp(party, bits, stream),
                Err(e) if start.elapsed() >= wait => return Err(e.into()),
                Err(_) => std::thread::sleep(Duration::from_millis(50)),
            }
        }
    }

    pub fn party(&self) -> PartyId {
        self.party
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn is_dry(&self) -> bool {
        matches!(self.backend, Backend::Dry)
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
        if let Backend::Tcp { stream, .. } = &self.backend {
            // A zero duration is rejected by the socket API.
            let _ = stream.set_read_timeout(Some(timeout.max(Duration::from_millis(1))));
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Attributes subsequent traffic to `phase`; returns the previous phase.
    pub fn set_phase(&mut self, phase: Phase) -> Phase {
        std::mem::replace(&mut self.phase, phase)
    }

    pub fn counters(&self, phase: Phase) -> Counters {
        self.counters[phase.index()]
    }

    pub fn totals(&self) -> Counters {
        let mut t = Counters::default();
        self.counters.iter().for_each(|c| t.absorb(c));
        t
    }

    /// SHA-256 over every frame in the order P0's then P1's within a round;
    /// both parties therefore hold the same digest.
    pub fn transcript_digest(&self) -> [u8; 32] {
        self.digest.clone().finalize().into()
    }

    fn encode_frame(tensors: &[&RingTensor]) -> Vec<u8> {
        let len: usize = tensors.iter().map(|t| t.wire_len()).sum();
        let mut frame = Vec::with_capacity(4 + len);
        frame.extend_from_slice(&(len as u32).to_le_bytes());
        for t in tensors {
            t.write_wire(&mut frame);
        }
        frame
    }

    fn decode_frame(&self, frame: &[u8], expect: &[&[usize]]) -> Result<Vec<RingTensor>, TransportError> {
        let mut pos = 4;
        let mut out = Vec::with_capacity(expect.len());
        for shape in expect {
            let (t, used) = RingTensor::read_wire(&frame[pos..], self.bits)
                .map_err(|e| TransportError::Desync(format!("malformed frame: {e}")))?;
            if t.shape() != *shape {
                return Err(TransportError::Desync(format!(
                    "peer sent shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            pos += used;
            out.push(t);
        }
        if pos != frame.len() {
            return Err(TransportError::Desync(format!(
                "peer frame has {} trailing bytes",
                frame.len() - pos
            )));
        }
        Ok(out)
    }

    fn send_frame(&mut self, frame: Vec<u8>) -> Result<(), TransportError> {
        match &mut self.backend {
            Backend::Memory { tx, .. } => tx.send(frame).map_err(|_| TransportError::Closed),
            Backend::Tcp { tx, .. } => tx
                .as_ref()
                .ok_or(TransportError::Closed)?
                .send(frame)
                .map_err(|_| TransportError::Closed),
            Backend::Dry => Ok(()),
        }
    }

    fn recv_frame(&mut self, expect: &[&[usize]]) -> Result<Vec<u8>, TransportError> {
        match &mut self.backend {
            Backend::Memory { rx, .. } => rx.recv_timeout(self.timeout).map_err(|e| match e {
                RecvTimeoutError::Timeout => TransportError::Timeout,
                RecvTimeoutError::Disconnected => TransportError::Closed,
            }),
            Backend::Tcp { stream, .. } => {
                let mut head = [0u8; 4];
                read_exact(stream, &mut head)?;
                let len = u32::from_le_bytes(head) as usize;
                if len > MAX_FRAME {
                    return Err(TransportError::Desync(format!("frame length {len}")));
                }
                let mut frame = vec![0u8; 4 + len];
                frame[..4].copy_from_slice(&head);
                read_exact(stream, &mut frame[4..])?;
                Ok(frame)
            }
            Backend::Dry => {
                let zeros: Vec<RingTensor> = expect.iter().map(|s| RingTensor::zeros(s, self.bits)).collect();
                Ok(Self::encode_frame(&zeros.iter().collect::<Vec<_>>()))
            }
        }
    }

    fn account_send(&mut self, frame: &[u8], tensors: &[&RingTensor]) {
        let c = &mut self.counters[self.phase.index()];
        c.bytes_sent += frame.len() as u64;
        c.words_sent += tensors.iter().map(|t| t.len() as u64).sum::<u64>();
    }

    /// Sends `outbound` and receives the peer's tensors in one round; the
    /// peer must send tensors of the same shapes in the same order.
    pub fn exchange_many(&mut self, outbound: &[&RingTensor]) -> Result<Vec<RingTensor>, TransportError> {
        let frame = Self::encode_frame(outbound);
        self.account_send(&frame, outbound);
        self.send_frame(frame.clone())?;
        let shapes: Vec<&[usize]> = outbound.iter().map(|t| t.shape()).collect();
        let peer = self.recv_frame(&shapes)?;
        let tensors = self.decode_frame(&peer, &shapes)?;
        let c = &mut self.counters[self.phase.index()];
        c.bytes_received += peer.len() as u64;
        c.rounds += 1;
        let (first, second) = match self.party {
            PartyId::P0 => (&frame, &peer),
            PartyId::P1 => (&peer, &frame),
        };
        self.digest.update(first);
        self.digest.update(second);
        Ok(tensors)
    }

    pub fn exchange(&mut self, outbound: &RingTensor) -> Result<RingTensor, TransportError> {
        Ok(self.exchange_many(&[outbound])?.remove(0))
    }

    /// One-way message; counts as a round for the sender.
    pub fn send_many(&mut self, outbound: &[&RingTensor]) -> Result<(), TransportError> {
        let frame = Self::encode_frame(outbound);
        self.account_send(&frame, outbound);
        self.digest.update(&frame);
        self.counters[self.phase.index()].rounds += 1;
        self.send_frame(frame)
    }

    /// Receives a one-way message of the given shapes; counts as a round.
    pub fn recv_many(&mut self, expect: &[&[usize]]) -> Result<Vec<RingTensor>, TransportError> {
        let frame = self.recv_frame(expect)?;
        let tensors = self.decode_frame(&frame, expect)?;
        self.digest.update(&frame);
        let c = &mut self.counters[self.phase.index()];
        c.bytes_received += frame.len() as u64;
        c.rounds += 1;
        Ok(tensors)
    }
}

fn read_exact(stream: &mut TcpStream, buf: &mut [u8]) -> Result<(), TransportError> {
    stream.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => TransportError::Timeout,
        std::io::ErrorKind::UnexpectedEof => TransportError::Closed,
        _ => TransportError::Io(e),
    })
}

impl Drop for Channel {
    fn drop(&mut self) {
        if let Backend::Tcp { tx, writer, .. } = &mut self.backend {
            tx.take();
            if let Some(w) = writer.take() {
                let _ = w.join();
            }
        }
    }
}
