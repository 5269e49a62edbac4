//! Framed, metered message exchange between the two servers.
//!
//! Wire frame: `[len u32][msg_type u8][session_id u32][payload]`, little-endian,
//! where `len` covers the type byte, the session id and the payload.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ring::{encode_elements, RingElement, RingParams, ELEMENT_BYTES};

pub const MAX_PAYLOAD: usize = 1 << 24;
pub const HEADER_BYTES: usize = 9;
/// Elements per OPEN frame when a batch exceeds one frame.
pub const OPEN_CHUNK: usize = MAX_PAYLOAD / ELEMENT_BYTES;

/// First payload byte of a CONTROL frame.
pub const CONTROL_HELLO: u8 = 1;
pub const CONTROL_ABORT: u8 = 2;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("peer disconnected")]
    Disconnected,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("protocol desync: expected message type {expected}, got {got}")]
    Desync { expected: u8, got: u8 },
    #[error("protocol desync: expected session {expected}, got {got}")]
    SessionMismatch { expected: u32, got: u32 },
    #[error("protocol desync: expected {expected} elements, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("frame payload of {0} bytes exceeds the limit")]
    FrameTooLarge(usize),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("peer aborted the session (reason code {0})")]
    PeerAbort(u8),
}

type TResult<T> = std::result::Result<T, TransportError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Open = 1,
    MacCheckY0 = 2,
    Commit = 3,
    Decommit = 4,
    CoinCommit = 5,
    CoinReveal = 6,
    Result = 7,
    Control = 8,
}

impl MsgType {
    pub fn from_u8(tag: u8) -> Option<MsgType> {
        Some(match tag {
            1 => MsgType::Open,
            2 => MsgType::MacCheckY0,
            3 => MsgType::Commit,
            4 => MsgType::Decommit,
            5 => MsgType::CoinCommit,
            6 => MsgType::CoinReveal,
            7 => MsgType::Result,
            8 => MsgType::Control,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub session_id: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, session_id: u32, payload: Vec<u8>) -> Self {
        Frame { msg_type, session_id, payload }
    }

    pub fn abort(session_id: u32, code: u8) -> Self {
        Frame::new(MsgType::Control, session_id, vec![CONTROL_ABORT, code])
    }

    /// The abort code if this is an abort notice.
    pub fn abort_code(&self) -> Option<u8> {
        match (self.msg_type, self.payload.as_slice()) {
            (MsgType::Control, [CONTROL_ABORT, code]) => Some(*code),
            _ => None,
        }
    }

    pub fn wire_len(&self) -> usize {
        HEADER_BYTES + self.payload.len()
    }

    pub fn encode(&self) -> TResult<Vec<u8>> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(TransportError::FrameTooLarge(self.payload.len()));
        }
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&((self.payload.len() + 5) as u32).to_le_bytes());
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.session_id.to_le_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> TResult<Frame> {
        if bytes.len() < HEADER_BYTES {
            return Err(TransportError::Malformed("short header".into()));
        }
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        if len < 5 || len - 5 > MAX_PAYLOAD {
            return Err(TransportError::Malformed(format!("bad length field {len}")));
        }
        if bytes.len() != 4 + len {
            return Err(TransportError::Malformed("length field disagrees with frame size".into()));
        }
        let msg_type = MsgType::from_u8(bytes[4])
            .ok_or_else(|| TransportError::Malformed(format!("unknown message type {}", bytes[4])))?;
        let session_id = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
        Ok(Frame { msg_type, session_id, payload: bytes[9..].to_vec() })
    }

    /// Reads one frame from a byte stream.
    pub fn read_from(r: &mut impl Read) -> TResult<Vec<u8>> {
        let mut len_bytes = [0u8; 4];
        match r.read_exact(&mut len_bytes) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(TransportError::Disconnected),
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_le_bytes(len_bytes) as usize;
        if len < 5 || len - 5 > MAX_PAYLOAD {
            return Err(TransportError::Malformed(format!("bad length field {len}")));
        }
        let mut buf = vec![0u8; 4 + len];
        buf[..4].copy_from_slice(&len_bytes);
        r.read_exact(&mut buf[4..]).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => TransportError::Disconnected,
            _ => e.into(),
        })?;
        Ok(buf)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ChannelMetrics {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub messages_sent: u64,
    pub rounds: u64,
}

impl ChannelMetrics {
    /// Difference against an earlier snapshot of the same channel.
    pub fn since(&self, earlier: &ChannelMetrics) -> ChannelMetrics {
        ChannelMetrics {
            bytes_sent: self.bytes_sent - earlier.bytes_sent,
            bytes_received: self.bytes_received - earlier.bytes_received,
            messages_sent: self.messages_sent - earlier.messages_sent,
            rounds: self.rounds - earlier.rounds,
        }
    }
}

/// Moves encoded frames between the two endpoints.
pub trait Link: Send {
    fn send(&mut self, frame: Vec<u8>) -> TResult<()>;
    fn recv(&mut self) -> TResult<Vec<u8>>;
}

pub struct InProcessLink {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

impl Link for InProcessLink {
    fn send(&mut self, frame: Vec<u8>) -> TResult<()> {
        self.tx.send(frame).map_err(|_| TransportError::Disconnected)
    }

    fn recv(&mut self) -> TResult<Vec<u8>> {
        self.rx.recv().map_err(|_| TransportError::Disconnected)
    }
}

/// TCP endpoint. Writes go through a dedicated thread so that two peers
/// sending large frames at once cannot block each other.
pub struct TcpLink {
    tx: Option<Sender<Vec<u8>>>,
    writer: Option<JoinHandle<()>>,
    reader: BufReader<TcpStream>,
}

impl TcpLink {
    pub fn new(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let write_half = stream.try_clone()?;
        let (tx, rx) = mpsc::channel::<Vec<u8>>();
        let writer = thread::spawn(move || {
            let mut w = BufWriter::new(write_half);
            while let Ok(frame) = rx.recv() {
                if w.write_all(&frame).is_err() {
                    return;
                }
                // drain whatever queued up before flushing
                while let Ok(more) = rx.try_recv() {
                    if w.write_all(&more).is_err() {
                        return;
                    }
                }
                if w.flush().is_err() {
                    return;
                }
            }
        });
        Ok(TcpLink { tx: Some(tx), writer: Some(writer), reader: BufReader::new(stream) })
    }
}

impl Link for TcpLink {
    fn send(&mut self, frame: Vec<u8>) -> TResult<()> {
        match &self.tx {
            Some(tx) => tx.send(frame).map_err(|_| TransportError::Disconnected),
            None => Err(TransportError::Disconnected),
        }
    }

    fn recv(&mut self) -> TResult<Vec<u8>> {
        Frame::read_from(&mut self.reader)
    }
}

impl Drop for TcpLink {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(w) = self.writer.take() {
            let _ = w.join();
        }
        let _ = self.reader.get_ref().shutdown(std::net::Shutdown::Both);
    }
}

/// One endpoint of a server-to-server channel.
pub struct Channel {
    link: Box<dyn Link>,
    metrics: ChannelMetrics,
    transcript: Option<Sha256>,
}

impl Channel {
    pub fn new(link: Box<dyn Link>) -> Self {
        Channel { link, metrics: ChannelMetrics::default(), transcript: None }
    }

    pub fn in_process_pair() -> (Channel, Channel) {
        let (tx0, rx1) = mpsc::channel();
        let (tx1, rx0) = mpsc::channel();
        (
            Channel::new(Box::new(InProcessLink { tx: tx0, rx: rx0 })),
            Channel::new(Box::new(InProcessLink { tx: tx1, rx: rx1 })),
        )
    }

    pub fn tcp(stream: TcpStream) -> io::Result<Channel> {
        Ok(Channel::new(Box::new(TcpLink::new(stream)?)))
    }

    pub fn tcp_accept(listener: &TcpListener) -> io::Result<Channel> {
        let (stream, _) = listener.accept()?;
        Channel::tcp(stream)
    }

    /// Connects, retrying while the listener comes up.
    pub fn tcp_connect(addr: impl ToSocketAddrs + Clone, attempts: u32) -> io::Result<Channel> {
        let mut last = io::Error::other("no connection attempts");
        for _ in 0..attempts.max(1) {
            match TcpStream::connect(addr.clone()) {
                Ok(stream) => return Channel::tcp(stream),
                Err(e) => {
                    last = e;
                    thread::sleep(Duration::from_millis(50));
                }
            }
        }
        Err(last)
    }

    /// Starts hashing every frame sent and received from now on.
    pub fn record_transcript(&mut self) {
        self.transcript = Some(Sha256::new());
    }

    pub fn transcript_digest(&self) -> Option<[u8; 32]> {
        self.transcript.as_ref().map(|h| h.clone().finalize().into())
    }

    pub fn snapshot_metrics(&self) -> ChannelMetrics {
        self.metrics
    }

    pub fn reset_metrics(&mut self) {
        self.metrics = ChannelMetrics::default();
    }

    fn send_frame(&mut self, frame: &Frame) -> TResult<()> {
        let bytes = frame.encode()?;
        if let Some(h) = self.transcript.as_mut() {
            h.update(&bytes);
        }
        self.metrics.bytes_sent += bytes.len() as u64;
        self.metrics.messages_sent += 1;
        self.link.send(bytes)
    }

    fn recv_frame(&mut self) -> TResult<Frame> {
        let bytes = self.link.recv()?;
        if let Some(h) = self.transcript.as_mut() {
            h.update(&bytes);
        }
        self.metrics.bytes_received += bytes.len() as u64;
        Frame::decode(&bytes)
    }

    fn check(expected: &Frame, got: &Frame) -> TResult<()> {
        if expected.msg_type != MsgType::Control {
            if let Some(code) = got.abort_code() {
                return Err(TransportError::PeerAbort(code));
            }
        }
        if got.msg_type != expected.msg_type {
            return Err(TransportError::Desync { expected: expected.msg_type as u8, got: got.msg_type as u8 });
        }
        if got.session_id != expected.session_id {
            return Err(TransportError::SessionMismatch { expected: expected.session_id, got: got.session_id });
        }
        Ok(())
    }

    /// Sends `outgoing` and receives the peer's frame of the same type.
    pub fn exchange(&mut self, outgoing: Frame) -> TResult<Frame> {
        let frames = self.exchange_many(vec![outgoing])?;
        Ok(frames.into_iter().next().unwrap())
    }

    /// Sends every frame, then receives as many; counts as one round.
    pub fn exchange_many(&mut self, outgoing: Vec<Frame>) -> TResult<Vec<Frame>> {
        let mut send_err = None;
        for f in &outgoing {
            if let Err(e) = self.send_frame(f) {
                send_err = Some(e);
                break;
            }
        }
        self.metrics.rounds += 1;
        let mut incoming = Vec::with_capacity(outgoing.len());
        for f in &outgoing {
            let got = match self.recv_frame() {
                Ok(got) => got,
                Err(e) => return Err(send_err.unwrap_or(e)),
            };
            Channel::check(f, &got)?;
            incoming.push(got);
        }
        match send_err {
            Some(e) => Err(e),
            None => Ok(incoming),
        }
    }

    /// Tells the peer this session is over. Never waits for a reply.
    pub fn send_abort(&mut self, session_id: u32, code: u8) {
        let _ = self.send_frame(&Frame::abort(session_id, code));
    }

    /// Swaps share vectors and returns `own + peer` elementwise.
    ///
    /// Large batches are split over several frames but still take one round.
    pub fn open_values(
        &mut self,
        msg_type: MsgType,
        session_id: u32,
        params: RingParams,
        shares: &[RingElement],
    ) -> crate::Result<Vec<RingElement>> {
        let peer = self.swap_values(msg_type, session_id, params, shares)?;
        Ok(shares.iter().zip(peer).map(|(&a, b)| a + b).collect())
    }

    /// Swaps element vectors and returns the peer's.
    pub fn swap_values(
        &mut self,
        msg_type: MsgType,
        session_id: u32,
        params: RingParams,
        values: &[RingElement],
    ) -> crate::Result<Vec<RingElement>> {
        let frames: Vec<Frame> = if values.is_empty() {
            vec![Frame::new(msg_type, session_id, Vec::new())]
        } else {
            values
                .chunks(OPEN_CHUNK)
                .map(|c| Frame::new(msg_type, session_id, encode_elements(c)))
                .collect()
        };
        let incoming = self.exchange_many(frames)?;
        let mut peer = Vec::with_capacity(values.len());
        for f in incoming {
            peer.extend(params.decode_elements(&f.payload)?);
        }
        if peer.len() != values.len() {
            return Err(TransportError::LengthMismatch { expected: values.len(), got: peer.len() }.into());
        }
        Ok(peer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ring::SeededRng;
    use crate::shares::split;

    fn tcp_pair() -> (Channel, Channel) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let h = thread::spawn(move || Channel::tcp_accept(&listener).unwrap());
        let c = Channel::tcp_connect(addr, 20).unwrap();
        (h.join().unwrap(), c)
    }

    fn both<T: Send + 'static>(
        (a, b): (Channel, Channel),
        f: impl Fn(usize, &mut Channel) -> T + Send + Sync + Clone + 'static,
    ) -> [(T, Channel); 2] {
        let f1 = f.clone();
        let h = thread::spawn(move || {
            let mut b = b;
            (f1(1, &mut b), b)
        });
        let mut a = a;
        let r0 = f(0, &mut a);
        [(r0, a), h.join().unwrap()]
    }

    #[test]
    fn frame_roundtrip_and_layout() {
        let f = Frame::new(MsgType::Commit, 0x01020304, vec![9, 8, 7]);
        let bytes = f.encode().unwrap();
        assert_eq!(bytes, vec![8, 0, 0, 0, 3, 4, 3, 2, 1, 9, 8, 7]);
        assert_eq!(Frame::decode(&bytes).unwrap(), f);
        assert!(Frame::decode(&bytes[..11]).is_err());
        let big = Frame::new(MsgType::Open, 0, vec![0; MAX_PAYLOAD + 1]);
        assert!(matches!(big.encode(), Err(TransportError::FrameTooLarge(_))));
    }

    #[test]
    fn exchange_meters_one_round() {
        let [(r0, c0), (r1, c1)] = both(Channel::in_process_pair(), |i, ch| {
            assert_eq!(ch.snapshot_metrics(), ChannelMetrics::default());
            ch.exchange(Frame::new(MsgType::Open, 5, vec![i as u8; 32])).unwrap()
        });
        assert_eq!(r0.payload, vec![1u8; 32]);
        assert_eq!(r1.payload, vec![0u8; 32]);
        for ch in [&c0, &c1] {
            let m = ch.snapshot_metrics();
            assert_eq!(m.rounds, 1);
            assert_eq!(m.bytes_sent, 32 + HEADER_BYTES as u64);
            assert_eq!(m.bytes_received, 32 + HEADER_BYTES as u64);
            assert_eq!(m.messages_sent, 1);
        }
    }

    #[test]
    fn mismatched_tags_desync_both_sides() {
        let [(r0, _), (r1, _)] = both(Channel::in_process_pair(), |i, ch| {
            let t = if i == 0 { MsgType::Open } else { MsgType::Commit };
            ch.exchange(Frame::new(t, 1, vec![]))
        });
        assert!(matches!(r0, Err(TransportError::Desync { .. })));
        assert!(matches!(r1, Err(TransportError::Desync { .. })));

        let [(r0, _), (r1, _)] = both(Channel::in_process_pair(), |i, ch| {
            ch.exchange(Frame::new(MsgType::Open, i as u32, vec![]))
        });
        assert!(matches!(r0, Err(TransportError::SessionMismatch { .. })));
        assert!(matches!(r1, Err(TransportError::SessionMismatch { .. })));
    }

    #[test]
    fn abort_notice_surfaces_as_peer_abort() {
        let [(r0, _), (_, _)] = both(Channel::in_process_pair(), |i, ch| {
            if i == 1 {
                ch.send_abort(3, 1);
                return Ok(Frame::new(MsgType::Control, 3, vec![]));
            }
            ch.exchange(Frame::new(MsgType::Decommit, 3, vec![1, 2]))
        });
        assert!(matches!(r0, Err(TransportError::PeerAbort(1))));
    }

    #[test]
    fn dropped_peer_is_disconnect() {
        let (mut a, b) = Channel::in_process_pair();
        drop(b);
        assert!(matches!(a.exchange(Frame::new(MsgType::Open, 0, vec![])), Err(TransportError::Disconnected)));
    }

    #[test]
    fn open_values_batched() {
        let p = RingParams::DEFAULT;
        let mut rng = SeededRng::from_u64(1);
        let xs: Vec<RingElement> = (0..100).map(|_| p.element(rng.next_u128())).collect();
        let shares: Vec<_> = xs.iter().map(|&x| split(x, &mut rng)).collect();
        let s0: Vec<_> = shares.iter().map(|s| s.0.value).collect();
        let s1: Vec<_> = shares.iter().map(|s| s.1.value).collect();
        let [(o0, c0), (o1, c1)] = both(Channel::in_process_pair(), move |i, ch| {
            let mine = if i == 0 { &s0 } else { &s1 };
            ch.open_values(MsgType::Open, 0, p, mine).unwrap()
        });
        assert_eq!(o0, xs);
        assert_eq!(o1, xs);
        for ch in [c0, c1] {
            let m = ch.snapshot_metrics();
            assert_eq!(m.rounds, 1);
            assert_eq!(m.bytes_sent, 100 * 16 + 9);
        }
    }

    #[test]
    fn open_values_length_mismatch() {
        let p = RingParams::DEFAULT;
        let [(r0, _), (_, _)] = both(Channel::in_process_pair(), move |i, ch| {
            ch.open_values(MsgType::Open, 0, p, &p.zeros(3 + i)).map(|_| ())
        });
        assert!(r0.is_err());
    }

    #[test]
    fn oversized_batch_is_chunked_into_one_round() {
        let p = RingParams::new(8, 4).unwrap();
        let n = OPEN_CHUNK + 3;
        let [(o0, c0), _] = both(Channel::in_process_pair(), move |i, ch| {
            let mine = vec![p.element(i as u128 + 1); n];
            ch.open_values(MsgType::Open, 0, p, &mine).unwrap()
        });
        assert_eq!(o0.len(), n);
        assert!(o0.iter().all(|v| v.value() == 3));
        let m = c0.snapshot_metrics();
        assert_eq!(m.rounds, 1);
        assert_eq!(m.messages_sent, 2);
        assert_eq!(m.bytes_sent, (n * 16 + 2 * HEADER_BYTES) as u64);
    }

    #[test]
    fn tcp_echo_preserves_order() {
        let [(r0, _), (r1, _)] = both(tcp_pair(), |i, ch| {
            let mut seen = Vec::new();
            for k in 0..1000u32 {
                let payload = [k.to_le_bytes(), [i as u8; 4]].concat();
                let got = ch.exchange(Frame::new(MsgType::Open, 7, payload)).unwrap();
                seen.push(got.payload);
            }
            (seen, ch.snapshot_metrics().rounds)
        });
        for (k, (a, b)) in r0.0.iter().zip(&r1.0).enumerate() {
            assert_eq!(a[..4], (k as u32).to_le_bytes());
            assert_eq!(a[4..], [1u8; 4]);
            assert_eq!(b[4..], [0u8; 4]);
        }
        assert_eq!(r0.1, 1000);
    }

    #[test]
    fn tcp_large_simultaneous_frames() {
        let [(r0, _), _] = both(tcp_pair(), |i, ch| {
            ch.exchange(Frame::new(MsgType::Open, 0, vec![i as u8; 8 << 20])).unwrap().payload.len()
        });
        assert_eq!(r0, 8 << 20);
    }

    #[test]
    fn backends_produce_identical_transcripts() {
        let run = |pair: (Channel, Channel)| {
            let [(_, c0), (_, c1)] = both(pair, |i, ch| {
                ch.record_transcript();
                for k in 0..10u8 {
                    ch.exchange(Frame::new(MsgType::Open, 2, vec![k, i as u8])).unwrap();
                }
            });
            (c0.transcript_digest(), c1.transcript_digest(), c0.snapshot_metrics())
        };
        assert_eq!(run(Channel::in_process_pair()), run(tcp_pair()));
    }
}
