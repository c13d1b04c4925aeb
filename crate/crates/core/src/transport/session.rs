//! Ordered, reliable two-party sessions over an in-process pipe or TCP.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::thread;

use super::census::Census;
use super::codec::Reader;
use super::frame::{Frame, HEADER_LEN};
use super::msg;
use crate::error::{ensure, Error, Result};
use crate::ring::Role;

pub const PROTOCOL_VERSION: u16 = 1;
const ENDIAN_MARKER: u32 = 0x0102_0304;

/// Moves whole encoded frames between the two endpoints.
pub trait Channel: Send {
    fn send_bytes(&mut self, frame: Vec<u8>) -> Result<()>;
    fn recv_bytes(&mut self) -> Result<Vec<u8>>;
}

pub struct MemoryChannel {
    tx: mpsc::Sender<Vec<u8>>,
    rx: mpsc::Receiver<Vec<u8>>,
}

impl Channel for MemoryChannel {
    fn send_bytes(&mut self, frame: Vec<u8>) -> Result<()> {
        self.tx.send(frame).map_err(|_| Error::Disconnected)
    }

    fn recv_bytes(&mut self) -> Result<Vec<u8>> {
        self.rx.recv().map_err(|_| Error::Disconnected)
    }
}

/// TCP endpoint. Writes go through a dedicated thread so both parties can
/// send large messages at once without deadlocking on socket buffers.
pub struct TcpChannel {
    writer: Option<mpsc::Sender<Vec<u8>>>,
    writer_thread: Option<thread::JoinHandle<std::io::Result<()>>>,
    reader: BufReader<TcpStream>,
}

impl TcpChannel {
    pub fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        let write_half = stream.try_clone()?;
        let (tx, rx) = mpsc::channel::<Vec<u8>>();
        let handle = thread::spawn(move || {
            let mut w = BufWriter::with_capacity(1 << 20, write_half);
            while let Ok(buf) = rx.recv() {
                w.write_all(&buf)?;
                // coalesce whatever is queued, then flush so nothing waits
                while let Ok(next) = rx.try_recv() {
                    w.write_all(&next)?;
                }
                w.flush()?;
            }
            w.flush()
        });
        Ok(TcpChannel {
            writer: Some(tx),
            writer_thread: Some(handle),
            reader: BufReader::with_capacity(1 << 20, stream),
        })
    }
}

impl Channel for TcpChannel {
    fn send_bytes(&mut self, frame: Vec<u8>) -> Result<()> {
        self.writer
            .as_ref()
            .ok_or(Error::Disconnected)?
            .send(frame)
            .map_err(|_| Error::Disconnected)
    }

    fn recv_bytes(&mut self) -> Result<Vec<u8>> {
        let mut header = [0u8; HEADER_LEN];
        self.reader.read_exact(&mut header).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Disconnected
            } else {
                Error::Io(e)
            }
        })?;
        let (_, _, len) = Frame::parse_header(&header)?;
        let mut buf = vec![0u8; HEADER_LEN + len as usize];
        buf[..HEADER_LEN].copy_from_slice(&header);
        self.reader.read_exact(&mut buf[HEADER_LEN..])?;
        Ok(buf)
    }
}

impl Drop for TcpChannel {
    fn drop(&mut self) {
        self.writer.take();
        if let Some(h) = self.writer_thread.take() {
            let _ = h.join();
        }
    }
}

/// What each side announces before any protocol traffic.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hello {
    pub role: Role,
    pub params_digest: [u8; 32],
    /// Free-form description of the run (model, batch, mode) that both
    /// sides must agree on.
    pub config: String,
    pub ot_backend: u8,
    pub group_element_width: u8,
    /// Seed of the trusted-dealer correlations; only the model owner's is used.
    pub dealer_seed: u64,
}

impl Hello {
    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
        out.extend_from_slice(&ENDIAN_MARKER.to_le_bytes());
        out.push(self.role.index() as u8);
        out.push(self.ot_backend);
        out.push(self.group_element_width);
        out.extend_from_slice(&self.dealer_seed.to_le_bytes());
        out.extend_from_slice(&self.params_digest);
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out
    }

    fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut r = Reader::new(b);
        let version = r.u16()?;
        ensure!(
            version == PROTOCOL_VERSION,
            Error::Handshake(format!("peer speaks protocol version {version}, expected {PROTOCOL_VERSION}"))
        );
        ensure!(
            r.u32()? == ENDIAN_MARKER,
            Error::Handshake("peer byte order differs".into())
        );
        let role = match r.u8()? {
            0 => Role::ModelOwner,
            1 => Role::DataOwner,
            x => return Err(Error::Handshake(format!("unknown role tag {x}"))),
        };
        let ot_backend = r.u8()?;
        let group_element_width = r.u8()?;
        let dealer_seed = r.u64()?;
        let mut params_digest = [0u8; 32];
        params_digest.copy_from_slice(r.take(32)?);
        let len = r.u32()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Handshake("config is not UTF-8".into()))?;
        r.finish()?;
        Ok(Hello {
            role,
            params_digest,
            config,
            ot_backend,
            group_element_width,
            dealer_seed,
        })
    }
}

pub struct Session {
    role: Role,
    chan: Box<dyn Channel>,
    census: Census,
    last_was_recv: bool,
    transcript: Option<Vec<(u16, Vec<u8>)>>,
    tag: u16,
}

impl Session {
    pub fn new(role: Role, chan: Box<dyn Channel>) -> Self {
        Session {
            role,
            chan,
            census: Census::default(),
            last_was_recv: true,
            transcript: None,
            tag: 0,
        }
    }

    /// Start keeping a copy of every received payload (for inspection in tests).
    pub fn record_transcript(&mut self) {
        self.transcript = Some(Vec::new());
    }

    pub fn transcript(&self) -> &[(u16, Vec<u8>)] {
        self.transcript.as_deref().unwrap_or(&[])
    }

    /// Tag carried in the flags of every frame sent from now on, and
    /// required on every frame received. Protocols set it to the layer id.
    pub fn set_tag(&mut self, tag: u16) {
        self.tag = tag;
    }

    pub fn tag(&self) -> u16 {
        self.tag
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn census(&self) -> &Census {
        &self.census
    }

    pub fn send(&mut self, kind: u16, payload: Vec<u8>) -> Result<()> {
        let bytes = Frame {
            kind,
            flags: self.tag,
            payload,
        }
        .encode()?;
        if self.last_was_recv {
            self.census.rounds += 1;
            self.last_was_recv = false;
        }
        self.census.record_sent(kind, bytes.len());
        self.chan.send_bytes(bytes)
    }

    /// Receive the next frame, which must be of type `kind`.
    pub fn recv(&mut self, kind: u16) -> Result<Vec<u8>> {
        let bytes = self.chan.recv_bytes()?;
        let frame = Frame::decode(&bytes)?;
        self.census.record_received(frame.kind, bytes.len());
        self.last_was_recv = true;
        if let Some(t) = self.transcript.as_mut() {
            t.push((frame.kind, frame.payload.clone()));
        }
        if frame.kind == msg::ABORT {
            return Err(Error::Handshake(
                String::from_utf8_lossy(&frame.payload).into_owned(),
            ));
        }
        ensure!(
            frame.kind == kind,
            Error::Desync(format!(
                "expected {} ({kind:#06x}), received {} ({:#06x})",
                msg::name(kind),
                msg::name(frame.kind),
                frame.kind
            ))
        );
        ensure!(
            frame.flags == self.tag,
            Error::Desync(format!(
                "{} frame for layer {} while at layer {}",
                msg::name(kind),
                frame.flags,
                self.tag
            ))
        );
        Ok(frame.payload)
    }

    /// Exchange hellos; any disagreement aborts both sides.
    pub fn handshake(&mut self, ours: &Hello) -> Result<Hello> {
        ensure!(
            ours.role == self.role,
            Error::Handshake("hello role does not match session role".into())
        );
        self.send(msg::HELLO, ours.to_bytes())?;
        let theirs = Hello::from_bytes(&self.recv(msg::HELLO)?)?;
        let problem = if theirs.role == ours.role {
            Some("both parties claim the same role".to_string())
        } else if theirs.params_digest != ours.params_digest {
            Some("parameter digests differ".to_string())
        } else if theirs.config != ours.config {
            Some(format!("run configuration differs: {:?} vs {:?}", ours.config, theirs.config))
        } else if theirs.ot_backend != ours.ot_backend {
            Some("oblivious-transfer backends differ".to_string())
        } else if theirs.group_element_width != ours.group_element_width {
            Some("group element widths differ".to_string())
        } else {
            None
        };
        match problem {
            Some(p) => Err(Error::Handshake(p)),
            None => Ok(theirs),
        }
    }
}

/// Connected model-owner / data-owner sessions within one process.
pub fn memory_pair() -> (Session, Session) {
    let (tx_a, rx_b) = mpsc::channel();
    let (tx_b, rx_a) = mpsc::channel();
    (
        Session::new(Role::ModelOwner, Box::new(MemoryChannel { tx: tx_a, rx: rx_a })),
        Session::new(Role::DataOwner, Box::new(MemoryChannel { tx: tx_b, rx: rx_b })),
    )
}

pub fn tcp_accept(listener: &TcpListener, role: Role) -> Result<Session> {
    let (stream, _) = listener.accept()?;
    Ok(Session::new(role, Box::new(TcpChannel::new(stream)?)))
}

pub fn tcp_connect<A: ToSocketAddrs>(addr: A, role: Role) -> Result<Session> {
    let mut last = None;
    // the listener may still be starting up
    for _ in 0..50 {
        match TcpStream::connect(&addr) {
            Ok(s) => return Ok(Session::new(role, Box::new(TcpChannel::new(s)?))),
            Err(e) => {
                last = Some(e);
                thread::sleep(std::time::Duration::from_millis(100));
            }
        }
    }
    Err(Error::Io(last.unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hello(role: Role) -> Hello {
        Hello {
            role,
            params_digest: [7; 32],
            config: "mnist_mlp b=32".into(),
            ot_backend: 0,
            group_element_width: 32,
            dealer_seed: 1,
        }
    }

    #[test]
    fn memory_roundtrip_and_census() {
        let (mut a, mut b) = memory_pair();
        a.send(0x10, vec![1, 2, 3]).unwrap();
        assert_eq!(b.recv(0x10).unwrap(), vec![1, 2, 3]);
        assert_eq!(a.census().by_type[&0x10].bytes_sent, 15);
        assert_eq!(b.census().by_type[&0x10].bytes_received, 15);
        assert_eq!(a.census().frames_sent_of(0x10), 1);
    }

    #[test]
    fn unexpected_type_is_desync() {
        let (mut a, mut b) = memory_pair();
        a.send(0x10, vec![]).unwrap();
        assert!(matches!(b.recv(0x11), Err(Error::Desync(_))));
    }

    #[test]
    fn handshake_agrees() {
        let (mut a, mut b) = memory_pair();
        let t = thread::spawn(move || b.handshake(&hello(Role::DataOwner)).map(|_| ()));
        a.handshake(&hello(Role::ModelOwner)).unwrap();
        t.join().unwrap().unwrap();
    }

    #[test]
    fn handshake_rejects_param_mismatch() {
        let (mut a, mut b) = memory_pair();
        let t = thread::spawn(move || {
            let mut h = hello(Role::DataOwner);
            h.params_digest[0] ^= 1;
            b.handshake(&h)
        });
        assert!(matches!(a.handshake(&hello(Role::ModelOwner)), Err(Error::Handshake(_))));
        assert!(t.join().unwrap().is_err());
    }

    #[test]
    fn tcp_roundtrip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let t = thread::spawn(move || {
            let mut s = tcp_connect(addr, Role::DataOwner).unwrap();
            let big = vec![9u8; 3 << 20];
            // both sides send a large frame before reading
            s.send(0x20, big.clone()).unwrap();
            assert_eq!(s.recv(0x21).unwrap(), big);
        });
        let mut s = tcp_accept(&listener, Role::ModelOwner).unwrap();
        let big = vec![9u8; 3 << 20];
        s.send(0x21, big.clone()).unwrap();
        assert_eq!(s.recv(0x20).unwrap(), big);
        t.join().unwrap();
    }
}
