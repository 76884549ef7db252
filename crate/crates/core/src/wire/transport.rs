//! Ordered, message-level channels between two parties.
//!
//! Both transports move encoded frames, so an in-process run exercises the
//! same encode/decode path as a TCP run.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::trace::Trace;
use super::{frame_body_len, MessageKind, WireMessage};
use crate::error::{Error, Result};

enum Link {
    InProc { tx: Sender<Vec<u8>>, rx: Receiver<Vec<u8>> },
    Tcp { reader: BufReader<TcpStream>, writer: BufWriter<TcpStream> },
}

/// One end of a duplex, FIFO message channel.
pub struct Endpoint {
    link: Link,
    shutdown_seen: bool,
    trace: Option<Trace>,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.link {
            Link::InProc { .. } => "inproc",
            Link::Tcp { .. } => "tcp",
        };
        write!(f, "Endpoint({kind})")
    }
}

impl Endpoint {
    /// Two connected in-process endpoints.
    pub fn pair() -> (Endpoint, Endpoint) {
        let (tx_a, rx_b) = mpsc::channel();
        let (tx_b, rx_a) = mpsc::channel();
        (Endpoint::from_link(Link::InProc { tx: tx_a, rx: rx_a }), Endpoint::from_link(Link::InProc { tx: tx_b, rx: rx_b }))
    }

    fn from_link(link: Link) -> Self {
        Endpoint { link, shutdown_seen: false, trace: None }
    }

    pub fn from_tcp(stream: TcpStream) -> Result<Endpoint> {
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Endpoint::from_link(Link::Tcp { reader, writer: BufWriter::new(stream) }))
    }

    /// Connects to a server role and introduces ourselves as `client`.
    pub fn connect(addr: impl ToSocketAddrs, client: u16) -> Result<Endpoint> {
        let mut ep = Endpoint::from_tcp(TcpStream::connect(addr)?)?;
        ep.send(&WireMessage::control(MessageKind::Hello, 0, client))?;
        Ok(ep)
    }

    /// Records every sent message in `trace`.
    pub fn with_trace(mut self, trace: Trace) -> Self {
        self.trace = Some(trace);
        self
    }

    pub fn send(&mut self, msg: &WireMessage) -> Result<()> {
        let frame = msg.encode()?;
        if let Some(trace) = &self.trace {
            trace.record(msg);
        }
        match &mut self.link {
            Link::InProc { tx, .. } => tx.send(frame).map_err(|_| Error::ChannelClosed),
            Link::Tcp { writer, .. } => {
                writer.write_all(&frame).and_then(|_| writer.flush()).map_err(map_io_closed)
            }
        }
    }

    /// Blocks until a message arrives. After a `Shutdown` has been received,
    /// or when the peer is gone, returns [`Error::ChannelClosed`].
    pub fn recv(&mut self) -> Result<WireMessage> {
        self.recv_inner(None)
    }

    pub fn recv_timeout(&mut self, timeout: Duration) -> Result<WireMessage> {
        self.recv_inner(Some(timeout))
    }

    fn recv_inner(&mut self, timeout: Option<Duration>) -> Result<WireMessage> {
        if self.shutdown_seen {
            return Err(Error::ChannelClosed);
        }
        let msg = match &mut self.link {
            Link::InProc { rx, .. } => {
                let frame = match timeout {
                    None => rx.recv().map_err(|_| Error::ChannelClosed)?,
                    Some(t) => rx.recv_timeout(t).map_err(|e| match e {
                        RecvTimeoutError::Timeout => Error::Timeout,
                        RecvTimeoutError::Disconnected => Error::ChannelClosed,
                    })?,
                };
                WireMessage::decode(&frame)?
            }
            Link::Tcp { reader, .. } => {
                reader.get_ref().set_read_timeout(timeout)?;
                read_tcp_frame(reader)?
            }
        };
        if msg.kind == MessageKind::Shutdown {
            self.shutdown_seen = true;
        }
        Ok(msg)
    }

    /// Receives and checks the message kind.
    pub fn expect(&mut self, kind: MessageKind) -> Result<WireMessage> {
        let msg = self.recv()?;
        if msg.kind != kind {
            return Err(Error::protocol(format!("expected {kind:?}, got {:?}", msg.kind)));
        }
        Ok(msg)
    }
}

fn map_io_closed(e: io::Error) -> Error {
    match e.kind() {
        io::ErrorKind::BrokenPipe | io::ErrorKind::ConnectionReset | io::ErrorKind::ConnectionAborted => {
            Error::ChannelClosed
        }
        _ => Error::Io(e),
    }
}

fn read_tcp_frame(reader: &mut BufReader<TcpStream>) -> Result<WireMessage> {
    let mut prefix = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match reader.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Err(Error::ChannelClosed),
            Ok(0) => return Err(Error::Framing("connection closed inside a length prefix".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                return Err(Error::Timeout)
            }
            Err(e) => return Err(map_io_closed(e)),
        }
    }
    let len = frame_body_len(&prefix)?;
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Framing(format!("connection closed inside a {len}-byte frame")),
        _ => map_io_closed(e),
    })?;
    WireMessage::decode_body(&body)
}

/// Listening socket for one server role.
pub struct TcpHub {
    listener: TcpListener,
}

impl TcpHub {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<TcpHub> {
        Ok(TcpHub { listener: TcpListener::bind(addr)? })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts `n` clients and orders their endpoints by the id in each
    /// hello frame.
    pub fn accept_clients(&self, n: usize) -> Result<Vec<Endpoint>> {
        let mut slots: Vec<Option<Endpoint>> = (0..n).map(|_| None).collect();
        for _ in 0..n {
            let (stream, _) = self.listener.accept()?;
            let mut ep = Endpoint::from_tcp(stream)?;
            let hello = ep.expect(MessageKind::Hello)?;
            let id = usize::from(hello.client);
            match slots.get_mut(id) {
                Some(slot @ None) => *slot = Some(ep),
                Some(Some(_)) => return Err(Error::protocol(format!("client {id} connected twice"))),
                None => return Err(Error::protocol(format!("client id {id} out of range 0..{n}"))),
            }
        }
        Ok(slots.into_iter().map(Option::unwrap).collect())
    }
}
