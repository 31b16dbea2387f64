//! A deliberately dumb client: writes a prebuilt byte payload, reads one
//! response, and reports either the response or the fact that the peer cut
//! the connection. No retries, no connection reuse — each call is one
//! request on one fresh connection, which is exactly what verdict
//! attribution needs.

use std::io::{self, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use crate::body::{BodyEvent, BodyReader, FramingError};
use crate::node::{parse_response_meta, read_head};
use crate::wire::FramingDecision;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

/// What the client saw after writing the request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientOutcome {
    Response(ClientResponse),
    /// Closed, reset, or silent until the timeout — from the outside these
    /// are the same verdict: no answer.
    ConnectionClosed,
}

fn is_disconnect(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::BrokenPipe
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::UnexpectedEof
            | io::ErrorKind::TimedOut
            | io::ErrorKind::WouldBlock
    )
}

/// Send one raw request and read one response. `Err` is reserved for setup
/// problems (like a refused connect); anything the server does after
/// accepting maps to a [`ClientOutcome`].
pub fn send_request(
    addr: SocketAddr,
    payload: &[u8],
    timeout: Duration,
) -> io::Result<ClientOutcome> {
    let stream = TcpStream::connect_timeout(&addr, timeout)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(timeout))?;
    let mut writer = stream.try_clone()?;
    match writer.write_all(payload).and_then(|_| writer.flush()) {
        Ok(()) => {}
        // The peer may have slammed the door mid-write; a 400 could still be
        // waiting in our receive buffer, so fall through and try to read it.
        Err(ref e) if is_disconnect(e) => {}
        Err(e) => return Err(e),
    }
    let mut reader = BufReader::new(stream);
    let head = match read_head(&mut reader) {
        Ok(Some(head)) => head,
        Ok(None) => return Ok(ClientOutcome::ConnectionClosed),
        Err(ref e) if is_disconnect(e) => return Ok(ClientOutcome::ConnectionClosed),
        Err(e) => return Err(e),
    };
    let Some(meta) = parse_response_meta(&head) else {
        return Ok(ClientOutcome::ConnectionClosed);
    };
    let framing = if meta.chunked {
        FramingDecision::Chunked
    } else if let Some(n) = meta.content_length {
        FramingDecision::ContentLength(n)
    } else {
        // Read whatever arrives until close.
        let mut body = Vec::new();
        return match reader.read_to_end(&mut body) {
            Ok(_) => Ok(ClientOutcome::Response(ClientResponse { status: meta.status, body })),
            Err(ref e) if is_disconnect(e) => Ok(ClientOutcome::ConnectionClosed),
            Err(e) => Err(e),
        };
    };
    let mut body_reader = BodyReader::new(&mut reader, framing);
    let mut body = Vec::new();
    loop {
        match body_reader.next_event() {
            Ok(BodyEvent::Data { bytes, .. }) => body.extend_from_slice(&bytes),
            Ok(BodyEvent::End) => {
                return Ok(ClientOutcome::Response(ClientResponse { status: meta.status, body }))
            }
            Err(FramingError::Io(ref e)) if is_disconnect(e) => {
                return Ok(ClientOutcome::ConnectionClosed)
            }
            Err(FramingError::Io(e)) => return Err(e),
            Err(_) => return Ok(ClientOutcome::ConnectionClosed),
        }
    }
}

/// Fields of the origin's echo body: `path=`, `host=`, `length=` lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EchoFields {
    pub path: Vec<u8>,
    pub host: Vec<u8>,
    pub length: u64,
}

pub fn parse_echo(body: &[u8]) -> Option<EchoFields> {
    let mut path = None;
    let mut host = None;
    let mut length = None;
    for line in body.split(|&b| b == b'\n') {
        if let Some(v) = line.strip_prefix(b"path=") {
            path = Some(v.to_vec());
        } else if let Some(v) = line.strip_prefix(b"host=") {
            host = Some(v.to_vec());
        } else if let Some(v) = line.strip_prefix(b"length=") {
            length = std::str::from_utf8(v).ok()?.parse().ok();
        }
    }
    Some(EchoFields { path: path?, host: host?, length: length? })
}
