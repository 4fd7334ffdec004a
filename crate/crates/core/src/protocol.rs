//! `PTD1` framed wire protocol shared with the external model server.
//!
//! Frame layout (all integers little-endian):
//!
//! ```text
//! "PTD1" | u8 type | u32 header_len | header (UTF-8 JSON) | u64 payload_len | payload (f32 LE)
//! ```
//!
//! `payload_len` counts bytes. One request is in flight per connection and
//! the server answers in order.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PTD1";

/// Upper bound on a JSON header; anything larger is treated as corruption.
const MAX_HEADER: u32 = 1 << 20;
/// Upper bound on a payload (1 GiB).
const MAX_PAYLOAD: u64 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageType {
    Hello = 0,
    EmbedText = 1,
    Eps = 2,
    Encode = 3,
    Decode = 4,
    Result = 5,
    Error = 6,
    Bye = 7,
}

impl TryFrom<u8> for MessageType {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Self::Hello,
            1 => Self::EmbedText,
            2 => Self::Eps,
            3 => Self::Encode,
            4 => Self::Decode,
            5 => Self::Result,
            6 => Self::Error,
            7 => Self::Bye,
            other => return Err(Error::Data(format!("unknown message type {other}"))),
        })
    }
}

/// JSON header. Absent optional fields are omitted from the encoding, and
/// fields are always emitted in declaration order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub request_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestep: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl Header {
    pub fn new(request_id: u64) -> Self {
        Self {
            request_id,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub kind: MessageType,
    pub header: Header,
    pub payload: Vec<f32>,
}

impl Frame {
    pub fn new(kind: MessageType, header: Header) -> Self {
        Self {
            kind,
            header,
            payload: Vec::new(),
        }
    }

    pub fn with_payload(mut self, payload: Vec<f32>) -> Self {
        self.payload = payload;
        self
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(4 + 1 + 4 + header.len() + 8 + 4 * self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(self.kind as u8);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&((self.payload.len() * 4) as u64).to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let frame =
            read_frame(&mut cursor)?.ok_or_else(|| Error::Data("empty frame buffer".into()))?;
        if !cursor.is_empty() {
            return Err(Error::Data(format!(
                "{} trailing bytes after frame",
                cursor.len()
            )));
        }
        Ok(frame)
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<()> {
    w.write_all(&frame.encode())?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `None` on a clean end of stream before the magic.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>> {
    let mut magic = [0u8; 4];
    match read_exact_or_eof(r, &mut magic)? {
        false => return Ok(None),
        true if magic != MAGIC => {
            return Err(Error::Data(format!("bad frame magic {magic:?}")));
        }
        true => {}
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind).map_err(truncated)?;
    let kind = MessageType::try_from(kind[0])?;

    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4).map_err(truncated)?;
    let header_len = u32::from_le_bytes(len4);
    if header_len > MAX_HEADER {
        return Err(Error::Data(format!("header length {header_len} too large")));
    }
    let mut header = vec![0u8; header_len as usize];
    r.read_exact(&mut header).map_err(truncated)?;
    let header: Header = serde_json::from_slice(&header)
        .map_err(|e| Error::Data(format!("bad frame header: {e}")))?;

    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8).map_err(truncated)?;
    let payload_len = u64::from_le_bytes(len8);
    if payload_len > MAX_PAYLOAD || payload_len % 4 != 0 {
        return Err(Error::Data(format!("bad payload length {payload_len}")));
    }
    let mut raw = vec![0u8; payload_len as usize];
    r.read_exact(&mut raw).map_err(truncated)?;
    let payload = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Some(Frame {
        kind,
        header,
        payload,
    }))
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(Error::Data("truncated frame".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

fn truncated(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Data("truncated frame".into())
    } else {
        Error::Io(e)
    }
}

/// Blocking request/response client over one TCP connection.
#[derive(Debug)]
pub struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    next_id: u64,
}

impl Connection {
    pub fn connect(addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| Error::Backend(format!("cannot reach {addr}: {e}")))?;
        stream.set_nodelay(true).ok();
        let reader = BufReader::new(
            stream
                .try_clone()
                .map_err(|e| Error::Backend(e.to_string()))?,
        );
        Ok(Self {
            reader,
            writer: BufWriter::new(stream),
            next_id: 1,
        })
    }

    /// Sends a request and waits for its reply. `ERROR` replies come back
    /// as frames; the caller maps them.
    pub fn request(
        &mut self,
        kind: MessageType,
        mut header: Header,
        payload: Vec<f32>,
    ) -> Result<Frame> {
        header.request_id = self.next_id;
        self.next_id += 1;
        let frame = Frame::new(kind, header).with_payload(payload);
        write_frame(&mut self.writer, &frame).map_err(backend)?;
        let reply = read_frame(&mut self.reader)
            .map_err(backend)?
            .ok_or_else(|| Error::Backend("server closed the connection".into()))?;
        if reply.header.request_id != frame.header.request_id {
            return Err(Error::Backend(format!(
                "reply id {} does not match request id {}",
                reply.header.request_id, frame.header.request_id
            )));
        }
        Ok(reply)
    }

    pub fn bye(&mut self) -> Result<()> {
        let frame = Frame::new(MessageType::Bye, Header::new(self.next_id));
        write_frame(&mut self.writer, &frame).map_err(backend)
    }
}

fn backend(e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Backend(io.to_string()),
        other => other,
    }
}

/// Loopback conformance server: every request is answered with a `RESULT`
/// frame carrying the request's header and payload unchanged; `BYE` is
/// answered with `BYE` and closes the connection.
///
/// Serves connections sequentially; stops after `max_connections` if given.
pub fn serve_echo(listener: TcpListener, max_connections: Option<usize>) -> Result<()> {
    for (served, stream) in listener.incoming().enumerate() {
        echo_connection(stream?)?;
        if max_connections.is_some_and(|m| served + 1 >= m) {
            break;
        }
    }
    Ok(())
}

fn echo_connection(stream: TcpStream) -> Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    while let Some(frame) = read_frame(&mut reader)? {
        if frame.kind == MessageType::Bye {
            write_frame(&mut writer, &frame)?;
            break;
        }
        let reply = Frame {
            kind: MessageType::Result,
            ..frame
        };
        write_frame(&mut writer, &reply)?;
    }
    Ok(())
}
