//! Binary wire format.
//!
//! ```text
//! magic "SFED" (4) | version u8 = 1 | variant u8 | payload_length u32 LE | payload
//! ```
//!
//! Integers are little-endian. Timestamps are `i64` nanoseconds, `m_n` is
//! `u64`, rounds are `u32`, client ids `u16`. Parameter vectors are a `u32`
//! element count followed by IEEE-754 binary64 values.

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"SFED";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Variant {
    SyncRequest = 1,
    SyncResponse = 2,
    GlobalModel = 3,
    ClientUpdate = 4,
    RoundDone = 5,
}

impl Variant {
    fn from_u8(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => Self::SyncRequest,
            2 => Self::SyncResponse,
            3 => Self::GlobalModel,
            4 => Self::ClientUpdate,
            5 => Self::RoundDone,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    SyncRequest {
        t1: i64,
    },
    SyncResponse {
        t1: i64,
        t2: i64,
        t3: i64,
    },
    GlobalModel {
        round: u32,
        params: Vec<f64>,
    },
    ClientUpdate {
        round: u32,
        client_id: u16,
        generated_at: i64,
        m_n: u64,
        params: Vec<f64>,
    },
    RoundDone {
        round: u32,
    },
}

impl Message {
    pub fn variant(&self) -> Variant {
        match self {
            Message::SyncRequest { .. } => Variant::SyncRequest,
            Message::SyncResponse { .. } => Variant::SyncResponse,
            Message::GlobalModel { .. } => Variant::GlobalModel,
            Message::ClientUpdate { .. } => Variant::ClientUpdate,
            Message::RoundDone { .. } => Variant::RoundDone,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported wire version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message variant {0}")]
    UnknownVariant(u8),
    #[error("truncated frame: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
    #[error("parameter vector of {0} elements exceeds u32 count")]
    TooManyParams(usize),
    #[error("payload of {0} bytes exceeds u32 length")]
    PayloadTooLarge(usize),
}

fn put_params(buf: &mut Vec<u8>, params: &[f64]) -> Result<(), WireError> {
    let count = u32::try_from(params.len()).map_err(|_| WireError::TooManyParams(params.len()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for v in params {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode(msg: &Message) -> Result<Vec<u8>, WireError> {
    let mut payload = Vec::new();
    match msg {
        Message::SyncRequest { t1 } => payload.extend_from_slice(&t1.to_le_bytes()),
        Message::SyncResponse { t1, t2, t3 } => {
            for t in [t1, t2, t3] {
                payload.extend_from_slice(&t.to_le_bytes());
            }
        }
        Message::GlobalModel { round, params } => {
            payload.extend_from_slice(&round.to_le_bytes());
            put_params(&mut payload, params)?;
        }
        Message::ClientUpdate {
            round,
            client_id,
            generated_at,
            m_n,
            params,
        } => {
            payload.extend_from_slice(&round.to_le_bytes());
            payload.extend_from_slice(&client_id.to_le_bytes());
            payload.extend_from_slice(&generated_at.to_le_bytes());
            payload.extend_from_slice(&m_n.to_le_bytes());
            put_params(&mut payload, params)?;
        }
        Message::RoundDone { round } => payload.extend_from_slice(&round.to_le_bytes()),
    }
    let len =
        u32::try_from(payload.len()).map_err(|_| WireError::PayloadTooLarge(payload.len()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.variant() as u8);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parsed and validated frame header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub variant: Variant,
    pub payload_len: usize,
}

pub fn decode_header(bytes: &[u8]) -> Result<Header, WireError> {
    if bytes.len() < HEADER_LEN {
        // Check whatever magic bytes are present before reporting truncation.
        let n = bytes.len().min(4);
        if bytes[..n] != MAGIC[..n] {
            let mut magic = [0u8; 4];
            magic[..n].copy_from_slice(&bytes[..n]);
            return Err(WireError::BadMagic(magic));
        }
        return Err(WireError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(WireError::UnsupportedVersion(bytes[4]));
    }
    let variant = Variant::from_u8(bytes[5]).ok_or(WireError::UnknownVariant(bytes[5]))?;
    let payload_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    Ok(Header {
        variant,
        payload_len,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(WireError::Truncated {
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn i64(&mut self) -> Result<i64, WireError> {
        Ok(i64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn params(&mut self) -> Result<Vec<f64>, WireError> {
        let count = self.u32()? as usize;
        let raw = self.take(
            count
                .checked_mul(8)
                .ok_or(WireError::TooManyParams(count))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Decodes a payload whose header has already been validated.
pub fn decode_payload(variant: Variant, payload: &[u8]) -> Result<Message, WireError> {
    let mut r = Reader {
        bytes: payload,
        pos: 0,
    };
    let msg = match variant {
        Variant::SyncRequest => Message::SyncRequest { t1: r.i64()? },
        Variant::SyncResponse => Message::SyncResponse {
            t1: r.i64()?,
            t2: r.i64()?,
            t3: r.i64()?,
        },
        Variant::GlobalModel => Message::GlobalModel {
            round: r.u32()?,
            params: r.params()?,
        },
        Variant::ClientUpdate => Message::ClientUpdate {
            round: r.u32()?,
            client_id: r.u16()?,
            generated_at: r.i64()?,
            m_n: r.u64()?,
            params: r.params()?,
        },
        Variant::RoundDone => Message::RoundDone { round: r.u32()? },
    };
    if r.pos != payload.len() {
        return Err(WireError::TrailingBytes(payload.len() - r.pos));
    }
    Ok(msg)
}

/// Decodes exactly one frame; the buffer must contain nothing else.
pub fn decode(bytes: &[u8]) -> Result<Message, WireError> {
    let header = decode_header(bytes)?;
    let body = &bytes[HEADER_LEN..];
    if header.payload_len > body.len() {
        return Err(WireError::Truncated {
            needed: header.payload_len,
            available: body.len(),
        });
    }
    if body.len() > header.payload_len {
        return Err(WireError::TrailingBytes(body.len() - header.payload_len));
    }
    decode_payload(header.variant, body)
}
