//! Framed message I/O over byte streams.
//!
//! Frames use the wire format unchanged; the header's payload length is the
//! frame delimiter. The same functions write transcript files.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::wire::{self, Message, WireError, HEADER_LEN};

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("stream closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
}

pub fn write_frame<W: Write>(out: &mut W, msg: &Message) -> Result<(), FrameError> {
    out.write_all(&wire::encode(msg)?)?;
    out.flush()?;
    Ok(())
}

/// Reads one frame. A clean EOF before any header byte yields [`FrameError::Closed`].
pub fn read_frame<R: Read>(input: &mut R) -> Result<Message, FrameError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match input.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Err(FrameError::Closed),
            Ok(0) => {
                return Err(WireError::Truncated {
                    needed: HEADER_LEN,
                    available: filled,
                }
                .into())
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let parsed = wire::decode_header(&header)?;
    let mut payload = vec![0u8; parsed.payload_len];
    input.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FrameError::Wire(WireError::Truncated {
            needed: parsed.payload_len,
            available: 0,
        }),
        _ => FrameError::Io(e),
    })?;
    Ok(wire::decode_payload(parsed.variant, &payload)?)
}

/// Reads every frame of a concatenated transcript.
pub fn read_transcript(bytes: &[u8]) -> Result<Vec<Message>, FrameError> {
    let mut cursor = io::Cursor::new(bytes);
    let mut out = Vec::new();
    loop {
        match read_frame(&mut cursor) {
            Ok(m) => out.push(m),
            Err(FrameError::Closed) => return Ok(out),
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_concatenate_and_split() {
        let msgs = vec![
            Message::SyncRequest { t1: 7 },
            Message::GlobalModel {
                round: 2,
                params: vec![0.5, -1.25],
            },
            Message::RoundDone { round: 3 },
        ];
        let mut buf = Vec::new();
        for m in &msgs {
            write_frame(&mut buf, m).unwrap();
        }
        assert_eq!(read_transcript(&buf).unwrap(), msgs);
    }

    #[test]
    fn cut_frame_is_truncation() {
        let mut buf = Vec::new();
        write_frame(
            &mut buf,
            &Message::SyncResponse {
                t1: 1,
                t2: 2,
                t3: 3,
            },
        )
        .unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_transcript(&buf),
            Err(FrameError::Wire(WireError::Truncated { .. }))
        ));
    }

    #[test]
    fn loopback_tcp_roundtrip() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let t = std::thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let m = read_frame(&mut s).unwrap();
            write_frame(&mut s, &m).unwrap();
        });
        let mut c = std::net::TcpStream::connect(addr).unwrap();
        let msg = Message::ClientUpdate {
            round: 1,
            client_id: 4,
            generated_at: 123,
            m_n: 9,
            params: vec![3.0; 100],
        };
        write_frame(&mut c, &msg).unwrap();
        assert_eq!(read_frame(&mut c).unwrap(), msg);
        t.join().unwrap();
    }
}
