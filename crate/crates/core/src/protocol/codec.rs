use std::io::{self, Read, Write};

use serde::Serialize;
use thiserror::Error;

use super::{Envelope, Message};

/// Frames larger than this are rejected before allocating.
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("incomplete frame: have {have} bytes, need {need}")]
    Incomplete { have: usize, need: usize },
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN} byte limit")]
    TooLarge(usize),
    #[error("malformed payload at `{path}`: {message}")]
    Malformed { path: String, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Sorted-key, whitespace-free JSON. Struct fields go through a
/// `serde_json::Value`, whose maps are ordered, so the output does not
/// depend on declaration order.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, serde_json::Error> {
    let v = serde_json::to_value(value)?;
    serde_json::to_vec(&v)
}

pub fn encode_frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 4);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out
}

pub fn encode(env: &Envelope) -> Result<Vec<u8>, serde_json::Error> {
    Ok(encode_frame(&canonical_json(env)?))
}

/// Decodes one frame from the front of `bytes`, returning the envelope and
/// the number of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Envelope, usize), DecodeError> {
    if bytes.len() < 4 {
        return Err(DecodeError::Incomplete {
            have: bytes.len(),
            need: 4,
        });
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len > MAX_FRAME_LEN {
        return Err(DecodeError::TooLarge(len));
    }
    let total = 4 + len;
    if bytes.len() < total {
        return Err(DecodeError::Incomplete {
            have: bytes.len(),
            need: total,
        });
    }
    let env = decode_payload(&bytes[4..total])?;
    Ok((env, total))
}

/// Parses a frame payload, reporting the JSON path of the first offending
/// field.
pub fn decode_payload(payload: &[u8]) -> Result<Envelope, DecodeError> {
    let mut de = serde_json::Deserializer::from_slice(payload);
    let env: Envelope = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        DecodeError::Malformed {
            path,
            message: e.into_inner().to_string(),
        }
    })?;
    de.end().map_err(|e| DecodeError::Malformed {
        path: ".".into(),
        message: e.to_string(),
    })?;
    check_semantics(&env)?;
    Ok(env)
}

fn check_semantics(env: &Envelope) -> Result<(), DecodeError> {
    if let Envelope::Publish {
        message: Message::Status(report),
        ..
    } = env
    {
        report.validate().map_err(|m| {
            let (field, message) = m.split_once(": ").unwrap_or((&m, "invalid"));
            DecodeError::Malformed {
                path: format!("publish.message.status.{field}"),
                message: message.to_owned(),
            }
        })?;
    }
    Ok(())
}

pub fn write_frame<W: Write>(out: &mut W, env: &Envelope) -> io::Result<()> {
    let bytes = encode(env).map_err(io::Error::other)?;
    out.write_all(&bytes)?;
    out.flush()
}

/// Blocking read of one frame. `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(input: &mut R) -> Result<Option<Envelope>, DecodeError> {
    let mut len_buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match input.read(&mut len_buf[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(DecodeError::Incomplete { have: got, need: 4 }),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len_buf) as usize;
    if len > MAX_FRAME_LEN {
        return Err(DecodeError::TooLarge(len));
    }
    let mut payload = vec![0u8; len];
    input.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => DecodeError::Incomplete {
            have: 4,
            need: 4 + len,
        },
        _ => DecodeError::Io(e),
    })?;
    decode_payload(&payload).map(Some)
}

/// Incremental decoder for byte streams that arrive in arbitrary chunks.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
}

impl FrameReader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete envelope, `Ok(None)` if more bytes are needed.
    pub fn next_envelope(&mut self) -> Result<Option<Envelope>, DecodeError> {
        match decode(&self.buf) {
            Ok((env, used)) => {
                self.buf.drain(..used);
                Ok(Some(env))
            }
            Err(DecodeError::Incomplete { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{Request, TopicFilter};

    #[test]
    fn length_prefix_is_big_endian() {
        let frame = encode_frame(b"abc");
        assert_eq!(&frame[..4], &[0, 0, 0, 3]);
        assert_eq!(&frame[4..], b"abc");
    }

    #[test]
    fn oversize_length_rejected() {
        let bytes = [0xff, 0xff, 0xff, 0xff, b'{'];
        assert!(matches!(decode(&bytes), Err(DecodeError::TooLarge(_))));
    }

    #[test]
    fn frame_reader_reassembles_chunks() {
        let a = Envelope::Subscribe {
            filter: TopicFilter::parse("game/+/player/+/score").unwrap(),
        };
        let b = Envelope::Request {
            id: 7,
            request: Request::Snapshot {
                game_id: "g".into(),
            },
        };
        let mut stream = encode(&a).unwrap();
        stream.extend(encode(&b).unwrap());
        let mut reader = FrameReader::new();
        let mut out = Vec::new();
        for chunk in stream.chunks(5) {
            reader.extend(chunk);
            while let Some(env) = reader.next_envelope().unwrap() {
                out.push(env);
            }
        }
        assert_eq!(out, vec![a, b]);
    }

    #[test]
    fn stream_read_write() {
        let env = Envelope::Request {
            id: 1,
            request: Request::Start {
                game_id: "g".into(),
            },
        };
        let mut buf = Vec::new();
        write_frame(&mut buf, &env).unwrap();
        let mut cursor = io::Cursor::new(buf.clone());
        assert_eq!(read_frame(&mut cursor).unwrap(), Some(env));
        assert!(read_frame(&mut cursor).unwrap().is_none());
        let mut short = io::Cursor::new(buf[..buf.len() - 2].to_vec());
        assert!(matches!(
            read_frame(&mut short),
            Err(DecodeError::Incomplete { .. })
        ));
    }

    #[test]
    fn trailing_garbage_in_payload_rejected() {
        let mut payload = canonical_json(&Envelope::Request {
            id: 1,
            request: Request::Start {
                game_id: "g".into(),
            },
        })
        .unwrap();
        payload.extend_from_slice(b" x");
        assert!(matches!(
            decode(&encode_frame(&payload)),
            Err(DecodeError::Malformed { .. })
        ));
    }
}
