//! Coordinator/worker wire protocol.
//!
//! Frames are a 32-bit little-endian length followed by that many payload
//! bytes. A payload is a 1-byte tag and the variant's fields in order,
//! little-endian, with returns as 32-bit reals and strings as a 32-bit
//! length plus UTF-8 bytes. Only seeds, index ranges and scalar returns
//! ever cross the wire; connection and probability matrices never do --
//! every node re-derives them locally from the seeds.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_PORT: u16 = 7171;

/// Upper bound on accepted frame length. Generous for returns vectors of
/// any plausible population, far below any matrix payload.
pub const MAX_FRAME_LEN: u32 = 1 << 26;

const TAG_HELLO: u8 = 1;
const TAG_CONFIG: u8 = 2;
const TAG_ASSIGN: u8 = 3;
const TAG_RETURNS: u8 = 4;
const TAG_ALL_RETURNS: u8 = 5;
const TAG_SHUTDOWN: u8 = 6;

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    /// Worker greeting. `next_gen` is the number of updates the worker has
    /// already applied, so a restarted worker can ask for the missed tail.
    Hello {
        worker_id: u64,
        protocol_version: u32,
        next_gen: u64,
    },
    /// Coordinator's reply to a hello: the full run configuration, from
    /// which the worker builds its local model replica.
    Config {
        protocol_version: u32,
        config_toml: String,
    },
    /// Evaluate population indices `[index_lo, index_hi)` of `gen`.
    Assign {
        gen: u64,
        gen_seed: u64,
        index_lo: u64,
        index_hi: u64,
    },
    /// Worker's returns for one assigned range.
    Returns {
        gen: u64,
        index_lo: u64,
        values: Vec<f32>,
    },
    /// Full population returns; every node applies the same update from
    /// these and its locally derived generation seed.
    AllReturns { gen: u64, values: Vec<f32> },
    Shutdown,
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Hello { .. } => TAG_HELLO,
            Message::Config { .. } => TAG_CONFIG,
            Message::Assign { .. } => TAG_ASSIGN,
            Message::Returns { .. } => TAG_RETURNS,
            Message::AllReturns { .. } => TAG_ALL_RETURNS,
            Message::Shutdown => TAG_SHUTDOWN,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.tag()];
        match self {
            Message::Hello {
                worker_id,
                protocol_version,
                next_gen,
            } => {
                out.extend_from_slice(&worker_id.to_le_bytes());
                out.extend_from_slice(&protocol_version.to_le_bytes());
                out.extend_from_slice(&next_gen.to_le_bytes());
            }
            Message::Config {
                protocol_version,
                config_toml,
            } => {
                out.extend_from_slice(&protocol_version.to_le_bytes());
                out.extend_from_slice(&(config_toml.len() as u32).to_le_bytes());
                out.extend_from_slice(config_toml.as_bytes());
            }
            Message::Assign {
                gen,
                gen_seed,
                index_lo,
                index_hi,
            } => {
                out.extend_from_slice(&gen.to_le_bytes());
                out.extend_from_slice(&gen_seed.to_le_bytes());
                out.extend_from_slice(&index_lo.to_le_bytes());
                out.extend_from_slice(&index_hi.to_le_bytes());
            }
            Message::Returns {
                gen,
                index_lo,
                values,
            } => {
                out.extend_from_slice(&gen.to_le_bytes());
                out.extend_from_slice(&index_lo.to_le_bytes());
                out.extend_from_slice(&(values.len() as u32).to_le_bytes());
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Message::AllReturns { gen, values } => {
                out.extend_from_slice(&gen.to_le_bytes());
                out.extend_from_slice(&(values.len() as u32).to_le_bytes());
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Message::Shutdown => {}
        }
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Message> {
        let mut cur = Cursor::new(payload);
        let tag = cur.u8()?;
        let msg = match tag {
            TAG_HELLO => Message::Hello {
                worker_id: cur.u64()?,
                protocol_version: cur.u32()?,
                next_gen: cur.u64()?,
            },
            TAG_CONFIG => {
                let protocol_version = cur.u32()?;
                let len = cur.u32()? as usize;
                let bytes = cur.bytes(len)?;
                let config_toml = String::from_utf8(bytes.to_vec())
                    .map_err(|_| Error::Protocol("config payload is not UTF-8".into()))?;
                Message::Config {
                    protocol_version,
                    config_toml,
                }
            }
            TAG_ASSIGN => Message::Assign {
                gen: cur.u64()?,
                gen_seed: cur.u64()?,
                index_lo: cur.u64()?,
                index_hi: cur.u64()?,
            },
            TAG_RETURNS => {
                let gen = cur.u64()?;
                let index_lo = cur.u64()?;
                let values = cur.f32_vec()?;
                Message::Returns {
                    gen,
                    index_lo,
                    values,
                }
            }
            TAG_ALL_RETURNS => {
                let gen = cur.u64()?;
                let values = cur.f32_vec()?;
                Message::AllReturns { gen, values }
            }
            TAG_SHUTDOWN => Message::Shutdown,
            other => return Err(Error::Protocol(format!("unknown message tag {other}"))),
        };
        cur.finish()?;
        Ok(msg)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Protocol("message payload is truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self) -> Result<Vec<f32>> {
        let len = self.u32()? as usize;
        let raw = self.bytes(len * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Protocol(format!(
                "{} trailing bytes in message payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Write one length-prefixed frame.
pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> std::io::Result<()> {
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// Read one length-prefixed frame. `Ok(None)` means the peer closed the
/// stream cleanly at a frame boundary.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut len_bytes = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut len_bytes[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(Error::Protocol("connection closed mid-frame".into())),
            Ok(n) => filled += n,
            Err(e) => return Err(Error::Io(e)),
        }
    }
    let len = u32::from_le_bytes(len_bytes);
    if len > MAX_FRAME_LEN {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)
        .map_err(|_| Error::Protocol("connection closed mid-frame".into()))?;
    Ok(Some(payload))
}

pub fn send_message(w: &mut impl Write, msg: &Message) -> std::io::Result<()> {
    write_frame(w, &msg.encode())
}

pub fn recv_message(r: &mut impl Read) -> Result<Option<Message>> {
    match read_frame(r)? {
        None => Ok(None),
        Some(payload) => Message::decode(&payload).map(Some),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frame_roundtrip_over_a_buffer() {
        let msg = Message::Assign {
            gen: 3,
            gen_seed: 0xDEADBEEF,
            index_lo: 0,
            index_hi: 512,
        };
        let mut buf = Vec::new();
        send_message(&mut buf, &msg).unwrap();
        let mut slice = buf.as_slice();
        let back = recv_message(&mut slice).unwrap().unwrap();
        assert_eq!(back, msg);
        assert!(recv_message(&mut slice).unwrap().is_none());
    }

    #[test]
    fn oversized_frame_is_rejected() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&(MAX_FRAME_LEN + 1).to_le_bytes());
        buf.extend_from_slice(&[0u8; 16]);
        assert!(read_frame(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut payload = Message::Shutdown.encode();
        payload.push(0);
        assert!(Message::decode(&payload).is_err());
    }

    fn message_strategy() -> impl Strategy<Value = Message> {
        let values = prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 0..64);
        prop_oneof![
            (any::<u64>(), any::<u32>(), any::<u64>()).prop_map(|(w, v, g)| Message::Hello {
                worker_id: w,
                protocol_version: v,
                next_gen: g,
            }),
            (any::<u32>(), "[a-z =\\n\\[\\]0-9_.]{0,200}").prop_map(|(v, t)| Message::Config {
                protocol_version: v,
                config_toml: t,
            }),
            (any::<u64>(), any::<u64>(), any::<u64>(), any::<u64>()).prop_map(
                |(gen, seed, lo, hi)| Message::Assign {
                    gen,
                    gen_seed: seed,
                    index_lo: lo,
                    index_hi: hi,
                }
            ),
            (any::<u64>(), any::<u64>(), values.clone()).prop_map(|(gen, lo, values)| {
                Message::Returns {
                    gen,
                    index_lo: lo,
                    values,
                }
            }),
            (any::<u64>(), values).prop_map(|(gen, values)| Message::AllReturns { gen, values }),
            Just(Message::Shutdown),
        ]
    }

    proptest! {
        #[test]
        fn encode_decode_is_identity(msg in message_strategy()) {
            let payload = msg.encode();
            let back = Message::decode(&payload).unwrap();
            prop_assert_eq!(back, msg);
        }

        #[test]
        fn decode_never_panics_on_noise(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
            let _ = Message::decode(&bytes);
        }
    }
}
