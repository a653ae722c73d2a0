//! Binary wire protocol, little-endian throughout.
//!
//! Frame: `[u32 payload_len][u8 opcode][payload]`.
//! Key: `[u8 kind][u64 id]`. Tensor record: key, `[u32 dim]`, `dim × f64`.
//! A reply echoes the request opcode on success; errors use opcode 0x7F
//! with payload `[u8 code][u32 len][utf8 message]`.

use std::io::{Read, Write};

use crate::error::{KgError, Result};
use crate::params::{ParamKey, ParamKind};

pub const OP_PULL: u8 = 0x01;
pub const OP_PUSH: u8 = 0x02;
pub const OP_BARRIER: u8 = 0x03;
pub const OP_CHECKPOINT: u8 = 0x04;
pub const OP_SHUTDOWN: u8 = 0x05;
pub const OP_ERROR: u8 = 0x7F;

pub const ERR_UNKNOWN_KEY: u8 = 0x01;
pub const ERR_SHAPE_MISMATCH: u8 = 0x02;
pub const ERR_MALFORMED: u8 = 0x03;
pub const ERR_INTERNAL: u8 = 0x04;

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Pull(Vec<ParamKey>),
    Push(Vec<(ParamKey, Vec<f64>)>),
    Barrier { worker: u64, epoch: u32 },
    Checkpoint { epoch: u32 },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Pull(Vec<(ParamKey, Vec<f64>)>),
    Push,
    Barrier,
    Checkpoint,
    Shutdown,
    Error { code: u8, message: String },
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(KgError::Protocol {
                code: ERR_MALFORMED,
                message: "truncated payload".into(),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn key(&mut self) -> Result<ParamKey> {
        let kind = ParamKind::from_code(self.u8()?)?;
        let id = self.u64()?;
        Ok(ParamKey::new(kind, id))
    }

    fn record(&mut self) -> Result<(ParamKey, Vec<f64>)> {
        let key = self.key()?;
        let dim = self.u32()? as usize;
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            values.push(self.f64()?);
        }
        Ok((key, values))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(KgError::Protocol {
                code: ERR_MALFORMED,
                message: "trailing bytes in payload".into(),
            });
        }
        Ok(())
    }
}

fn put_key(buf: &mut Vec<u8>, key: ParamKey) {
    buf.push(key.kind.code());
    buf.extend_from_slice(&key.id.to_le_bytes());
}

fn put_record(buf: &mut Vec<u8>, key: ParamKey, values: &[f64]) {
    put_key(buf, key);
    buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_request(req: &Request) -> (u8, Vec<u8>) {
    match req {
        Request::Pull(keys) => {
            let mut buf = Vec::with_capacity(4 + 9 * keys.len());
            buf.extend_from_slice(&(keys.len() as u32).to_le_bytes());
            for &k in keys {
                put_key(&mut buf, k);
            }
            (OP_PULL, buf)
        }
        Request::Push(records) => {
            let mut buf = Vec::new();
            buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
            for (k, v) in records {
                put_record(&mut buf, *k, v);
            }
            (OP_PUSH, buf)
        }
        Request::Barrier { worker, epoch } => {
            let mut buf = Vec::with_capacity(12);
            buf.extend_from_slice(&worker.to_le_bytes());
            buf.extend_from_slice(&epoch.to_le_bytes());
            (OP_BARRIER, buf)
        }
        Request::Checkpoint { epoch } => (OP_CHECKPOINT, epoch.to_le_bytes().to_vec()),
        Request::Shutdown => (OP_SHUTDOWN, Vec::new()),
    }
}

pub fn decode_request(opcode: u8, payload: &[u8]) -> Result<Request> {
    let mut r = Reader::new(payload);
    let req = match opcode {
        OP_PULL => {
            let n = r.u32()? as usize;
            let mut keys = Vec::with_capacity(n);
            for _ in 0..n {
                keys.push(r.key()?);
            }
            Request::Pull(keys)
        }
        OP_PUSH => {
            let n = r.u32()? as usize;
            let mut records = Vec::with_capacity(n);
            for _ in 0..n {
                records.push(r.record()?);
            }
            Request::Push(records)
        }
        OP_BARRIER => Request::Barrier {
            worker: r.u64()?,
            epoch: r.u32()?,
        },
        OP_CHECKPOINT => Request::Checkpoint { epoch: r.u32()? },
        OP_SHUTDOWN => Request::Shutdown,
        other => {
            return Err(KgError::Protocol {
                code: ERR_MALFORMED,
                message: format!("unknown opcode 0x{other:02x}"),
            })
        }
    };
    r.done()?;
    Ok(req)
}

pub fn encode_reply(reply: &Reply) -> (u8, Vec<u8>) {
    match reply {
        Reply::Pull(records) => {
            let mut buf = Vec::new();
            buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
            for (k, v) in records {
                put_record(&mut buf, *k, v);
            }
            (OP_PULL, buf)
        }
        Reply::Push => (OP_PUSH, Vec::new()),
        Reply::Barrier => (OP_BARRIER, Vec::new()),
        Reply::Checkpoint => (OP_CHECKPOINT, Vec::new()),
        Reply::Shutdown => (OP_SHUTDOWN, Vec::new()),
        Reply::Error { code, message } => {
            let mut buf = Vec::with_capacity(5 + message.len());
            buf.push(*code);
            buf.extend_from_slice(&(message.len() as u32).to_le_bytes());
            buf.extend_from_slice(message.as_bytes());
            (OP_ERROR, buf)
        }
    }
}

pub fn decode_reply(opcode: u8, payload: &[u8]) -> Result<Reply> {
    let mut r = Reader::new(payload);
    let reply = match opcode {
        OP_PULL => {
            let n = r.u32()? as usize;
            let mut records = Vec::with_capacity(n);
            for _ in 0..n {
                records.push(r.record()?);
            }
            Reply::Pull(records)
        }
        OP_PUSH => Reply::Push,
        OP_BARRIER => Reply::Barrier,
        OP_CHECKPOINT => Reply::Checkpoint,
        OP_SHUTDOWN => Reply::Shutdown,
        OP_ERROR => {
            let code = r.u8()?;
            let len = r.u32()? as usize;
            let bytes = r.take(len)?;
            let message = String::from_utf8_lossy(bytes).into_owned();
            Reply::Error { code, message }
        }
        other => {
            return Err(KgError::Protocol {
                code: ERR_MALFORMED,
                message: format!("unknown reply opcode 0x{other:02x}"),
            })
        }
    };
    r.done()?;
    Ok(reply)
}

/// Whole frame bytes: `[u32 payload_len][u8 opcode][payload]`.
pub fn frame_bytes(opcode: u8, payload: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(5 + payload.len());
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.push(opcode);
    buf.extend_from_slice(payload);
    buf
}

pub fn write_frame<W: Write>(w: &mut W, opcode: u8, payload: &[u8]) -> Result<()> {
    w.write_all(&frame_bytes(opcode, payload))?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<(u8, Vec<u8>)> {
    let mut header = [0u8; 5];
    r.read_exact(&mut header)?;
    let len = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let opcode = header[4];
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok((opcode, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn request_roundtrips() {
        let reqs = vec![
            Request::Pull(vec![
                ParamKey::new(ParamKind::EntityEmb, 7),
                ParamKey::new(ParamKind::LstmWeight, 3),
            ]),
            Request::Push(vec![(
                ParamKey::new(ParamKind::Hyperplane, 1),
                vec![0.5, -0.25],
            )]),
            Request::Barrier {
                worker: 3,
                epoch: 12,
            },
            Request::Checkpoint { epoch: 4 },
            Request::Shutdown,
        ];
        for req in reqs {
            let (op, payload) = encode_request(&req);
            assert_eq!(decode_request(op, &payload).unwrap(), req);
        }
    }

    #[test]
    fn reply_roundtrips() {
        let replies = vec![
            Reply::Pull(vec![(ParamKey::new(ParamKind::AttnWeight, 0), vec![1.0])]),
            Reply::Push,
            Reply::Barrier,
            Reply::Checkpoint,
            Reply::Shutdown,
            Reply::Error {
                code: ERR_UNKNOWN_KEY,
                message: "no such key".into(),
            },
        ];
        for reply in replies {
            let (op, payload) = encode_reply(&reply);
            assert_eq!(decode_reply(op, &payload).unwrap(), reply);
        }
    }

    #[test]
    fn frames_roundtrip_through_io() {
        let (op, payload) = encode_request(&Request::Pull(vec![ParamKey::new(
            ParamKind::EntityEmb,
            42,
        )]));
        let bytes = frame_bytes(op, &payload);
        let mut cursor = std::io::Cursor::new(bytes);
        let (op2, payload2) = read_frame(&mut cursor).unwrap();
        assert_eq!((op, payload), (op2, payload2));
    }

    #[test]
    fn truncated_payload_is_protocol_error() {
        let (op, payload) = encode_request(&Request::Pull(vec![ParamKey::new(
            ParamKind::EntityEmb,
            42,
        )]));
        assert!(decode_request(op, &payload[..payload.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn push_roundtrips_any_records(
            records in prop::collection::vec(
                (0u8..7, any::<u64>(), prop::collection::vec(-1e6f64..1e6, 0..8)),
                0..6
            )
        ) {
            let records: Vec<(ParamKey, Vec<f64>)> = records
                .into_iter()
                .map(|(k, id, v)| (ParamKey::new(ParamKind::from_code(k).unwrap(), id), v))
                .collect();
            let req = Request::Push(records);
            let (op, payload) = encode_request(&req);
            prop_assert_eq!(decode_request(op, &payload).unwrap(), req);
        }
    }
}
