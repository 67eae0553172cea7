//! Flat little-endian codec shared by every transport.
//!
//! Payload layout: fields in descriptor order, each packed little-endian.
//! Strings are a `u32` byte length followed by `max_bytes` zero-padded bytes.
//!
//! Sample frame layout:
//!
//! ```text
//! offset  size  content
//! 0       4     magic "RIO1"
//! 4       8     schema hash (u64 LE)
//! 12      8     timestamp ns (u64 LE)
//! 20      n     packed payload
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use crate::schema::{DType, Payload, SchemaDescriptor, SchemaError, TimedSample, Value};
use crate::time::Timestamp;

pub const SAMPLE_MAGIC: [u8; 4] = *b"RIO1";
pub const SAMPLE_HEADER_BYTES: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("bad magic")]
    BadMagic,
    #[error("schema hash mismatch: expected {expected:#018x}, found {found:#018x}")]
    HashMismatch { expected: u64, found: u64 },
    #[error("buffer of {got} bytes, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("field `{0}` is not valid utf-8")]
    InvalidUtf8(String),
}

/// Total frame size for a schema.
pub fn frame_size(schema: &SchemaDescriptor) -> usize {
    SAMPLE_HEADER_BYTES + schema.payload_size()
}

/// Packs `payload` into `out`, which must be exactly `schema.payload_size()`
/// bytes long. Performs no allocation.
pub fn encode_payload_into(
    schema: &SchemaDescriptor,
    payload: &Payload,
    out: &mut [u8],
) -> Result<(), CodecError> {
    schema.check(payload)?;
    if out.len() != schema.payload_size() {
        return Err(CodecError::Length {
            expected: schema.payload_size(),
            got: out.len(),
        });
    }
    let mut off = 0;
    for (field, (_, value)) in schema.fields().iter().zip(payload.iter()) {
        let size = field.byte_size();
        let dst = &mut out[off..off + size];
        match value {
            Value::F64 { data, .. } => {
                for (chunk, x) in dst.chunks_exact_mut(8).zip(data) {
                    chunk.copy_from_slice(&x.to_bits().to_le_bytes());
                }
            }
            Value::I64 { data, .. } => {
                for (chunk, x) in dst.chunks_exact_mut(8).zip(data) {
                    chunk.copy_from_slice(&x.to_le_bytes());
                }
            }
            Value::U8 { data, .. } => dst.copy_from_slice(data),
            Value::Text(s) => {
                dst[..4].copy_from_slice(&(s.len() as u32).to_le_bytes());
                dst[4..4 + s.len()].copy_from_slice(s.as_bytes());
                dst[4 + s.len()..].fill(0);
            }
        }
        off += size;
    }
    Ok(())
}

pub fn encode_payload(schema: &SchemaDescriptor, payload: &Payload) -> Result<Vec<u8>, CodecError> {
    let mut out = alloc::vec![0u8; schema.payload_size()];
    encode_payload_into(schema, payload, &mut out)?;
    Ok(out)
}

pub fn decode_payload(schema: &SchemaDescriptor, bytes: &[u8]) -> Result<Payload, CodecError> {
    if bytes.len() != schema.payload_size() {
        return Err(CodecError::Length {
            expected: schema.payload_size(),
            got: bytes.len(),
        });
    }
    let mut out = Payload::new();
    let mut off = 0;
    for field in schema.fields() {
        let size = field.byte_size();
        let src = &bytes[off..off + size];
        let value = match field.dtype {
            DType::F64 => Value::F64 {
                shape: field.shape.clone(),
                data: src
                    .chunks_exact(8)
                    .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            },
            DType::I64 => Value::I64 {
                shape: field.shape.clone(),
                data: src
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            },
            DType::U8 => Value::U8 {
                shape: field.shape.clone(),
                data: src.to_vec(),
            },
            DType::Utf8 => {
                let len = u32::from_le_bytes(src[..4].try_into().unwrap()) as usize;
                if len > field.max_bytes {
                    return Err(CodecError::InvalidUtf8(field.name.clone()));
                }
                let s = core::str::from_utf8(&src[4..4 + len])
                    .map_err(|_| CodecError::InvalidUtf8(field.name.clone()))?;
                Value::Text(String::from(s))
            }
        };
        out.insert(field.name.clone(), value);
        off += size;
    }
    Ok(out)
}

/// Encodes a full sample frame (header + payload) into `out`.
pub fn encode_sample_into(
    schema: &SchemaDescriptor,
    sample: &TimedSample,
    out: &mut [u8],
) -> Result<(), CodecError> {
    if out.len() != frame_size(schema) {
        return Err(CodecError::Length {
            expected: frame_size(schema),
            got: out.len(),
        });
    }
    out[..4].copy_from_slice(&SAMPLE_MAGIC);
    out[4..12].copy_from_slice(&schema.hash64().to_le_bytes());
    out[12..20].copy_from_slice(&sample.ts.0.to_le_bytes());
    encode_payload_into(schema, &sample.payload, &mut out[SAMPLE_HEADER_BYTES..])
}

pub fn encode_sample(schema: &SchemaDescriptor, sample: &TimedSample) -> Result<Vec<u8>, CodecError> {
    let mut out = alloc::vec![0u8; frame_size(schema)];
    encode_sample_into(schema, sample, &mut out)?;
    Ok(out)
}

/// Reads the header of a frame: `(schema hash, timestamp)`.
pub fn peek_header(frame: &[u8]) -> Result<(u64, Timestamp), CodecError> {
    if frame.len() < SAMPLE_HEADER_BYTES {
        return Err(CodecError::Length {
            expected: SAMPLE_HEADER_BYTES,
            got: frame.len(),
        });
    }
    if frame[..4] != SAMPLE_MAGIC {
        return Err(CodecError::BadMagic);
    }
    let hash = u64::from_le_bytes(frame[4..12].try_into().unwrap());
    let ts = u64::from_le_bytes(frame[12..20].try_into().unwrap());
    Ok((hash, Timestamp(ts)))
}

pub fn decode_sample(schema: &SchemaDescriptor, frame: &[u8]) -> Result<TimedSample, CodecError> {
    let (hash, ts) = peek_header(frame)?;
    if hash != schema.hash64() {
        return Err(CodecError::HashMismatch {
            expected: schema.hash64(),
            found: hash,
        });
    }
    let payload = decode_payload(schema, &frame[SAMPLE_HEADER_BYTES..])?;
    Ok(TimedSample { ts, payload })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{infer_schema, payload};
    use alloc::vec;

    #[test]
    fn frame_layout_is_documented_layout() {
        let p = payload([("x", Value::f64(1.5)), ("n", Value::i64(-2))]);
        let s = infer_schema(&p).unwrap();
        let frame = encode_sample(&s, &TimedSample::new(Timestamp(7), p.clone())).unwrap();
        assert_eq!(&frame[..4], b"RIO1");
        assert_eq!(u64::from_le_bytes(frame[4..12].try_into().unwrap()), s.hash64());
        assert_eq!(u64::from_le_bytes(frame[12..20].try_into().unwrap()), 7);
        // fields ordered n, x
        assert_eq!(i64::from_le_bytes(frame[20..28].try_into().unwrap()), -2);
        assert_eq!(f64::from_le_bytes(frame[28..36].try_into().unwrap()), 1.5);
        assert_eq!(decode_sample(&s, &frame).unwrap().payload, p);
    }

    #[test]
    fn wrong_schema_rejected() {
        let p = payload([("x", Value::f64(1.5))]);
        let s = infer_schema(&p).unwrap();
        let other = infer_schema(&payload([("x", Value::f64s(vec![1.0, 2.0]))])).unwrap();
        let frame = encode_sample(&s, &TimedSample::new(Timestamp(1), p)).unwrap();
        assert!(matches!(decode_sample(&other, &frame), Err(CodecError::HashMismatch { .. })));
        let mut bad = frame.clone();
        bad[0] = b'X';
        assert_eq!(decode_sample(&s, &bad), Err(CodecError::BadMagic));
        assert!(matches!(
            decode_sample(&s, &frame[..frame.len() - 1]),
            Err(CodecError::Length { .. })
        ));
    }

    #[test]
    fn strings_are_padded() {
        let p = payload([("m", Value::text("abc"))]);
        let s = infer_schema(&p).unwrap();
        let bytes = encode_payload(&s, &p).unwrap();
        assert_eq!(bytes.len(), 4 + 64);
        assert_eq!(&bytes[..7], &[3, 0, 0, 0, b'a', b'b', b'c']);
        assert!(bytes[7..].iter().all(|b| *b == 0));
        assert_eq!(decode_payload(&s, &bytes).unwrap(), p);
    }
}
