//! Self-describing payload framing: `tag_len(1) | schema tag | JSON body`.
//!
//! The broker only looks at the tag (to enforce the topic's schema); the
//! body is opaque to it.

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("payload too short for a schema tag")]
    Truncated,
    #[error("schema tag is not UTF-8")]
    BadTag,
    #[error("expected schema {expected:?}, got {got:?}")]
    WrongSchema { expected: String, got: String },
    #[error("body: {0}")]
    Body(#[from] serde_json::Error),
}

pub fn schema_of(payload: &[u8]) -> Result<&str, RecordError> {
    let n = *payload.first().ok_or(RecordError::Truncated)? as usize;
    let tag = payload.get(1..1 + n).ok_or(RecordError::Truncated)?;
    std::str::from_utf8(tag).map_err(|_| RecordError::BadTag)
}

pub fn encode<T: Serialize>(schema: &str, body: &T) -> Vec<u8> {
    assert!(schema.len() <= u8::MAX as usize, "schema tag too long");
    let mut out = Vec::with_capacity(64);
    out.push(schema.len() as u8);
    out.extend_from_slice(schema.as_bytes());
    serde_json::to_writer(&mut out, body).expect("record serializes");
    out
}

pub fn decode<T: DeserializeOwned>(schema: &str, payload: &[u8]) -> Result<T, RecordError> {
    let got = schema_of(payload)?;
    if got != schema {
        return Err(RecordError::WrongSchema {
            expected: schema.to_string(),
            got: got.to_string(),
        });
    }
    Ok(serde_json::from_slice(&payload[1 + got.len()..])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tag_roundtrip() {
        let p = encode("uplink.v1", &vec![1, 2, 3]);
        assert_eq!(schema_of(&p).unwrap(), "uplink.v1");
        let v: Vec<i32> = decode("uplink.v1", &p).unwrap();
        assert_eq!(v, vec![1, 2, 3]);
        assert!(matches!(decode::<Vec<i32>>("other", &p), Err(RecordError::WrongSchema { .. })));
        assert!(matches!(schema_of(&[]), Err(RecordError::Truncated)));
        assert!(matches!(schema_of(&[5, b'a']), Err(RecordError::Truncated)));
    }
}
