//! Shared on-disk container layout.
//!
//! Every artifact file is: an 8-byte magic, a little-endian u32 header
//! length, a UTF-8 JSON header of that length, then a raw little-endian
//! 32-bit-float payload occupying the rest of the file. Writers produce the
//! payload in the order their header manifest declares.

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) const CHECKPOINT_MAGIC: &[u8; 8] = b"TTNLAB01";
pub(crate) const SCORES_MAGIC: &[u8; 8] = b"TTNSC001";
pub(crate) const DATASET_MAGIC: &[u8; 8] = b"TTNDS001";

pub(crate) const CONTAINER_VERSION: u32 = 1;

pub(crate) fn encode(magic: &[u8; 8], header: &[u8], payload: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 + header.len() + payload.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn decode(bytes: &[u8], magic: &[u8; 8]) -> Result<(Vec<u8>, Vec<f32>)> {
    if bytes.len() < 8 {
        return Err(Error::Truncated("file shorter than the 8-byte magic".into()));
    }
    if &bytes[..8] != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated("file ends inside the header length field".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < header_len {
        return Err(Error::Truncated(format!(
            "header declares {header_len} bytes, only {} remain",
            body.len()
        )));
    }
    let header = body[..header_len].to_vec();
    let payload_bytes = &body[header_len..];
    if payload_bytes.len() % 4 != 0 {
        return Err(Error::Truncated(format!(
            "payload of {} bytes is not a whole number of 32-bit floats",
            payload_bytes.len()
        )));
    }
    let payload = payload_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

pub(crate) fn check_version(version: u32) -> Result<()> {
    if version != CONTAINER_VERSION {
        return Err(Error::UnsupportedVersion { found: version, supported: CONTAINER_VERSION });
    }
    Ok(())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let header = br#"{"version":1}"#;
        let payload = [1.0f32, -2.5, 0.0, f32::MIN_POSITIVE];
        let bytes = encode(CHECKPOINT_MAGIC, header, &payload);
        let (h, p) = decode(&bytes, CHECKPOINT_MAGIC).unwrap();
        assert_eq!(h, header);
        assert_eq!(p, payload);
    }

    #[test]
    fn wrong_magic_is_distinct_failure() {
        let bytes = encode(CHECKPOINT_MAGIC, b"{}", &[]);
        match decode(&bytes, SCORES_MAGIC) {
            Err(Error::BadMagic { expected, found }) => {
                assert_eq!(expected, "TTNSC001");
                assert_eq!(found, "TTNLAB01");
            }
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_distinct_failure() {
        let bytes = encode(CHECKPOINT_MAGIC, b"{}", &[1.0, 2.0]);
        for cut in [4, 10, bytes.len() - 3] {
            match decode(&bytes[..cut], CHECKPOINT_MAGIC) {
                Err(Error::Truncated(_)) => {}
                other => panic!("cut at {cut}: expected Truncated, got {other:?}"),
            }
        }
    }

    #[test]
    fn version_gate() {
        assert!(check_version(1).is_ok());
        assert!(matches!(check_version(2), Err(Error::UnsupportedVersion { found: 2, .. })));
    }
}
