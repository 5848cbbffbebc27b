//! Shared layout of the binary artifact files.
//!
//! ```text
//! magic (4 bytes) | version (u16 LE) | JSON header, space-padded | payload
//! ```
//!
//! The header is padded so the payload starts on a 64-byte boundary. Tensor
//! payloads are little-endian and row-major; manifest offsets are relative to
//! the start of the payload.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::FormatError;

pub const ALIGN: usize = 64;
const PREFIX: usize = 6;

/// One tensor in a file manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
    pub byte_len: usize,
}

/// Little-endian element encoding for payloads.
pub trait Element: Copy {
    const DTYPE: &'static str;
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn take(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    const SIZE: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
    const SIZE: usize = 8;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(b: &[u8]) -> Self {
        let mut a = [0u8; 8];
        a.copy_from_slice(&b[..8]);
        f64::from_le_bytes(a)
    }
}

/// Accumulates tensors into a payload and records their manifest entries.
#[derive(Debug, Default)]
pub struct PayloadBuilder {
    pub entries: Vec<TensorEntry>,
    pub bytes: Vec<u8>,
}

impl PayloadBuilder {
    pub fn push<E: Element>(&mut self, name: impl Into<String>, shape: &[usize], data: &[E]) {
        let start = self.bytes.len();
        for &v in data {
            v.put(&mut self.bytes);
        }
        self.entries.push(TensorEntry {
            name: name.into(),
            dtype: E::DTYPE.into(),
            shape: shape.to_vec(),
            byte_offset: start,
            byte_len: self.bytes.len() - start,
        });
    }
}

/// Serializes a complete file.
pub fn encode<H: Serialize>(magic: &[u8; 4], version: u16, header: &H, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("headers serialize");
    let mut out = Vec::with_capacity(PREFIX + json.len() + ALIGN + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&json);
    out.push(b'\n');
    while out.len() % ALIGN != 0 {
        out.push(b' ');
    }
    out.extend_from_slice(payload);
    out
}

/// Splits a file into its version, parsed header and payload.
pub fn decode<'a, H: DeserializeOwned>(
    magic: &[u8; 4],
    bytes: &'a [u8],
) -> Result<(u16, H, &'a [u8]), FormatError> {
    if bytes.len() < PREFIX || &bytes[..4] != magic {
        return Err(FormatError::Magic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    let rest = &bytes[PREFIX..];
    let mut stream = serde_json::Deserializer::from_slice(rest).into_iter::<H>();
    let header = match stream.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(FormatError::Header(e.to_string())),
        None => return Err(FormatError::Header("missing header".into())),
    };
    let end = PREFIX + stream.byte_offset();
    let start = end.div_ceil(ALIGN) * ALIGN;
    if start > bytes.len() {
        return Err(FormatError::Truncated {
            need: start,
            have: bytes.len(),
        });
    }
    if !bytes[end..start].iter().all(|b| b.is_ascii_whitespace()) {
        return Err(FormatError::Header("unexpected bytes after header".into()));
    }
    Ok((version, header, &bytes[start..]))
}

/// Reads one tensor described by `entry`, checking dtype, shape and bounds.
pub fn read_tensor<E: Element>(
    payload: &[u8],
    entry: &TensorEntry,
    expected_shape: &[usize],
) -> Result<Vec<E>, FormatError> {
    if entry.dtype != E::DTYPE {
        return Err(FormatError::Manifest(format!(
            "{}: dtype {} (expected {})",
            entry.name,
            entry.dtype,
            E::DTYPE
        )));
    }
    if entry.shape != expected_shape {
        return Err(FormatError::Manifest(format!(
            "{}: manifest shape {:?}, header implies {:?}",
            entry.name, entry.shape, expected_shape
        )));
    }
    let n: usize = expected_shape.iter().product();
    if entry.byte_len != n * E::SIZE {
        return Err(FormatError::Manifest(format!(
            "{}: byte_len {} for {} elements",
            entry.name, entry.byte_len, n
        )));
    }
    let end = entry.byte_offset + entry.byte_len;
    if end > payload.len() {
        return Err(FormatError::Truncated {
            need: end,
            have: payload.len(),
        });
    }
    Ok(payload[entry.byte_offset..end].chunks_exact(E::SIZE).map(E::take).collect())
}
