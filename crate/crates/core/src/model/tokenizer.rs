use alloc::string::String;
use alloc::vec::Vec;

/// First byte token id. Ids `0..3` are pad, bos and eos.
pub const BYTE_OFFSET: u32 = 3;

/// Byte-level tokenizer.
///
/// Layout: `0 = pad`, `1 = bos`, `2 = eos`, `3..259` = bytes `0x00..=0xFF`,
/// and anything from 259 up to `vocab_size` is reserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    /// Smallest vocabulary that holds every byte.
    pub const MIN_VOCAB: usize = 259;

    pub fn byte_id(b: u8) -> u32 {
        BYTE_OFFSET + b as u32
    }

    pub fn id_byte(id: u32) -> Option<u8> {
        if (BYTE_OFFSET..BYTE_OFFSET + 256).contains(&id) {
            Some((id - BYTE_OFFSET) as u8)
        } else {
            None
        }
    }

    /// Encodes raw UTF-8 bytes; no special tokens are added.
    pub fn encode(text: &str) -> Vec<u32> {
        text.bytes().map(Self::byte_id).collect()
    }

    /// `[bos] + encode(text)`, the prompt template used throughout.
    pub fn encode_prompt(text: &str) -> Vec<u32> {
        let mut ids = Vec::with_capacity(text.len() + 1);
        ids.push(Self::BOS);
        ids.extend(Self::encode(text));
        ids
    }

    /// Decodes byte tokens, skipping specials and reserved ids. Invalid UTF-8
    /// sequences are replaced with U+FFFD.
    pub fn decode(ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids.iter().filter_map(|&id| Self::id_byte(id)).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert!(ByteTokenizer::encode("").is_empty());
        assert_eq!(ByteTokenizer::encode("A"), [3 + 0x41]);
        let s = "\\boxed{42}";
        assert_eq!(ByteTokenizer::decode(&ByteTokenizer::encode(s)), s);
        assert_eq!(ByteTokenizer::encode_prompt("a")[0], ByteTokenizer::BOS);
        assert_eq!(ByteTokenizer::decode(&[1, 3 + b'h' as u32, 2, 0, 300]), "h");
    }

    proptest! {
        #[test]
        fn round_trip(s in ".*") {
            prop_assert_eq!(ByteTokenizer::decode(&ByteTokenizer::encode(&s)), s);
        }
    }
}
