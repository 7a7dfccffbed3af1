//! Byte-level tokenizer: id = byte + 1, 0 pads, 257 masks.

pub const PAD_ID: u32 = 0;
pub const MASK_ID: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

/// Truncates to `len` bytes and right-pads with [`PAD_ID`].
pub fn tokenize_text(s: &[u8], len: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = s.iter().take(len).map(|&b| b as u32 + 1).collect();
    ids.resize(len, PAD_ID);
    ids
}

/// Inverse of [`tokenize_text`]; padding and mask ids are dropped.
pub fn detokenize(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter(|&&i| (1..=256).contains(&i)).map(|&i| (i - 1) as u8).collect()
}
