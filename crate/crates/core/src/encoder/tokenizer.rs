/// Token id reserved for padding.
pub const PAD_ID: u32 = 0;
/// Token id prepended to every sequence; its output row is the CLS view.
pub const CLS_ID: u32 = 1;
const RESERVED: u32 = 2;

/// Whitespace tokenizer that hashes each lowercased word into the vocabulary.
#[derive(Clone, Copy, Debug)]
pub struct HashTokenizer {
    vocab_size: u32,
}

impl HashTokenizer {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > RESERVED as usize, "vocabulary too small");
        HashTokenizer {
            vocab_size: vocab_size as u32,
        }
    }

    pub fn token_id(&self, word: &str) -> u32 {
        RESERVED + (fnv1a(word.as_bytes()) % u64::from(self.vocab_size - RESERVED)) as u32
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| {
                w.trim_matches(|c: char| !c.is_alphanumeric())
                    .to_lowercase()
            })
            .filter(|w| !w.is_empty())
            .map(|w| self.token_id(&w))
            .collect()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
