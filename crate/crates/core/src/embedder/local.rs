use super::{EmbedError, Embedding, EmbeddingProvider, ProviderKind};

pub const LOCAL_PROVIDER_ID: &str = "local-trigram-256";
pub const LOCAL_DIMENSION: usize = 256;

const BEGIN: char = '\u{2}';
const END: char = '\u{3}';
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Offline provider: signed hashed character trigrams.
///
/// The text is framed as `U+0002 text U+0003` and every window of three
/// consecutive chars is hashed with 64-bit FNV-1a over its UTF-8 bytes.
/// Bucket = `hash % 256`, sign = `-1` when bit 63 is set. Bucket sums are
/// L2-normalized.
#[derive(Debug, Default, Clone, Copy)]
pub struct LocalHashEmbedder;

impl LocalHashEmbedder {
    pub fn new() -> Self {
        Self
    }

    pub fn embed_text(text: &str) -> Vec<f32> {
        let framed: Vec<char> = std::iter::once(BEGIN)
            .chain(text.chars())
            .chain(std::iter::once(END))
            .collect();
        let mut acc = [0f64; LOCAL_DIMENSION];
        let mut buf = [0u8; 12];
        for w in framed.windows(3) {
            let mut len = 0;
            for c in w {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let h = fnv1a64(&buf[..len]);
            let bucket = (h % LOCAL_DIMENSION as u64) as usize;
            acc[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        }
        let raw: Vec<f32> = acc.iter().map(|&x| x as f32).collect();
        Embedding::normalized(raw).into_values()
    }
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

impl EmbeddingProvider for LocalHashEmbedder {
    fn provider_id(&self) -> &str {
        LOCAL_PROVIDER_ID
    }

    fn dimension(&self) -> usize {
        LOCAL_DIMENSION
    }

    fn kind(&self) -> ProviderKind {
        ProviderKind::Local
    }

    fn embed_raw(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbedError> {
        Ok(texts.iter().map(|t| Self::embed_text(t)).collect())
    }
}
