use serde::{Deserialize, Serialize};

use crate::layout::{LayoutParams, TileConfig};
use crate::quant::{packed_len, PrecisionPair};

use super::StoreError;

/// Size of one page and of the per-token records it holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageGeometry {
    pub page_bytes: usize,
    pub dim: usize,
    /// Scale plus zero point of one quantized vector.
    pub metadata_bits: u32,
    pub score_bits: u32,
    pub position_bits: u32,
}

impl PageGeometry {
    pub const DEFAULT_PAGE_BYTES: usize = 1024;

    pub fn new(page_bytes: usize, dim: usize) -> Result<Self, StoreError> {
        if page_bytes == 0 || dim == 0 {
            return Err(StoreError::Geometry("page size and dim must be positive".into()));
        }
        Ok(Self { page_bytes, dim, metadata_bits: 32, score_bits: 32, position_bits: 32 })
    }

    pub fn page_bits(&self) -> u64 {
        self.page_bytes as u64 * 8
    }

    /// Bits one token occupies across the six page segments.
    pub fn token_bits(&self, pair: PrecisionPair) -> u64 {
        let d = self.dim as u64;
        let meta = |quantized: bool| if quantized { self.metadata_bits as u64 } else { 0 };
        d * pair.key.bits() as u64
            + meta(!pair.key.is_passthrough())
            + d * pair.value.bits() as u64
            + meta(!pair.value.is_passthrough())
            + self.score_bits as u64
            + self.position_bits as u64
    }

    pub fn tokens_per_page(&self, pair: PrecisionPair) -> usize {
        (self.page_bits() / self.token_bits(pair)) as usize
    }

    /// Tokens per page of an uncompressed FP16 cache holding only keys and values.
    pub fn fp16_tokens_per_page(&self) -> usize {
        (self.page_bits() / (self.dim as u64 * 32)) as usize
    }

    /// Bidirectional table length: max sequence length over tokens per high page.
    pub fn table_len(&self, max_seq_len: usize, high: PrecisionPair) -> usize {
        max_seq_len.div_ceil(self.tokens_per_page(high).max(1))
    }
}

/// Byte-exact placement of the six segments in a page configured for one pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageFormat {
    pub pair: PrecisionPair,
    pub capacity: usize,
    pub layout: LayoutParams,
    /// Bit offsets: keys, key metadata, values, value metadata, scores, positions.
    pub segments: [u64; 6],
}

impl PageFormat {
    pub fn new(geometry: &PageGeometry, pair: PrecisionPair, tiles: TileConfig) -> Result<Self, StoreError> {
        let mut capacity = geometry.tokens_per_page(pair);
        loop {
            if capacity == 0 {
                return Err(StoreError::Geometry(format!(
                    "a {}-byte page cannot hold one {pair} token at dim {}",
                    geometry.page_bytes, geometry.dim
                )));
            }
            let layout = LayoutParams::new(geometry.dim, capacity, tiles)?;
            let n = layout.padded_tokens() as u64;
            let d = geometry.dim as u64;
            let meta = |q: bool| if q { geometry.metadata_bits as u64 } else { 0 };
            let sizes = [
                n * d * pair.key.bits() as u64,
                capacity as u64 * meta(!pair.key.is_passthrough()),
                n * d * pair.value.bits() as u64,
                capacity as u64 * meta(!pair.value.is_passthrough()),
                capacity as u64 * geometry.score_bits as u64,
                capacity as u64 * geometry.position_bits as u64,
            ];
            if sizes.iter().sum::<u64>() <= geometry.page_bits() {
                let mut segments = [0u64; 6];
                for i in 1..6 {
                    segments[i] = segments[i - 1] + sizes[i - 1];
                }
                return Ok(Self { pair, capacity, layout, segments });
            }
            // V_vec padding overflowed the page; give up one token.
            capacity -= 1;
        }
    }

    /// Bytes of packed key codes for a full page (all padded slots).
    pub fn key_segment_bytes(&self) -> usize {
        packed_len(self.layout.packed_len(), self.pair.key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::Precision;

    #[test]
    fn default_page_k8v4_d128() {
        let g = PageGeometry::new(1024, 128).unwrap();
        assert_eq!(g.token_bits(PrecisionPair::K8V4), 128 * 12 + 128);
        assert_eq!(g.tokens_per_page(PrecisionPair::K8V4), 4);
        assert_eq!(g.tokens_per_page(PrecisionPair::K4V2), 9);
        assert_eq!(g.fp16_tokens_per_page(), 2);
        assert_eq!(g.table_len(4096, PrecisionPair::K8V4), 1024);
    }

    #[test]
    fn lower_pairs_hold_more_tokens() {
        let pairs: Vec<PrecisionPair> = [1u8, 2, 4, 8]
            .iter()
            .flat_map(|&k| {
                [1u8, 2, 4, 8].map(move |v| PrecisionPair::new(Precision::new(k).unwrap(), Precision::new(v).unwrap()))
            })
            .collect();
        for page_bytes in [64, 256, 1024, 4096] {
            for dim in [1, 2, 8, 64, 128] {
                let g = PageGeometry::new(page_bytes, dim).unwrap();
                for a in &pairs {
                    for b in &pairs {
                        if g.token_bits(*b) <= g.token_bits(*a) {
                            assert!(g.tokens_per_page(*b) >= g.tokens_per_page(*a));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn format_fits_page() {
        let g = PageGeometry::new(1024, 128).unwrap();
        let f = PageFormat::new(&g, PrecisionPair::K8V4, TileConfig::for_dim(128)).unwrap();
        assert_eq!(f.capacity, 4);
        assert_eq!(f.segments[1], 4 * 128 * 8);
        // V_vec = 3 pads 9 K4V2 tokens to 9, 4 K8V4 to 6 -> must shrink
        let tiles = TileConfig { v_vec: 3, ..TileConfig::for_dim(128) };
        let f = PageFormat::new(&g, PrecisionPair::K8V4, tiles).unwrap();
        assert_eq!(f.capacity, 3);
        assert!(PageFormat::new(&PageGeometry::new(16, 128).unwrap(), PrecisionPair::K8V4, TileConfig::FLAT).is_err());
    }
}
