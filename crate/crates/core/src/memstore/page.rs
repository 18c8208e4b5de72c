use crate::quant::{from_half_bits, read_bits, to_half_bits, write_bits, Precision, QuantizedVector};

use super::geometry::PageFormat;
use super::StoreError;

/// One token as it sits in a page: codes, half-precision metadata, score and position.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredToken {
    pub key: QuantizedVector,
    pub value: QuantizedVector,
    pub score: f32,
    pub position: u32,
}

/// Fixed-size page configured for one precision pair at allocation time.
///
/// The byte buffer is materialized on first write, so a store sized for a
/// large simulation does not pay for pages that only carry accounting.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UnifiedPage {
    format: Option<PageFormat>,
    occupied: Vec<bool>,
    data: Vec<u8>,
}

impl UnifiedPage {
    pub fn format(&self) -> Option<&PageFormat> {
        self.format.as_ref()
    }

    pub fn is_configured(&self) -> bool {
        self.format.is_some()
    }

    pub fn capacity(&self) -> usize {
        self.format.map_or(0, |f| f.capacity)
    }

    pub fn occupancy(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    pub fn is_occupied(&self, slot: usize) -> bool {
        self.occupied.get(slot).copied().unwrap_or(false)
    }

    pub fn first_free_slot(&self) -> Option<usize> {
        self.occupied.iter().position(|&o| !o)
    }

    pub fn occupied_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.occupied.iter().enumerate().filter(|(_, &o)| o).map(|(i, _)| i)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub(crate) fn configure(&mut self, format: PageFormat) {
        self.format = Some(format);
        self.occupied = vec![false; format.capacity];
        self.data.clear();
    }

    pub(crate) fn reset(&mut self) {
        self.format = None;
        self.occupied.clear();
        self.data.clear();
    }

    pub(crate) fn restore(&mut self, format: Option<PageFormat>, occupied: Vec<bool>, data: Vec<u8>) {
        self.format = format;
        self.occupied = occupied;
        self.data = data;
    }

    fn checked_format(&self, slot: usize) -> Result<PageFormat, StoreError> {
        let f = self.format.ok_or(StoreError::PageNotConfigured)?;
        if slot >= f.capacity {
            return Err(StoreError::BadSlot { slot, capacity: f.capacity });
        }
        Ok(f)
    }

    pub fn write(&mut self, slot: usize, token: &StoredToken, page_bytes: usize) -> Result<(), StoreError> {
        let f = self.checked_format(slot)?;
        if f.pair.is_passthrough() {
            return Err(StoreError::PassthroughPage);
        }
        if token.key.bits != f.pair.key || token.value.bits != f.pair.value {
            return Err(StoreError::PrecisionMismatch);
        }
        let d = f.layout.features;
        if token.key.dim() != d || token.value.dim() != d {
            return Err(StoreError::PrecisionMismatch);
        }
        let meta = [token.key.scale, token.key.zero, token.value.scale, token.value.zero];
        if meta.iter().any(|m| !half::f16::from_f64(*m).is_finite()) {
            return Err(StoreError::MetadataOverflow);
        }
        if self.data.is_empty() {
            self.data = vec![0u8; page_bytes];
        }
        let seg = f.segments;
        let (kb, vb) = (f.pair.key.bits() as usize, f.pair.value.bits() as usize);
        for (feat, &c) in token.key.codes.iter().enumerate() {
            let idx = f.layout.key_index(slot, feat) as u64;
            write_bits(&mut self.data, (seg[0] + idx * kb as u64) as usize, kb, c as u64);
        }
        for (feat, &c) in token.value.codes.iter().enumerate() {
            let idx = f.layout.value_index(slot, feat) as u64;
            write_bits(&mut self.data, (seg[2] + idx * vb as u64) as usize, vb, c as u64);
        }
        let s = slot as u64;
        let put16 = |buf: &mut [u8], base: u64, i: u64, v: f64| {
            write_bits(buf, (base + i * 16) as usize, 16, to_half_bits(v) as u64)
        };
        put16(&mut self.data, seg[1], 2 * s, token.key.scale);
        put16(&mut self.data, seg[1], 2 * s + 1, token.key.zero);
        put16(&mut self.data, seg[3], 2 * s, token.value.scale);
        put16(&mut self.data, seg[3], 2 * s + 1, token.value.zero);
        write_bits(&mut self.data, (seg[4] + s * 32) as usize, 32, token.score.to_bits() as u64);
        write_bits(&mut self.data, (seg[5] + s * 32) as usize, 32, token.position as u64);
        self.occupied[slot] = true;
        Ok(())
    }

    pub fn read(&self, slot: usize) -> Result<StoredToken, StoreError> {
        let f = self.checked_format(slot)?;
        if !self.occupied[slot] {
            return Err(StoreError::EmptySlot { slot });
        }
        let seg = f.segments;
        let d = f.layout.features;
        let read_codes = |base: u64, bits: Precision, index: &dyn Fn(usize) -> usize| -> Vec<u8> {
            let b = bits.bits() as u64;
            (0..d)
                .map(|feat| read_bits(&self.data, (base + index(feat) as u64 * b) as usize, b as usize) as u8)
                .collect()
        };
        let key_codes = read_codes(seg[0], f.pair.key, &|feat| f.layout.key_index(slot, feat));
        let value_codes = read_codes(seg[2], f.pair.value, &|feat| f.layout.value_index(slot, feat));
        let s = slot as u64;
        let get16 = |base: u64, i: u64| from_half_bits(read_bits(&self.data, (base + i * 16) as usize, 16) as u16);
        Ok(StoredToken {
            key: QuantizedVector {
                codes: key_codes,
                scale: get16(seg[1], 2 * s),
                zero: get16(seg[1], 2 * s + 1),
                bits: f.pair.key,
            },
            value: QuantizedVector {
                codes: value_codes,
                scale: get16(seg[3], 2 * s),
                zero: get16(seg[3], 2 * s + 1),
                bits: f.pair.value,
            },
            score: f32::from_bits(read_bits(&self.data, (seg[4] + s * 32) as usize, 32) as u32),
            position: read_bits(&self.data, (seg[5] + s * 32) as usize, 32) as u32,
        })
    }

    /// Overwrites the score of an occupied slot.
    pub fn set_score(&mut self, slot: usize, score: f32) -> Result<(), StoreError> {
        let f = self.checked_format(slot)?;
        if !self.occupied[slot] {
            return Err(StoreError::EmptySlot { slot });
        }
        write_bits(&mut self.data, (f.segments[4] + slot as u64 * 32) as usize, 32, score.to_bits() as u64);
        Ok(())
    }

    pub fn clear_slot(&mut self, slot: usize) -> Result<(), StoreError> {
        self.checked_format(slot)?;
        if !self.occupied[slot] {
            return Err(StoreError::EmptySlot { slot });
        }
        self.occupied[slot] = false;
        Ok(())
    }
}
