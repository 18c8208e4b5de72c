use serde::{Deserialize, Serialize};

/// Exact bit and byte totals behind the memory fractions.
///
/// Payload mode counts only code bits against 16-bit keys and values. Full
/// mode divides the bytes of every held page by the raw FP16 size.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryTally {
    pub tokens: u64,
    pub key_bits: u64,
    pub value_bits: u64,
    /// FP16 bits of one side (keys or values) for all tokens.
    pub baseline_side_bits: u64,
    pub held_pages: u64,
    pub held_bytes: u64,
}

impl MemoryTally {
    pub fn add(&mut self, o: &MemoryTally) {
        self.tokens += o.tokens;
        self.key_bits += o.key_bits;
        self.value_bits += o.value_bits;
        self.baseline_side_bits += o.baseline_side_bits;
        self.held_pages += o.held_pages;
        self.held_bytes += o.held_bytes;
    }

    fn ratio(num: u64, den: u64) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn key_fraction(&self) -> f64 {
        Self::ratio(self.key_bits, self.baseline_side_bits)
    }

    pub fn value_fraction(&self) -> f64 {
        Self::ratio(self.value_bits, self.baseline_side_bits)
    }

    pub fn payload_fraction(&self) -> f64 {
        Self::ratio(self.key_bits + self.value_bits, 2 * self.baseline_side_bits)
    }

    pub fn full_fraction(&self) -> f64 {
        Self::ratio(self.held_bytes * 8, 2 * self.baseline_side_bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fractions() {
        let t = MemoryTally {
            tokens: 5,
            key_bits: 20,
            value_bits: 10,
            baseline_side_bits: 80,
            held_pages: 1,
            held_bytes: 10,
        };
        assert_eq!(t.key_fraction(), 0.25);
        assert_eq!(t.value_fraction(), 0.125);
        assert_eq!(t.payload_fraction(), 30.0 / 160.0);
        assert_eq!(t.full_fraction(), 0.5);
        assert_eq!(MemoryTally::default().payload_fraction(), 0.0);
    }
}
