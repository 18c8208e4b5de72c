//! Per-vector asymmetric integer quantization.
//!
//! Each key or value vector is quantized independently with its own scale
//! and zero point taken from the vector's minimum and maximum:
//!
//! ```text
//! z = min(x)    s = (max(x) - min(x)) / (2^bits - 1)    q = round((x - z) / s)
//! x' = s * q + z
//! ```
//!
//! Codes are bit-packed little-endian within each byte, lowest code index in
//! the least-significant bits.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest scale used for constant vectors.
pub const SCALE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("unsupported bit width {0} (expected 1, 2, 4, 8 or 16)")]
    UnsupportedBits(u8),
    #[error("non-finite input at index {0}")]
    NonFinite(usize),
    #[error("cannot integer-quantize at 16 bits (passthrough precision)")]
    Passthrough,
    #[error("downgrade target {target} bits is not below current {current} bits")]
    NotLower { current: u8, target: u8 },
    #[error("cannot parse precision pair {0:?}")]
    BadPair(String),
    #[error("empty vector")]
    Empty,
}

/// Bit width of one quantized element. 16 denotes uncompressed passthrough.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Precision(u8);

impl Precision {
    pub const INT1: Precision = Precision(1);
    pub const INT2: Precision = Precision(2);
    pub const INT4: Precision = Precision(4);
    pub const INT8: Precision = Precision(8);
    pub const FP16: Precision = Precision(16);

    pub fn new(bits: u8) -> Result<Self, QuantError> {
        match bits {
            1 | 2 | 4 | 8 | 16 => Ok(Precision(bits)),
            other => Err(QuantError::UnsupportedBits(other)),
        }
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn is_passthrough(self) -> bool {
        self.0 == 16
    }

    /// Largest code, `2^bits - 1`.
    pub fn max_code(self) -> u32 {
        (1u32 << self.0) - 1
    }
}

impl TryFrom<u8> for Precision {
    type Error = QuantError;
    fn try_from(bits: u8) -> Result<Self, Self::Error> {
        Precision::new(bits)
    }
}

impl From<Precision> for u8 {
    fn from(p: Precision) -> u8 {
        p.0
    }
}

/// Key and value precisions of one token, e.g. K8V4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrecisionPair {
    pub key: Precision,
    pub value: Precision,
}

impl PrecisionPair {
    pub const K8V4: PrecisionPair = PrecisionPair::new(Precision::INT8, Precision::INT4);
    pub const K4V2: PrecisionPair = PrecisionPair::new(Precision::INT4, Precision::INT2);
    pub const K16V16: PrecisionPair = PrecisionPair::new(Precision::FP16, Precision::FP16);

    pub const fn new(key: Precision, value: Precision) -> Self {
        Self { key, value }
    }

    /// Keys stored below values (K4V8, K2V4 and friends).
    pub fn is_mirror(self) -> bool {
        self.key < self.value
    }

    /// Code bits per token for a `dim`-wide head, keys plus values.
    pub fn payload_bits(self, dim: usize) -> u64 {
        dim as u64 * (self.key.bits() as u64 + self.value.bits() as u64)
    }

    pub fn is_passthrough(self) -> bool {
        self.key.is_passthrough() && self.value.is_passthrough()
    }
}

impl fmt::Display for PrecisionPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "K{}V{}", self.key.bits(), self.value.bits())
    }
}

impl FromStr for PrecisionPair {
    type Err = QuantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || QuantError::BadPair(s.to_string());
        let rest = s.trim().strip_prefix(['K', 'k']).ok_or_else(bad)?;
        let split = rest.find(['V', 'v']).ok_or_else(bad)?;
        let key: u8 = rest[..split].parse().map_err(|_| bad())?;
        let value: u8 = rest[split + 1..].parse().map_err(|_| bad())?;
        Ok(PrecisionPair::new(Precision::new(key)?, Precision::new(value)?))
    }
}

/// Integer codes plus the scale and zero point needed to reconstruct them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVector {
    pub codes: Vec<u8>,
    pub scale: f64,
    pub zero: f64,
    pub bits: Precision,
}

impl QuantizedVector {
    pub fn dim(&self) -> usize {
        self.codes.len()
    }

    /// Bytes needed for the packed codes of this vector.
    pub fn packed_len(&self) -> usize {
        packed_len(self.codes.len(), self.bits)
    }
}

/// Quantizes `vec` to `bits` with min/max asymmetric scaling.
pub fn quantize(vec: &[f64], bits: Precision) -> Result<QuantizedVector, QuantError> {
    if bits.is_passthrough() {
        return Err(QuantError::Passthrough);
    }
    if vec.is_empty() {
        return Err(QuantError::Empty);
    }
    if let Some(i) = vec.iter().position(|x| !x.is_finite()) {
        return Err(QuantError::NonFinite(i));
    }
    let (lo, hi) = vec.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let max_code = bits.max_code();
    let scale = ((hi - lo) / max_code as f64).max(SCALE_FLOOR);
    let codes = vec
        .iter()
        .map(|&x| {
            // f64::round is half-away-from-zero.
            let q = ((x - lo) / scale).round();
            q.clamp(0.0, max_code as f64) as u8
        })
        .collect();
    Ok(QuantizedVector { codes, scale, zero: lo, bits })
}

pub fn dequantize(q: &QuantizedVector) -> Vec<f64> {
    q.codes.iter().map(|&c| q.scale * c as f64 + q.zero).collect()
}

/// Re-quantizes an already quantized vector at a lower precision. Operates
/// on the reconstruction since the original values are gone.
pub fn downgrade(q: &QuantizedVector, lower: Precision) -> Result<QuantizedVector, QuantError> {
    if lower >= q.bits {
        return Err(QuantError::NotLower { current: q.bits.bits(), target: lower.bits() });
    }
    quantize(&dequantize(q), lower)
}

/// Bytes occupied by `count` packed codes.
pub fn packed_len(count: usize, bits: Precision) -> usize {
    (count * bits.bits() as usize).div_ceil(8)
}

/// Packs codes into bytes, lowest index in the least-significant bits.
pub fn pack_codes(codes: &[u8], bits: Precision) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    for (i, &c) in codes.iter().enumerate() {
        write_bits(&mut out, i * bits.bits() as usize, bits.bits() as usize, c as u64);
    }
    out
}

pub fn unpack_codes(bytes: &[u8], count: usize, bits: Precision) -> Vec<u8> {
    (0..count).map(|i| read_bits(bytes, i * bits.bits() as usize, bits.bits() as usize) as u8).collect()
}

/// Writes the low `width` bits of `value` at bit offset `offset`.
pub(crate) fn write_bits(buf: &mut [u8], offset: usize, width: usize, value: u64) {
    for b in 0..width {
        let bit = offset + b;
        let mask = 1u8 << (bit % 8);
        if (value >> b) & 1 == 1 {
            buf[bit / 8] |= mask;
        } else {
            buf[bit / 8] &= !mask;
        }
    }
}

pub(crate) fn read_bits(buf: &[u8], offset: usize, width: usize) -> u64 {
    let mut v = 0u64;
    for b in 0..width {
        let bit = offset + b;
        if (buf[bit / 8] >> (bit % 8)) & 1 == 1 {
            v |= 1 << b;
        }
    }
    v
}

/// Half-precision storage of a metadata value (round to nearest even).
pub fn to_half_bits(x: f64) -> u16 {
    half::f16::from_f64(x).to_bits()
}

pub fn from_half_bits(bits: u16) -> f64 {
    half::f16::from_bits(bits).to_f64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ulp(x: f64) -> f64 {
        let x = x.abs();
        if x == 0.0 {
            f64::MIN_POSITIVE
        } else {
            f64::from_bits(x.to_bits() + 1) - x
        }
    }

    #[test]
    fn grid_aligned_two_bit() {
        let q = quantize(&[0.0, 1.0, 2.0, 3.0], Precision::INT2).unwrap();
        assert_eq!(q.scale, 1.0);
        assert_eq!(q.zero, 0.0);
        assert_eq!(q.codes, vec![0, 1, 2, 3]);
        assert_eq!(dequantize(&q), vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn constant_vector_is_exact() {
        for bits in [1, 2, 4, 8] {
            let q = quantize(&[2.75, 2.75, 2.75], Precision::new(bits).unwrap()).unwrap();
            assert_eq!(q.scale, SCALE_FLOOR);
            assert_eq!(dequantize(&q), vec![2.75; 3]);
        }
    }

    #[test]
    fn dequantize_trivial() {
        let q = QuantizedVector { codes: vec![0], scale: 2.0, zero: 1.0, bits: Precision::INT4 };
        assert_eq!(dequantize(&q), vec![1.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(quantize(&[1.0, f64::NAN], Precision::INT4), Err(QuantError::NonFinite(1)));
        assert_eq!(quantize(&[1.0], Precision::FP16), Err(QuantError::Passthrough));
        assert!(Precision::new(3).is_err());
        let q = quantize(&[0.0, 1.0], Precision::INT4).unwrap();
        assert!(matches!(downgrade(&q, Precision::INT4), Err(QuantError::NotLower { .. })));
        assert!(matches!(downgrade(&q, Precision::INT8), Err(QuantError::NotLower { .. })));
    }

    #[test]
    fn error_bound_4bit_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let v: Vec<f64> = (0..32).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let q = quantize(&v, Precision::INT4).unwrap();
            let r = dequantize(&q);
            for (x, y) in v.iter().zip(&r) {
                assert!((x - y).abs() <= q.scale / 2.0 + 4.0 * ulp(x.abs().max(q.zero.abs())));
            }
            assert_eq!(*q.codes.iter().min().unwrap(), 0);
            assert_eq!(*q.codes.iter().max().unwrap() as u32, Precision::INT4.max_code());
        }
    }

    #[test]
    fn requantize_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for bits in [1, 2, 4, 8] {
            let p = Precision::new(bits).unwrap();
            for _ in 0..200 {
                let v: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let once = dequantize(&quantize(&v, p).unwrap());
                let q2 = quantize(&once, p).unwrap();
                let twice = dequantize(&q2);
                let q3 = quantize(&twice, p).unwrap();
                assert_eq!(q2.codes, q3.codes);
                assert_eq!(twice, dequantize(&q3));
            }
        }
    }

    #[test]
    fn downgrade_matches_definition() {
        let v: Vec<f64> = (0..256).map(|i| i as f64).collect();
        let q8 = quantize(&v, Precision::INT8).unwrap();
        let direct = quantize(&dequantize(&q8), Precision::INT4).unwrap();
        assert_eq!(downgrade(&q8, Precision::INT4).unwrap(), direct);
    }

    #[test]
    fn downgrade_error_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..500 {
            let v: Vec<f64> = (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let q8 = quantize(&v, Precision::INT8).unwrap();
            let base = dequantize(&q8);
            let q4 = downgrade(&q8, Precision::INT4).unwrap();
            for (x, y) in base.iter().zip(dequantize(&q4)) {
                assert!((x - y).abs() <= q4.scale / 2.0 + 4.0 * ulp(x.abs().max(q4.zero.abs())));
            }
        }
    }

    #[test]
    fn downgrade_constant() {
        let q = quantize(&[-1.5; 8], Precision::INT8).unwrap();
        let d = downgrade(&q, Precision::INT2).unwrap();
        assert_eq!(dequantize(&d), vec![-1.5; 8]);
    }

    #[test]
    fn bit_packing_order() {
        // codes 1,2,3,0 at 2 bits -> 0b00_11_10_01
        assert_eq!(pack_codes(&[1, 2, 3, 0], Precision::INT2), vec![0b0011_1001]);
        assert_eq!(pack_codes(&[0xA, 0x5], Precision::INT4), vec![0x5A]);
        assert_eq!(pack_codes(&[1, 0, 1], Precision::INT1), vec![0b101]);
        let codes = vec![3, 1, 0, 2, 2];
        let packed = pack_codes(&codes, Precision::INT2);
        assert_eq!(packed.len(), 2);
        assert_eq!(unpack_codes(&packed, 5, Precision::INT2), codes);
    }

    #[test]
    fn pair_parse_and_mirror() {
        let p: PrecisionPair = "K8V4".parse().unwrap();
        assert_eq!(p, PrecisionPair::K8V4);
        assert_eq!(p.to_string(), "K8V4");
        assert!(!p.is_mirror());
        assert!("K4V8".parse::<PrecisionPair>().unwrap().is_mirror());
        assert!("K3V2".parse::<PrecisionPair>().is_err());
        assert!("8V4".parse::<PrecisionPair>().is_err());
    }

    #[test]
    fn half_metadata_round_to_nearest_even() {
        // 1 + 2^-11 is exactly halfway between 1 and the next f16; ties to even -> 1.
        assert_eq!(from_half_bits(to_half_bits(1.0 + 2f64.powi(-11))), 1.0);
        assert_eq!(from_half_bits(to_half_bits(0.5)), 0.5);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn monotone_codes(v in prop::collection::vec(-100.0f64..100.0, 2..40), bits in prop::sample::select(vec![1u8, 2, 4, 8])) {
            let q = quantize(&v, Precision::new(bits).unwrap()).unwrap();
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] <= v[j] {
                        prop_assert!(q.codes[i] <= q.codes[j]);
                    }
                }
            }
        }

        #[test]
        fn affine_dyadic_maps_keep_codes(
            ints in prop::collection::vec(-512i32..512, 2..32),
            k in 0i32..6,
            b in -64i32..64,
            bits in prop::sample::select(vec![1u8, 2, 4, 8]),
        ) {
            // Dyadic inputs under power-of-two scaling and integer shifts are exact in f64,
            // so the codes must be bit-identical.
            let x: Vec<f64> = ints.iter().map(|&i| i as f64 / 256.0).collect();
            let a = 2f64.powi(k);
            let y: Vec<f64> = x.iter().map(|v| a * v + b as f64).collect();
            let p = Precision::new(bits).unwrap();
            prop_assert_eq!(quantize(&x, p).unwrap().codes, quantize(&y, p).unwrap().codes);
        }

        #[test]
        fn pack_roundtrip(codes in prop::collection::vec(0u8..=255, 0..64), bits in prop::sample::select(vec![1u8, 2, 4, 8])) {
            let p = Precision::new(bits).unwrap();
            let codes: Vec<u8> = codes.into_iter().map(|c| (c as u32 & p.max_code()) as u8).collect();
            let packed = pack_codes(&codes, p);
            prop_assert_eq!(packed.len() * 8 >= codes.len() * bits as usize, true);
            prop_assert_eq!(unpack_codes(&packed, codes.len(), p), codes);
        }
    }
}
