//! Tiled in-page layouts for key and value codes.
//!
//! Keys are laid out as `[F / (K_vec * K_group), N_tokens, K_group, K_vec]`
//! so that a thread group reading `K_group` chunks of `K_vec` features walks
//! contiguous memory along the token axis. Values are vectorized along the
//! token axis instead: `[F / V_group, N_tokens / V_vec, V_group, V_vec]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayoutError {
    #[error("feature dim {dim} is not divisible by {divisor} ({what})")]
    Indivisible { dim: usize, divisor: usize, what: &'static str },
    #[error("layout factors must be positive")]
    ZeroFactor,
    #[error("buffer holds {got} elements, expected {expected}")]
    Length { got: usize, expected: usize },
}

/// Vectorization and grouping factors; see the module docs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileConfig {
    pub k_vec: usize,
    pub k_group: usize,
    pub v_vec: usize,
    pub v_group: usize,
}

impl TileConfig {
    pub const FLAT: TileConfig = TileConfig { k_vec: 1, k_group: 1, v_vec: 1, v_group: 1 };

    /// Picks the widest of a few common factors that divide `dim`.
    pub fn for_dim(dim: usize) -> Self {
        let pick = |cands: &[usize], m: usize| *cands.iter().find(|&&c| dim.is_multiple_of(c * m)).unwrap_or(&1);
        let k_vec = pick(&[4, 2, 1], 1);
        let k_group = pick(&[2, 1], k_vec);
        let v_group = pick(&[4, 2, 1], 1);
        TileConfig { k_vec, k_group, v_vec: 1, v_group }
    }
}

/// Shape of one page's tiled key/value block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutParams {
    pub features: usize,
    pub tokens: usize,
    pub tiles: TileConfig,
}

impl LayoutParams {
    pub fn new(features: usize, tokens: usize, tiles: TileConfig) -> Result<Self, LayoutError> {
        let t = tiles;
        if [t.k_vec, t.k_group, t.v_vec, t.v_group, features].contains(&0) {
            return Err(LayoutError::ZeroFactor);
        }
        if !features.is_multiple_of(t.k_vec * t.k_group) {
            return Err(LayoutError::Indivisible {
                dim: features,
                divisor: t.k_vec * t.k_group,
                what: "K_vec*K_group",
            });
        }
        if !features.is_multiple_of(t.v_group) {
            return Err(LayoutError::Indivisible { dim: features, divisor: t.v_group, what: "V_group" });
        }
        Ok(Self { features, tokens, tiles })
    }

    /// Token count after padding up to a multiple of `V_vec`.
    pub fn padded_tokens(&self) -> usize {
        self.tokens.div_ceil(self.tiles.v_vec) * self.tiles.v_vec
    }

    /// Elements in a packed buffer (includes padded token slots).
    pub fn packed_len(&self) -> usize {
        self.padded_tokens() * self.features
    }

    /// Flat index of key element `(token, feature)`.
    pub fn key_index(&self, t: usize, f: usize) -> usize {
        let TileConfig { k_vec, k_group, .. } = self.tiles;
        let n = self.padded_tokens();
        (((f / (k_vec * k_group)) * n + t) * k_group + (f / k_vec) % k_group) * k_vec + f % k_vec
    }

    /// Flat index of value element `(token, feature)`.
    pub fn value_index(&self, t: usize, f: usize) -> usize {
        let TileConfig { v_vec, v_group, .. } = self.tiles;
        let n = self.padded_tokens();
        (((f / v_group) * (n / v_vec) + t / v_vec) * v_group + f % v_group) * v_vec + t % v_vec
    }

    fn check(&self, len: usize) -> Result<(), LayoutError> {
        let expected = self.tokens * self.features;
        if len != expected {
            return Err(LayoutError::Length { got: len, expected });
        }
        Ok(())
    }
}

fn pack_with<T: Copy + Default>(
    rows: &[T],
    p: &LayoutParams,
    index: impl Fn(usize, usize) -> usize,
) -> Result<Vec<T>, LayoutError> {
    p.check(rows.len())?;
    let mut out = vec![T::default(); p.packed_len()];
    for t in 0..p.tokens {
        for f in 0..p.features {
            out[index(t, f)] = rows[t * p.features + f];
        }
    }
    Ok(out)
}

fn unpack_with<T: Copy + Default>(
    packed: &[T],
    p: &LayoutParams,
    index: impl Fn(usize, usize) -> usize,
) -> Result<Vec<T>, LayoutError> {
    if packed.len() != p.packed_len() {
        return Err(LayoutError::Length { got: packed.len(), expected: p.packed_len() });
    }
    let mut out = vec![T::default(); p.tokens * p.features];
    for t in 0..p.tokens {
        for f in 0..p.features {
            out[t * p.features + f] = packed[index(t, f)];
        }
    }
    Ok(out)
}

/// Packs a row-major `tokens x features` key block into the tiled key layout.
pub fn pack_keys<T: Copy + Default>(rows: &[T], p: &LayoutParams) -> Result<Vec<T>, LayoutError> {
    pack_with(rows, p, |t, f| p.key_index(t, f))
}

pub fn unpack_keys<T: Copy + Default>(packed: &[T], p: &LayoutParams) -> Result<Vec<T>, LayoutError> {
    unpack_with(packed, p, |t, f| p.key_index(t, f))
}

/// Packs a row-major `tokens x features` value block into the tiled value layout.
/// Padded token slots are filled with `T::default()`.
pub fn pack_values<T: Copy + Default>(rows: &[T], p: &LayoutParams) -> Result<Vec<T>, LayoutError> {
    pack_with(rows, p, |t, f| p.value_index(t, f))
}

pub fn unpack_values<T: Copy + Default>(packed: &[T], p: &LayoutParams) -> Result<Vec<T>, LayoutError> {
    unpack_with(packed, p, |t, f| p.value_index(t, f))
}
