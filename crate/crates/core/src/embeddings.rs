//! Temporal coherent positional ids, face-size bins, and their learned tables.
//!
//! Every face contributes `T` tokens. A face detected at video frame `i` owns
//! the positional ids `iT+1 ..= (i+1)T`, assigned to its tokens in raster
//! order, so faces of different identities in the same frame share ids and
//! ids grow with time. Id 0 is reserved for the CLS token.

use std::ops::RangeInclusive;

use rand::Rng;
use thiserror::Error;

use crate::numerics::{Graph, NumericsError, Scalar, Tensor, Var};

/// Number of 5%-wide face-size intervals.
pub const SIZE_BINS: usize = 20;

/// Standard deviation of the table initialization.
pub const TABLE_INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("area ratio {0} outside (0, 1]")]
    RatioOutOfRange(f64),
    #[error("frame {frame} needs positional id {id}, table holds ids up to {capacity}")]
    PositionOverflow { frame: u64, id: usize, capacity: usize },
    #[error("tokens per face must be at least 1")]
    NoTokens,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Positional ids of the tokens of a face seen at `frame_index`.
pub fn tcpe_ids(frame_index: u64, tokens_per_face: usize) -> RangeInclusive<usize> {
    let t = tokens_per_face;
    let i = frame_index as usize;
    i * t + 1..=(i + 1) * t
}

/// Size interval of an area ratio `s`: bin `b` covers `[5b%, 5(b+1)%)`, and
/// `s = 1` falls into the last bin.
pub fn size_bin(s: f64) -> Result<usize, EmbeddingError> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(EmbeddingError::RatioOutOfRange(s));
    }
    let edge = |b: usize| b as f64 / SIZE_BINS as f64;
    // floor(20 s) can land one off next to an edge; settle against the
    // rounded edges themselves.
    let mut b = ((s * SIZE_BINS as f64).floor() as usize).min(SIZE_BINS - 1);
    while b > 0 && s < edge(b) {
        b -= 1;
    }
    while b + 1 < SIZE_BINS && s >= edge(b + 1) {
        b += 1;
    }
    Ok(b)
}

/// Learned positional (`temporal`) and size tables.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables<F> {
    /// `[max_frames * T + 1, D]`; row 0 belongs to CLS.
    pub temporal: Tensor<F>,
    /// `[SIZE_BINS, D]`.
    pub size: Tensor<F>,
    pub tokens_per_face: usize,
}

impl<F: Scalar> EmbeddingTables<F> {
    pub fn new<R: Rng + ?Sized>(
        max_frames: usize,
        tokens_per_face: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self, EmbeddingError> {
        if tokens_per_face == 0 {
            return Err(EmbeddingError::NoTokens);
        }
        Ok(EmbeddingTables {
            temporal: Tensor::randn(&[max_frames * tokens_per_face + 1, dim], TABLE_INIT_STD, rng),
            size: Tensor::randn(&[SIZE_BINS, dim], TABLE_INIT_STD, rng),
            tokens_per_face,
        })
    }

    /// Largest positional id the table can hold.
    pub fn capacity(&self) -> usize {
        self.temporal.shape()[0] - 1
    }
}

/// Per-slot embedding key: `(frame_index, size_bin)` or `None` for padding.
pub type SlotKey = Option<(u64, usize)>;

/// Token-level lookup indices for a slot sequence: positional ids and size
/// bins, `T` entries per slot. Padding slots map to row 0 of both tables.
pub fn token_indices(
    slots: &[SlotKey],
    tokens_per_face: usize,
    capacity: usize,
) -> Result<(Vec<usize>, Vec<usize>), EmbeddingError> {
    let mut pos = Vec::with_capacity(slots.len() * tokens_per_face);
    let mut bins = Vec::with_capacity(slots.len() * tokens_per_face);
    for slot in slots {
        match *slot {
            Some((frame, bin)) => {
                let ids = tcpe_ids(frame, tokens_per_face);
                if *ids.end() > capacity {
                    return Err(EmbeddingError::PositionOverflow {
                        frame,
                        id: *ids.end(),
                        capacity,
                    });
                }
                pos.extend(ids);
                bins.extend(std::iter::repeat_n(bin, tokens_per_face));
            }
            None => {
                pos.extend(std::iter::repeat_n(0, tokens_per_face));
                bins.extend(std::iter::repeat_n(0, tokens_per_face));
            }
        }
    }
    Ok((pos, bins))
}

/// Adds positional and size embeddings to `[slots * T, D]` face tokens.
pub fn embed_tokens<F: Scalar>(
    g: &mut Graph<'_, F>,
    features: Var,
    temporal: Var,
    size: Var,
    slots: &[SlotKey],
    tokens_per_face: usize,
) -> Result<Var, EmbeddingError> {
    let capacity = g.value(temporal).shape()[0] - 1;
    let (pos, bins) = token_indices(slots, tokens_per_face, capacity)?;
    let te = g.embedding(temporal, &pos)?;
    let se = g.embedding(size, &bins)?;
    let z = g.add(features, te)?;
    Ok(g.add(z, se)?)
}
