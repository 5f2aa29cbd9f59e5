//! Sparse attention patterns over the token axis `[CLS, slot 0 tokens, slot 1 tokens, ...]`.
//!
//! Masking is by key exclusion: a query only ever reads the keys listed for
//! it, so excluded tokens cannot leak into its output through any term.

use serde::{Deserialize, Serialize};

use crate::numerics::AttentionPattern;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialScope {
    /// Tokens of the same face.
    Face,
    /// Tokens of every face detected in the same frame.
    Frame,
}

impl std::str::FromStr for SpatialScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "face" => Ok(SpatialScope::Face),
            "frame" => Ok(SpatialScope::Frame),
            other => Err(format!("unknown spatial scope `{other}`")),
        }
    }
}

impl std::fmt::Display for SpatialScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpatialScope::Face => "face",
            SpatialScope::Frame => "frame",
        })
    }
}

/// Tokens attendable by one identity's queries; CLS (index 0) is always set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdentityMask {
    pub identity: u32,
    pub mask: Vec<bool>,
}

fn token(slot: usize, pos: usize, t: usize) -> usize {
    1 + slot * t + pos
}

/// One mask per identity, in order of first appearance. Padding slots are in none.
pub fn identity_masks(identities: &[Option<u32>], t: usize) -> Vec<IdentityMask> {
    let n = 1 + identities.len() * t;
    let mut out: Vec<IdentityMask> = Vec::new();
    for (slot, id) in identities.iter().enumerate() {
        let Some(id) = *id else { continue };
        let idx = match out.iter().position(|m| m.identity == id) {
            Some(i) => i,
            None => {
                let mut mask = vec![false; n];
                mask[0] = true;
                out.push(IdentityMask { identity: id, mask });
                out.len() - 1
            }
        };
        for p in 0..t {
            out[idx].mask[token(slot, p, t)] = true;
        }
    }
    out
}

fn cls_row(identities: &[Option<u32>], t: usize) -> Vec<usize> {
    let mut row = vec![0];
    for (slot, id) in identities.iter().enumerate() {
        if id.is_some() {
            row.extend((0..t).map(|p| token(slot, p, t)));
        }
    }
    row
}

/// Identity-aware temporal attention: a token attends to CLS and the tokens
/// at the same spatial position of its own identity's faces. CLS attends to
/// every valid token; a padding token only to itself.
pub fn temporal_pattern(identities: &[Option<u32>], t: usize) -> AttentionPattern {
    let n = 1 + identities.len() * t;
    let masks = identity_masks(identities, t);
    let mut rows = Vec::with_capacity(n);
    rows.push(cls_row(identities, t));
    for (slot, id) in identities.iter().enumerate() {
        for p in 0..t {
            let own = token(slot, p, t);
            rows.push(match id {
                None => vec![own],
                Some(id) => {
                    let m = &masks.iter().find(|m| m.identity == *id).expect("mask exists").mask;
                    let mut row = vec![0];
                    row.extend((0..identities.len()).map(|b| token(b, p, t)).filter(|&k| m[k]));
                    row
                }
            });
        }
    }
    AttentionPattern::from_rows(rows, n).expect("every row holds at least its own token")
}

/// Spatial attention: CLS plus the tokens of the same face (or frame).
pub fn spatial_pattern(
    identities: &[Option<u32>],
    frames: &[Option<u64>],
    t: usize,
    scope: SpatialScope,
) -> AttentionPattern {
    let n = 1 + identities.len() * t;
    let mut rows = Vec::with_capacity(n);
    rows.push(cls_row(identities, t));
    for (slot, id) in identities.iter().enumerate() {
        let faces: Vec<usize> = match (id, scope) {
            (None, _) => Vec::new(),
            (Some(_), SpatialScope::Face) => vec![slot],
            (Some(_), SpatialScope::Frame) => (0..identities.len())
                .filter(|&b| identities[b].is_some() && frames[b] == frames[slot])
                .collect(),
        };
        for p in 0..t {
            rows.push(if faces.is_empty() {
                vec![token(slot, p, t)]
            } else {
                let mut row = vec![0];
                for &b in &faces {
                    row.extend((0..t).map(|q| token(b, q, t)));
                }
                row
            });
        }
    }
    AttentionPattern::from_rows(rows, n).expect("every row holds at least its own token")
}
