//! Fixed-length model input from a video's identity tracks.
//!
//! Identities are ranked by a sorting policy; the top `max_identities` split
//! the `N` slots (`floor(N/k)` each, the remainder handed out one by one in
//! rank order). An identity with fewer faces than its quota passes the
//! surplus on to the following identities in rank order (wrapping around),
//! so the sequence is filled whenever enough faces exist. Long tracks are
//! sampled uniformly; leftover slots are padding.

mod seqfile;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{size_bin, EmbeddingError, SlotKey};
use crate::trackdata::{FaceRecord, IdentityTrack, Label, VideoRecord};

pub use seqfile::{read_sequences, write_sequences, SequenceFile};

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("video {0} has no faces to assemble")]
    NoFaces(String),
    #[error("sequence length must be at least 1")]
    EmptySequence,
    #[error("max_identities must be at least 1")]
    NoIdentities,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortPolicy {
    SizeBased,
    FrequencyBased,
    Random,
}

impl std::str::FromStr for SortPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "size_based" => Ok(SortPolicy::SizeBased),
            "frequency_based" => Ok(SortPolicy::FrequencyBased),
            "random" => Ok(SortPolicy::Random),
            other => Err(format!("unknown sorting policy `{other}`")),
        }
    }
}

impl std::fmt::Display for SortPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SortPolicy::SizeBased => "size_based",
            SortPolicy::FrequencyBased => "frequency_based",
            SortPolicy::Random => "random",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssemblyConfig {
    pub sequence_length: usize,
    /// `None` keeps every identity.
    pub max_identities: Option<usize>,
    pub sorting: SortPolicy,
    pub seed: u64,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        AssemblyConfig {
            sequence_length: 16,
            max_identities: Some(2),
            sorting: SortPolicy::SizeBased,
            seed: 0,
        }
    }
}

/// A filled slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotFace {
    pub identity_id: u32,
    pub frame_index: u64,
    pub size_bin: usize,
    pub feature_ref: String,
}

/// One position of the input sequence; `None` is padding.
pub type Slot = Option<SlotFace>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputSequence {
    pub video_id: String,
    pub label: Option<Label>,
    pub slots: Vec<Slot>,
}

impl InputSequence {
    pub fn valid_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn slot_keys(&self) -> Vec<SlotKey> {
        self.slots
            .iter()
            .map(|s| s.as_ref().map(|f| (f.frame_index, f.size_bin)))
            .collect()
    }

    /// Identities in order of first appearance.
    pub fn identities(&self) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::new();
        for f in self.slots.iter().flatten() {
            if !out.contains(&f.identity_id) {
                out.push(f.identity_id);
            }
        }
        out
    }
}

/// Stable 64-bit mix of a seed and a string key (FNV-1a then splitmix64).
pub fn derive_seed(seed: u64, key: &str, salt: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ seed.rotate_left(17) ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sort_identities(tracks: &[IdentityTrack], policy: SortPolicy, seed: u64) -> Vec<&IdentityTrack> {
    let mut out: Vec<&IdentityTrack> = tracks.iter().collect();
    out.sort_by_key(|t| t.identity_id);
    match policy {
        SortPolicy::SizeBased => out.sort_by(|a, b| b.mean_face_area().total_cmp(&a.mean_face_area())),
        SortPolicy::FrequencyBased => out.sort_by(|a, b| b.faces.len().cmp(&a.faces.len())),
        SortPolicy::Random => out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    out
}

/// Per-identity slot quotas for identities listed in rank order with
/// `available` faces each. Only the first `max_identities` take part.
pub fn allocate_slots(available: &[usize], sequence_length: usize, max_identities: Option<usize>) -> Vec<usize> {
    let k = available.len().min(max_identities.unwrap_or(usize::MAX));
    if k == 0 {
        return Vec::new();
    }
    let avail = &available[..k];
    let (base, rem) = (sequence_length / k, sequence_length % k);
    let mut quota: Vec<usize> = (0..k).map(|i| base + usize::from(i < rem)).collect();
    loop {
        let mut changed = false;
        for i in 0..k {
            if avail[i] >= quota[i] {
                continue;
            }
            let mut surplus = quota[i] - avail[i];
            quota[i] = avail[i];
            changed = true;
            for step in 1..k {
                let j = (i + step) % k;
                let give = avail[j].saturating_sub(quota[j]).min(surplus);
                quota[j] += give;
                surplus -= give;
                if surplus == 0 {
                    break;
                }
            }
        }
        if !changed {
            return quota;
        }
    }
}

/// `quota` indices spread evenly over `available` positions, shifted by
/// `phase` in `[0, 1)` of one stride. Returns all indices if `available <= quota`.
pub fn sample_indices(available: usize, quota: usize, phase: f64) -> Vec<usize> {
    if available <= quota {
        return (0..available).collect();
    }
    let stride = available as f64 / quota as f64;
    (0..quota)
        .map(|j| (((j as f64 + phase) * stride).floor() as usize).min(available - 1))
        .collect()
}

/// Sampling phase for an epoch: epoch 0 is the canonical (phase 0) selection.
pub fn epoch_phase(seed: u64, epoch: u64) -> f64 {
    if epoch == 0 {
        return 0.0;
    }
    ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0xd134_2543_de82_ef95)).gen::<f64>()
}

pub fn uniform_sample(track: &IdentityTrack, quota: usize, seed: u64, epoch: u64) -> Vec<&FaceRecord> {
    sample_indices(track.faces.len(), quota, epoch_phase(seed, epoch))
        .into_iter()
        .map(|i| &track.faces[i])
        .collect()
}

pub fn assemble(video: &VideoRecord, cfg: &AssemblyConfig, epoch: u64) -> Result<InputSequence, AssemblyError> {
    if cfg.sequence_length == 0 {
        return Err(AssemblyError::EmptySequence);
    }
    if cfg.max_identities == Some(0) {
        return Err(AssemblyError::NoIdentities);
    }
    if video.face_count() == 0 {
        return Err(AssemblyError::NoFaces(video.video_id.clone()));
    }
    let video_seed = derive_seed(cfg.seed, &video.video_id, 0);
    let ordered = sort_identities(&video.tracks, cfg.sorting, video_seed);
    let available: Vec<usize> = ordered.iter().map(|t| t.faces.len()).collect();
    let quotas = allocate_slots(&available, cfg.sequence_length, cfg.max_identities);

    let mut slots: Vec<Slot> = Vec::with_capacity(cfg.sequence_length);
    for (track, &quota) in ordered.iter().zip(&quotas) {
        let track_seed = derive_seed(cfg.seed, &video.video_id, track.identity_id as u64 + 1);
        for face in uniform_sample(track, quota, track_seed, epoch) {
            slots.push(Some(SlotFace {
                identity_id: track.identity_id,
                frame_index: face.frame_index,
                size_bin: size_bin(face.area_ratio())?,
                feature_ref: face.feature_ref.clone(),
            }));
        }
    }
    slots.resize(cfg.sequence_length, None);
    Ok(InputSequence {
        video_id: video.video_id.clone(),
        label: video.label,
        slots,
    })
}

#[cfg(test)]
mod tests;
