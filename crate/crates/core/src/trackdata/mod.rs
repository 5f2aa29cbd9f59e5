//! Videos, faces and identity tracks.

mod crops;
mod manifest;
mod stats;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crops::{CropSource, MemoryCrops, TensorDirSource};
pub use manifest::{
    load_manifest, load_raw_manifest, read_manifest, read_raw_manifest, save_manifest, save_raw_manifest, write_manifest,
    write_raw_manifest, RawVideo,
};
pub use stats::{ratio_stats, RatioStats};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invalid `{field}`: {reason}")]
    Invalid {
        line: usize,
        field: String,
        reason: String,
    },
    #[error("no faces to summarize")]
    Empty,
    #[error("feature `{reference}`: {reason}")]
    Feature { reference: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Pristine,
    Fake,
}

impl Label {
    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }

    pub fn as_target(self) -> f64 {
        if self.is_fake() {
            1.0
        } else {
            0.0
        }
    }
}

/// One detected face.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceRecord {
    pub frame_index: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    /// `[width, height]` of the video frame in pixels.
    pub frame_size: [u32; 2],
    pub embedding: Vec<f32>,
    /// Key of the crop tensor fed to the backbone.
    pub feature_ref: String,
}

impl FaceRecord {
    pub fn area(&self) -> f64 {
        self.bbox[2] * self.bbox[3]
    }

    /// Face-to-frame area ratio in `(0, 1]`.
    pub fn area_ratio(&self) -> f64 {
        self.area() / (self.frame_size[0] as f64 * self.frame_size[1] as f64)
    }

    /// Checks the geometric invariants; returns `(field, reason)` on failure.
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        let [x, y, w, h] = self.bbox;
        let [fw, fh] = self.frame_size;
        if fw == 0 || fh == 0 {
            return Err(("frame_size", format!("{fw}x{fh} is empty")));
        }
        if !(w > 0.0 && w <= fw as f64) {
            return Err(("bbox", format!("width {w} not in (0, {fw}]")));
        }
        if !(h > 0.0 && h <= fh as f64) {
            return Err(("bbox", format!("height {h} not in (0, {fh}]")));
        }
        if !(x >= 0.0 && y >= 0.0 && x + w <= fw as f64 && y + h <= fh as f64) {
            return Err(("bbox", format!("[{x}, {y}, {w}, {h}] leaves the {fw}x{fh} frame")));
        }
        if self.embedding.iter().any(|v| !v.is_finite()) {
            return Err(("embedding", "non-finite value".into()));
        }
        Ok(())
    }
}

/// Temporally ordered faces of one identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityTrack {
    pub identity_id: u32,
    pub faces: Vec<FaceRecord>,
}

impl IdentityTrack {
    pub fn mean_face_area(&self) -> f64 {
        if self.faces.is_empty() {
            return 0.0;
        }
        self.faces.iter().map(FaceRecord::area).sum::<f64>() / self.faces.len() as f64
    }

    pub fn first_frame(&self) -> Option<u64> {
        self.faces.first().map(|f| f.frame_index)
    }

    pub fn check(&self) -> Result<(), (&'static str, String)> {
        if self.faces.is_empty() {
            return Err(("faces", format!("identity {} has no faces", self.identity_id)));
        }
        for pair in self.faces.windows(2) {
            if pair[1].frame_index <= pair[0].frame_index {
                return Err((
                    "frame_index",
                    format!(
                        "identity {}: frame {} follows {} (tracks must be strictly increasing)",
                        self.identity_id, pair[1].frame_index, pair[0].frame_index
                    ),
                ));
            }
        }
        for f in &self.faces {
            f.check()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manipulated_identity: Option<u32>,
    /// Evaluation class (e.g. manipulation method); defaults to the label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub tracks: Vec<IdentityTrack>,
}

impl VideoRecord {
    pub fn face_count(&self) -> usize {
        self.tracks.iter().map(|t| t.faces.len()).sum()
    }

    pub fn track(&self, identity_id: u32) -> Option<&IdentityTrack> {
        self.tracks.iter().find(|t| t.identity_id == identity_id)
    }

    pub fn class_name(&self) -> String {
        match (&self.category, self.label) {
            (Some(c), _) => c.clone(),
            (None, Some(Label::Fake)) => "fake".into(),
            (None, Some(Label::Pristine)) => "pristine".into(),
            (None, None) => "unlabeled".into(),
        }
    }

    pub fn check(&self) -> Result<(), (&'static str, String)> {
        if self.video_id.is_empty() {
            return Err(("video_id", "empty".into()));
        }
        if self.tracks.is_empty() {
            return Err(("tracks", "video has no identity track".into()));
        }
        let mut ids: Vec<u32> = self.tracks.iter().map(|t| t.identity_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(("identity_id", "duplicate identity within video".into()));
        }
        if let Some(m) = self.manipulated_identity {
            if !ids.contains(&m) {
                return Err(("manipulated_identity", format!("identity {m} not present")));
            }
        }
        for t in &self.tracks {
            t.check()?;
        }
        Ok(())
    }
}
