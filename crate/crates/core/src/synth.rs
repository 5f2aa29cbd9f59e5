//! Synthetic multi-identity videos with a known manipulated identity.
//!
//! Each identity is a drifting sinusoidal texture. Fake videos carry an
//! anomaly on one identity over a contiguous span of frames: a
//! high-frequency checker patch (`texture_patch`) or per-frame random texture
//! phase (`temporal_jitter`). All random draws happen regardless of the
//! anomaly strength, so strength 0 renders fakes exactly like pristine videos.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::assembler::derive_seed;
use crate::numerics::{save_tensor, NumericsError, Precision, Tensor};
use crate::trackdata::{
    save_manifest, save_raw_manifest, CropSource, DataError, FaceRecord, IdentityTrack, Label, RawVideo, VideoRecord,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnomalyKind {
    TemporalJitter,
    TexturePatch,
    /// Each fake picks one of the two at random.
    Mixed,
}

impl AnomalyKind {
    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::TemporalJitter => "temporal_jitter",
            AnomalyKind::TexturePatch => "texture_patch",
            AnomalyKind::Mixed => "mixed",
        }
    }
}

impl std::str::FromStr for AnomalyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "temporal_jitter" => Ok(AnomalyKind::TemporalJitter),
            "texture_patch" => Ok(AnomalyKind::TexturePatch),
            "mixed" => Ok(AnomalyKind::Mixed),
            other => Err(format!("unknown anomaly kind `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub fake_fraction: f64,
    pub frames: usize,
    pub identities: usize,
    /// Face area as a fraction of the frame, `(min, max)`.
    pub size_range: (f64, f64),
    pub crop_size: usize,
    pub frame_side: u32,
    pub embedding_dim: usize,
    pub anomaly: AnomalyKind,
    pub strength: f64,
    /// Fraction of an identity's frames covered by the anomaly.
    pub anomaly_span: f64,
    /// Probability that a face is missing from a frame.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_videos: 200,
            fake_fraction: 0.5,
            frames: 24,
            identities: 2,
            size_range: (0.01, 0.25),
            crop_size: 32,
            frame_side: 256,
            embedding_dim: 16,
            anomaly: AnomalyKind::TexturePatch,
            strength: 1.0,
            anomaly_span: 0.6,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.into()));
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("size_range must satisfy 0 < min <= max <= 1");
        }
        if !(1..=3).contains(&self.identities) {
            return bad("identities must be 1, 2 or 3");
        }
        if self.frames == 0 || self.crop_size < 4 || self.frame_side == 0 || self.embedding_dim == 0 {
            return bad("frames, crop_size (>= 4), frame_side and embedding_dim must be positive");
        }
        if !(0.0..=1.0).contains(&self.fake_fraction) || !(0.0..1.0).contains(&self.dropout) {
            return bad("fake_fraction must be in [0, 1] and dropout in [0, 1)");
        }
        if !(self.anomaly_span > 0.0 && self.anomaly_span <= 1.0) {
            return bad("anomaly_span must be in (0, 1]");
        }
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return bad("strength must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Texture {
    freq: [f64; 2],
    phase: f64,
    drift: f64,
    amp: f64,
    color: [f64; 3],
    chroma: f64,
}

#[derive(Clone, Debug)]
struct Anomaly {
    identity: usize,
    kind: AnomalyKind,
    frames: std::ops::Range<usize>,
    jitter: Vec<f64>,
    patch: [usize; 2],
    strength: f64,
}

/// Everything needed to re-render a video's crops.
#[derive(Clone, Debug)]
struct VideoSpec {
    seed: u64,
    textures: Vec<Texture>,
    anomaly: Option<Anomaly>,
    /// `(texture, frame)` per face, indexed like the `#k` crop reference.
    faces: Vec<(usize, usize)>,
}

pub struct SynthDataset {
    pub config: SynthConfig,
    pub videos: Vec<VideoRecord>,
    specs: Vec<VideoSpec>,
    index: std::collections::HashMap<String, usize>,
}

pub fn crop_file(video_id: &str) -> String {
    format!("crops/{video_id}.mntt")
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn make_video(cfg: &SynthConfig, index: usize, fake: bool) -> (VideoRecord, VideoSpec) {
    let video_id = format!("syn{index:05}");
    let seed = derive_seed(cfg.seed, &video_id, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.identities;
    let side = cfg.frame_side as f64;
    let (lo, hi) = cfg.size_range;

    struct Draft {
        texture: Texture,
        base: Vec<f64>,
        faces: Vec<(usize, [f64; 4])>,
    }
    let mut drafts: Vec<Draft> = (0..k)
        .map(|_| {
            let texture = Texture {
                freq: [rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0)],
                phase: rng.gen_range(0.0..2.0 * PI),
                drift: rng.gen_range(0.05..0.2),
                amp: rng.gen_range(0.5..1.0),
                color: [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
                chroma: rng.gen_range(0.0..PI),
            };
            let mut base: Vec<f64> = (0..cfg.embedding_dim).map(|_| normal(&mut rng)).collect();
            let norm = base.iter().map(|x| x * x).sum::<f64>().sqrt();
            base.iter_mut().for_each(|x| *x /= norm);
            let area = rng.gen_range(lo..=hi);
            let wobble = rng.gen_range(0.0..2.0 * PI);
            let (cx, cy) = (rng.gen::<f64>(), rng.gen::<f64>());
            let mut faces = Vec::new();
            for t in 0..cfg.frames {
                let keep = rng.gen::<f64>() >= cfg.dropout;
                let a = (area * (1.0 + 0.1 * (wobble + 0.3 * t as f64).sin())).clamp(lo, hi);
                let w = (a.sqrt() * side).clamp(1.0, side);
                let x = (side - w) * cx;
                let y = (side - w) * cy;
                if keep {
                    faces.push((t, [x, y, w, w]));
                }
            }
            if faces.is_empty() {
                let w = (area.sqrt() * side).clamp(1.0, side);
                faces.push((0, [(side - w) * cx, (side - w) * cy, w, w]));
            }
            Draft { texture, base, faces }
        })
        .collect();
    // identity ids follow descending mean face area
    let mean_area = |d: &Draft| d.faces.iter().map(|(_, b)| b[2] * b[3]).sum::<f64>() / d.faces.len() as f64;
    drafts.sort_by(|a, b| mean_area(b).total_cmp(&mean_area(a)));

    let kind = match cfg.anomaly {
        AnomalyKind::Mixed => {
            if rng.gen::<bool>() {
                AnomalyKind::TexturePatch
            } else {
                AnomalyKind::TemporalJitter
            }
        }
        other => other,
    };
    let span = ((cfg.frames as f64 * cfg.anomaly_span).ceil() as usize).clamp(1, cfg.frames);
    let start = rng.gen_range(0..=cfg.frames - span);
    let anomaly = Anomaly {
        identity: rng.gen_range(0..k),
        kind,
        frames: start..start + span,
        jitter: (0..cfg.frames).map(|_| rng.gen_range(-PI..PI)).collect(),
        patch: [
            rng.gen_range(0..=cfg.crop_size / 2),
            rng.gen_range(0..=cfg.crop_size / 2),
        ],
        strength: cfg.strength,
    };

    let mut spec_faces = Vec::new();
    let mut tracks: Vec<IdentityTrack> = drafts
        .iter()
        .enumerate()
        .map(|(id, d)| IdentityTrack {
            identity_id: id as u32,
            faces: Vec::with_capacity(d.faces.len()),
        })
        .collect();
    // reference indices run over (frame, identity)
    let mut order: Vec<(usize, usize, [f64; 4])> = drafts
        .iter()
        .enumerate()
        .flat_map(|(id, d)| d.faces.iter().map(move |&(t, b)| (t, id, b)))
        .collect();
    order.sort_by_key(|&(t, id, _)| (t, id));
    for (t, id, bbox) in order {
        let embedding = drafts[id]
            .base
            .iter()
            .map(|&b| (b + 0.1 * normal(&mut rng) / (cfg.embedding_dim as f64).sqrt()) as f32)
            .collect();
        tracks[id].faces.push(FaceRecord {
            frame_index: t as u64,
            bbox,
            frame_size: [cfg.frame_side, cfg.frame_side],
            embedding,
            feature_ref: format!("{}#{}", crop_file(&video_id), spec_faces.len()),
        });
        spec_faces.push((id, t));
    }
    let record = VideoRecord {
        video_id,
        label: Some(if fake { Label::Fake } else { Label::Pristine }),
        manipulated_identity: fake.then_some(anomaly.identity as u32),
        category: Some(if fake { kind.name().to_string() } else { "pristine".to_string() }),
        tracks,
    };
    let spec = VideoSpec {
        seed,
        textures: drafts.into_iter().map(|d| d.texture).collect(),
        anomaly: fake.then_some(anomaly),
        faces: spec_faces,
    };
    (record, spec)
}

fn render(spec: &VideoSpec, face: usize, s: usize) -> Tensor<f32> {
    let (id, t) = spec.faces[face];
    let tex = &spec.textures[id];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (face as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let active = spec
        .anomaly
        .as_ref()
        .filter(|a| a.identity == id && a.frames.contains(&t));
    let mut phase = tex.phase + tex.drift * t as f64;
    let mut patch = 0.0;
    if let Some(a) = active {
        match a.kind {
            AnomalyKind::TemporalJitter => phase += a.strength * a.jitter[t],
            _ => patch = a.strength,
        }
    }
    let mut data = Vec::with_capacity(3 * s * s);
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let (u, v) = (x as f64 / s as f64, y as f64 / s as f64);
                let arg = 2.0 * PI * (tex.freq[0] * u + tex.freq[1] * v) + phase + c as f64 * tex.chroma;
                let mut val = tex.color[c] + tex.amp * arg.sin() + 0.05 * normal(&mut rng);
                if let Some(a) = active {
                    let (py, px) = (a.patch[0], a.patch[1]);
                    if (py..py + s / 2).contains(&y) && (px..px + s / 2).contains(&x) {
                        val += patch * 0.8 * if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                    }
                }
                data.push(val as f32);
            }
        }
    }
    Tensor::new(vec![3, s, s], data).expect("crop shape")
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset, SynthError> {
    cfg.validate()?;
    let n_fake = (cfg.num_videos as f64 * cfg.fake_fraction).round() as usize;
    let mut is_fake: Vec<bool> = (0..cfg.num_videos).map(|i| i < n_fake).collect();
    is_fake.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "labels", 0)));
    let (videos, specs): (Vec<_>, Vec<_>) = is_fake
        .par_iter()
        .enumerate()
        .map(|(i, &fake)| make_video(cfg, i, fake))
        .collect::<Vec<_>>()
        .into_iter()
        .unzip();
    let index = videos
        .iter()
        .enumerate()
        .map(|(i, v)| (crop_file(&v.video_id), i))
        .collect();
    Ok(SynthDataset {
        config: cfg.clone(),
        videos,
        specs,
        index,
    })
}

impl SynthDataset {
    /// All crops of a video, stacked `[faces, 3, S, S]` in reference order.
    pub fn video_crops(&self, video: usize) -> Tensor<f32> {
        let spec = &self.specs[video];
        let crops: Vec<Tensor<f32>> = (0..spec.faces.len())
            .map(|k| render(spec, k, self.config.crop_size))
            .collect();
        Tensor::stack(&crops).expect("crops share a shape")
    }

    /// Raw detections (clustering input): every face with its embedding, no identities.
    pub fn raw_videos(&self) -> Vec<RawVideo> {
        self.videos
            .iter()
            .map(|v| {
                let mut faces: Vec<FaceRecord> = v.tracks.iter().flat_map(|t| t.faces.iter().cloned()).collect();
                faces.sort_by_key(|f| f.frame_index);
                RawVideo {
                    video_id: v.video_id.clone(),
                    label: v.label,
                    category: v.category.clone(),
                    faces,
                }
            })
            .collect()
    }

    /// Writes `manifest.jsonl`, `raw.jsonl` and `crops/<video>.mntt` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        let crops = dir.join("crops");
        fs::create_dir_all(&crops).map_err(|e| SynthError::Io {
            path: crops.display().to_string(),
            source: e,
        })?;
        save_manifest(&dir.join("manifest.jsonl"), &self.videos)?;
        save_raw_manifest(&dir.join("raw.jsonl"), &self.raw_videos())?;
        (0..self.videos.len()).into_par_iter().try_for_each(|i| {
            let path = dir.join(crop_file(&self.videos[i].video_id));
            save_tensor(&path, &self.video_crops(i), Precision::F32)
        })?;
        Ok(())
    }
}

/// Renders crops on demand instead of reading files.
impl CropSource for SynthDataset {
    fn load(&self, feature_ref: &str) -> Result<Tensor<f32>, DataError> {
        let err = |reason: &str| DataError::Feature {
            reference: feature_ref.into(),
            reason: reason.into(),
        };
        let (file, k) = feature_ref.rsplit_once('#').ok_or_else(|| err("missing '#index'"))?;
        let video = *self.index.get(file).ok_or_else(|| err("unknown video"))?;
        let k: usize = k.parse().map_err(|_| err("bad index"))?;
        if k >= self.specs[video].faces.len() {
            return Err(err("index out of range"));
        }
        Ok(render(&self.specs[video], k, self.config.crop_size))
    }
}
