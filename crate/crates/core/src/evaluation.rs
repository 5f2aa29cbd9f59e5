//! Detection metrics and attention-based localization.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembler::{assemble, AssemblyConfig, AssemblyError};
use crate::model::{MintimeModel, ModelError, ModelInput};
use crate::numerics::Scalar;
use crate::trackdata::{CropSource, Label, VideoRecord};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no scores to evaluate")]
    Empty,
    #[error("scores and labels differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("AUC needs both classes, got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("false positive rate needs at least one negative")]
    NoNegatives,
    #[error("video {0} has no valid slots to localize")]
    NoSlots(String),
    #[error("non-finite score for video {0}")]
    NonFinite(String),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check(scores: &[f64], labels: &[bool]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// A score at or above the threshold is a fake prediction; `labels` are `true` for fakes.
pub fn accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64, EvalError> {
    check(scores, labels)?;
    let hits = scores.iter().zip(labels).filter(|(&s, &y)| (s >= threshold) == y).count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from tie groups in sorted order with an
/// integer numerator, so the result is exact.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass { positives: pos, negatives: neg });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the number of (positive, negative) wins, ties adding one
    let mut doubled: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        let group_neg = (j - i) as u128 - group_pos;
        doubled += group_pos * (2 * neg_below + group_neg);
        neg_below += group_neg;
        i = j;
    }
    Ok(doubled as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// FP / (TN + FP).
pub fn fpr(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64, EvalError> {
    check(scores, labels)?;
    let (mut fp, mut tn) = (0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        if !y {
            if s >= threshold {
                fp += 1;
            } else {
                tn += 1;
            }
        }
    }
    if fp + tn == 0 {
        return Err(EvalError::NoNegatives);
    }
    Ok(fp as f64 / (fp + tn) as f64)
}

/// Maximum accuracy variation: range of the per-class accuracies.
pub fn mav(per_class: &[f64]) -> Result<f64, EvalError> {
    if per_class.is_empty() {
        return Err(EvalError::Empty);
    }
    let max = per_class.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = per_class.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredVideo {
    pub video_id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    pub class: String,
    pub slot_attention: Vec<f64>,
    pub slot_identity: Vec<Option<u32>>,
    pub slot_frame: Vec<Option<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub video_id: String,
    pub suspect_identity: u32,
    pub suspect_frames: Vec<u64>,
    /// Mean slot attention per identity.
    pub identity_attention: BTreeMap<u32, f64>,
}

/// The identity with the highest mean slot attention (lowest id on ties),
/// and the frames of slots whose attention exceeds mean + one standard
/// deviation over all valid slots.
pub fn localize(v: &ScoredVideo) -> Result<Localization, EvalError> {
    let valid: Vec<(u32, Option<u64>, f64)> = v
        .slot_identity
        .iter()
        .zip(&v.slot_frame)
        .zip(&v.slot_attention)
        .filter_map(|((id, fr), &a)| id.map(|id| (id, *fr, a)))
        .collect();
    if valid.is_empty() {
        return Err(EvalError::NoSlots(v.video_id.clone()));
    }
    let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for &(id, _, a) in &valid {
        let e = sums.entry(id).or_insert((0.0, 0));
        e.0 += a;
        e.1 += 1;
    }
    let identity_attention: BTreeMap<u32, f64> = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    let mut suspect_identity = 0;
    let mut best = f64::NEG_INFINITY;
    for (&id, &m) in &identity_attention {
        if m > best {
            best = m;
            suspect_identity = id;
        }
    }
    let n = valid.len() as f64;
    let mean = valid.iter().map(|x| x.2).sum::<f64>() / n;
    let sd = (valid.iter().map(|x| (x.2 - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut suspect_frames: Vec<u64> = valid.iter().filter(|x| x.2 > mean + sd).filter_map(|x| x.1).collect();
    suspect_frames.sort_unstable();
    suspect_frames.dedup();
    Ok(Localization {
        video_id: v.video_id.clone(),
        suspect_identity,
        suspect_frames,
        identity_attention,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    /// `None` without negatives.
    pub fpr: Option<f64>,
    pub mav: f64,
    pub per_class: BTreeMap<String, f64>,
    pub count: usize,
}

/// Metrics over labelled scored videos; unlabelled ones are skipped.
pub fn evaluate(scored: &[ScoredVideo], threshold: f64) -> Result<EvalReport, EvalError> {
    let labelled: Vec<&ScoredVideo> = scored.iter().filter(|v| v.label.is_some()).collect();
    let scores: Vec<f64> = labelled.iter().map(|v| v.score).collect();
    let labels: Vec<bool> = labelled.iter().map(|v| v.label.is_some_and(Label::is_fake)).collect();
    let accuracy = accuracy(&scores, &labels, threshold)?;
    let auc = match auc(&scores, &labels) {
        Ok(a) => Some(a),
        Err(EvalError::SingleClass { .. }) => None,
        Err(e) => return Err(e),
    };
    let fpr = fpr(&scores, &labels, threshold).ok();
    let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (v, (&s, &y)) in labelled.iter().zip(scores.iter().zip(&labels)) {
        let e = groups.entry(v.class.clone()).or_default();
        e.0 += usize::from((s >= threshold) == y);
        e.1 += 1;
    }
    let per_class: BTreeMap<String, f64> = groups.into_iter().map(|(k, (h, n))| (k, h as f64 / n as f64)).collect();
    let mav = mav(&per_class.values().copied().collect::<Vec<_>>())?;
    Ok(EvalReport {
        accuracy,
        auc,
        fpr,
        mav,
        per_class,
        count: labelled.len(),
    })
}

/// Fraction of correctly flagged fakes whose suspect identity is the
/// manipulated one. `None` if there are no such videos.
pub fn localization_accuracy(scored: &[ScoredVideo], videos: &[VideoRecord], threshold: f64) -> Option<f64> {
    let truth: BTreeMap<&str, u32> = videos
        .iter()
        .filter_map(|v| v.manipulated_identity.map(|m| (v.video_id.as_str(), m)))
        .collect();
    let (mut hit, mut total) = (0usize, 0usize);
    for v in scored {
        if v.score < threshold || !v.label.is_some_and(Label::is_fake) {
            continue;
        }
        let (Some(&m), Ok(loc)) = (truth.get(v.video_id.as_str()), localize(v)) else { continue };
        total += 1;
        hit += usize::from(loc.suspect_identity == m);
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Scores videos with the canonical (epoch 0) assembly; runs in parallel,
/// output in input order.
pub fn score_videos<F: Scalar>(
    model: &MintimeModel<F>,
    videos: &[VideoRecord],
    asm: &AssemblyConfig,
    source: &dyn CropSource,
) -> Result<Vec<ScoredVideo>, EvalError> {
    videos
        .par_iter()
        .map(|v| {
            let seq = assemble(v, asm, 0)?;
            let input = ModelInput::from_sequence(&seq, source, &model.config)?;
            let out = model.forward(&input)?;
            let score = out.probability().to_real();
            if !score.is_finite() {
                return Err(EvalError::NonFinite(v.video_id.clone()));
            }
            Ok(ScoredVideo {
                video_id: v.video_id.clone(),
                score,
                label: v.label,
                class: v.class_name(),
                slot_attention: out.attention.slot_attention,
                slot_identity: out.attention.slot_identity,
                slot_frame: seq.slots.iter().map(|s| s.as_ref().map(|f| f.frame_index)).collect(),
            })
        })
        .collect()
}

/// Bar chart of per-slot attention with a separator wherever the identity changes.
pub fn attention_svg(v: &ScoredVideo) -> String {
    let (w, h, margin) = (640.0, 240.0, 30.0);
    let n = v.slot_attention.len().max(1);
    let max = v.slot_attention.iter().copied().fold(0.0, f64::max).max(1e-12);
    let bar = (w - 2.0 * margin) / n as f64;
    let plot_h = h - 2.0 * margin;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{margin}" y="18" font-family="sans-serif" font-size="12">{} score {:.4}</text>"#,
        v.video_id, v.score
    );
    let palette = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3"];
    for (i, (&a, id)) in v.slot_attention.iter().zip(&v.slot_identity).enumerate() {
        let bh = a / max * plot_h;
        let x = margin + i as f64 * bar;
        let color = id.map_or("#cccccc", |id| palette[id as usize % palette.len()]);
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
            x + 1.0,
            h - margin - bh,
            (bar - 2.0).max(0.5),
            bh
        );
        if i > 0 && v.slot_identity[i - 1] != *id {
            let _ = writeln!(
                s,
                r##"<line x1="{x:.2}" y1="{margin}" x2="{x:.2}" y2="{:.2}" stroke="#000" stroke-dasharray="4 3"/>"##,
                h - margin
            );
        }
    }
    let _ = writeln!(
        s,
        r##"<line x1="{margin}" y1="{0:.2}" x2="{1:.2}" y2="{0:.2}" stroke="#000"/>"##,
        h - margin,
        w - margin
    );
    s.push_str("</svg>\n");
    s
}
