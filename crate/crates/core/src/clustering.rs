//! Groups raw face detections of one video into identity tracks.
//!
//! Faces are nodes of a graph with an edge wherever the embedding similarity
//! exceeds the threshold; connected components become identities. Within a
//! component at most one face per frame survives (the largest, then the
//! earliest detection), so every track is strictly increasing in time.
//! Components shorter than `min_cluster_size` are dropped and the rest are
//! numbered by mean face area, largest first.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trackdata::{FaceRecord, IdentityTrack, RawVideo, VideoRecord};

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("no faces to cluster")]
    NoFaces,
    #[error("min_cluster_size must be at least 1")]
    InvalidMinSize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Dot,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterConfig {
    pub threshold: f64,
    pub min_cluster_size: usize,
    pub similarity: SimilarityKind,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            threshold: 0.8,
            min_cluster_size: 3,
            similarity: SimilarityKind::Cosine,
        }
    }
}

pub fn similarity(a: &[f32], b: &[f32], kind: SimilarityKind) -> Result<f64, ClusterError> {
    if a.len() != b.len() {
        return Err(ClusterError::DimensionMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok(match kind {
        SimilarityKind::Dot => dot,
        SimilarityKind::Cosine => {
            let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                dot / (na * nb)
            }
        }
    })
}

struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            Ordering::Less => self.parent[ra] = rb,
            Ordering::Greater => self.parent[rb] = ra,
            Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Result of clustering one video.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub tracks: Vec<IdentityTrack>,
    /// Faces in components below `min_cluster_size`.
    pub pruned_faces: usize,
    /// Same-frame duplicates removed inside a component.
    pub merged_duplicates: usize,
}

impl Clustering {
    /// `true` when every component was pruned.
    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }
}

pub fn cluster_faces(faces: &[FaceRecord], cfg: &ClusterConfig) -> Result<Clustering, ClusterError> {
    if cfg.min_cluster_size == 0 {
        return Err(ClusterError::InvalidMinSize);
    }
    if faces.is_empty() {
        return Err(ClusterError::NoFaces);
    }
    let n = faces.len();
    let mut sets = DisjointSet::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if similarity(&faces[i].embedding, &faces[j].embedding, cfg.similarity)? > cfg.threshold {
                sets.union(i, j);
            }
        }
    }

    // Members in detection order, components keyed by their first detection.
    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut root_first: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let r = sets.find(i);
        let first = *root_first[r].get_or_insert(i);
        components.entry(first).or_default().push(i);
    }

    let mut merged_duplicates = 0;
    let mut pruned_faces = 0;
    let mut kept: Vec<(usize, Vec<usize>)> = Vec::new();
    for (first, members) in components {
        let mut by_frame: BTreeMap<u64, usize> = BTreeMap::new();
        for &m in &members {
            by_frame
                .entry(faces[m].frame_index)
                .and_modify(|cur| {
                    merged_duplicates += 1;
                    if faces[m].area() > faces[*cur].area() {
                        *cur = m;
                    }
                })
                .or_insert(m);
        }
        let ordered: Vec<usize> = by_frame.into_values().collect();
        if ordered.len() < cfg.min_cluster_size {
            pruned_faces += ordered.len();
            continue;
        }
        kept.push((first, ordered));
    }

    let mean_area = |m: &[usize]| m.iter().map(|&i| faces[i].area()).sum::<f64>() / m.len() as f64;
    kept.sort_by(|(fa, a), (fb, b)| {
        mean_area(b)
            .partial_cmp(&mean_area(a))
            .unwrap_or(Ordering::Equal)
            .then(faces[a[0]].frame_index.cmp(&faces[b[0]].frame_index))
            .then(fa.cmp(fb))
    });

    let tracks = kept
        .into_iter()
        .enumerate()
        .map(|(id, (_, members))| IdentityTrack {
            identity_id: id as u32,
            faces: members.into_iter().map(|i| faces[i].clone()).collect(),
        })
        .collect();
    Ok(Clustering {
        tracks,
        pruned_faces,
        merged_duplicates,
    })
}

/// Clusters a raw-detection video. Returns `None` when every cluster was
/// pruned; the video then has no usable identity.
pub fn cluster_video(raw: &RawVideo, cfg: &ClusterConfig) -> Result<Option<VideoRecord>, ClusterError> {
    let c = cluster_faces(&raw.faces, cfg)?;
    if c.is_empty() {
        log::warn!("video {}: all {} faces pruned by clustering", raw.video_id, raw.faces.len());
        return Ok(None);
    }
    Ok(Some(VideoRecord {
        video_id: raw.video_id.clone(),
        label: raw.label,
        manipulated_identity: None,
        category: raw.category.clone(),
        tracks: c.tracks,
    }))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn face(frame: u64, side: f64, emb: &[f32]) -> FaceRecord {
        FaceRecord {
            frame_index: frame,
            bbox: [0.0, 0.0, side, side],
            frame_size: [1000, 1000],
            embedding: emb.to_vec(),
            feature_ref: format!("{frame}"),
        }
    }

    fn cfg(threshold: f64, min: usize, similarity: SimilarityKind) -> ClusterConfig {
        ClusterConfig {
            threshold,
            min_cluster_size: min,
            similarity,
        }
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&[1., 0.], &[0., 1.], SimilarityKind::Dot).unwrap(), 0.0);
        let s = similarity(&[0.6, 0.8], &[0.6, 0.8], SimilarityKind::Dot).unwrap();
        assert!((s - 1.0).abs() < 1e-7);
        assert!(similarity(&[1.], &[1., 2.], SimilarityKind::Dot).is_err());
        let a = [0.3f32, -1.2, 2.5, 0.01];
        let b = [1.1f32, 0.4, -0.7, 3.0];
        let mut acc = 0.0f64;
        for i in 0..4 {
            acc += a[i] as f64 * b[i] as f64;
        }
        assert!((similarity(&a, &b, SimilarityKind::Dot).unwrap() - acc).abs() <= 1e-12);
    }

    #[test]
    fn single_face_is_identity_zero() {
        let c = cluster_faces(&[face(0, 10., &[1., 0.])], &cfg(0.5, 1, SimilarityKind::Dot)).unwrap();
        assert_eq!(c.tracks.len(), 1);
        assert_eq!(c.tracks[0].identity_id, 0);
    }

    #[test]
    fn larger_group_gets_id_zero() {
        let faces = vec![
            face(0, 10., &[1., 0.]),
            face(0, 40., &[0., 1.]),
            face(1, 10., &[1., 0.]),
            face(1, 40., &[0., 1.]),
        ];
        let c = cluster_faces(&faces, &cfg(0.5, 1, SimilarityKind::Dot)).unwrap();
        assert_eq!(c.tracks.len(), 2);
        assert_eq!(c.tracks[0].faces[0].bbox[2], 40.0);
        assert_eq!(c.tracks[1].faces[0].bbox[2], 10.0);
    }

    #[test]
    fn transitive_chain_forms_one_track() {
        // a.b and b.c exceed 0.5, a.c does not
        let a = [1.0f32, 0.0];
        let b = [0.8f32, 0.6];
        let c = [0.28f32, 0.96];
        assert!(similarity(&a, &c, SimilarityKind::Dot).unwrap() < 0.5);
        let faces = vec![face(0, 10., &a), face(1, 10., &b), face(2, 10., &c)];
        let out = cluster_faces(&faces, &cfg(0.5, 1, SimilarityKind::Dot)).unwrap();
        assert_eq!(out.tracks.len(), 1);
        assert_eq!(out.tracks[0].faces.len(), 3);
    }

    #[test]
    fn pruning_and_empty_status() {
        let faces = vec![face(0, 10., &[1., 0.]), face(1, 10., &[0., 1.])];
        let out = cluster_faces(&faces, &cfg(0.5, 2, SimilarityKind::Dot)).unwrap();
        assert!(out.is_empty());
        assert_eq!(out.pruned_faces, 2);
        assert_eq!(cluster_faces(&[], &ClusterConfig::default()), Err(ClusterError::NoFaces));
    }

    #[test]
    fn same_frame_duplicates_collapse_to_largest() {
        let faces = vec![face(3, 10., &[1., 0.]), face(3, 20., &[1., 0.]), face(4, 10., &[1., 0.])];
        let out = cluster_faces(&faces, &cfg(0.5, 1, SimilarityKind::Dot)).unwrap();
        assert_eq!(out.tracks[0].faces.len(), 2);
        assert_eq!(out.tracks[0].faces[0].bbox[2], 20.0);
        assert_eq!(out.merged_duplicates, 1);
        assert!(out.tracks[0].check().is_ok());
    }

    /// Independent O(n^2) route: adjacency matrix + depth-first search, then
    /// the collapse / prune / ordering rules applied step by step.
    fn oracle(faces: &[FaceRecord], cfg: &ClusterConfig) -> Vec<Vec<usize>> {
        let n = faces.len();
        let adj: Vec<Vec<bool>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| i != j && similarity(&faces[i].embedding, &faces[j].embedding, cfg.similarity).unwrap() > cfg.threshold)
                    .collect()
            })
            .collect();
        let mut seen = vec![false; n];
        let mut comps: Vec<Vec<usize>> = Vec::new();
        for s in 0..n {
            if seen[s] {
                continue;
            }
            let mut stack = vec![s];
            let mut comp = Vec::new();
            seen[s] = true;
            while let Some(u) = stack.pop() {
                comp.push(u);
                for v in 0..n {
                    if adj[u][v] && !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            comp.sort();
            comps.push(comp);
        }
        let mut tracks: Vec<(usize, Vec<usize>)> = Vec::new();
        for comp in comps {
            let mut frames: Vec<u64> = comp.iter().map(|&i| faces[i].frame_index).collect();
            frames.sort();
            frames.dedup();
            let members: Vec<usize> = frames
                .iter()
                .map(|&f| {
                    let mut best: Option<usize> = None;
                    for &i in &comp {
                        if faces[i].frame_index == f && best.is_none_or(|b| faces[i].area() > faces[b].area()) {
                            best = Some(i);
                        }
                    }
                    best.unwrap()
                })
                .collect();
            if members.len() >= cfg.min_cluster_size {
                tracks.push((comp[0], members));
            }
        }
        // selection sort by (mean area desc, first frame asc, first detection asc)
        let key = |t: &(usize, Vec<usize>)| {
            let mean = t.1.iter().map(|&i| faces[i].area()).sum::<f64>() / t.1.len() as f64;
            (mean, faces[t.1[0]].frame_index, t.0)
        };
        let mut ordered = Vec::new();
        while !tracks.is_empty() {
            let mut best = 0;
            for i in 1..tracks.len() {
                let (a, b) = (key(&tracks[i]), key(&tracks[best]));
                if a.0 > b.0 || (a.0 == b.0 && (a.1 < b.1 || (a.1 == b.1 && a.2 < b.2))) {
                    best = i;
                }
            }
            ordered.push(tracks.remove(best).1);
        }
        ordered
    }

    fn instance() -> impl Strategy<Value = (Vec<FaceRecord>, f64, usize)> {
        let face_strategy = (0u64..12, 1u32..6, 0usize..4, prop::collection::vec(-0.2f32..0.2, 3));
        (prop::collection::vec(face_strategy, 1..50), 0.3f64..0.95, 1usize..4).prop_map(|(raw, th, min)| {
            let centers = [[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.6, 0.6, 0.0]];
            let faces = raw
                .into_iter()
                .map(|(frame, size, c, noise)| {
                    let emb: Vec<f32> = (0..3).map(|k| centers[c][k] + noise[k]).collect();
                    face(frame, size as f64 * 10.0, &emb)
                })
                .collect();
            (faces, th, min)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn matches_components_oracle((faces, th, min) in instance()) {
            let c = cfg(th, min, SimilarityKind::Cosine);
            let got = cluster_faces(&faces, &c).unwrap();
            let want = oracle(&faces, &c);
            prop_assert_eq!(got.tracks.len(), want.len());
            let mut used = std::collections::HashSet::new();
            for (t, w) in got.tracks.iter().zip(&want) {
                let expect: Vec<&FaceRecord> = w.iter().map(|&i| &faces[i]).collect();
                let actual: Vec<&FaceRecord> = t.faces.iter().collect();
                prop_assert_eq!(actual, expect);
                for &i in w { prop_assert!(used.insert(i)); }
            }
            for pair in got.tracks.windows(2) {
                prop_assert!(pair[0].mean_face_area() >= pair[1].mean_face_area());
            }
        }
    }
}
