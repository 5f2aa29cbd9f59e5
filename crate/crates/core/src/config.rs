//! Flat `key=value` run configuration covering every pipeline stage.

use std::path::Path;

use crate::assembler::{AssemblyConfig, SortPolicy};
use crate::clustering::{ClusterConfig, SimilarityKind};
use crate::model::{ModelConfig, TrainConfig};
use crate::synth::SynthConfig;

pub const SEED_ENV: &str = "MINTIME_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub cluster: ClusterConfig,
    /// Assembly for training.
    pub assemble: AssemblyConfig,
    /// Identity cap at inference; `None` keeps all.
    pub infer_max_identities: Option<usize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            synth: SynthConfig::default(),
            cluster: ClusterConfig::default(),
            assemble: AssemblyConfig::default(),
            infer_max_identities: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            threshold: 0.5,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse `{v}`"))
}

fn parse_limit(key: &str, v: &str) -> Result<Option<usize>, String> {
    if v == "all" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn show_limit(v: Option<usize>) -> String {
    v.map_or_else(|| "all".into(), |n| n.to_string())
}

fn similarity_name(k: SimilarityKind) -> &'static str {
    match k {
        SimilarityKind::Dot => "dot",
        SimilarityKind::Cosine => "cosine",
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let s = &mut self.synth;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "synth.num_videos" => s.num_videos = parse(key, v)?,
            "synth.fake_fraction" => s.fake_fraction = parse(key, v)?,
            "synth.frames" => s.frames = parse(key, v)?,
            "synth.identities" => s.identities = parse(key, v)?,
            "synth.size_min" => s.size_range.0 = parse(key, v)?,
            "synth.size_max" => s.size_range.1 = parse(key, v)?,
            "synth.crop_size" => s.crop_size = parse(key, v)?,
            "synth.frame_side" => s.frame_side = parse(key, v)?,
            "synth.embedding_dim" => s.embedding_dim = parse(key, v)?,
            "synth.anomaly" => s.anomaly = v.parse()?,
            "synth.strength" => s.strength = parse(key, v)?,
            "synth.anomaly_span" => s.anomaly_span = parse(key, v)?,
            "synth.dropout" => s.dropout = parse(key, v)?,
            "cluster.threshold" => self.cluster.threshold = parse(key, v)?,
            "cluster.min_cluster_size" => self.cluster.min_cluster_size = parse(key, v)?,
            "cluster.similarity" => {
                self.cluster.similarity = match v {
                    "dot" => SimilarityKind::Dot,
                    "cosine" => SimilarityKind::Cosine,
                    _ => return Err(format!("{key}: expected dot or cosine, got `{v}`")),
                }
            }
            "assemble.sequence_length" => self.assemble.sequence_length = parse(key, v)?,
            "assemble.max_identities" => self.assemble.max_identities = parse_limit(key, v)?,
            "assemble.sorting" => self.assemble.sorting = v.parse::<SortPolicy>()?,
            "infer.max_identities" => self.infer_max_identities = parse_limit(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.lr_min" => self.train.lr_min = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.momentum" => self.train.momentum = parse(key, v)?,
            "eval.threshold" => self.threshold = parse(key, v)?,
            _ => {
                let known = key
                    .strip_prefix("model.")
                    .map(|k| self.model.set(k, v))
                    .transpose()?
                    .unwrap_or(false);
                if !known {
                    return Err(format!("unknown config key `{key}`"));
                }
            }
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let s = &self.synth;
        let mut out: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("synth.num_videos".into(), s.num_videos.to_string()),
            ("synth.fake_fraction".into(), s.fake_fraction.to_string()),
            ("synth.frames".into(), s.frames.to_string()),
            ("synth.identities".into(), s.identities.to_string()),
            ("synth.size_min".into(), s.size_range.0.to_string()),
            ("synth.size_max".into(), s.size_range.1.to_string()),
            ("synth.crop_size".into(), s.crop_size.to_string()),
            ("synth.frame_side".into(), s.frame_side.to_string()),
            ("synth.embedding_dim".into(), s.embedding_dim.to_string()),
            ("synth.anomaly".into(), s.anomaly.name().into()),
            ("synth.strength".into(), s.strength.to_string()),
            ("synth.anomaly_span".into(), s.anomaly_span.to_string()),
            ("synth.dropout".into(), s.dropout.to_string()),
            ("cluster.threshold".into(), self.cluster.threshold.to_string()),
            ("cluster.min_cluster_size".into(), self.cluster.min_cluster_size.to_string()),
            ("cluster.similarity".into(), similarity_name(self.cluster.similarity).into()),
            ("assemble.sequence_length".into(), self.assemble.sequence_length.to_string()),
            ("assemble.max_identities".into(), show_limit(self.assemble.max_identities)),
            ("assemble.sorting".into(), self.assemble.sorting.to_string()),
            ("infer.max_identities".into(), show_limit(self.infer_max_identities)),
        ];
        out.extend(self.model.pairs().into_iter().map(|(k, v)| (format!("model.{k}"), v)));
        out.extend([
            ("train.epochs".into(), self.train.epochs.to_string()),
            ("train.batch_size".into(), self.train.batch_size.to_string()),
            ("train.lr".into(), self.train.lr.to_string()),
            ("train.lr_min".into(), self.train.lr_min.to_string()),
            ("train.weight_decay".into(), self.train.weight_decay.to_string()),
            ("train.momentum".into(), self.train.momentum.to_string()),
            ("eval.threshold".into(), self.threshold.to_string()),
        ]);
        out
    }

    pub fn dump(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
            self.set(k.trim(), v.trim()).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        self.apply_text(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Propagates the run seed into the per-stage configs.
    pub fn sync_seeds(&mut self) {
        self.synth.seed = self.seed;
        self.assemble.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn inference_assembly(&self) -> AssemblyConfig {
        AssemblyConfig {
            max_identities: self.infer_max_identities,
            ..self.assemble.clone()
        }
    }
}
