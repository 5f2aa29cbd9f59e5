//! The detector: convolutional stub backbone, identity-aware divided
//! space-time transformer with a global CLS token, and an MLP head.

mod checkpoint;
mod masks;
mod train;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::assembler::InputSequence;
use crate::embeddings::{embed_tokens, EmbeddingError, SlotKey, SIZE_BINS, TABLE_INIT_STD};
use crate::numerics::{sigmoid, AttentionPattern, Graph, NumericsError, Scalar, Tensor, Var};
use crate::trackdata::{CropSource, DataError};

pub use checkpoint::{load_checkpoint, read_config_file, save_checkpoint, CONFIG_FILE};
pub use masks::{identity_masks, spatial_pattern, temporal_pattern, IdentityMask, SpatialScope};
pub use train::{cosine_lr, fit, fit_sequences, EpochLog, Sgd, TrainConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input does not match the model: {0}")]
    Input(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Three stride-2 3x3 convolutions over RGB crops.
    Stub,
    /// Precomputed `[D, H', W']` feature maps supplied as input.
    External,
}

impl std::str::FromStr for BackboneKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stub" => Ok(BackboneKind::Stub),
            "external" => Ok(BackboneKind::External),
            other => Err(format!("unknown backbone `{other}`")),
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackboneKind::Stub => "stub",
            BackboneKind::External => "external",
        })
    }
}

const STUB_CHANNELS: [usize; 3] = [3, 8, 16];

fn conv_out(side: usize) -> usize {
    // 3x3 kernel, stride 2, padding 1
    (side - 1) / 2 + 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub crop_size: usize,
    pub feature_side: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_frames: usize,
    pub spatial_scope: SpatialScope,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::Stub,
            crop_size: 32,
            feature_side: 4,
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            max_frames: 256,
            spatial_scope: SpatialScope::Face,
        }
    }
}

impl ModelConfig {
    /// Tokens per face.
    pub fn tokens_per_face(&self) -> usize {
        self.feature_side * self.feature_side
    }

    /// Expected shape of one slot's input tensor.
    pub fn input_shape(&self) -> [usize; 3] {
        match self.backbone {
            BackboneKind::Stub => [3, self.crop_size, self.crop_size],
            BackboneKind::External => [self.dim, self.feature_side, self.feature_side],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.dim == 0 || self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 || self.max_frames == 0 {
            return bad("dim, depth, heads, mlp_ratio and max_frames must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.feature_side == 0 {
            return bad("feature_side must be positive".into());
        }
        if self.backbone == BackboneKind::Stub {
            if self.crop_size == 0 {
                return bad("crop_size must be positive".into());
            }
            let side = conv_out(conv_out(conv_out(self.crop_size)));
            if side != self.feature_side {
                return bad(format!(
                    "stub backbone maps {0}x{0} crops to {1}x{1}, config says {2}x{2}",
                    self.crop_size, side, self.feature_side
                ));
            }
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("backbone", self.backbone.to_string()),
            ("crop_size", self.crop_size.to_string()),
            ("feature_side", self.feature_side.to_string()),
            ("dim", self.dim.to_string()),
            ("depth", self.depth.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("max_frames", self.max_frames.to_string()),
            ("spatial_scope", self.spatial_scope.to_string()),
        ]
    }

    /// Sets one field by key. `Ok(false)` means the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        fn num(key: &str, v: &str) -> Result<usize, String> {
            v.parse().map_err(|_| format!("{key}: `{v}` is not a non-negative integer"))
        }
        match key {
            "backbone" => self.backbone = value.parse()?,
            "crop_size" => self.crop_size = num(key, value)?,
            "feature_side" => self.feature_side = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "mlp_ratio" => self.mlp_ratio = num(key, value)?,
            "max_frames" => self.max_frames = num(key, value)?,
            "spatial_scope" => self.spatial_scope = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// One assembled sequence in tensor form.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput<F> {
    /// `[N, C, H, W]`; padding slots may hold anything.
    pub crops: Tensor<F>,
    pub slots: Vec<SlotKey>,
    pub identities: Vec<Option<u32>>,
}

impl<F: Scalar> ModelInput<F> {
    pub fn from_sequence(
        seq: &InputSequence,
        source: &dyn CropSource,
        cfg: &ModelConfig,
    ) -> Result<Self, ModelError> {
        let shape = cfg.input_shape();
        let per = shape.iter().product::<usize>();
        let mut data = Vec::with_capacity(seq.slots.len() * per);
        for slot in &seq.slots {
            match slot {
                None => data.resize(data.len() + per, F::zero()),
                Some(face) => {
                    let crop = source.load(&face.feature_ref)?;
                    if crop.shape() != shape {
                        return Err(ModelError::Input(format!(
                            "{} has shape {:?}, expected {:?}",
                            face.feature_ref,
                            crop.shape(),
                            shape
                        )));
                    }
                    data.extend(crop.data().iter().map(|&x| F::from_real(x as f64)));
                }
            }
        }
        let crops = Tensor::new(vec![seq.slots.len(), shape[0], shape[1], shape[2]], data)?;
        Ok(ModelInput {
            crops,
            slots: seq.slot_keys(),
            identities: seq.slots.iter().map(|s| s.as_ref().map(|f| f.identity_id)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Last-block CLS attention, summed over each slot's tokens and averaged
/// over heads. `slot_attention` comes from the spatial step, the last
/// attention CLS takes part in; it is what localization reads.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionReport {
    pub slot_attention: Vec<f64>,
    /// Same row from the temporal (identity-aware) step.
    pub temporal_slot_attention: Vec<f64>,
    pub slot_identity: Vec<Option<u32>>,
    /// Weight CLS keeps on itself in the spatial step.
    pub cls_self: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<F> {
    pub logit: F,
    pub attention: AttentionReport,
}

impl<F: Scalar> ForwardOutput<F> {
    pub fn probability(&self) -> F {
        sigmoid(self.logit)
    }
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

fn linear_specs(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, fan_in: usize, fan_out: usize, std: f64) {
    out.push((format!("{name}.w"), vec![fan_in, fan_out], Init::Normal(std)));
    out.push((format!("{name}.b"), vec![fan_out], Init::Zeros));
}

fn norm_specs(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, dim: usize) {
    out.push((format!("{name}.g"), vec![dim], Init::Ones));
    out.push((format!("{name}.b"), vec![dim], Init::Zeros));
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.dim;
    let mut s = Vec::new();
    if cfg.backbone == BackboneKind::Stub {
        let chans = [STUB_CHANNELS[0], STUB_CHANNELS[1], STUB_CHANNELS[2], d];
        for i in 0..3 {
            let (c, o) = (chans[i], chans[i + 1]);
            s.push((format!("backbone.conv{i}.w"), vec![o, c, 3, 3], Init::Normal((2.0 / (c * 9) as f64).sqrt())));
            s.push((format!("backbone.conv{i}.b"), vec![o], Init::Zeros));
        }
    }
    s.push(("cls".into(), vec![1, d], Init::Normal(TABLE_INIT_STD)));
    s.push((
        "embed.temporal".into(),
        vec![cfg.max_frames * cfg.tokens_per_face() + 1, d],
        Init::Normal(TABLE_INIT_STD),
    ));
    s.push(("embed.size".into(), vec![SIZE_BINS, d], Init::Normal(TABLE_INIT_STD)));
    let std = (1.0 / d as f64).sqrt();
    let hidden = d * cfg.mlp_ratio;
    for l in 0..cfg.depth {
        for kind in ["temporal", "spatial"] {
            norm_specs(&mut s, &format!("blocks.{l}.{kind}.norm"), d);
            for proj in ["q", "k", "v", "o"] {
                linear_specs(&mut s, &format!("blocks.{l}.{kind}.{proj}"), d, d, std);
            }
        }
        norm_specs(&mut s, &format!("blocks.{l}.mlp.norm"), d);
        linear_specs(&mut s, &format!("blocks.{l}.mlp.fc1"), d, hidden, std);
        linear_specs(&mut s, &format!("blocks.{l}.mlp.fc2"), hidden, d, (1.0 / hidden as f64).sqrt());
    }
    norm_specs(&mut s, "head.norm", d);
    linear_specs(&mut s, "head.fc1", d, d, std);
    linear_specs(&mut s, "head.fc2", d, 1, TABLE_INIT_STD);
    s
}

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct MintimeModel<F> {
    pub config: ModelConfig,
    params: BTreeMap<String, Tensor<F>>,
}

/// Leaf variables of one recorded forward pass, in parameter-name order.
struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} is registered"))
    }
}

struct Recorded {
    logit: Var,
    last_temporal: Var,
    last_spatial: Var,
    params: Bound,
}

impl<F: Scalar> MintimeModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_specs(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Normal(std) => Tensor::randn(&shape, std, &mut rng),
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::full(&shape, F::one()),
                };
                (name, t)
            })
            .collect();
        Ok(MintimeModel { config, params })
    }

    /// Builds a model from named tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, mut params: BTreeMap<String, Tensor<F>>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = param_specs(&config);
        let mut out = BTreeMap::new();
        for (name, shape, _) in specs {
            let t = params
                .remove(&name)
                .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            out.insert(name, t);
        }
        if let Some(extra) = params.keys().next() {
            return Err(ModelError::Config(format!("unexpected parameter {extra}")));
        }
        Ok(MintimeModel { config, params: out })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.params
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.params.get_mut(name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    fn bind<'a>(&'a self, g: &mut Graph<'a, F>) -> Bound {
        Bound {
            vars: self.params.iter().map(|(n, t)| (n.clone(), g.param(t))).collect(),
        }
    }

    fn linear(&self, g: &mut Graph<'_, F>, p: &Bound, name: &str, x: Var) -> Result<Var, NumericsError> {
        let y = g.matmul(x, p.get(&format!("{name}.w")))?;
        g.add_bias(y, p.get(&format!("{name}.b")))
    }

    fn norm(&self, g: &mut Graph<'_, F>, p: &Bound, name: &str, x: Var) -> Result<Var, NumericsError> {
        g.layer_norm(x, p.get(&format!("{name}.g")), p.get(&format!("{name}.b")), F::from_real(LN_EPS))
    }

    /// Pre-norm attention sub-layer without the residual.
    fn attend(
        &self,
        g: &mut Graph<'_, F>,
        p: &Bound,
        name: &str,
        x: Var,
        pattern: &Arc<AttentionPattern>,
    ) -> Result<(Var, Var), NumericsError> {
        let h = self.norm(g, p, &format!("{name}.norm"), x)?;
        let q = self.linear(g, p, &format!("{name}.q"), h)?;
        let k = self.linear(g, p, &format!("{name}.k"), h)?;
        let v = self.linear(g, p, &format!("{name}.v"), h)?;
        let a = g.attention(q, k, v, self.config.heads, pattern.clone())?;
        Ok((self.linear(g, p, &format!("{name}.o"), a)?, a))
    }

    /// `[N, C, H, W]` slot inputs to `[N * T, D]` tokens, raster order per face.
    fn backbone(&self, g: &mut Graph<'_, F>, p: &Bound, x: Var) -> Result<Var, NumericsError> {
        match self.config.backbone {
            BackboneKind::External => g.channels_last(x),
            BackboneKind::Stub => {
                let mut h = x;
                for i in 0..3 {
                    h = g.conv2d(h, p.get(&format!("backbone.conv{i}.w")), p.get(&format!("backbone.conv{i}.b")), 2, 1)?;
                    if i < 2 {
                        h = g.gelu(h);
                    }
                }
                g.channels_last(h)
            }
        }
    }

    /// Backbone output `[D, H', W']` of a single `[3, H, W]` crop.
    pub fn backbone_forward(&self, crop: &Tensor<F>) -> Result<Tensor<F>, ModelError> {
        let shape = self.config.input_shape();
        if crop.shape() != shape {
            return Err(ModelError::Input(format!("crop shape {:?}, expected {:?}", crop.shape(), shape)));
        }
        let batched = crop.clone().reshape(&[1, shape[0], shape[1], shape[2]])?;
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let x = g.constant(batched);
        let tokens = self.backbone(&mut g, &p, x)?;
        // tokens are [T, D]; transpose back to channel-major
        let (t, d) = (self.config.tokens_per_face(), self.config.dim);
        let v = g.value(tokens).data();
        let mut out = vec![F::zero(); t * d];
        for i in 0..t {
            for c in 0..d {
                out[c * t + i] = v[i * d + c];
            }
        }
        Ok(Tensor::new(vec![d, self.config.feature_side, self.config.feature_side], out)?)
    }

    fn check_input(&self, input: &ModelInput<F>) -> Result<(), ModelError> {
        let n = input.slots.len();
        let s = self.config.input_shape();
        if n == 0 {
            return Err(ModelError::Input("empty sequence".into()));
        }
        if input.crops.shape() != [n, s[0], s[1], s[2]] {
            return Err(ModelError::Input(format!(
                "crops have shape {:?}, expected [{n}, {}, {}, {}]",
                input.crops.shape(),
                s[0],
                s[1],
                s[2]
            )));
        }
        if input.identities.len() != n || input.slots.iter().zip(&input.identities).any(|(a, b)| a.is_some() != b.is_some()) {
            return Err(ModelError::Input("slot keys and identities disagree on padding".into()));
        }
        if input.slots.iter().all(Option::is_none) {
            return Err(ModelError::Input("sequence has no valid slot".into()));
        }
        Ok(())
    }

    fn record<'a>(&'a self, g: &mut Graph<'a, F>, input: &'a ModelInput<F>) -> Result<Recorded, ModelError> {
        self.check_input(input)?;
        let cfg = &self.config;
        let t = cfg.tokens_per_face();
        let p = self.bind(g);
        let x = g.constant_ref(&input.crops);
        let tokens = self.backbone(g, &p, x)?;
        let (te, se) = (p.get("embed.temporal"), p.get("embed.size"));
        let z = embed_tokens(g, tokens, te, se, &input.slots, t)?;
        let cls_pos = g.embedding(te, &[0])?;
        let cls = g.add(p.get("cls"), cls_pos)?;
        let mut x = g.concat_rows(&[cls, z])?;

        let frames: Vec<Option<u64>> = input.slots.iter().map(|s| s.map(|(f, _)| f)).collect();
        let temporal = Arc::new(temporal_pattern(&input.identities, t));
        let spatial = Arc::new(spatial_pattern(&input.identities, &frames, t, cfg.spatial_scope));
        let (mut last_temporal, mut last_spatial) = (None, None);
        for l in 0..cfg.depth {
            let (o, a) = self.attend(g, &p, &format!("blocks.{l}.temporal"), x, &temporal)?;
            last_temporal = Some(a);
            x = g.add(x, o)?;
            let (o, a) = self.attend(g, &p, &format!("blocks.{l}.spatial"), x, &spatial)?;
            last_spatial = Some(a);
            x = g.add(x, o)?;
            let h = self.norm(g, &p, &format!("blocks.{l}.mlp.norm"), x)?;
            let h = self.linear(g, &p, &format!("blocks.{l}.mlp.fc1"), h)?;
            let h = g.gelu(h);
            let h = self.linear(g, &p, &format!("blocks.{l}.mlp.fc2"), h)?;
            x = g.add(x, h)?;
        }
        let c = g.select_rows(x, &[0])?;
        let c = self.norm(g, &p, "head.norm", c)?;
        let c = self.linear(g, &p, "head.fc1", c)?;
        let c = g.gelu(c);
        let logit = self.linear(g, &p, "head.fc2", c)?;
        Ok(Recorded {
            logit,
            last_temporal: last_temporal.expect("depth is positive"),
            last_spatial: last_spatial.expect("depth is positive"),
            params: p,
        })
    }

    fn report(&self, g: &Graph<'_, F>, rec: &Recorded, input: &ModelInput<F>) -> AttentionReport {
        let t = self.config.tokens_per_face();
        let cls_row = |node: Var| g.attention_weights(node).expect("attention node").mean_over_heads(0);
        let per_slot = |row: &[F]| -> Vec<f64> {
            (0..input.len())
                .map(|s| row[1 + s * t..1 + (s + 1) * t].iter().map(|x| x.to_real()).sum())
                .collect()
        };
        let row = cls_row(rec.last_spatial);
        AttentionReport {
            slot_attention: per_slot(&row),
            temporal_slot_attention: per_slot(&cls_row(rec.last_temporal)),
            slot_identity: input.identities.clone(),
            cls_self: row[0].to_real(),
        }
    }

    pub fn forward(&self, input: &ModelInput<F>) -> Result<ForwardOutput<F>, ModelError> {
        let mut g = Graph::new();
        let rec = self.record(&mut g, input)?;
        let logit = g.value(rec.logit).data()[0];
        Ok(ForwardOutput {
            logit,
            attention: self.report(&g, &rec, input),
        })
    }

    /// Output of the first block's temporal attention (before the output
    /// projection) for the given token matrix `[1 + N*T, D]`.
    pub fn temporal_attention(&self, tokens: &Tensor<F>, identities: &[Option<u32>]) -> Result<Tensor<F>, ModelError> {
        let pattern = Arc::new(temporal_pattern(identities, self.config.tokens_per_face()));
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let x = g.constant_ref(tokens);
        let (_, a) = self.attend(&mut g, &p, "blocks.0.temporal", x, &pattern)?;
        Ok(g.value(a).clone())
    }

    /// BCE loss of one example and its gradient for every parameter, in name order.
    pub fn loss_and_gradients(&self, input: &ModelInput<F>, label: F) -> Result<(F, Vec<Tensor<F>>), ModelError> {
        let mut g = Graph::new();
        let rec = self.record(&mut g, input)?;
        let loss = g.bce_with_logits(rec.logit, &[label])?;
        let mut grads = g.backward(loss)?;
        let out = self
            .params
            .iter()
            .map(|(name, t)| grads.take(rec.params.get(name)).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((g.value(loss).data()[0], out))
    }

    /// Mean loss and mean gradients over a batch. Examples run in parallel;
    /// the reduction is sequential in batch order, so results do not depend
    /// on the thread count.
    pub fn batch_gradients(&self, batch: &[(&ModelInput<F>, F)]) -> Result<(F, Vec<Tensor<F>>), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let parts: Vec<(F, Vec<Tensor<F>>)> = batch
            .par_iter()
            .map(|(x, y)| self.loss_and_gradients(x, *y))
            .collect::<Result<_, _>>()?;
        let inv = F::one() / F::from_count(batch.len());
        let mut iter = parts.into_iter();
        let (mut loss, mut acc) = iter.next().expect("non-empty batch");
        for (l, gs) in iter {
            loss += l;
            for (a, g) in acc.iter_mut().zip(&gs) {
                a.axpy(F::one(), g)?;
            }
        }
        for a in &mut acc {
            a.data_mut().iter_mut().for_each(|x| *x *= inv);
        }
        Ok((loss * inv, acc))
    }

    /// One SGD step on a labelled batch; returns the batch loss before the update.
    pub fn train_step(&mut self, batch: &[(&ModelInput<F>, F)], lr: F, opt: &mut Sgd<F>) -> Result<F, ModelError> {
        let (loss, grads) = self.batch_gradients(batch)?;
        let step = opt.steps();
        if !loss.is_finite() {
            return Err(ModelError::NonFinite { what: "loss", step });
        }
        if !grads.iter().all(Tensor::all_finite) {
            return Err(ModelError::NonFinite { what: "gradient", step });
        }
        opt.apply(self.params.values_mut(), &grads, lr);
        Ok(loss)
    }

    pub fn cast<G: Scalar>(&self) -> MintimeModel<G> {
        MintimeModel {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}
