use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::assembler::{assemble, AssemblyConfig, InputSequence};
use crate::numerics::{Scalar, Tensor};
use crate::trackdata::{CropSource, Label, VideoRecord};

use super::{MintimeModel, ModelError, ModelInput};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 0.01,
            lr_min: 1e-4,
            weight_decay: 1e-4,
            momentum: 0.0,
            seed: 0,
        }
    }
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let frac = (step.min(total) as f64) / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Stochastic gradient descent with L2 weight decay and optional momentum.
#[derive(Clone, Debug)]
pub struct Sgd<F> {
    pub weight_decay: f64,
    pub momentum: f64,
    velocity: Vec<Tensor<F>>,
    steps: usize,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(weight_decay: f64, momentum: f64) -> Self {
        Sgd {
            weight_decay,
            momentum,
            velocity: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `p -= lr * (g + wd * p)`, through the velocity buffer when momentum is set.
    pub(super) fn apply<'p>(&mut self, params: impl Iterator<Item = &'p mut Tensor<F>>, grads: &[Tensor<F>], lr: F) {
        let wd = F::from_real(self.weight_decay);
        let mu = F::from_real(self.momentum);
        if self.momentum != 0.0 && self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        for (i, (p, g)) in params.zip(grads).enumerate() {
            let pd = p.data_mut();
            if self.momentum == 0.0 {
                for (x, &d) in pd.iter_mut().zip(g.data()) {
                    *x -= lr * (d + wd * *x);
                }
            } else {
                let v = self.velocity[i].data_mut();
                for ((x, &d), vel) in pd.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                    *vel = mu * *vel + d + wd * *x;
                    *x -= lr * *vel;
                }
            }
        }
        self.steps += 1;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub last_lr: f64,
}

/// Trains on labelled videos; sequences are re-assembled every epoch so the
/// sampled faces vary. Returns one log entry per epoch.
pub fn fit<F: Scalar>(
    model: &mut MintimeModel<F>,
    videos: &[VideoRecord],
    asm: &AssemblyConfig,
    source: &dyn CropSource,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>, ModelError> {
    let labels = videos.iter().map(|v| (v.video_id.as_str(), v.label)).collect::<Vec<_>>();
    fit_with(model, &labels, source, cfg, on_epoch, |i, epoch| {
        assemble(&videos[i], asm, epoch).map_err(|e| ModelError::Input(e.to_string()))
    })
}

/// Trains on fixed, already assembled sequences.
pub fn fit_sequences<F: Scalar>(
    model: &mut MintimeModel<F>,
    sequences: &[InputSequence],
    source: &dyn CropSource,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>, ModelError> {
    let labels = sequences.iter().map(|s| (s.video_id.as_str(), s.label)).collect::<Vec<_>>();
    fit_with(model, &labels, source, cfg, on_epoch, |i, _| Ok(sequences[i].clone()))
}

fn fit_with<F: Scalar>(
    model: &mut MintimeModel<F>,
    labels: &[(&str, Option<Label>)],
    source: &dyn CropSource,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
    sequence: impl Fn(usize, u64) -> Result<InputSequence, ModelError> + Sync,
) -> Result<Vec<EpochLog>, ModelError> {
    if cfg.batch_size == 0 {
        return Err(ModelError::Config("batch_size must be positive".into()));
    }
    let targets: Vec<F> = labels
        .iter()
        .map(|(id, l)| {
            l.map(|l| F::from_real(l.as_target()))
                .ok_or_else(|| ModelError::Input(format!("video {id} has no label")))
        })
        .collect::<Result<_, _>>()?;
    let n = labels.len();
    let total = n.div_ceil(cfg.batch_size) * cfg.epochs;
    let mut opt = Sgd::new(cfg.weight_decay, cfg.momentum);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        let (mut loss_sum, mut last_lr) = (0.0, cfg.lr);
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<ModelInput<F>> = chunk
                .par_iter()
                .map(|&i| ModelInput::from_sequence(&sequence(i, epoch as u64)?, source, &model.config))
                .collect::<Result<_, _>>()?;
            let batch: Vec<(&ModelInput<F>, F)> = inputs.iter().zip(chunk.iter().map(|&i| targets[i])).collect();
            last_lr = cosine_lr(opt.steps(), total, cfg.lr, cfg.lr_min);
            let loss = model.train_step(&batch, F::from_real(last_lr), &mut opt)?;
            loss_sum += loss.to_real() * chunk.len() as f64;
        }
        let log = EpochLog {
            epoch,
            mean_loss: loss_sum / n.max(1) as f64,
            last_lr,
        };
        log::info!("epoch {} loss {:.5} lr {:.6}", log.epoch, log.mean_loss, log.last_lr);
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}
