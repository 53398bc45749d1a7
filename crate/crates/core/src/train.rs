//! Training loop with validation-IoU model selection.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::{InferConfig, RunConfig};
use crate::data::{augment, crop, derive_seed, SamplePair};
use crate::error::{Error, Result};
use crate::infer::predict_mask;
use crate::metrics::{confusion, metrics, BinaryMask, ConfusionCounts, MetricSet};
use crate::model::Model;
use crate::optim::AdamW;
use crate::tensor::Tensor;

/// One training example as drawn for a step: which sample, where to crop, how to augment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub index: usize,
    pub y0: usize,
    pub x0: usize,
    pub augment_seed: u64,
}

/// Batches for one epoch. Depends only on the seed, the epoch and the sample sizes, never on
/// the model, so runs with different architectures consume the same stream.
pub fn epoch_plan(cfg: &RunConfig, samples: &[SamplePair], epoch: usize) -> Vec<Vec<Draw>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x74_7261_696e, epoch as u64]));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let draws: Vec<Draw> = order
        .into_iter()
        .map(|index| {
            let s = &samples[index];
            let p = cfg.train.patch;
            let y0 = if p > 0 && p < s.height() { rng.random_range(0..=s.height() - p) } else { 0 };
            let x0 = if p > 0 && p < s.width() { rng.random_range(0..=s.width() - p) } else { 0 };
            Draw { index, y0, x0, augment_seed: rng.random() }
        })
        .collect();
    draws.chunks(cfg.train.batch_size).map(<[Draw]>::to_vec).collect()
}

fn materialize(cfg: &RunConfig, samples: &[SamplePair], draw: &Draw) -> Result<SamplePair> {
    let s = &samples[draw.index];
    let p = cfg.train.patch;
    let s = if p > 0 && (p < s.height() || p < s.width()) {
        crop(s, draw.y0, draw.x0, p.min(s.height()), p.min(s.width()))?
    } else {
        s.clone()
    };
    Ok(match cfg.augment_config() {
        Some(aug) => augment(&s, draw.augment_seed, &aug),
        None => s,
    })
}

/// Stacked `(a, b, target)` for a batch of draws.
pub fn make_batch(cfg: &RunConfig, samples: &[SamplePair], draws: &[Draw]) -> Result<(Tensor<f32>, Tensor<f32>, Vec<u8>)> {
    let items = draws.iter().map(|d| materialize(cfg, samples, d)).collect::<Result<Vec<_>>>()?;
    let a = Tensor::stack(&items.iter().map(|s| s.img_a.clone()).collect::<Vec<_>>())?;
    let b = Tensor::stack(&items.iter().map(|s| s.img_b.clone()).collect::<Vec<_>>())?;
    let target = items.iter().flat_map(|s| s.mask.data().iter().copied()).collect();
    Ok((a, b, target))
}

/// Predicted masks and pooled confusion counts over a dataset.
pub fn evaluate(model: &Model<f32>, samples: &[SamplePair], infer: &InferConfig) -> Result<(ConfusionCounts, Vec<BinaryMask>)> {
    let mut total = ConfusionCounts::default();
    let mut masks = Vec::with_capacity(samples.len());
    for s in samples {
        let mask = predict_mask(model, &s.img_a, &s.img_b, infer.patch, infer.effective_stride())?;
        total += confusion(&mask, &s.mask)?;
        masks.push(mask);
    }
    Ok((total, masks))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub last_loss: f64,
    /// `None` when validation was skipped for this epoch.
    pub val: Option<MetricSet>,
    pub is_best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the highest validation IoU.
    pub best: Checkpoint<f32>,
    pub last: Checkpoint<f32>,
    pub history: Vec<EpochStats>,
    /// SHA-256 over the ids, crops and augmentation seeds of every draw, in order.
    pub data_digest: [u8; 32],
}

pub fn train(
    cfg: &RunConfig,
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training and validation splits must be non-empty".into()));
    }
    let mut model = Model::<f32>::new(&cfg.model, cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer.clone(), &model.params);
    let mut digest = Sha256::new();
    let mut history = Vec::with_capacity(cfg.train.epochs);
    let mut best: Option<Checkpoint<f32>> = None;
    let mut best_iou = f64::NEG_INFINITY;
    let mut best_epoch = 0;

    let steps_per_epoch = train_set.len().div_ceil(cfg.train.batch_size);
    let total_steps = steps_per_epoch * cfg.train.epochs;
    for epoch in 1..=cfg.train.epochs {
        let (mut loss_sum, mut last_loss) = (0.0, 0.0);
        let plan = epoch_plan(cfg, train_set, epoch);
        for (step, draws) in plan.iter().enumerate() {
            for d in draws {
                digest.update(train_set[d.index].id.as_bytes());
                for v in [d.y0 as u64, d.x0 as u64, d.augment_seed] {
                    digest.update(v.to_le_bytes());
                }
            }
            let (a, b, target) = make_batch(cfg, train_set, draws)?;
            let mut g = Graph::new();
            let (va, vb) = (g.constant(a), g.constant(b));
            let out = model.arch.forward(&mut g, &model.params, va, vb)?;
            let loss = model.arch.loss(&mut g, &out.decoded, &target)?;
            let value = g.value(loss.total).item()? as f64;
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, step: step + 1, loss: value });
            }
            let grads = g.backward(loss.total)?.param_grads(&model.params);
            if grads.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { epoch, step: step + 1, loss: f64::NAN });
            }
            let global = (epoch - 1) * steps_per_epoch + step;
            opt.config.lr = cfg.optimizer.lr * cfg.train.lr_factor(global, total_steps);
            opt.update(&mut model.params, &grads)?;
            loss_sum += value;
            last_loss = value;
        }

        let val = if epoch >= cfg.train.val_from_epoch || epoch == cfg.train.epochs {
            Some(metrics(&evaluate(&model, val_set, &cfg.infer)?.0)?)
        } else {
            None
        };
        let is_best = val.is_some_and(|m| m.iou > best_iou);
        if let (true, Some(m)) = (is_best, val) {
            best_iou = m.iou;
            best_epoch = epoch;
        }
        let snapshot = |params| Checkpoint {
            config: cfg.clone(),
            epoch,
            best_epoch,
            best_val_iou: best_iou.max(0.0),
            params,
            optimizer: AdamW { config: cfg.optimizer.clone(), ..opt.clone() },
        };
        if is_best {
            best = Some(snapshot(model.params.clone()));
        }
        let stats = EpochStats { epoch, mean_loss: loss_sum / plan.len() as f64, last_loss, val, is_best };
        on_epoch(&stats);
        history.push(stats);
    }

    let last = Checkpoint {
        config: cfg.clone(),
        epoch: cfg.train.epochs,
        best_epoch,
        best_val_iou: best_iou.max(0.0),
        params: model.params,
        optimizer: AdamW { config: cfg.optimizer.clone(), ..opt },
    };
    let best = best.expect("the final epoch always validates");
    Ok(TrainOutcome { best, last, history, data_digest: digest.finalize().into() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};
    use crate::model::ModelConfig;

    fn tiny_run() -> RunConfig {
        let mut cfg = RunConfig { model: ModelConfig::tiny(), ..Default::default() };
        cfg.train.epochs = 2;
        cfg.train.batch_size = 2;
        cfg.infer.patch = 32;
        cfg.data.synth = SynthConfig { size: 32, ..Default::default() };
        cfg
    }

    #[test]
    fn plan_is_a_permutation_in_batches() {
        let cfg = RunConfig { train: crate::config::TrainConfig { batch_size: 3, ..Default::default() }, ..tiny_run() };
        let data = gen_synthetic(&cfg.data.synth, 0, 0, 7).unwrap();
        let plan = epoch_plan(&cfg, &data, 1);
        assert_eq!(plan.iter().map(Vec::len).collect::<Vec<_>>(), [3, 3, 1]);
        let mut seen: Vec<usize> = plan.iter().flatten().map(|d| d.index).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
        assert_eq!(plan, epoch_plan(&cfg, &data, 1));
        assert_ne!(plan, epoch_plan(&cfg, &data, 2));
    }

    #[test]
    fn zero_lr_without_decay_freezes_parameters() {
        let mut cfg = tiny_run();
        cfg.optimizer.lr = 0.0;
        cfg.optimizer.weight_decay = 0.0;
        let data = gen_synthetic(&cfg.data.synth, 0, 0, 4).unwrap();
        let out = train(&cfg, &data, &data, |_| {}).unwrap();
        let init = Model::<f32>::new(&cfg.model, cfg.seed).unwrap();
        assert_eq!(out.last.params, init.params);
        let ious: Vec<f64> = out.history.iter().map(|e| e.val.unwrap().iou).collect();
        assert_eq!(ious[0], ious[1]);
        assert_eq!(out.best.best_epoch, 1);
    }

    #[test]
    fn rejects_empty_splits() {
        let cfg = tiny_run();
        let data = gen_synthetic(&cfg.data.synth, 0, 0, 1).unwrap();
        assert!(train(&cfg, &[], &data, |_| {}).is_err());
        assert!(train(&cfg, &data, &[], |_| {}).is_err());
    }
}
