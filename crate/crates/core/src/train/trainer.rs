use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::seg_loss;
use super::metrics::{dice, iou};
use super::optim::{Adam, AdamConfig};
use crate::adapters::{PlacementSpec, Preset};
use crate::autodiff::{CountFilter, Graph, ParamId};
use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::model::{ClickPrompt, SegModel, Segmenter};
use crate::prompting::{sample_initial, sample_iterative, ClickPolicy};

/// Weight of the IoU-head regression term in the training loss.
pub const IOU_LOSS_WEIGHT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub weight_decay: f64,
    pub freeze_base: bool,
    pub placement: PlacementSpec,
    pub seed: u64,
    pub click_policy: ClickPolicy,
    /// Stop after this many optimizer steps, even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    /// Full training of the un-adapted model.
    pub fn pretrain() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            weight_decay: 0.0,
            freeze_base: false,
            placement: PlacementSpec::none(),
            seed: 0,
            click_policy: ClickPolicy::default(),
            max_steps: None,
        }
    }

    /// Adapter-only training for a preset.
    pub fn finetune(preset: Preset) -> Self {
        Self {
            epochs: 20,
            freeze_base: true,
            placement: preset.spec(),
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !self.placement.is_empty() && !self.freeze_base {
            return Err(Error::Config(
                "adapter variants must train with freeze_base".into(),
            ));
        }
        self.click_policy.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            betas: self.adam_betas,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub dice: f64,
    pub iou: f64,
}

pub type TrainHistory = Vec<EpochRecord>;

struct SampleStep {
    loss: f64,
    dice: f64,
    iou: f64,
}

/// Forward + backward on one sample; gradients are added into the
/// registry's buffers.
fn sample_step(
    model: &mut SegModel,
    sample: &SegmentationSample,
    clicks: &[ClickPrompt],
) -> Result<SampleStep> {
    let factor = model.config().image_size / model.config().mask_side();
    let gt_low = sample.mask.downsample_majority(factor)?;
    let (grads, step) = {
        let model = &*model;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &sample.image, clicks)?;
        let low = out.decoder.low_res_logits;
        let seg = seg_loss(&mut g, low, &gt_low)?;

        let pred = model.finish(g.value(low), g.scalar(out.decoder.iou_logit))?;
        let mask = pred.binary_mask();
        let (d, j) = (dice(&mask, &sample.mask)?, iou(&mask, &sample.mask)?);
        let iou_prob = g.sigmoid(out.decoder.iou_logit);
        let target = g.constant(&[1, 1], vec![j])?;
        let diff = g.sub(iou_prob, target)?;
        let sq = g.mul(diff, diff)?;
        let sq = g.mean(sq);
        let aux = g.scale(sq, IOU_LOSS_WEIGHT);
        let total = g.add(seg.total, aux)?;

        let loss = g.scalar(total);
        if !loss.is_finite() {
            return Err(g.first_non_finite().unwrap_or(Error::NonFinite {
                op: "loss",
                node: total.index(),
            }));
        }
        g.backward(total)?;
        let grads: Vec<(ParamId, Vec<f64>)> = g
            .param_grads()
            .into_iter()
            .map(|(id, d)| (id, d.to_vec()))
            .collect();
        (
            grads,
            SampleStep {
                loss,
                dice: d,
                iou: j,
            },
        )
    };
    model
        .registry_mut()
        .accumulate_grads(grads.iter().map(|(id, d)| (*id, d.as_slice())))?;
    Ok(step)
}

/// Training clicks: the policy's initial clicks, then 0..=max_iterative
/// corrective clicks from no-grad re-predictions.
fn training_clicks(
    model: &SegModel,
    sample: &SegmentationSample,
    policy: &ClickPolicy,
    rng: &mut impl Rng,
) -> Result<Vec<ClickPrompt>> {
    let mut clicks = sample_initial(&sample.mask, policy, rng)?;
    let extra = rng.gen_range(0..=policy.max_iterative);
    for _ in 0..extra {
        let pred = model.predict(&sample.image, &clicks)?;
        match sample_iterative(&pred.binary_mask(), &sample.mask, rng)? {
            Some(c) => clicks.push(c),
            None => break,
        }
    }
    Ok(clicks)
}

/// Adam training of the model's trainable parameters. With `freeze_base`
/// only adapter parameters are updated.
pub fn train(
    model: &mut SegModel,
    dataset: &[SegmentationSample],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if model.placement() != cfg.placement {
        return Err(Error::Config(format!(
            "model carries {} but the run asks for {}",
            model.variant_name(),
            cfg.placement.variant_name()
        )));
    }
    let reg = model.registry_mut();
    if cfg.freeze_base {
        reg.apply_freeze_policy();
    } else {
        reg.set_all_trainable(true);
    }
    if reg.count(CountFilter::Trainable) == 0 {
        return Err(Error::NothingToTrain);
    }
    reg.clear_grads();

    let mut adam = Adam::new(cfg.adam())?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut click_rng =
        ChaCha8Rng::seed_from_u64(cfg.seed ^ cfg.click_policy.rng_seed.rotate_left(32));
    click_rng.set_stream(1);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss, mut d, mut j, mut n) = (0.0, 0.0, 0.0, 0usize);
        let mut stop = false;
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| adam.steps() as usize >= m) {
                stop = true;
                break;
            }
            for &i in batch {
                let sample = &dataset[i];
                let clicks = training_clicks(model, sample, &cfg.click_policy, &mut click_rng)?;
                let s = sample_step(model, sample, &clicks)?;
                loss += s.loss;
                d += s.dice;
                j += s.iou;
                n += 1;
            }
            adam.step(model.registry_mut(), 1.0 / batch.len() as f64)?;
            model.registry_mut().clear_grads();
        }
        if n > 0 {
            let rec = EpochRecord {
                epoch,
                loss: loss / n as f64,
                dice: d / n as f64,
                iou: j / n as f64,
            };
            log::info!(
                "epoch {epoch}: loss {:.4} dice {:.4} iou {:.4}",
                rec.loss,
                rec.dice,
                rec.iou
            );
            history.push(rec);
        }
        if stop {
            break;
        }
    }
    Ok(history)
}
