//! Toy-scale training and evaluation loops.

use serde::{Deserialize, Serialize};

use crate::autograd::{adamw_step, AdamWState, Graph, ParamStore};
use crate::data::SegSample;
use crate::encoder::{segmentation_loss, Model, IGNORE_INDEX};
use crate::error::{config, Error, Result};
use crate::metrics::{evaluate_maps, EvalReport, Threshold};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Linear warm-up length before the poly decay takes over.
    pub warmup_steps: u64,
    /// Random horizontal flips and pad-and-crop shifts.
    pub augment: bool,
    /// Maximum shift of the pad-and-crop augmentation.
    pub crop_pad: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 100,
            augment: true,
            crop_pad: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !self.lr.is_finite() || self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(config("batch_size and lr must be positive, weight_decay non-negative"));
        }
        Ok(())
    }
}

/// Maps `[0, 1]` pixels to roughly zero-mean unit-scale inputs.
pub fn normalize_pixel(v: f32) -> f32 {
    (v - 0.5) * 4.0
}

/// Copies one sample into a batch slot, optionally flipped and shifted.
/// Shifted-in pixels are zero in the image and ignored in the labels.
fn place(sample: &SegSample, flip: bool, dy: isize, dx: isize, img: &mut [f32], lab: &mut [u8]) {
    let (h, w) = (sample.height(), sample.width());
    let src = sample.image.data();
    for y in 0..h {
        for x in 0..w {
            let sy = y as isize + dy;
            let sx0 = x as isize + dx;
            let o = y * w + x;
            if sy < 0 || sy >= h as isize || sx0 < 0 || sx0 >= w as isize {
                img[o * 3..o * 3 + 3].fill(0.0);
                lab[o] = IGNORE_INDEX;
                continue;
            }
            let sx = if flip { w - 1 - sx0 as usize } else { sx0 as usize };
            let si = sy as usize * w + sx;
            for c in 0..3 {
                img[o * 3 + c] = normalize_pixel(src[si * 3 + c]);
            }
            lab[o] = sample.labels[si];
        }
    }
}

/// Stacks `indices` into `[B, H, W, 3]` inputs and flattened labels.
pub fn make_batch(
    samples: &[SegSample],
    indices: &[usize],
    augment: Option<(&mut Rng, usize)>,
) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = samples
        .get(*indices.first().ok_or_else(|| config("empty batch"))?)
        .ok_or_else(|| config("batch index out of range"))?;
    let (h, w) = (first.height(), first.width());
    let mut img = vec![0f32; indices.len() * h * w * 3];
    let mut lab = vec![0u8; indices.len() * h * w];
    let mut aug = augment;
    for (slot, &i) in indices.iter().enumerate() {
        let s = samples.get(i).ok_or_else(|| config("batch index out of range"))?;
        if s.height() != h || s.width() != w {
            return Err(config("samples in a batch must share a size"));
        }
        let (flip, dy, dx) = match aug.as_mut() {
            Some((r, pad)) => {
                let p = *pad as i64;
                (r.bernoulli(0.5), r.range(-p, p) as isize, r.range(-p, p) as isize)
            }
            None => (false, 0, 0),
        };
        place(
            s,
            flip,
            dy,
            dx,
            &mut img[slot * h * w * 3..(slot + 1) * h * w * 3],
            &mut lab[slot * h * w..(slot + 1) * h * w],
        );
    }
    Ok((Tensor::new(vec![indices.len(), h, w, 3], img)?, lab))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Multiplier of the base learning rate at `step`: linear warm-up, then the
/// optimizer's poly decay.
fn warmup_factor(step: u64, warmup: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        1.0
    } else {
        (step + 1) as f64 / warmup as f64
    }
}

/// Trains `store` in place. `on_step` sees every step's loss. A non-finite
/// loss stops training before the update is applied.
pub fn train(
    model: &Model,
    store: &mut ParamStore<f32>,
    samples: &[SegSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(config("no training samples"));
    }
    let mut opt = AdamWState::new(store, cfg.lr)
        .with_schedule(cfg.steps)
        .with_weight_decay(cfg.weight_decay);
    let mut rng = Rng::derive(cfg.seed, "train");
    let mut order: Vec<usize> = Vec::new();
    let mut logs = Vec::with_capacity(cfg.steps as usize);
    let (h, w) = (samples[0].height(), samples[0].width());
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                // Fisher–Yates; popped from the back.
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.below(i as u64 + 1) as usize);
                }
            }
            batch.push(order.pop().expect("refilled"));
        }
        let aug = cfg.augment.then_some((&mut rng, cfg.crop_pad));
        let (x, y) = make_batch(samples, &batch, aug)?;
        let base_lr = cfg.lr;
        opt.lr = base_lr * warmup_factor(step, cfg.warmup_steps);
        let (loss, grads) = {
            let g = Graph::new(store);
            let xv = g.constant(x);
            let (logits, _) = model.forward(&g, xv)?;
            let l = segmentation_loss(&g, logits, &y, h, w)?;
            let loss = g.value(l).item() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite { step, loss });
            }
            (loss, g.backward(l)?.into_param_grads(store))
        };
        let lr = opt.current_lr();
        adamw_step(store, &grads, &mut opt)?;
        opt.lr = base_lr;
        let log = StepLog { step, loss, lr };
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Predictions for every sample, in batches, at label resolution.
pub fn predict_all(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[SegSample],
    batch_size: usize,
) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = make_batch(samples, chunk, None)?;
        let (h, w) = (samples[chunk[0]].height(), samples[chunk[0]].width());
        let p = model.predict(store, &x, h, w)?;
        out.extend(p.chunks(h * w).map(<[u8]>::to_vec));
    }
    Ok(out)
}

/// Predicts every sample and scores the predictions.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[SegSample],
    batch_size: usize,
    threshold: Threshold,
) -> Result<EvalReport> {
    let first = samples.first().ok_or_else(|| config("no evaluation samples"))?;
    let preds = predict_all(model, store, samples, batch_size)?;
    let labels: Vec<Vec<u8>> = samples.iter().map(|s| s.labels.clone()).collect();
    evaluate_maps(&preds, &labels, first.height(), first.width(), model.config.num_classes, threshold)
}
