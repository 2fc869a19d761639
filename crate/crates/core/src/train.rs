//! Joint fusion + segmentation optimization.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{Ablation, CtrlFuse};
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::synth::SynthScene;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub seed: u64,
    pub ablation: Ablation,
}

impl TrainConfig {
    /// 30 epochs at lr 1e-4, batch 4.
    pub fn desk(seed: u64) -> Self {
        Self {
            lr: 1e-4,
            epochs: 30,
            batch: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            seed,
            ablation: Ablation::None,
        }
    }

    /// The 150-epoch schedule.
    pub fn full(seed: u64) -> Self {
        Self {
            epochs: 150,
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return Err(Error::Config("invalid Adam coefficients".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.lr, c.beta1, c.beta2, c.eps)
    }

    /// One update of every parameter in `grads`. Frozen parameters are never
    /// touched even if a gradient is supplied for them.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for (id, g) in grads {
            if store.entry(*id).frozen {
                continue;
            }
            let i = store
                .ids()
                .position(|x| x == *id)
                .expect("id from this store");
            let m = self.m[i].get_or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; g.numel()]);
            let p = store.get_mut(*id).data_mut();
            for (((p, &g), m), v) in p
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Per-scene mean over the epoch.
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub frozen_checksum_before: String,
    pub frozen_checksum_after: String,
    pub steps: usize,
    /// Sampler state after the last epoch, for checkpoint metadata.
    pub rng_word_pos: u128,
}

/// Per-scene prompt: one object class sampled uniformly from those present;
/// its ground-truth mask is both the prompt and the segmentation target.
pub fn sample_prompt(scene: &SynthScene, rng: &mut ChaCha8Rng) -> Tensor {
    let classes = scene.object_classes();
    let class = classes[rng.gen_range(0..classes.len())];
    scene.class_mask(class)
}

/// Runs one optimizer step on `batch`; returns per-scene breakdowns.
pub fn train_step(
    model: &mut CtrlFuse,
    adam: &mut Adam,
    batch: &[(&SynthScene, Tensor)],
    ablation: Ablation,
    clip_norm: f64,
) -> Result<Vec<LossBreakdown>> {
    let (grads, breakdowns) = {
        let mut cx = Ctx::new(&model.store);
        let mut totals = Vec::with_capacity(batch.len());
        let mut breakdowns = Vec::with_capacity(batch.len());
        for (scene, prompt) in batch {
            let (_, terms) = model.objective(&mut cx, &scene.pair, prompt, ablation)?;
            breakdowns.push(terms.breakdown(&cx));
            totals.push(terms.total);
        }
        let mut sum = totals[0];
        for &t in &totals[1..] {
            sum = cx.g.add(sum, t)?;
        }
        let loss = cx.g.scale(sum, 1.0 / totals.len() as f64);
        if !cx.g.value(loss).item().is_finite() {
            return Err(Error::NonFiniteLoss {
                step: adam.t as usize + 1,
                last_finite: None,
            });
        }
        let mut g = cx.g.backward(loss)?;
        (cx.collect_grads(&mut g), breakdowns)
    };
    let mut grads = grads;
    clip_global_norm(&mut grads, clip_norm);
    adam.step(&mut model.store, &grads);
    snap_to_f32(&mut model.store);
    Ok(breakdowns)
}

/// Rounds trainable weights to the nearest `f32`, the precision checkpoints
/// store, so a saved model reloads bit for bit.
pub fn snap_to_f32(store: &mut ParamStore) {
    let ids: Vec<ParamId> = store.ids().filter(|&id| !store.entry(id).frozen).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Trains `model` in place. `on_epoch` sees each log line as it is produced.
pub fn train(
    model: &mut CtrlFuse,
    cfg: &TrainConfig,
    data: &[SynthScene],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let before = model.store.frozen_checksum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::from_config(cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last_finite: Option<f64> = None;
    let mut steps = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut seen = Vec::with_capacity(data.len());
        let mut epoch_steps = 0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<(&SynthScene, Tensor)> = chunk
                .iter()
                .map(|&i| (&data[i], sample_prompt(&data[i], &mut rng)))
                .collect();
            let b = match train_step(model, &mut adam, &batch, cfg.ablation, cfg.clip_norm) {
                Ok(b) => b,
                Err(Error::NonFiniteLoss { step, .. }) => {
                    return Err(Error::NonFiniteLoss { step, last_finite })
                }
                Err(e) => return Err(e),
            };
            last_finite = Some(LossBreakdown::mean(&b).total);
            seen.extend(b);
            epoch_steps += 1;
            steps += 1;
        }
        let line = EpochLog {
            epoch,
            steps: epoch_steps,
            loss: LossBreakdown::mean(&seen),
        };
        log::info!("epoch {epoch}: total {:.6}", line.loss.total);
        on_epoch(&line);
        log.push(line);
    }
    Ok(TrainOutcome {
        log,
        frozen_checksum_before: before,
        frozen_checksum_after: model.store.frozen_checksum(),
        steps,
        rng_word_pos: rng.get_word_pos(),
    })
}

/// JSON-lines rendering of a training log.
pub fn log_to_jsonl(log: &[EpochLog]) -> Result<String> {
    let mut s = String::new();
    for l in log {
        s.push_str(&serde_json::to_string(l)?);
        s.push('\n');
    }
    Ok(s)
}
