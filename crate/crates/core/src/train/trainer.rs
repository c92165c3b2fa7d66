use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{cross_entropy, descriptor_mse, total_loss, LossWeights, SuppressionFlags};
use super::optim::{Adam, PlateauScheduler};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{softmax2, DualHeadModel, Tensor};
use crate::patch::Patch;

/// Samples per work unit when accumulating gradients. Partial sums are
/// combined in chunk order, so results do not depend on the execution mode.
const GRAD_CHUNK: usize = 8;

/// Patches with image-level labels (0 live, 1 spoof) and teacher targets.
#[derive(Debug, Clone, Default)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub labels: Vec<usize>,
    pub targets: Vec<Vec<f64>>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn push(&mut self, patch: Patch, label: usize, target: Vec<f64>) {
        self.patches.push(patch);
        self.labels.push(label);
        self.targets.push(target);
    }

    pub fn append(&mut self, other: PatchSet) {
        self.patches.extend(other.patches);
        self.labels.extend(other.labels);
        self.targets.extend(other.targets);
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let spoof = self.labels.iter().filter(|&&l| l == 1).count();
        [self.len() - spoof, spoof]
    }

    pub fn samples(&self, idx: &[usize]) -> Vec<Sample<'_>> {
        idx.iter()
            .map(|&i| Sample {
                patch: &self.patches[i],
                label: self.labels[i],
                target: &self.targets[i],
            })
            .collect()
    }

    pub fn all_samples(&self) -> Vec<Sample<'_>> {
        self.samples(&(0..self.len()).collect::<Vec<_>>())
    }

    fn check(&self, what: &str, dim: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Empty(format!("{what} split has no patches")));
        }
        if self.labels.len() != self.len() || self.targets.len() != self.len() {
            return Err(Error::Shape(format!("{what} split has misaligned labels or targets")));
        }
        if let Some(t) = self.targets.iter().find(|t| t.len() != dim) {
            return Err(Error::Shape(format!(
                "{what} split has a target of width {}, model descriptor is {dim}",
                t.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub patch: &'a Patch,
    pub label: usize,
    pub target: &'a [f64],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sd: f64,
    pub l_m: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub base: Vec<f64>,
    pub sd_head: Vec<f64>,
    pub match_head: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &DualHeadModel) -> Self {
        Gradients {
            base: vec![0.0; model.base.len()],
            sd_head: vec![0.0; model.sd_head.len()],
            match_head: vec![0.0; model.match_head.len()],
        }
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in [
            (&mut self.base, &other.base),
            (&mut self.sd_head, &other.sd_head),
            (&mut self.match_head, &other.match_head),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.base.iter().chain(&self.sd_head).chain(&self.match_head).all(|v| v.is_finite())
    }
}

/// Batch-mean losses and gradients.
///
/// Each head receives its own weighted task gradient. The base receives
/// `s_sd · w_sd · ∂L_sd + s_m · w_m · ∂L_m`, i.e. each head's gradient
/// w.r.t. the shared features is multiplied by its flag before entering
/// the base.
pub fn loss_and_gradients(
    model: &DualHeadModel,
    batch: &[Sample<'_>],
    w: &LossWeights,
    s: &SuppressionFlags,
    exec: Exec,
) -> Result<(LossBreakdown, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let dim = model.config.descriptor_dim;
    let bsz = batch.len() as f64;
    let chunks: Vec<&[Sample<'_>]> = batch.chunks(GRAD_CHUNK).collect();
    let parts = exec.try_map(&chunks, |chunk| {
        let mut grads = Gradients::zeros_like(model);
        let (mut lsd, mut lm) = (0.0, 0.0);
        for smp in chunk.iter() {
            if smp.target.len() != dim {
                return Err(Error::Shape(format!("target width {} vs descriptor {dim}", smp.target.len())));
            }
            let x = model.input_tensor(smp.patch)?;
            let (feat, base_cache) = model.base.forward(x, true);
            let (logits, sd_cache) = model.sd_head.forward(feat.clone(), true);
            let (desc, m_cache) = model.match_head.forward(feat, true);

            let l = [logits.data[0], logits.data[1]];
            lsd += cross_entropy(l, smp.label);
            lm += descriptor_mse(&desc.data, smp.target);

            let p = softmax2(l);
            let g_logits: Vec<f64> = (0..2)
                .map(|k| w.w_sd * (p[k] - f64::from(u8::from(k == smp.label))) / bsz)
                .collect();
            let g_desc: Vec<f64> = desc
                .data
                .iter()
                .zip(smp.target)
                .map(|(d, t)| w.w_m * 2.0 * (d - t) / (bsz * dim as f64))
                .collect();

            let gf_sd = model.sd_head.backward(&sd_cache, Tensor::from_vec(2, 1, 1, g_logits), &mut grads.sd_head);
            let gf_m = model
                .match_head
                .backward(&m_cache, Tensor::from_vec(dim, 1, 1, g_desc), &mut grads.match_head);
            let (a, b) = (f64::from(s.s_sd), f64::from(s.s_m));
            let g_feat: Vec<f64> = gf_sd.data.iter().zip(&gf_m.data).map(|(x, y)| a * x + b * y).collect();
            let g_feat = Tensor::from_vec(gf_sd.c, gf_sd.h, gf_sd.w, g_feat);
            model.base.backward(&base_cache, g_feat, &mut grads.base);
        }
        Ok((lsd, lm, grads))
    })?;

    let mut grads = Gradients::zeros_like(model);
    let (mut lsd, mut lm) = (0.0, 0.0);
    for (a, b, g) in &parts {
        lsd += a;
        lm += b;
        grads.add(g);
    }
    let (l_sd, l_m) = (lsd / bsz, lm / bsz);
    Ok((
        LossBreakdown {
            l_sd,
            l_m,
            total: total_loss(l_sd, l_m, w),
        },
        grads,
    ))
}

/// Forward-only losses over a set of samples.
pub fn evaluate_losses(model: &DualHeadModel, samples: &[Sample<'_>], w: &LossWeights, exec: Exec) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    let chunks: Vec<&[Sample<'_>]> = samples.chunks(GRAD_CHUNK).collect();
    let parts = exec.try_map(&chunks, |chunk| {
        let (mut lsd, mut lm) = (0.0, 0.0);
        for smp in chunk.iter() {
            let (l, d) = model.forward_tensor(model.input_tensor(smp.patch)?);
            if d.len() != smp.target.len() {
                return Err(Error::Shape(format!("target width {} vs descriptor {}", smp.target.len(), d.len())));
            }
            lsd += cross_entropy(l, smp.label);
            lm += descriptor_mse(&d, smp.target);
        }
        Ok((lsd, lm))
    })?;
    let n = samples.len() as f64;
    let (lsd, lm) = parts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    Ok(LossBreakdown {
        l_sd: lsd / n,
        l_m: lm / n,
        total: total_loss(lsd / n, lm / n, w),
    })
}

/// Applies one Adam update from a batch; returns the pre-update losses.
#[allow(clippy::too_many_arguments)]
pub fn backward_step(
    model: &mut DualHeadModel,
    opt: &mut Adam,
    lr: f64,
    batch: &[Sample<'_>],
    w: &LossWeights,
    s: &SuppressionFlags,
    exec: Exec,
) -> Result<LossBreakdown> {
    let (loss, grads) = loss_and_gradients(model, batch, w, s, exec)?;
    opt.step(
        &mut [
            &mut model.base.params,
            &mut model.sd_head.params,
            &mut model.match_head.params,
        ],
        &[&grads.base, &grads.sd_head, &grads.match_head],
        lr,
    );
    Ok(loss)
}

pub fn new_optimizer(model: &DualHeadModel, cfg: &TrainConfig) -> Adam {
    Adam::new(
        &[model.base.len(), model.sd_head.len(), model.match_head.len()],
        cfg.beta1,
        cfg.beta2,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub lr_floor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-3,
            lr_factor: 0.1,
            lr_patience: 10,
            lr_floor: 1e-8,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 64,
            max_epochs: 30,
            val_fraction: 0.2,
            seed: 0,
            exec: Exec::Sequential,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.initial_lr > 0.0) {
            return bad(format!("train.initial_lr must be positive, got {}", self.initial_lr));
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= self.initial_lr) {
            return bad(format!("train.lr_floor {} must lie in (0, initial_lr]", self.lr_floor));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!("train.lr_factor {} must lie in (0, 1)", self.lr_factor));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1/beta2 must lie in [0, 1)".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("train.batch_size and train.max_epochs must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("train.val_fraction {} must lie in (0, 1)", self.val_fraction));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    PlateauAtFloor,
}

/// Epoch 0 holds the losses of the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn initial(&self) -> &EpochRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("history has the initial record")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_lsd,train_lm,train_total,val_lsd,val_lm,val_total\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:e},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
                r.epoch, r.lr, r.train.l_sd, r.train.l_m, r.train.total, r.val.l_sd, r.val.l_m, r.val.total
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn train_joint(
    model: DualHeadModel,
    train: &PatchSet,
    val: &PatchSet,
    w: &LossWeights,
    s: &SuppressionFlags,
    cfg: &TrainConfig,
) -> Result<(DualHeadModel, TrainHistory)> {
    train_joint_with_progress(model, train, val, w, s, cfg, &mut |_| {})
}

/// Shuffled mini-batch training with plateau scheduling on validation
/// total loss; returns the best-validation checkpoint.
pub fn train_joint_with_progress(
    mut model: DualHeadModel,
    train: &PatchSet,
    val: &PatchSet,
    w: &LossWeights,
    s: &SuppressionFlags,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<(DualHeadModel, TrainHistory)> {
    cfg.validate()?;
    w.validate()?;
    s.validate()?;
    let dim = model.config.descriptor_dim;
    train.check("train", dim)?;
    val.check("val", dim)?;
    model.round_to_f32();

    let exec = cfg.exec;
    let val_samples = val.all_samples();
    let eval_all = |m: &DualHeadModel| -> Result<(LossBreakdown, LossBreakdown)> {
        Ok((
            evaluate_losses(m, &train.all_samples(), w, exec)?,
            evaluate_losses(m, &val_samples, w, exec)?,
        ))
    };

    let (t0, v0) = eval_all(&model)?;
    let mut records = vec![EpochRecord {
        epoch: 0,
        lr: cfg.initial_lr,
        train: t0,
        val: v0,
    }];
    progress(&records[0]);

    let mut opt = new_optimizer(&model, cfg);
    let mut sched = PlateauScheduler::new(cfg.initial_lr, cfg.lr_factor, cfg.lr_patience, cfg.lr_floor);
    sched.step(v0.total);
    let mut best = (v0.total, 0, model.clone());
    let mut since_best = 0;
    let mut stop_reason = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let lr = sched.lr;
        let (mut lsd, mut lm) = (0.0, 0.0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train.samples(idx);
            let loss = backward_step(&mut model, &mut opt, lr, &batch, w, s, exec)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("l_sd={} l_m={}", loss.l_sd, loss.l_m),
                });
            }
            lsd += loss.l_sd * idx.len() as f64;
            lm += loss.l_m * idx.len() as f64;
        }
        let n = train.len() as f64;
        let train_loss = LossBreakdown {
            l_sd: lsd / n,
            l_m: lm / n,
            total: total_loss(lsd / n, lm / n, w),
        };
        let val_loss = evaluate_losses(&model, &val_samples, w, exec)?;
        if !val_loss.total.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: 0,
                detail: format!("validation l_sd={} l_m={}", val_loss.l_sd, val_loss.l_m),
            });
        }
        let rec = EpochRecord {
            epoch,
            lr,
            train: train_loss,
            val: val_loss,
        };
        progress(&rec);
        records.push(rec);

        if val_loss.total < best.0 {
            best = (val_loss.total, epoch, model.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        sched.step(val_loss.total);
        if sched.at_floor() && since_best > cfg.lr_patience {
            stop_reason = StopReason::PlateauAtFloor;
            break;
        }
    }

    Ok((
        best.2,
        TrainHistory {
            records,
            best_epoch: best.1,
            stop_reason,
        },
    ))
}
