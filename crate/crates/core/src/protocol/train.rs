//! Two-stage training: Ranger + flat/cosine schedule for stage 1, then a
//! fine-tune stage with the schedule restarted at a reduced rate. The
//! checkpoint with the best validation DSC is kept.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_sample, sample_rng, sample_seed};
use crate::config::{DscMode, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{combined_loss_grad, LossParts};
use crate::metrics::dsc_arrays;
use crate::optimizer::Ranger;
use crate::preprocess::SliceSample;
use crate::unet::predict::{argmax_mask, batch_images};
use crate::unet::{Checkpoint, UNet};

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub stage: u8,
    /// 1-based across both stages.
    pub epoch: usize,
    pub steps: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub loss: f64,
    pub dice: f64,
    pub focal: f64,
    pub ce: f64,
    pub val_dsc: Option<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "stage,epoch,steps,lr,loss,dice,focal,ce,val_dsc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6e},{:.6},{:.6},{:.6},{:.6},{}",
            self.stage,
            self.epoch,
            self.steps,
            self.lr,
            self.loss,
            self.dice,
            self.focal,
            self.ce,
            self.val_dsc.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into())
        )
    }
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = String::from(EpochLog::CSV_HEADER);
    out.push('\n');
    for row in log {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub best_val_dsc: Option<f64>,
    /// Per-step training losses in order.
    pub step_losses: Vec<f64>,
}

/// Mean per-case DSC at training resolution. Each inner slice list is one
/// case, complete and ordered.
pub fn validation_dsc(model: &UNet, cases: &[Vec<SliceSample>], mode: DscMode, batch_size: usize) -> Result<Option<f64>> {
    if cases.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for case in cases {
        let mut pred = Vec::with_capacity(case.len());
        for chunk in case.chunks(batch_size.max(1)) {
            let refs: Vec<&SliceSample> = chunk.iter().collect();
            let logits = model.forward(&batch_images(&refs)?)?;
            pred.extend((0..chunk.len()).map(|i| argmax_mask(&logits, i)));
        }
        total += match mode {
            DscMode::Volume => {
                let (h, w) = case[0].mask.dim();
                let mut p = Array3::<u8>::zeros((case.len(), h, w));
                let mut g = Array3::<u8>::zeros((case.len(), h, w));
                for (k, (s, m)) in case.iter().zip(&pred).enumerate() {
                    p.index_axis_mut(Axis(0), k).assign(m);
                    g.index_axis_mut(Axis(0), k).assign(&s.mask);
                }
                dsc_arrays(&p.view(), &g.view())?
            }
            DscMode::Slice => {
                let mut acc = 0.0;
                for (s, m) in case.iter().zip(&pred) {
                    acc += dsc_arrays(&m.view(), &s.mask.view())?;
                }
                acc / case.len() as f64
            }
        };
    }
    Ok(Some(total / cases.len() as f64))
}

fn mask_batch(samples: &[SliceSample]) -> Array3<u8> {
    let (h, w) = samples[0].mask.dim();
    let mut out = Array3::<u8>::zeros((samples.len(), h, w));
    for (i, s) in samples.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&s.mask);
    }
    out
}

/// Forward, composite loss and backward on one batch.
pub fn batch_loss_grad(model: &UNet, batch: &[SliceSample], cfg: &TrainConfig) -> Result<(LossParts, Vec<f32>)> {
    let refs: Vec<&SliceSample> = batch.iter().collect();
    let images = batch_images(&refs)?;
    let target = mask_batch(batch);
    let mut parts = LossParts::default();
    let (_, grads) = model.forward_backward(&images, |logits| {
        let z = logits.mapv(f64::from);
        let (p, g) = combined_loss_grad(&z.view(), &target.view(), &cfg.loss)?;
        parts = p;
        let g: Array4<f32> = g.mapv(|v| v as f32);
        Ok((p.total, g))
    })?;
    Ok((parts, grads))
}

/// Trains a freshly initialised model. `progress` sees every epoch row as
/// soon as it is complete.
pub fn train_model(
    train: &[SliceSample],
    val: &[Vec<SliceSample>],
    cfg: &TrainConfig,
    source: &str,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let res = cfg.preprocess.resolution;
    if let Some(s) = train.iter().chain(val.iter().flatten()).find(|s| s.image.dim() != (res, res)) {
        return Err(Error::Shape(format!(
            "sample {}/{} is {:?}, expected {res}x{res}",
            s.provenance.case_id,
            s.provenance.slice_index,
            s.image.dim()
        )));
    }

    let mut model = UNet::new(&cfg.model, cfg.seed)?;
    let mut opt = Ranger::new(model.params(), cfg.ranger())?;
    let groups = model.param_groups().to_vec();
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let hash = cfg.hash();

    let mut log = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut last_epoch_ckpt: Option<Checkpoint> = None;
    let mut epoch = 0usize;

    let stages = [
        (1u8, cfg.epochs_stage1, cfg.base_lr),
        (2u8, cfg.epochs_stage2, cfg.base_lr * cfg.stage2_lr_factor),
    ];
    for (stage, epochs, base_lr) in stages {
        if epochs == 0 {
            continue;
        }
        let schedule = cfg.schedule(base_lr, epochs * steps_per_epoch);
        let mut stage_step = 0usize;
        for _ in 0..epochs {
            epoch += 1;
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch as u64, u64::MAX)));
            let mut sums = LossParts::default();
            let mut lr = base_lr;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<SliceSample> = chunk
                    .iter()
                    .map(|&i| augment_sample(&train[i], &mut sample_rng(cfg.seed, epoch as u64, i as u64), &cfg.augment))
                    .collect();
                let (parts, grads) = batch_loss_grad(&model, &batch, cfg)?;
                if !parts.total.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss at stage {stage}, epoch {epoch}, step {stage_step}: \
                         dice {} focal {} ce {} (lr {lr:.3e})",
                        parts.dice, parts.focal, parts.ce
                    )));
                }
                lr = schedule.lr(stage_step)?;
                opt.step(model.params_mut(), &grads, &groups, lr)?;
                stage_step += 1;
                step_losses.push(parts.total);
                sums.dice += parts.dice;
                sums.focal += parts.focal;
                sums.ce += parts.ce;
                sums.total += parts.total;
            }
            let n = steps_per_epoch as f64;
            let val_dsc = validation_dsc(&model, val, cfg.dsc_mode, cfg.eval_batch_size)?;
            let row = EpochLog {
                stage,
                epoch,
                steps: steps_per_epoch,
                lr,
                loss: sums.total / n,
                dice: sums.dice / n,
                focal: sums.focal / n,
                ce: sums.ce / n,
                val_dsc,
            };
            progress(&row);
            log.push(row);

            let snapshot = || {
                let mut c = Checkpoint::from_model(&model, &hash, source, epoch);
                c.val_dsc = val_dsc;
                c.optimizer = Some(opt.clone());
                c
            };
            match val_dsc {
                Some(v) if best.as_ref().is_none_or(|(b, _)| v > *b) => best = Some((v, snapshot())),
                Some(_) => {}
                None => last_epoch_ckpt = Some(snapshot()),
            }
        }
    }

    let (best_val_dsc, checkpoint) = match (best, last_epoch_ckpt) {
        (Some((v, c)), _) => (Some(v), c),
        (None, Some(c)) => (None, c),
        (None, None) => {
            let mut c = Checkpoint::from_model(&model, &hash, source, 0);
            c.val_dsc = validation_dsc(&model, val, cfg.dsc_mode, cfg.eval_batch_size)?;
            (c.val_dsc, c)
        }
    };
    Ok(TrainOutcome {
        checkpoint,
        log,
        best_val_dsc,
        step_losses,
    })
}
