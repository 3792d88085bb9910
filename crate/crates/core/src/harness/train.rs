//! Desk-scale training: SGD with momentum on synthetic data.
//!
//! Each ground-truth box is assigned to one cell: the cell containing its
//! center, at the pyramid level whose stride best matches the box size. That
//! cell gets a one-hot class target and a distance target; every other cell
//! is a negative for every class. The loss per batch is
//!
//! ```text
//! (Σ BCE(cls logits, targets) + Σ_assigned (1 − IoU)) / max(1, assigned)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::data::{Object, Sample};
use super::eval::{GroundTruth, Prediction};
use super::image::letterbox;
use crate::blocks::Ctx;
use crate::error::{Error, Result};
use crate::model::{decode, save_checkpoint, Model, STRIDES};
use crate::tensor::kernels::NormMode;
use crate::tensor::{Float, Tape, Tensor, Var};

pub const METRICS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Rate used by the last step of the epoch.
    pub lr: f64,
    /// Means over the epoch's batches.
    pub total: f64,
    pub cls: f64,
    pub bbox: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Total loss of every step, in order.
    pub step_losses: Vec<f64>,
    /// Rate of every step, in order.
    pub step_lrs: Vec<f64>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        let mut out = format!("dsmyolo-metrics {METRICS_VERSION}\nepoch\tlr\ttotal\tcls\tbox\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}",
                r.epoch, r.lr, r.total, r.cls, r.bbox
            );
        }
        out
    }
}

/// One assigned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub image: usize,
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub class: usize,
    /// Distances from the cell center to the box sides, in stride units.
    pub ltrb: [f64; 4],
}

/// Level and cell for each object of each image. Objects landing on an
/// already taken cell are skipped, as are classes outside `num_classes`.
pub fn assign_targets(
    objects: &[Vec<Object>],
    size: (usize, usize),
    num_classes: usize,
) -> Vec<Assignment> {
    let (w, h) = size;
    let mut out: Vec<Assignment> = Vec::new();
    for (image, objs) in objects.iter().enumerate() {
        for o in objs {
            if o.class >= num_classes {
                continue;
            }
            let b = o.bbox;
            let (cx, cy) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
            let extent = ((b[2] - b[0]) * (b[3] - b[1])).sqrt();
            let cell = |level: usize| {
                let s = STRIDES[level] as f64;
                let col = ((cx / s).floor().max(0.0) as usize).min(w / STRIDES[level] - 1);
                let row = ((cy / s).floor().max(0.0) as usize).min(h / STRIDES[level] - 1);
                let (px, py) = ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s);
                let ltrb = [
                    (px - b[0]) / s,
                    (py - b[1]) / s,
                    (b[2] - px) / s,
                    (b[3] - py) / s,
                ];
                (row, col, ltrb)
            };
            // prefer levels whose cell center falls inside the box
            let mismatch = |level: usize| (extent / (4.0 * STRIDES[level] as f64)).ln().abs();
            let level = (0..STRIDES.len())
                .filter(|&l| cell(l).2.iter().all(|&d| d > 0.0))
                .min_by(|&a, &b| mismatch(a).total_cmp(&mismatch(b)))
                .unwrap_or(0);
            let (row, col, ltrb) = cell(level);
            if out
                .iter()
                .any(|a| a.image == image && a.level == level && a.row == row && a.col == col)
            {
                continue;
            }
            let ltrb = ltrb.map(|d| d.max(1e-3));
            out.push(Assignment {
                image,
                level,
                row,
                col,
                class: o.class,
                ltrb,
            });
        }
    }
    out
}

/// Scalar loss nodes for one batch.
pub struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub bbox: Var,
}

/// Build the loss on `ctx.tape` for images `[N, 3, H, W]` with per-image objects.
pub fn toy_loss<T: Float>(
    model: &Model<T>,
    ctx: &mut Ctx<'_, T>,
    images: &Tensor<T>,
    objects: &[Vec<Object>],
) -> Result<LossVars> {
    let (n, _, h, w) = images.dims4("toy_loss")?;
    if objects.len() != n {
        return Err(Error::invalid(
            "toy_loss",
            format!("{} object lists for a batch of {n}", objects.len()),
        ));
    }
    let nc = model.num_classes();
    let assigned = assign_targets(objects, (w, h), nc);
    let norm = T::c(1.0 / assigned.len().max(1) as f64);
    let x = ctx.tape.constant(images.clone());
    let out = model.arch.forward(ctx, x)?;
    let mut cls_terms = Vec::new();
    let mut box_terms = Vec::new();
    for level in 0..STRIDES.len() {
        let (gh, gw) = (h / STRIDES[level], w / STRIDES[level]);
        let mut target = Tensor::<T>::zeros(&[n, nc, gh, gw]);
        let mine: Vec<&Assignment> = assigned.iter().filter(|a| a.level == level).collect();
        for a in &mine {
            let i = target.idx4(a.image, a.class, a.row, a.col);
            target.data_mut()[i] = T::one();
        }
        cls_terms.push(ctx.tape.bce_with_logits(out.cls[level], target)?);
        if mine.is_empty() {
            continue;
        }
        let mut index = Vec::with_capacity(4 * mine.len());
        let mut goal = Vec::with_capacity(4 * mine.len());
        for a in &mine {
            for k in 0..4 {
                index.push(((a.image * 4 + k) * gh + a.row) * gw + a.col);
                goal.push(T::c(a.ltrb[k]));
            }
        }
        let picked = ctx.tape.gather(out.reg[level], index, &[mine.len(), 4])?;
        box_terms.push(
            ctx.tape
                .iou_loss_ltrb(picked, Tensor::new(&[mine.len(), 4], goal)?)?,
        );
    }
    let sum_all = |tape: &mut Tape<T>, terms: &[Var]| -> Result<Var> {
        let mut acc = match terms.first() {
            Some(&v) => v,
            None => tape.constant(Tensor::scalar(T::zero())),
        };
        for &t in &terms[1.min(terms.len())..] {
            acc = tape.add(acc, t)?;
        }
        tape.dot_const(acc, Tensor::scalar(norm))
    };
    let cls = sum_all(ctx.tape, &cls_terms)?;
    let bbox = sum_all(ctx.tape, &box_terms)?;
    let total = ctx.tape.add(cls, bbox)?;
    Ok(LossVars { total, cls, bbox })
}

/// Resize every sample to `size × size`, mapping its boxes along.
pub fn prepare_samples<T: Float>(data: &[Sample<T>], size: usize) -> Result<Vec<Sample<T>>> {
    data.iter()
        .map(|s| {
            let (_, h, w) = (s.image.shape()[0], s.image.shape()[1], s.image.shape()[2]);
            if h == size && w == size {
                return Ok(s.clone());
            }
            let (image, lb) = letterbox(&s.image, size)?;
            let objects = s
                .objects
                .iter()
                .map(|o| Object {
                    class: o.class,
                    bbox: lb.to_letterbox(o.bbox),
                })
                .collect();
            Ok(Sample { image, objects })
        })
        .collect()
}

fn stack<T: Float>(samples: &[&Sample<T>]) -> Result<Tensor<T>> {
    let shape = samples[0].image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * samples[0].image.numel());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::shape(
                "train_toy",
                "images in a batch differ in size",
            ));
        }
        data.extend_from_slice(s.image.data());
    }
    Tensor::new(&[samples.len(), shape[0], shape[1], shape[2]], data)
}

/// Train in place. With `out` set, the metrics log and a checkpoint are
/// written there when training ends.
pub fn train_toy<T: Float>(
    model: &mut Model<T>,
    data: &[Sample<T>],
    cfg: &RunConfig,
    out: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train_toy", "dataset is empty"));
    }
    let data = prepare_samples(data, cfg.input_size)?;
    let ipe = data.len().div_ceil(cfg.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Tensor<T>> = model
        .store
        .params()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut tot, mut cls, mut bbox, mut lr) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &data[i]).collect();
            let images = stack(&batch)?;
            let objects: Vec<Vec<Object>> = batch.iter().map(|s| s.objects.clone()).collect();

            let mut tape = Tape::new();
            let (loss, grads, updates) = {
                let mut ctx = Ctx::new(&mut tape, &model.store, NormMode::Train);
                let loss = toy_loss(model, &mut ctx, &images, &objects)?;
                let vars: Vec<(String, Var)> = ctx
                    .param_vars()
                    .iter()
                    .map(|(k, &v)| (k.clone(), v))
                    .collect();
                let total = ctx.tape.value(loss.total).data()[0].as_f64();
                if !total.is_finite() {
                    return Err(Error::NonFinite {
                        what: "training loss".into(),
                        location: format!("step {step}"),
                    });
                }
                let values = [
                    total,
                    ctx.tape.value(loss.cls).data()[0].as_f64(),
                    ctx.tape.value(loss.bbox).data()[0].as_f64(),
                ];
                let mut g = ctx.tape.backward(loss.total)?;
                let grads: Vec<(String, Tensor<T>)> = vars
                    .into_iter()
                    .filter_map(|(k, v)| g.take(v).map(|t| (k, t)))
                    .collect();
                (values, grads, ctx.tape.take_bn_updates())
            };
            model.store.apply_bn_updates(updates)?;

            lr = cfg.lr_at(epoch, step, ipe);
            let norm = grads
                .iter()
                .flat_map(|(_, g)| g.data())
                .map(|v| v.as_f64().powi(2))
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite {
                    what: "gradient".into(),
                    location: format!("step {step}"),
                });
            }
            let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                cfg.grad_clip / norm
            } else {
                1.0
            };
            let grad_of: std::collections::HashMap<&str, &Tensor<T>> =
                grads.iter().map(|(k, g)| (k.as_str(), g)).collect();
            let (mu, wd, lr_t, clip_t) = (
                T::c(cfg.momentum),
                T::c(cfg.weight_decay),
                T::c(lr),
                T::c(clip),
            );
            for ((name, p), v) in model.store.params_mut().zip(velocity.iter_mut()) {
                let Some(g) = grad_of.get(name) else { continue };
                for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vv = mu * *vv + gv * clip_t + wd * *pv;
                    *pv -= lr_t * *vv;
                }
            }

            log.step_losses.push(loss[0]);
            log.step_lrs.push(lr);
            tot += loss[0];
            cls += loss[1];
            bbox += loss[2];
            step += 1;
        }
        let k = ipe as f64;
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            total: tot / k,
            cls: cls / k,
            bbox: bbox / k,
        });
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mpath = dir.join("metrics.txt");
        fs::write(&mpath, log.to_text()).map_err(|e| Error::io(&mpath, e))?;
        save_checkpoint(model, &dir.join("checkpoint"))?;
    }
    Ok(log)
}

/// Mean total loss over `data` in inference mode, batched like training.
pub fn eval_loss<T: Float>(model: &Model<T>, data: &[Sample<T>], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample<T>> = chunk.iter().collect();
        let images = stack(&batch)?;
        let objects: Vec<Vec<Object>> = batch.iter().map(|s| s.objects.clone()).collect();
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &model.store, NormMode::Infer);
        let loss = toy_loss(model, &mut ctx, &images, &objects)?;
        total += ctx.tape.value(loss.total).data()[0].as_f64();
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// Decoded predictions and ground truth for every sample, indexed by
/// position in `data`, ready for [`super::eval_map`].
pub fn predict_samples<T: Float>(
    model: &Model<T>,
    data: &[Sample<T>],
    conf: f64,
    max_dets: usize,
) -> Result<(Vec<Prediction>, Vec<GroundTruth>)> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (i, s) in data.iter().enumerate() {
        let (_, h, w) = (s.image.shape()[0], s.image.shape()[1], s.image.shape()[2]);
        let images = s.image.clone().reshape(&[1, 3, h, w])?;
        let fwd = model.forward(&images)?;
        for d in decode(&fwd.maps, 0, conf, max_dets, (w, h))? {
            preds.push(Prediction {
                image: i,
                class: d.class,
                score: d.score,
                bbox: d.bbox,
            });
        }
        gts.extend(s.objects.iter().map(|o| GroundTruth {
            image: i,
            class: o.class,
            bbox: o.bbox,
        }));
    }
    Ok((preds, gts))
}
