use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::Serialize;

use super::{Classifier, Dataset, TrainRecipe};
use crate::blocks::ForwardCtx;
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, collect_grads, grad_norm, AdamW, Ema};
use crate::tensor::{cross_entropy_soft, no_grad, Tensor};

/// One line of the metrics log.
#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_acc: f64,
    pub ema_loss: f64,
    pub ema_acc: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Label-smoothed one-hot rows: `(1-eps)·onehot + eps/K`.
pub fn smooth_targets(labels: &[usize], k: usize, eps: f64) -> Vec<f64> {
    let mut t = vec![eps / k as f64; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        t[i * k + l] += 1.0 - eps;
    }
    t
}

/// Convex combination of each sample with sample `perm[i]`, applied to
/// inputs `[B, ...]` and target rows of width `k`.
pub fn mixup(x: &Tensor, targets: &[f64], k: usize, lambda: f64, perm: &[usize]) -> Result<(Tensor, Vec<f64>)> {
    let b = x.dim(0);
    let per = x.numel() / b;
    let src = x.values("mixup")?;
    let mut xs = Vec::with_capacity(src.len());
    let mut ts = Vec::with_capacity(targets.len());
    for i in 0..b {
        let j = perm[i];
        xs.extend((0..per).map(|e| lambda * src[i * per + e] + (1.0 - lambda) * src[j * per + e]));
        ts.extend((0..k).map(|c| lambda * targets[i * k + c] + (1.0 - lambda) * targets[j * k + c]));
    }
    Ok((Tensor::from_vec(xs, x.shape(), x.dtype())?, ts))
}

fn argmax_hits(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.dim(1);
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row.iter().enumerate().fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == l
        })
        .count()
}

/// Mean hard-label cross-entropy and accuracy in eval mode.
pub fn evaluate(model: &Classifier, data: &Dataset, batch: usize) -> Result<(f64, f64)> {
    let k = data.num_classes;
    let ctx = ForwardCtx::eval();
    let dtype = model.store().params()[0].dtype();
    no_grad(|| {
        let (mut loss, mut hits) = (0.0, 0);
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let (x, labels) = data.batch(chunk, dtype)?;
            let logits = model.forward(&x, &ctx)?;
            let t = Tensor::from_vec(smooth_targets(&labels, k, 0.0), &[labels.len(), k], dtype)?;
            loss += cross_entropy_soft(&logits, &t)?.item()? * labels.len() as f64;
            hits += argmax_hits(&logits, &labels);
        }
        Ok((loss / data.len() as f64, hits as f64 / data.len() as f64))
    })
}

/// Runs `recipe.epochs` epochs of AdamW with MixUp, label smoothing,
/// gradient clipping and EMA. Each step is appended to `metrics` as JSON.
pub fn train_epochs(
    model: &Classifier,
    data: &Dataset,
    recipe: &TrainRecipe,
    seed: u64,
    mut metrics: Option<&mut dyn Write>,
) -> Result<History> {
    recipe.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let k = data.num_classes;
    if model.spec.classifier_head()?.num_classes != k {
        return Err(Error::Config(format!("model head has {} classes, dataset {k}", model.spec.classifier_head()?.num_classes)));
    }
    let params = model.store().params();
    let dtype = params[0].dtype();
    let mut opt = AdamW::new(&params, recipe.beta1, recipe.beta2, recipe.weight_decay);
    let mut ema = Ema::new(&params, recipe.ema_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = if recipe.mixup_alpha > 0.0 {
        Some(Beta::new(recipe.mixup_alpha, recipe.mixup_alpha).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };
    let bs = recipe.batch_size.min(data.len());
    let steps_per_epoch = data.len().div_ceil(bs);
    let mut history = History::default();
    let mut step = 0;
    for epoch in 0..recipe.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(bs) {
            let (x, labels) = data.batch(chunk, dtype)?;
            let targets = smooth_targets(&labels, k, recipe.label_smoothing);
            let (x, targets) = match &beta {
                Some(beta) => {
                    let lambda = beta.sample(&mut rng);
                    let mut perm: Vec<usize> = (0..chunk.len()).collect();
                    perm.shuffle(&mut rng);
                    mixup(&x, &targets, k, lambda, &perm)?
                }
                None => (x, targets),
            };
            let ctx = ForwardCtx::train(rng.random());
            model.store().zero_grad();
            let logits = model.forward(&x, &ctx)?;
            let loss = cross_entropy_soft(&logits, &Tensor::from_vec(targets, &[chunk.len(), k], dtype)?)?;
            let loss_value = loss.item()?;
            if !loss_value.is_finite() {
                return Err(Error::Numerical(format!("loss became {loss_value} at step {step} (epoch {epoch})")));
            }
            loss.backward()?;
            let mut grads = collect_grads(&params);
            let norm = clip_global_norm(&mut grads, recipe.grad_clip_norm);
            let lr = recipe.lr_at(step, steps_per_epoch);
            opt.step(&params, &grads, lr)?;
            ema.update(&params);
            let rec = StepRecord {
                step,
                lr,
                loss: loss_value,
                acc: argmax_hits(&logits, &labels) as f64 / chunk.len() as f64,
                grad_norm: norm,
                clipped_norm: grad_norm(&grads),
            };
            if let Some(w) = metrics.as_deref_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                writeln!(w)?;
            }
            epoch_loss += loss_value * chunk.len() as f64;
            history.steps.push(rec);
            step += 1;
        }
        let (eval_loss, eval_acc) = evaluate(model, data, bs)?;
        let (ema_loss, ema_acc) = ema.with_weights(&params, || evaluate(model, data, bs))??;
        log::info!("epoch {epoch}: loss {:.4} acc {eval_acc:.3} ema acc {ema_acc:.3}", epoch_loss / data.len() as f64);
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / data.len() as f64,
            eval_loss,
            eval_acc,
            ema_loss,
            ema_acc,
        });
    }
    Ok(history)
}
