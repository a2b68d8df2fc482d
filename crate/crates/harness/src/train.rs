//! Base-model training and evaluation helpers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use skd_core::optim::{cosine_lr, AdamW};
use skd_core::piad::{gather, EpochLog};
use skd_core::vit::{evaluate, loss_and_grad, Evaluation};
use skd_core::{ArchConfig, Batch, Error, Real, Result, SubnetMask, Vit};

use crate::config::TrainConfig;

/// Linear warmup followed by cosine decay.
pub fn warmup_cosine(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    cosine_lr(base, step - warmup, total.saturating_sub(warmup))
}

/// Trains a freshly initialized model with AdamW.
pub fn train_base<T: Real>(
    arch: ArchConfig,
    train: &Batch<'_>,
    cfg: &TrainConfig,
) -> Result<(Vit<T>, Vec<EpochLog>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Vit::<T>::init(arch, &mut rng)?;
    let logs = fit_adamw(&mut model, train, cfg, &mut rng)?;
    Ok((model, logs))
}

pub fn fit_adamw<T: Real>(
    model: &mut Vit<T>,
    train: &Batch<'_>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochLog>> {
    if train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let mut opt = AdamW::new(model, cfg.weight_decay);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let warmup = per_epoch * cfg.warmup_epochs.min(cfg.epochs);
    let active = model.active_lens(None);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = gather(train, idx);
            let batch = Batch::new(&x, &y);
            let (loss, grads, _) = loss_and_grad(model, &batch, None).map_err(|e| match e {
                e if e.is_numerical() => Error::Divergence {
                    epoch,
                    batch: bi,
                    loss: f64::NAN,
                },
                e => e,
            })?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss,
                });
            }
            opt.step(model, &grads, warmup_cosine(cfg.lr, step, warmup, total), &active);
            step += 1;
            loss_sum += loss * idx.len() as f64;
        }
        logs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / train.len() as f64,
            list_len: 0,
            list_macs: 0,
        });
    }
    Ok(logs)
}

/// Accuracy in percent.
pub fn accuracy<T: Real>(model: &Vit<T>, data: &Batch<'_>, mask: Option<&SubnetMask>, chunk: usize) -> Result<f64> {
    Ok(evaluate(model, data, mask, chunk)?.accuracy * 100.0)
}

pub fn eval<T: Real>(model: &Vit<T>, data: &Batch<'_>, mask: Option<&SubnetMask>, chunk: usize) -> Result<Evaluation> {
    evaluate(model, data, mask, chunk)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        assert!((warmup_cosine(1.0, 0, 4, 20) - 0.25).abs() < 1e-15);
        assert!((warmup_cosine(1.0, 3, 4, 20) - 1.0).abs() < 1e-15);
        assert!((warmup_cosine(1.0, 4, 4, 20) - 1.0).abs() < 1e-15);
        assert!(warmup_cosine(1.0, 19, 4, 20) < 0.02);
        assert_eq!(warmup_cosine(1.0, 0, 0, 10), 1.0);
    }
}
