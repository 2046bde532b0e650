//! Mini-batch Adam training with periodic checkpoints and selection of the
//! checkpoint with the lowest validation loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentedGroup;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokenize::EmbeddingProvider;

use super::layers::Params;
use super::model::{CupRank, PreparedGroup, RankerConfig};

/// Adam with the usual defaults (β₁ 0.9, β₂ 0.999, ε 1e-8).
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    step: i32,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Self {
            lr: T::of(lr),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            step: 0,
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
        }
    }

    pub fn update<P: Params<T>>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let g = grads.flatten();
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let (m, v) = (&mut self.m, &mut self.v);
        let (lr, eps) = (self.lr, self.eps);
        let mut offset = 0;
        params.visit_mut("", &mut |_, _, xs| {
            for (j, x) in xs.iter_mut().enumerate() {
                let i = offset + j;
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
            offset += xs.len();
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    /// Groups consumed so far.
    pub step: usize,
    /// Mean training loss since the previous checkpoint.
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: CupRank<T>,
    pub log: Vec<TrainLogEntry>,
    pub best_step: usize,
}

pub fn mean_loss<T: Scalar>(model: &CupRank<T>, groups: &[PreparedGroup<T>]) -> Result<f64> {
    let losses = groups
        .par_iter()
        .map(|g| model.group_loss(g).map(|l| l.to_f64_lossy()))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

type Best<T> = Option<(f64, usize, CupRank<T>)>;

fn checkpoint<T: Scalar>(
    model: &CupRank<T>,
    consumed: usize,
    window: &mut (f64, usize),
    val_groups: &[PreparedGroup<T>],
    log: &mut Vec<TrainLogEntry>,
    best: &mut Best<T>,
) -> Result<()> {
    let val_loss = mean_loss(model, val_groups)?;
    let train_loss = window.0 / window.1.max(1) as f64;
    *window = (0.0, 0);
    log::info!("checkpoint at {consumed} groups: train {train_loss:.6} val {val_loss:.6}");
    log.push(TrainLogEntry {
        step: consumed,
        train_loss,
        val_loss,
    });
    if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
        *best = Some((val_loss, consumed, model.clone()));
    }
    Ok(())
}

/// Trains from a fresh initialization. Checkpoints are taken every
/// `checkpoint_every` groups consumed and once at the end; the returned model
/// is the checkpoint with the lowest mean validation loss (earliest on ties).
pub fn train<T: Scalar>(
    groups: &[PreparedGroup<T>],
    val_groups: &[PreparedGroup<T>],
    config: &RankerConfig,
) -> Result<TrainOutcome<T>> {
    if groups.is_empty() {
        return Err(Error::Contract("training needs at least one group".into()));
    }
    if val_groups.is_empty() {
        return Err(Error::Contract(
            "training needs at least one validation group".into(),
        ));
    }
    let mut model = CupRank::<T>::init(config.clone())?;
    let mut adam = Adam::new(config.learning_rate, model.params.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut log = Vec::new();
    let mut best: Best<T> = None;
    let mut consumed = 0usize;
    let mut window = (0.0f64, 0usize);

    let mut order: Vec<usize> = (0..groups.len()).collect();
    for _ in 0..config.epochs.max(1) {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_groups) {
            let mut grads = model.params.zeros_like();
            let mut pending = Vec::new();
            for &gi in batch {
                let group = &groups[gi];
                let loss = model
                    .group_loss_grad(group, &mut grads, Some(&mut rng))?
                    .to_f64_lossy();
                consumed += 1;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        group_id: group.id.clone(),
                        step: consumed,
                        loss,
                    });
                }
                window.0 += loss;
                window.1 += 1;
                if consumed.is_multiple_of(config.checkpoint_every) {
                    pending.push(consumed);
                }
            }
            let scale = T::one() / T::of(batch.len() as f64);
            let mut avg = grads.zeros_like();
            avg.add_scaled(&grads, scale);
            adam.update(&mut model.params, &avg);
            if !model.params.all_finite() {
                return Err(Error::NumericDegeneracy(format!(
                    "parameters became non-finite after {consumed} groups"
                )));
            }
            // Checkpoints fall on batch boundaries: a mid-batch count is
            // recorded against the weights after that batch's update.
            for c in pending {
                checkpoint(&model, c, &mut window, val_groups, &mut log, &mut best)?;
            }
        }
    }
    if log.last().is_none_or(|e| e.step != consumed) {
        checkpoint(
            &model,
            consumed,
            &mut window,
            val_groups,
            &mut log,
            &mut best,
        )?;
    }
    let (_, best_step, model) = best.expect("at least one checkpoint");
    Ok(TrainOutcome {
        model,
        log,
        best_step,
    })
}

/// Flattens and embeds groups, then trains.
pub fn train_groups<T: Scalar>(
    groups: &[AugmentedGroup],
    val_groups: &[AugmentedGroup],
    config: &RankerConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<TrainOutcome<T>> {
    if config.embed_dim != provider.dimension() + crate::flatten::EDIT_FEATURES {
        return Err(Error::Config(format!(
            "embed_dim {} does not match provider dimension {} + {}",
            config.embed_dim,
            provider.dimension(),
            crate::flatten::EDIT_FEATURES
        )));
    }
    let template = CupRank::<T>::init(config.clone())?;
    let prep = |gs: &[AugmentedGroup]| {
        gs.iter()
            .map(|g| template.prepare_group(g, provider))
            .collect::<Result<Vec<_>>>()
    };
    train(&prep(groups)?, &prep(val_groups)?, config)
}

/// Fraction of groups whose positive (index 0) gets the strictly highest
/// score.
pub fn top1_accuracy<T: Scalar>(model: &CupRank<T>, groups: &[PreparedGroup<T>]) -> Result<f64> {
    let hits = groups
        .par_iter()
        .map(|g| {
            let scores = g
                .candidates
                .iter()
                .map(|c| model.score_input(c))
                .collect::<Result<Vec<_>>>()?;
            Ok(scores[1..].iter().all(|s| *s < scores[0]))
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / groups.len().max(1) as f64)
}
