//! RankNet baseline over the concatenated (old code, new code, old comment,
//! candidate) token embeddings: a rowwise fully connected ReLU layer,
//! max-pooling over rows per hidden unit, a second fully connected layer to a
//! scalar and a sigmoid. Trained on (positive, negative) pairs with the
//! pairwise logistic loss.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentedGroup, CandidateComment};
use crate::error::{Error, Result};
use crate::sample::CommentUpdateSample;
use crate::scalar::Scalar;
use crate::tokenize::{embed_tokens, EmbeddingProvider};

use super::layers::{masked_max_pool, max_pool_backward, Linear, Params, Visitor, VisitorMut};
use super::train::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankNetConfig {
    /// Provider token-embedding width.
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub batch_groups: usize,
    pub epochs: usize,
    /// Token limit applied to each of the four segments.
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for RankNetConfig {
    fn default() -> Self {
        Self {
            embed_dim: 768,
            hidden_dim: 256,
            learning_rate: 1e-3,
            batch_groups: 8,
            epochs: 5,
            max_seq_len: 512,
            seed: 42,
        }
    }
}

impl RankNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.hidden_dim == 0
            || self.batch_groups == 0
            || self.max_seq_len == 0
        {
            return Err(Error::Config(
                "RankNet dimensions and batch size must be positive".into(),
            ));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(
                "RankNet learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankNetParams<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Params<T> for RankNetParams<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        let p = if prefix.is_empty() {
            String::new()
        } else {
            format!("{prefix}.")
        };
        self.fc1.visit(&format!("{p}fc1"), f);
        self.fc2.visit(&format!("{p}fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        let p = if prefix.is_empty() {
            String::new()
        } else {
            format!("{prefix}.")
        };
        self.fc1.visit_mut(&format!("{p}fc1"), f);
        self.fc2.visit_mut(&format!("{p}fc2"), f);
    }
}

struct LogitCache<T> {
    x: Array2<T>,
    pre: Array2<T>,
    pooled: Array2<T>,
    argmax: Vec<usize>,
    logit: T,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankNet<T> {
    pub config: RankNetConfig,
    pub params: RankNetParams<T>,
}

impl<T: Scalar> RankNet<T> {
    pub fn init(config: RankNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let fc1 = Linear::init(config.embed_dim, config.hidden_dim, &mut rng);
        let fc2 = Linear::init(config.hidden_dim, 1, &mut rng);
        Ok(Self {
            config,
            params: RankNetParams { fc1, fc2 },
        })
    }

    /// Token embeddings of the four texts stacked row-wise.
    pub fn input(
        &self,
        sample: &CommentUpdateSample,
        candidate: &str,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Array2<T>> {
        if provider.dimension() != self.config.embed_dim {
            return Err(Error::Contract(format!(
                "provider dimension {} does not match RankNet embed_dim {}",
                provider.dimension(),
                self.config.embed_dim
            )));
        }
        let mut parts = Vec::with_capacity(4);
        for text in [
            &sample.old_code,
            &sample.new_code,
            &sample.old_comment,
            candidate,
        ] {
            let mut seq = provider.tokenize(text)?.into_tokens();
            seq.truncate(self.config.max_seq_len);
            parts.push(embed_tokens(
                &crate::tokenize::TokenSequence::new(seq),
                provider,
            )?);
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let stacked =
            ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Contract(e.to_string()))?;
        Ok(stacked.mapv(T::of))
    }

    fn logit_cached(&self, x: &Array2<T>) -> LogitCache<T> {
        let pre = self.params.fc1.forward(x);
        let act = pre.mapv(|v| v.max(T::zero()));
        let (pooled, argmax) = masked_max_pool(&act, act.nrows());
        let pooled = pooled.insert_axis(Axis(0));
        let logit = self.params.fc2.forward(&pooled)[[0, 0]];
        LogitCache {
            x: x.clone(),
            pre,
            pooled,
            argmax,
            logit,
        }
    }

    /// Pre-sigmoid output.
    pub fn logit(&self, x: &Array2<T>) -> T {
        let act = self.params.fc1.forward(x).mapv(|v| v.max(T::zero()));
        let (pooled, _) = masked_max_pool(&act, act.nrows());
        self.params.fc2.forward(&pooled.insert_axis(Axis(0)))[[0, 0]]
    }

    fn backward(&self, c: &LogitCache<T>, dlogit: T, grads: &mut RankNetParams<T>) {
        let dout = Array2::from_elem((1, 1), dlogit);
        let dpooled = self.params.fc2.backward(&c.pooled, &dout, &mut grads.fc2);
        let dact = max_pool_backward(&dpooled.row(0).to_owned(), &c.argmax, c.pre.nrows());
        let mask = c
            .pre
            .mapv(|v| if v > T::zero() { T::one() } else { T::zero() });
        self.params
            .fc1
            .backward(&c.x, &(dact * mask), &mut grads.fc1);
    }

    /// Score in (0, 1).
    pub fn score(
        &self,
        sample: &CommentUpdateSample,
        candidate: &str,
        provider: &dyn EmbeddingProvider,
    ) -> Result<f64> {
        let x = self.input(sample, candidate, provider)?;
        Ok(sigmoid(self.logit(&x).to_f64_lossy()))
    }

    /// Candidate indices by descending score; ties keep input order.
    pub fn rank(
        &self,
        sample: &CommentUpdateSample,
        candidates: &[CandidateComment],
        provider: &dyn EmbeddingProvider,
    ) -> Result<Vec<(usize, f64)>> {
        let mut scored = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| Ok((i, self.score(sample, &c.text, provider)?)))
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(scored)
    }

    /// Rows for each group: positive first, then negatives.
    pub fn prepare(
        &self,
        groups: &[AugmentedGroup],
        provider: &dyn EmbeddingProvider,
    ) -> Result<Vec<Vec<Array2<T>>>> {
        groups
            .iter()
            .map(|g| {
                g.validate()?;
                let sample = g.sample();
                std::iter::once(g.positive.as_str())
                    .chain(g.negative_texts())
                    .map(|c| self.input(&sample, c, provider))
                    .collect()
            })
            .collect()
    }

    /// Fraction of (positive, negative) pairs ordered correctly.
    pub fn pairwise_accuracy(&self, prepared: &[Vec<Array2<T>>]) -> f64 {
        let (mut hit, mut total) = (0usize, 0usize);
        for g in prepared {
            let pos = self.logit(&g[0]);
            for neg in &g[1..] {
                total += 1;
                if pos > self.logit(neg) {
                    hit += 1;
                }
            }
        }
        hit as f64 / total.max(1) as f64
    }
}

/// Trains RankNet on every (positive, negative) pair of every group.
pub fn ranknet_train<T: Scalar>(
    groups: &[AugmentedGroup],
    config: &RankNetConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<RankNet<T>> {
    if groups.is_empty() {
        return Err(Error::Contract("training needs at least one group".into()));
    }
    let mut model = RankNet::<T>::init(config.clone())?;
    let prepared = model.prepare(groups, provider)?;
    let mut adam = Adam::new(config.learning_rate, model.params.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5241_4E4B);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut consumed = 0;
    for _ in 0..config.epochs.max(1) {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_groups) {
            let mut grads = model.params.zeros_like();
            let mut pairs = 0usize;
            for &gi in batch {
                consumed += 1;
                let g = &prepared[gi];
                let pos = model.logit_cached(&g[0]);
                let lp = pos.logit.to_f64_lossy();
                for neg_x in &g[1..] {
                    let neg = model.logit_cached(neg_x);
                    let margin = lp - neg.logit.to_f64_lossy();
                    let loss = softplus(-margin);
                    if !loss.is_finite() {
                        return Err(Error::NonFiniteLoss {
                            group_id: groups[gi].id.clone(),
                            step: consumed,
                            loss,
                        });
                    }
                    // d softplus(-m) / dm = -sigmoid(-m)
                    let d = T::of(sigmoid(-margin));
                    model.backward(&pos, -d, &mut grads);
                    model.backward(&neg, d, &mut grads);
                    pairs += 1;
                }
            }
            let mut avg = grads.zeros_like();
            avg.add_scaled(&grads, T::one() / T::of(pairs.max(1) as f64));
            adam.update(&mut model.params, &avg);
        }
    }
    Ok(model)
}
