//! The CupRank dual encoder: per-branch input projection, bidirectional
//! cross-attention with residuals, a transformer encoder per branch, masked
//! max-pooling, a projection head and cosine scoring.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentedGroup, CandidateComment};
use crate::error::{Error, Result};
use crate::flatten::{
    embed_edit_tokens, flatten_code, flatten_comment, FlattenedPair, EDIT_FEATURES,
};
use crate::sample::CommentUpdateSample;
use crate::scalar::Scalar;
use crate::tokenize::EmbeddingProvider;

use super::layers::{
    masked_max_pool, max_pool_backward, Attention, AttentionCache, EncoderCache, EncoderLayer,
    Linear, Params, Visitor, VisitorMut,
};
use super::loss::{listwise_loss_generic, listwise_loss_grad};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerConfig {
    /// Width of an embedded edit token: provider dimension + 4.
    pub embed_dim: usize,
    pub model_dim: usize,
    pub attention_heads: usize,
    pub encoder_layers: usize,
    pub ffn_dim: usize,
    pub proj_dim: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_groups: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Groups consumed between checkpoints.
    pub checkpoint_every: usize,
    pub dropout: f64,
    pub epochs: usize,
}

impl Default for RankerConfig {
    fn default() -> Self {
        Self {
            embed_dim: 768 + EDIT_FEATURES,
            model_dim: 768,
            attention_heads: 4,
            encoder_layers: 2,
            ffn_dim: 1024,
            proj_dim: 256,
            lambda: 0.07,
            learning_rate: 1e-4,
            batch_groups: 8,
            max_seq_len: 512,
            seed: 42,
            checkpoint_every: 5000,
            dropout: 0.1,
            epochs: 3,
        }
    }
}

impl RankerConfig {
    pub fn for_provider_dim(dimension: usize) -> Self {
        Self {
            embed_dim: dimension + EDIT_FEATURES,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.encoder_layers != 2 {
            return fail(format!(
                "encoder_layers must be 2, got {}",
                self.encoder_layers
            ));
        }
        if self.attention_heads == 0 || !self.model_dim.is_multiple_of(self.attention_heads) {
            return fail(format!(
                "model_dim {} is not divisible by attention_heads {}",
                self.model_dim, self.attention_heads
            ));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("proj_dim", self.proj_dim),
            ("batch_groups", self.batch_groups),
            ("max_seq_len", self.max_seq_len),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return fail(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        Ok(())
    }
}

/// One side of the dual encoder. The cross-attention here takes its queries
/// from this branch and keys/values from the other.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch<T> {
    pub input: Linear<T>,
    pub cross: Attention<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub proj: Linear<T>,
}

impl<T: Scalar> Branch<T> {
    fn init(c: &RankerConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            input: Linear::init(c.embed_dim, c.model_dim, rng),
            cross: Attention::init(c.model_dim, c.attention_heads, rng),
            layers: (0..c.encoder_layers)
                .map(|_| EncoderLayer::init(c.model_dim, c.attention_heads, c.ffn_dim, rng))
                .collect(),
            proj: Linear::init(c.model_dim, c.proj_dim, rng),
        }
    }
}

impl<T: Scalar> Params<T> for Branch<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        self.input.visit(&format!("{prefix}.input"), f);
        self.cross.visit(&format!("{prefix}.cross"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.encoder.{i}"), f);
        }
        self.proj.visit(&format!("{prefix}.proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        self.input.visit_mut(&format!("{prefix}.input"), f);
        self.cross.visit_mut(&format!("{prefix}.cross"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.encoder.{i}"), f);
        }
        self.proj.visit_mut(&format!("{prefix}.proj"), f);
    }
}

/// All trainable weights: `code` is branch A, `comment` is branch B.
#[derive(Debug, Clone, PartialEq)]
pub struct RankerParams<T> {
    pub code: Branch<T>,
    pub comment: Branch<T>,
}

impl<T: Scalar> Params<T> for RankerParams<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        let p = if prefix.is_empty() {
            String::new()
        } else {
            format!("{prefix}.")
        };
        self.code.visit(&format!("{p}code"), f);
        self.comment.visit(&format!("{p}comment"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        let p = if prefix.is_empty() {
            String::new()
        } else {
            format!("{prefix}.")
        };
        self.code.visit_mut(&format!("{p}code"), f);
        self.comment.visit_mut(&format!("{p}comment"), f);
    }
}

/// Embedded code-change and comment-change sequences. Rows past `*_len`
/// are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct PairInput<T> {
    pub code: Array2<T>,
    pub code_len: usize,
    pub comment: Array2<T>,
    pub comment_len: usize,
}

impl<T: Scalar> PairInput<T> {
    pub fn new(code: Array2<T>, comment: Array2<T>) -> Self {
        Self {
            code_len: code.nrows(),
            comment_len: comment.nrows(),
            code,
            comment,
        }
    }

    pub fn embed(pair: &FlattenedPair, provider: &dyn EmbeddingProvider) -> Result<Self> {
        Ok(Self::new(
            embed_edit_tokens(&pair.code_change, provider)?,
            embed_edit_tokens(&pair.comment_change, provider)?,
        ))
    }

    /// Appends rows of `value` after the valid part of each sequence.
    pub fn padded(&self, code_pad: usize, comment_pad: usize, value: T) -> Self {
        let pad = |m: &Array2<T>, n: usize| {
            let extra = Array2::from_elem((n, m.ncols()), value);
            ndarray::concatenate(Axis(0), &[m.view(), extra.view()]).expect("same width")
        };
        Self {
            code: pad(&self.code, code_pad),
            code_len: self.code_len,
            comment: pad(&self.comment, comment_pad),
            comment_len: self.comment_len,
        }
    }
}

/// A training group ready for the model: index 0 is the positive.
#[derive(Debug, Clone)]
pub struct PreparedGroup<T> {
    pub id: String,
    pub candidates: Vec<PairInput<T>>,
}

struct BranchCache<T> {
    input: Array2<T>,
    cross: AttentionCache<T>,
    layers: Vec<EncoderCache<T>>,
    rows: usize,
    argmax: Vec<usize>,
    pooled: Array1<T>,
}

pub struct PairCache<T> {
    code: BranchCache<T>,
    comment: BranchCache<T>,
}

/// Cosine and its gradients with respect to both arguments.
fn cosine_with_grad<T: Scalar>(a: &Array1<T>, b: &Array1<T>) -> Result<(T, Array1<T>, Array1<T>)> {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == T::zero() || nb == T::zero() || !na.is_finite() || !nb.is_finite() {
        return Err(Error::NumericDegeneracy(format!(
            "projection vector norms {na} and {nb}; cosine undefined"
        )));
    }
    let s = a.dot(b) / (na * nb);
    let da = b / (na * nb) - &(a * (s / (na * na)));
    let db = a / (na * nb) - &(b * (s / (nb * nb)));
    Ok((s, da, db))
}

pub fn cosine_score<T: Scalar>(a: &Array1<T>, b: &Array1<T>) -> Result<T> {
    Ok(cosine_with_grad(a, b)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankScore {
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub candidate: CandidateComment,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CupRank<T> {
    pub config: RankerConfig,
    pub params: RankerParams<T>,
}

impl<T: Scalar> CupRank<T> {
    /// Xavier-initialized model seeded by `config.seed`.
    pub fn init(config: RankerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let code = Branch::init(&config, &mut rng);
        let comment = Branch::init(&config, &mut rng);
        Ok(Self {
            config,
            params: RankerParams { code, comment },
        })
    }

    fn check_input(&self, input: &PairInput<T>) -> Result<()> {
        let e = self.config.embed_dim;
        for (name, m, len) in [
            ("code", &input.code, input.code_len),
            ("comment", &input.comment, input.comment_len),
        ] {
            if m.ncols() != e {
                return Err(Error::Contract(format!(
                    "{name} sequence has width {}, model expects {e}",
                    m.ncols()
                )));
            }
            if len == 0 || len > m.nrows() {
                return Err(Error::Contract(format!(
                    "{name} sequence valid length {len} outside 1..={}",
                    m.nrows()
                )));
            }
        }
        Ok(())
    }

    fn run_branch(
        &self,
        branch: &Branch<T>,
        x: Array2<T>,
        cross: (Array2<T>, AttentionCache<T>),
        len: usize,
        mut rng: Option<&mut ChaCha8Rng>,
        input: Array2<T>,
    ) -> (Array1<T>, BranchCache<T>) {
        let (c, cross_cache) = cross;
        let mut h = x + &c;
        let mut layers = Vec::with_capacity(branch.layers.len());
        for layer in &branch.layers {
            let (out, cache) = layer.forward(&h, len, self.config.dropout, rng.as_deref_mut());
            h = out;
            layers.push(cache);
        }
        let (pooled, argmax) = masked_max_pool(&h, len);
        let z = branch
            .proj
            .forward(&pooled.view().insert_axis(Axis(0)).to_owned())
            .row(0)
            .to_owned();
        let cache = BranchCache {
            input,
            cross: cross_cache,
            layers,
            rows: h.nrows(),
            argmax,
            pooled,
        };
        (z, cache)
    }

    /// Full forward pass. `rng` enables dropout (training mode).
    pub fn forward(
        &self,
        input: &PairInput<T>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array1<T>, Array1<T>, PairCache<T>)> {
        self.check_input(input)?;
        let p = &self.params;
        let a0 = p.code.input.forward(&input.code);
        let b0 = p.comment.input.forward(&input.comment);
        let ca = p.code.cross.forward(&a0, &b0, input.comment_len);
        let cb = p.comment.cross.forward(&b0, &a0, input.code_len);
        let (za, code) = self.run_branch(
            &p.code,
            a0,
            ca,
            input.code_len,
            rng.as_deref_mut(),
            input.code.clone(),
        );
        let (zb, comment) = self.run_branch(
            &p.comment,
            b0,
            cb,
            input.comment_len,
            rng,
            input.comment.clone(),
        );
        Ok((za, zb, PairCache { code, comment }))
    }

    /// Accumulates parameter gradients for upstream `dza`, `dzb`.
    pub fn backward(
        &self,
        cache: &PairCache<T>,
        dza: &Array1<T>,
        dzb: &Array1<T>,
        grads: &mut RankerParams<T>,
    ) {
        let p = &self.params;
        let branch_back = |branch: &Branch<T>,
                           c: &BranchCache<T>,
                           dz: &Array1<T>,
                           g: &mut Branch<T>| {
            let pooled = c.pooled.view().insert_axis(Axis(0)).to_owned();
            let dz = dz.view().insert_axis(Axis(0)).to_owned();
            let dv = branch
                .proj
                .backward(&pooled, &dz, &mut g.proj)
                .row(0)
                .to_owned();
            let mut dh = max_pool_backward(&dv, &c.argmax, c.rows);
            for ((layer, lc), lg) in branch.layers.iter().zip(&c.layers).zip(&mut g.layers).rev() {
                dh = layer.backward(lc, &dh, lg);
            }
            dh
        };
        let dat = branch_back(&p.code, &cache.code, dza, &mut grads.code);
        let dbt = branch_back(&p.comment, &cache.comment, dzb, &mut grads.comment);
        let (dq_a, dkv_b) = p
            .code
            .cross
            .backward(&cache.code.cross, &dat, &mut grads.code.cross);
        let (dq_b, dkv_a) =
            p.comment
                .cross
                .backward(&cache.comment.cross, &dbt, &mut grads.comment.cross);
        let da0 = dat + dq_a + dkv_a;
        let db0 = dbt + dq_b + dkv_b;
        p.code
            .input
            .backward(&cache.code.input, &da0, &mut grads.code.input);
        p.comment
            .input
            .backward(&cache.comment.input, &db0, &mut grads.comment.input);
    }

    pub fn encode(&self, input: &PairInput<T>) -> Result<(Array1<T>, Array1<T>)> {
        let (za, zb, _) = self.forward(input, None)?;
        Ok((za, zb))
    }

    /// Embeds `pair`, truncating each side to `max_seq_len`, and encodes it.
    pub fn encode_pair(
        &self,
        pair: &FlattenedPair,
        provider: &dyn EmbeddingProvider,
    ) -> Result<(Array1<T>, Array1<T>)> {
        let n = self.config.max_seq_len;
        let pair = FlattenedPair {
            code_change: pair.code_change.iter().take(n).cloned().collect(),
            comment_change: pair.comment_change.iter().take(n).cloned().collect(),
        };
        self.encode(&PairInput::embed(&pair, provider)?)
    }

    pub fn score_input(&self, input: &PairInput<T>) -> Result<T> {
        let (za, zb) = self.encode(input)?;
        cosine_score(&za, &zb)
    }

    pub fn score(
        &self,
        pair: &FlattenedPair,
        provider: &dyn EmbeddingProvider,
    ) -> Result<RankScore> {
        let (za, zb) = self.encode_pair(pair, provider)?;
        Ok(RankScore {
            value: cosine_score(&za, &zb)?.to_f64_lossy(),
        })
    }

    /// Listwise loss of a group in inference mode.
    pub fn group_loss(&self, group: &PreparedGroup<T>) -> Result<T> {
        let scores = group
            .candidates
            .iter()
            .map(|c| self.score_input(c))
            .collect::<Result<Vec<_>>>()?;
        listwise_loss_generic(&scores, T::of(self.config.lambda))
    }

    /// Listwise loss of a group; adds its parameter gradient to `grads`.
    pub fn group_loss_grad(
        &self,
        group: &PreparedGroup<T>,
        grads: &mut RankerParams<T>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<T> {
        let mut scores = Vec::with_capacity(group.candidates.len());
        let mut caches = Vec::with_capacity(group.candidates.len());
        for c in &group.candidates {
            let (za, zb, cache) = self.forward(c, rng.as_deref_mut())?;
            let (s, da, db) = cosine_with_grad(&za, &zb)?;
            scores.push(s);
            caches.push((cache, da, db));
        }
        let lambda = T::of(self.config.lambda);
        let loss = listwise_loss_generic(&scores, lambda)?;
        let dscores = listwise_loss_grad(&scores, lambda);
        for ((cache, da, db), g) in caches.iter().zip(dscores) {
            self.backward(cache, &(da * g), &(db * g), grads);
        }
        Ok(loss)
    }

    pub fn prepare_input(
        &self,
        sample: &CommentUpdateSample,
        candidate: &str,
        provider: &dyn EmbeddingProvider,
    ) -> Result<PairInput<T>> {
        let n = self.config.max_seq_len;
        let code = flatten_code(sample, provider, n)?;
        let comment = flatten_comment(sample, candidate, provider, n)?;
        PairInput::embed(
            &FlattenedPair {
                code_change: code,
                comment_change: comment,
            },
            provider,
        )
    }

    pub fn prepare_group(
        &self,
        group: &AugmentedGroup,
        provider: &dyn EmbeddingProvider,
    ) -> Result<PreparedGroup<T>> {
        group.validate()?;
        let sample = group.sample();
        let candidates = std::iter::once(group.positive.as_str())
            .chain(group.negative_texts())
            .map(|c| self.prepare_input(&sample, c, provider))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedGroup {
            id: group.id.clone(),
            candidates,
        })
    }

    /// Candidates by descending score; ties keep input order.
    pub fn rank_candidates(
        &self,
        sample: &CommentUpdateSample,
        candidates: &[CandidateComment],
        provider: &dyn EmbeddingProvider,
    ) -> Result<Vec<ScoredCandidate>> {
        let mut scored = candidates
            .iter()
            .map(|c| {
                let input = self.prepare_input(sample, &c.text, provider)?;
                Ok(ScoredCandidate {
                    candidate: c.clone(),
                    score: self.score_input(&input)?.to_f64_lossy(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(scored)
    }
}
