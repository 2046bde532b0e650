//! Training-set augmentation: collect LLM candidates under several prompting
//! strategies, label them against the ground truth and group one positive
//! with its negatives.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{
    cached_complete, complete, Backend, CompletionRequest, ResponseCache, DEFAULT_MAX_TOKENS,
};
use crate::metrics::accuracy;
use crate::normalize::protocol_tokens;
use crate::prompt::{build_update_prompt, normalize_llm_response, PromptStrategy};
use crate::retrieve::DemonstrationPool;
use crate::sample::CommentUpdateSample;
use crate::tokenize::EmbeddingProvider;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    pub shots: usize,
    pub temperature: f64,
}

impl Provenance {
    pub fn new(model_id: impl Into<String>, shots: usize, temperature: f64) -> Self {
        Self {
            model_id: model_id.into(),
            shots,
            temperature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateComment {
    pub text: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

impl CandidateComment {
    pub fn new(text: impl Into<String>, provenance: Provenance) -> Self {
        Self {
            text: text.into(),
            provenance,
            label: None,
        }
    }
}

/// Positive iff the candidate matches the ground truth under the
/// token-matching protocol.
pub fn label_candidate(candidate: &CandidateComment, ground_truth: &str) -> Label {
    if accuracy(&candidate.text, ground_truth) == 1 {
        Label::Positive
    } else {
        Label::Negative
    }
}

/// Keeps the first candidate of every protocol-equivalence class.
pub fn dedup_candidates(candidates: Vec<CandidateComment>) -> Vec<CandidateComment> {
    let mut seen = HashSet::new();
    candidates
        .into_iter()
        .filter(|c| seen.insert(protocol_tokens(&c.text)))
        .collect()
}

/// Calls the backend once per strategy for a sample, with demonstrations
/// retrieved from the pool (the sample itself excluded).
pub struct CandidateGenerator<'a> {
    pub backend: &'a dyn Backend,
    pub cache: Option<&'a ResponseCache>,
    pub pool: &'a DemonstrationPool,
    pub provider: &'a dyn EmbeddingProvider,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl<'a> CandidateGenerator<'a> {
    pub fn new(
        backend: &'a dyn Backend,
        cache: Option<&'a ResponseCache>,
        pool: &'a DemonstrationPool,
        provider: &'a dyn EmbeddingProvider,
    ) -> Self {
        Self {
            backend,
            cache,
            pool,
            provider,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: None,
        }
    }

    pub fn prompt_for(
        &self,
        sample: &CommentUpdateSample,
        strategy: &PromptStrategy,
    ) -> Result<String> {
        let query = sample.without_ground_truth();
        let demos = self
            .pool
            .demonstrations(self.provider, &query, strategy.shots)?;
        build_update_prompt(&query, &demos, strategy)
    }

    fn one(
        &self,
        sample: &CommentUpdateSample,
        strategy: &PromptStrategy,
    ) -> Result<CandidateComment> {
        strategy.validate()?;
        let prompt = self.prompt_for(sample, strategy)?;
        let req = CompletionRequest {
            model_id: strategy.model_id.clone(),
            prompt,
            temperature: strategy.temperature,
            max_tokens: self.max_tokens,
            seed: self.seed,
        };
        let raw = match self.cache {
            Some(cache) => cached_complete(&req, self.backend, cache)?,
            None => complete(&req, self.backend)?,
        };
        let text = normalize_llm_response(&raw)?;
        Ok(CandidateComment::new(
            text,
            Provenance::new(&strategy.model_id, strategy.shots, strategy.temperature),
        ))
    }

    /// One candidate per successful strategy, deduplicated. Fails only when
    /// every strategy fails.
    pub fn generate(
        &self,
        sample: &CommentUpdateSample,
        strategies: &[PromptStrategy],
    ) -> Result<Vec<CandidateComment>> {
        let mut out = Vec::new();
        let mut errors = Vec::new();
        for s in strategies {
            match self.one(sample, s) {
                Ok(c) => out.push(c),
                Err(e) => {
                    log::warn!(
                        "sample {}: strategy {}-shot/{} failed: {e}",
                        sample.id,
                        s.shots,
                        s.model_id
                    );
                    errors.push(format!("{}-shot/{}: {e}", s.shots, s.model_id));
                }
            }
        }
        if out.is_empty() && !strategies.is_empty() {
            return Err(Error::AllStrategiesFailed {
                sample_id: sample.id.clone(),
                attempted: strategies.len(),
                errors,
            });
        }
        Ok(dedup_candidates(out))
    }
}

pub fn generate_candidates(
    sample: &CommentUpdateSample,
    strategies: &[PromptStrategy],
    backend: &dyn Backend,
    cache: Option<&ResponseCache>,
    pool: &DemonstrationPool,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<CandidateComment>> {
    CandidateGenerator::new(backend, cache, pool, provider).generate(sample, strategies)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupNegative {
    pub text: String,
    pub model_id: String,
    pub shots: usize,
    pub temperature: f64,
}

impl From<&CandidateComment> for GroupNegative {
    fn from(c: &CandidateComment) -> Self {
        Self {
            text: c.text.clone(),
            model_id: c.provenance.model_id.clone(),
            shots: c.provenance.shots,
            temperature: c.provenance.temperature,
        }
    }
}

/// One positive (the ground truth) and at least one negative candidate for
/// the same context. Serializes to one group-file record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedGroup {
    pub id: String,
    pub old_code: String,
    pub old_comment: String,
    pub new_code: String,
    pub positive: String,
    pub negatives: Vec<GroupNegative>,
}

impl AugmentedGroup {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::Validation {
            id: self.id.clone(),
            field: "negatives".into(),
            message: msg,
        };
        if self.negatives.is_empty() {
            return Err(bad("group has no negatives".into()));
        }
        let positive = protocol_tokens(&self.positive);
        let mut seen = HashSet::new();
        for n in &self.negatives {
            let toks = protocol_tokens(&n.text);
            if toks == positive {
                return Err(bad(format!("negative `{}` matches the positive", n.text)));
            }
            if !seen.insert(toks) {
                return Err(bad(format!("duplicate negative `{}`", n.text)));
            }
        }
        Ok(())
    }

    /// The group context as a sample, with the positive as ground truth.
    pub fn sample(&self) -> CommentUpdateSample {
        CommentUpdateSample::new(
            &self.id,
            &self.old_code,
            &self.old_comment,
            &self.new_code,
            Some(self.positive.clone()),
        )
    }

    pub fn negative_texts(&self) -> impl Iterator<Item = &str> {
        self.negatives.iter().map(|n| n.text.as_str())
    }
}

/// Labels `candidates` and forms a group; `None` when no negative survives.
pub fn build_group(
    sample: &CommentUpdateSample,
    candidates: &[CandidateComment],
) -> Result<Option<AugmentedGroup>> {
    let gt = sample
        .new_comment
        .as_deref()
        .ok_or_else(|| Error::Validation {
            id: sample.id.clone(),
            field: "new_comment".into(),
            message: "ground truth required to build a group".into(),
        })?;
    let labeled: Vec<CandidateComment> = candidates
        .iter()
        .cloned()
        .map(|mut c| {
            c.label = Some(label_candidate(&c, gt));
            c
        })
        .filter(|c| c.label == Some(Label::Negative))
        .collect();
    let negatives: Vec<GroupNegative> = dedup_candidates(labeled)
        .iter()
        .map(GroupNegative::from)
        .collect();
    if negatives.is_empty() {
        return Ok(None);
    }
    Ok(Some(AugmentedGroup {
        id: sample.id.clone(),
        old_code: sample.old_code.clone(),
        old_comment: sample.old_comment.clone(),
        new_code: sample.new_code.clone(),
        positive: gt.to_string(),
        negatives,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSummary {
    pub samples_in: usize,
    pub groups_out: usize,
    pub discarded: usize,
    pub discarded_ids: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct AugmentOutput {
    pub groups: Vec<AugmentedGroup>,
    pub summary: AugmentSummary,
}

/// The cross product of models and (shots, temperature) templates.
pub fn expand_strategies(
    models: &[String],
    templates: &[(usize, f64)],
) -> Result<Vec<PromptStrategy>> {
    models
        .iter()
        .flat_map(|m| {
            templates
                .iter()
                .map(move |&(k, t)| PromptStrategy::new(m.as_str(), k, t))
        })
        .collect()
}

/// Runs generation and grouping over a dataset, at most `concurrency`
/// samples at a time. Output order follows input order.
pub fn augment_dataset(
    dataset: &[CommentUpdateSample],
    strategies: &[PromptStrategy],
    generator: &CandidateGenerator<'_>,
    concurrency: usize,
) -> Result<AugmentOutput> {
    if strategies.is_empty() && !dataset.is_empty() {
        return Err(Error::Contract("no prompting strategies configured".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| Error::Pipeline(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<Option<AugmentedGroup>>> = pool.install(|| {
        dataset
            .par_iter()
            .map(|s| {
                let candidates = generator.generate(s, strategies)?;
                build_group(s, &candidates)
            })
            .collect()
    });
    let mut groups = Vec::new();
    let mut discarded_ids = Vec::new();
    for (s, r) in dataset.iter().zip(results) {
        match r? {
            Some(g) => groups.push(g),
            None => discarded_ids.push(s.id.clone()),
        }
    }
    let summary = AugmentSummary {
        samples_in: dataset.len(),
        groups_out: groups.len(),
        discarded: discarded_ids.len(),
        discarded_ids,
    };
    log::info!(
        "augmentation: {} samples in, {} groups out, {} discarded",
        summary.samples_in,
        summary.groups_out,
        summary.discarded
    );
    Ok(AugmentOutput { groups, summary })
}

pub fn write_groups(path: &Path, groups: &[AugmentedGroup]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for g in groups {
        let line = serde_json::to_string(g).expect("group serializes");
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Reads a group file, checking every group's invariants.
pub fn read_groups(path: &Path) -> Result<Vec<AugmentedGroup>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ids = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let g: AugmentedGroup = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        g.validate()?;
        if !ids.insert(g.id.clone()) {
            return Err(Error::Validation {
                id: g.id,
                field: "id".into(),
                message: "duplicate group id".into(),
            });
        }
        out.push(g);
    }
    Ok(out)
}
