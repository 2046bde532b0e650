//! Non-learned ranking baselines: a seeded random permutation and asking the
//! LLM to judge its own candidates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::CandidateComment;
use crate::error::{Error, Result};
use crate::llm::{cached_complete, complete, Backend, CompletionRequest, ResponseCache};
use crate::prompt::{build_self_rank_prompt, expert_name};
use crate::sample::CommentUpdateSample;

/// Uniform random ordering of `n` candidates (indices), fixed per seed.
pub fn random_rank(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Parses a `{"top-1": "Expert i", ...}` reply into zero-based candidate
/// indices, best first.
pub fn parse_self_rank_reply(raw: &str, k: usize) -> Result<Vec<usize>> {
    let fail = |reason: String| Error::RankParse {
        reason,
        raw: raw.to_string(),
    };
    let (start, end) = match (raw.find('{'), raw.rfind('}')) {
        (Some(s), Some(e)) if s < e => (s, e),
        _ => return Err(fail("no JSON object in reply".into())),
    };
    let value: serde_json::Value =
        serde_json::from_str(&raw[start..=end]).map_err(|e| fail(format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| fail("reply is not an object".into()))?;
    let mut order = Vec::with_capacity(k);
    let mut seen = vec![false; k];
    for rank in 1..=k {
        let key = format!("top-{rank}");
        let name = obj
            .get(&key)
            .and_then(|v| v.as_str())
            .ok_or_else(|| fail(format!("missing key `{key}`")))?
            .trim();
        let idx = (1..=k)
            .find(|&i| expert_name(i) == name)
            .ok_or_else(|| fail(format!("`{key}` names unknown expert `{name}`")))?
            - 1;
        if std::mem::replace(&mut seen[idx], true) {
            return Err(fail(format!("`{name}` ranked twice")));
        }
        order.push(idx);
    }
    if obj.len() != k {
        return Err(fail(format!("expected {k} keys, found {}", obj.len())));
    }
    Ok(order)
}

/// Asks `model_id` to rank the candidates; returns indices best first.
pub fn self_rank(
    sample: &CommentUpdateSample,
    candidates: &[CandidateComment],
    backend: &dyn Backend,
    model_id: &str,
    temperature: f64,
    cache: Option<&ResponseCache>,
) -> Result<Vec<usize>> {
    let prompt = build_self_rank_prompt(&sample.without_ground_truth(), candidates)?;
    let req = CompletionRequest::new(model_id, prompt, temperature);
    let raw = match cache {
        Some(c) => cached_complete(&req, backend, c)?,
        None => complete(&req, backend)?,
    };
    parse_self_rank_reply(&raw, candidates.len())
}
