//! Deterministic synthetic fixtures.
//!
//! Every sample is a small getter whose returned field changes. The ground
//! truth comment names the new field and carries [`MARKER`]; distractors
//! name the right or wrong field but never the marker, so a ranker that
//! notices the marker separates them perfectly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{AugmentedGroup, GroupNegative};
use crate::llm::{MockFixture, MockRule};
use crate::normalize::protocol_tokens;
use crate::sample::CommentUpdateSample;

pub const MARKER: &str = "MARKER";

const FIELDS: &[&str] = &[
    "name", "size", "count", "index", "value", "owner", "parent", "label", "width", "height",
    "offset", "limit", "total", "weight", "score", "title", "path", "status", "color", "depth",
];
const ADJECTIVES: &[&str] = &[
    "current", "cached", "default", "stored", "latest", "original", "maximum", "visible",
];
const OWNERS: &[&str] = &[
    "node", "buffer", "request", "widget", "account", "record", "session", "entry",
];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.gen_range(0..xs.len())]
}

/// One sample plus the ingredients used to build distractors.
struct Draw {
    sample: CommentUpdateSample,
    adjective: &'static str,
    owner: &'static str,
    old_field: &'static str,
    new_field: &'static str,
}

fn draw(i: usize, rng: &mut ChaCha8Rng) -> Draw {
    let old_field = pick(rng, FIELDS);
    let new_field = loop {
        let f = pick(rng, FIELDS);
        if f != old_field {
            break f;
        }
    };
    let adjective = pick(rng, ADJECTIVES);
    let owner = pick(rng, OWNERS);
    let method = format!("get{}{i}", capitalize(owner));
    let old_code = format!("public int {method}() {{\n    return this.{old_field};\n}}");
    let new_code = format!("public int {method}() {{\n    return this.{new_field};\n}}");
    let old_comment = format!("Returns the {adjective} {old_field} of this {owner}.");
    let gt = format!("Returns the {adjective} {new_field} of this {owner} {MARKER}.");
    Draw {
        sample: CommentUpdateSample::new(
            format!("syn-{i:04}"),
            old_code,
            old_comment,
            new_code,
            Some(gt),
        ),
        adjective,
        owner,
        old_field,
        new_field,
    }
}

fn distractor_pool(d: &Draw, rng: &mut ChaCha8Rng) -> Vec<String> {
    let other = loop {
        let f = pick(rng, FIELDS);
        if f != d.old_field && f != d.new_field {
            break f;
        }
    };
    let adj2 = loop {
        let a = pick(rng, ADJECTIVES);
        if a != d.adjective {
            break a;
        }
    };
    let (adj, owner, new) = (d.adjective, d.owner, d.new_field);
    let mut pool = vec![
        format!("Returns the {adj} {new} of this {owner}."),
        d.sample.old_comment.clone(),
        format!("Returns the {adj} {other} of this {owner}."),
        format!("Returns the {adj2} {new} of this {owner}."),
        format!("Gets the {adj} {new} of this {owner}."),
        format!("Returns the {new} of this {owner}."),
        format!("Returns the {adj} {new} {other} of this {owner}."),
    ];
    pool.shuffle(rng);
    pool
}

/// `n` samples with ground truth and `negatives` distinct distractors each.
pub fn separable_samples(
    n: usize,
    negatives: usize,
    seed: u64,
) -> Vec<(CommentUpdateSample, Vec<String>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let d = draw(i, &mut rng);
            let gt = protocol_tokens(d.sample.new_comment.as_deref().unwrap_or_default());
            let mut seen = vec![gt];
            let mut out = Vec::new();
            for c in distractor_pool(&d, &mut rng) {
                let toks = protocol_tokens(&c);
                if out.len() < negatives && !seen.contains(&toks) {
                    seen.push(toks);
                    out.push(c);
                }
            }
            (d.sample, out)
        })
        .collect()
}

/// Training groups: ground truth as positive, distractors as negatives.
pub fn separable_groups(n: usize, negatives: usize, seed: u64) -> Vec<AugmentedGroup> {
    separable_samples(n, negatives, seed)
        .into_iter()
        .map(|(s, negs)| AugmentedGroup {
            id: s.id.clone(),
            old_code: s.old_code.clone(),
            old_comment: s.old_comment.clone(),
            new_code: s.new_code.clone(),
            positive: s.new_comment.clone().unwrap_or_default(),
            negatives: negs
                .into_iter()
                .map(|text| GroupNegative {
                    text,
                    model_id: "synthetic".into(),
                    shots: 0,
                    temperature: 0.0,
                })
                .collect(),
        })
        .collect()
}

/// Mock backend rules for `samples`: for each sample exactly one of `shots`
/// answers with the ground truth and the others with distinct distractors.
/// Keyed by shot count and the sample's unique method body.
pub fn one_correct_fixture(
    samples: &[(CommentUpdateSample, Vec<String>)],
    model_id: &str,
    shots: &[usize],
    seed: u64,
) -> MockFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rules = Vec::new();
    for (sample, negatives) in samples {
        let correct = rng.gen_range(0..shots.len());
        let mut negs = negatives.iter();
        for (j, &k) in shots.iter().enumerate() {
            let response = if j == correct {
                sample.new_comment.clone().unwrap_or_default()
            } else {
                negs.next()
                    .cloned()
                    .unwrap_or_else(|| sample.old_comment.clone())
            };
            rules.push(MockRule {
                model_id: Some(model_id.to_string()),
                prompt: None,
                shots: Some(k),
                query_contains: Some(sample.new_code.clone()),
                response,
            });
        }
    }
    MockFixture {
        models: vec![model_id.to_string()],
        rules,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_are_valid_and_deterministic() {
        let a = separable_groups(30, 3, 7);
        assert_eq!(a, separable_groups(30, 3, 7));
        for g in &a {
            g.validate().unwrap();
            assert_eq!(g.negatives.len(), 3);
            assert!(g.positive.contains(MARKER));
            assert!(g.negative_texts().all(|t| !t.contains(MARKER)));
            g.sample().validate().unwrap();
        }
        let ids: std::collections::HashSet<_> = a.iter().map(|g| &g.id).collect();
        assert_eq!(ids.len(), 30);
    }

    #[test]
    fn fixture_has_one_correct_reply_per_sample() {
        let samples = separable_samples(5, 3, 1);
        let fx = one_correct_fixture(&samples, "m", &[0, 1, 3, 5], 2);
        assert_eq!(fx.rules.len(), 20);
        for (s, _) in &samples {
            let gt = s.new_comment.as_deref().unwrap();
            let hits = fx
                .rules
                .iter()
                .filter(|r| {
                    r.query_contains.as_deref() == Some(s.new_code.as_str()) && r.response == gt
                })
                .count();
            assert_eq!(hits, 1);
        }
    }
}
