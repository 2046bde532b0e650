//! Comment-update quality metrics, corpus reports and the update-type
//! taxonomy.
//!
//! Word-level metrics (Aed, Red, BLEU-4, METEOR, ROUGE-L) split on whitespace
//! after formatting is stripped; Accuracy additionally camel-splits and
//! lowercases.

use std::collections::{HashMap, HashSet};

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flatten::{token_diff, EditOp};
use crate::normalize::{metric_words, protocol_tokens, sub_tokens};
use crate::sample::CommentUpdateSample;
use crate::tokenize::{cosine, sentence_embed, EmbeddingProvider};

/// 1 iff both comments normalize to the same token sequence.
pub fn accuracy(c_up: &str, c_gt: &str) -> u8 {
    u8::from(protocol_tokens(c_up) == protocol_tokens(c_gt))
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word-level edit distance.
pub fn aed(c_up: &str, c_gt: &str) -> usize {
    levenshtein(&metric_words(c_up), &metric_words(c_gt))
}

/// `aed(c_up, c_gt) / aed(c_old, c_gt)`; `None` when the old comment already
/// equals the ground truth word for word.
pub fn red(c_up: &str, c_gt: &str, c_old: &str) -> Option<f64> {
    let denom = aed(c_old, c_gt);
    (denom > 0).then(|| aed(c_up, c_gt) as f64 / denom as f64)
}

fn ngram_counts(words: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU up to 4-grams with brevity penalty; precisions for n > 1 use
/// add-one smoothing.
pub fn bleu4(c_up: &str, c_gt: &str) -> f64 {
    let hyp = metric_words(c_up);
    let reference = metric_words(c_gt);
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let h = ngram_counts(&hyp, n);
        let r = ngram_counts(&reference, n);
        let total: usize = h.values().sum();
        let matched: usize = h
            .iter()
            .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln() / 4.0;
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_sum.exp()
}

/// Extra matching stage for METEOR, run after exact and stem matching.
pub trait SynonymMatcher: Send + Sync {
    fn are_synonyms(&self, a: &str, b: &str) -> bool;
}

#[derive(Default)]
pub struct MeteorOptions<'a> {
    pub synonyms: Option<&'a dyn SynonymMatcher>,
}

pub fn meteor(c_up: &str, c_gt: &str) -> f64 {
    meteor_with(c_up, c_gt, &MeteorOptions::default())
}

/// Unigram METEOR: staged alignment, `F_mean = 10PR / (R + 9P)`, fragmentation
/// penalty `0.5 (chunks / matches)^3`. Matching is case-insensitive.
pub fn meteor_with(c_up: &str, c_gt: &str, opts: &MeteorOptions<'_>) -> f64 {
    let hyp: Vec<String> = metric_words(c_up)
        .iter()
        .map(|w| w.to_lowercase())
        .collect();
    let reference: Vec<String> = metric_words(c_gt)
        .iter()
        .map(|w| w.to_lowercase())
        .collect();
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let stemmer = Stemmer::create(Algorithm::English);
    let hyp_stems: Vec<String> = hyp.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    let ref_stems: Vec<String> = reference
        .iter()
        .map(|w| stemmer.stem(w).into_owned())
        .collect();

    let mut hyp_to_ref: Vec<Option<usize>> = vec![None; hyp.len()];
    let mut ref_used = vec![false; reference.len()];
    let stages: [&dyn Fn(usize, usize) -> bool; 3] = [
        &|i, j| hyp[i] == reference[j],
        &|i, j| hyp_stems[i] == ref_stems[j],
        &|i, j| {
            opts.synonyms
                .is_some_and(|s| s.are_synonyms(&hyp[i], &reference[j]))
        },
    ];
    for stage in stages {
        for i in 0..hyp.len() {
            if hyp_to_ref[i].is_some() {
                continue;
            }
            // Prefer the slot that extends the previous match's chunk.
            let follow = i
                .checked_sub(1)
                .and_then(|p| hyp_to_ref[p])
                .map(|r| r + 1)
                .filter(|&j| j < reference.len() && !ref_used[j] && stage(i, j));
            let pick =
                follow.or_else(|| (0..reference.len()).find(|&j| !ref_used[j] && stage(i, j)));
            if let Some(j) = pick {
                hyp_to_ref[i] = Some(j);
                ref_used[j] = true;
            }
        }
    }

    let alignment: Vec<(usize, usize)> = hyp_to_ref
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.map(|j| (i, j)))
        .collect();
    let matches = alignment.len();
    if matches == 0 {
        return 0.0;
    }
    let chunks = 1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let p = matches as f64 / hyp.len() as f64;
    let r = matches as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    f_mean * (1.0 - penalty)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word-level ROUGE-L F1.
pub fn rouge_l_f1(c_up: &str, c_gt: &str) -> f64 {
    let hyp = metric_words(c_up);
    let reference = metric_words(c_gt);
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&hyp, &reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / hyp.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

pub fn sentence_sim(c_up: &str, c_gt: &str, provider: &dyn EmbeddingProvider) -> Result<f64> {
    let a = sentence_embed(c_up, provider)?;
    let b = sentence_embed(c_gt, provider)?;
    Ok(cosine(&a, &b))
}

/// Whether the comment change can be traced to the code change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceType {
    CodeInd,
    NonCodeInd,
}

/// Granularity of the comment change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CountType {
    SingleToken,
    SingleSubToken,
    MultiTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UpdateType {
    pub source: SourceType,
    pub count: CountType,
}

/// Lowercased alphanumeric sub-tokens of a text, punctuation dropped.
fn word_sub_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .flat_map(sub_tokens)
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .map(|t| t.to_lowercase())
        .collect()
}

fn ops_of<'a>(old: &'a [String], new: &'a [String], op: EditOp) -> Vec<String> {
    token_diff(old, new)
        .into_iter()
        .filter(|t| t.op == op)
        .map(|t| t.token)
        .collect()
}

/// Deleted and inserted tokens of one replaced region.
type Hunk = (Vec<String>, Vec<String>);

/// Sum over replaced regions of max(deleted, inserted).
fn changed_units<S: AsRef<str>>(old: &[S], new: &[S]) -> (usize, Vec<Hunk>) {
    let script = token_diff(old, new);
    let mut hunks = Vec::new();
    let mut cur: Hunk = (Vec::new(), Vec::new());
    for t in script
        .into_iter()
        .chain(std::iter::once(crate::flatten::EditToken::new(
            "",
            EditOp::Equal,
            crate::flatten::Origin::Old,
        )))
    {
        match t.op {
            EditOp::Delete => cur.0.push(t.token),
            EditOp::Insert => cur.1.push(t.token),
            EditOp::Equal => {
                if !cur.0.is_empty() || !cur.1.is_empty() {
                    hunks.push(std::mem::take(&mut cur));
                }
            }
        }
    }
    let total = hunks.iter().map(|(d, i)| d.len().max(i.len())).sum();
    (total, hunks)
}

/// COUNT: number of changed words (≥2 → MultiTokens); a single replaced word
/// that shares sub-tokens with its replacement and differs in exactly one of
/// them → SingleSubToken; otherwise SingleToken.
///
/// SOURCE: CodeInd iff every sub-token inserted into the comment is among the
/// sub-tokens inserted by the code change. A pure deletion is judged the same
/// way against the code's deleted sub-tokens.
pub fn classify_update_type(sample: &CommentUpdateSample) -> Result<UpdateType> {
    let gt = sample.new_comment.as_deref().ok_or_else(|| {
        Error::Contract(format!(
            "sample `{}` has no ground-truth comment",
            sample.id
        ))
    })?;
    if protocol_tokens(&sample.old_comment) == protocol_tokens(gt) {
        return Err(Error::Contract(format!(
            "sample `{}`: comment unchanged after normalization",
            sample.id
        )));
    }

    // Each word is keyed by its lowercased sub-tokens so case-only edits do
    // not count and camel-case structure survives for the sub-token test.
    let key = |w: &String| {
        sub_tokens(w)
            .iter()
            .map(|t| t.to_lowercase())
            .collect::<Vec<_>>()
            .join(SUB_SEP)
    };
    let old_words: Vec<String> = metric_words(&sample.old_comment).iter().map(key).collect();
    let new_words: Vec<String> = metric_words(gt).iter().map(key).collect();
    let (changed, hunks) = changed_units(&old_words, &new_words);
    let count = match (changed, hunks.as_slice()) {
        (1, [(del, ins)]) if del.len() == 1 && ins.len() == 1 => {
            let a: Vec<&str> = del[0].split(SUB_SEP).collect();
            let b: Vec<&str> = ins[0].split(SUB_SEP).collect();
            let shared = lcs_len(&a, &b);
            let (sub_changed, _) = changed_units(&a, &b);
            if shared > 0 && sub_changed == 1 {
                CountType::SingleSubToken
            } else {
                CountType::SingleToken
            }
        }
        (0 | 1, _) => CountType::SingleToken,
        _ => CountType::MultiTokens,
    };

    let old_c = word_sub_tokens(&strip_for_source(&sample.old_comment));
    let new_c = word_sub_tokens(&strip_for_source(gt));
    let old_code = word_sub_tokens(&sample.old_code);
    let new_code = word_sub_tokens(&sample.new_code);
    let comment_ins = ops_of(&old_c, &new_c, EditOp::Insert);
    let (comment_side, code_side) = if comment_ins.is_empty() {
        (
            ops_of(&old_c, &new_c, EditOp::Delete),
            ops_of(&old_code, &new_code, EditOp::Delete),
        )
    } else {
        (comment_ins, ops_of(&old_code, &new_code, EditOp::Insert))
    };
    let code_side: HashSet<String> = code_side.into_iter().collect();
    let source = if !comment_side.is_empty() && comment_side.iter().all(|t| code_side.contains(t)) {
        SourceType::CodeInd
    } else {
        SourceType::NonCodeInd
    };
    Ok(UpdateType { source, count })
}

const SUB_SEP: &str = "\u{1f}";

fn strip_for_source(text: &str) -> String {
    metric_words(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub prediction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub accuracy: u8,
    pub aed: usize,
    pub red: Option<f64>,
    pub bleu4: f64,
    pub meteor: f64,
    pub f1: f64,
    pub sentence_sim: f64,
    pub update_type: UpdateType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAverages {
    pub samples: usize,
    pub accuracy: f64,
    pub aed: f64,
    /// Mean over rows where Red is defined.
    pub red: Option<f64>,
    pub red_defined: usize,
    pub bleu4: f64,
    pub meteor: f64,
    pub f1: f64,
    pub sentence_sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTabCell {
    pub source: SourceType,
    pub count: CountType,
    pub samples: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub averages: MetricAverages,
    pub cross_tab: Vec<CrossTabCell>,
}

pub fn evaluate_row(
    id: &str,
    prediction: &str,
    gold: &CommentUpdateSample,
    provider: &dyn EmbeddingProvider,
) -> Result<MetricRow> {
    let gt = gold
        .new_comment
        .as_deref()
        .ok_or_else(|| Error::Contract(format!("gold sample `{}` has no new comment", gold.id)))?;
    Ok(MetricRow {
        id: id.to_string(),
        accuracy: accuracy(prediction, gt),
        aed: aed(prediction, gt),
        red: red(prediction, gt, &gold.old_comment),
        bleu4: bleu4(prediction, gt),
        meteor: meteor(prediction, gt),
        f1: rouge_l_f1(prediction, gt),
        sentence_sim: sentence_sim(prediction, gt, provider)?,
        update_type: classify_update_type(gold)?,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn summarize(rows: Vec<MetricRow>) -> MetricReport {
    let reds: Vec<f64> = rows.iter().filter_map(|r| r.red).collect();
    let averages = MetricAverages {
        samples: rows.len(),
        accuracy: mean(rows.iter().map(|r| f64::from(r.accuracy))),
        aed: mean(rows.iter().map(|r| r.aed as f64)),
        red: (!reds.is_empty()).then(|| mean(reds.iter().copied())),
        red_defined: reds.len(),
        bleu4: mean(rows.iter().map(|r| r.bleu4)),
        meteor: mean(rows.iter().map(|r| r.meteor)),
        f1: mean(rows.iter().map(|r| r.f1)),
        sentence_sim: mean(rows.iter().map(|r| r.sentence_sim)),
    };
    let mut cross_tab = Vec::new();
    for source in [SourceType::CodeInd, SourceType::NonCodeInd] {
        for count in [
            CountType::SingleToken,
            CountType::SingleSubToken,
            CountType::MultiTokens,
        ] {
            let cell: Vec<&MetricRow> = rows
                .iter()
                .filter(|r| r.update_type == UpdateType { source, count })
                .collect();
            cross_tab.push(CrossTabCell {
                source,
                count,
                samples: cell.len(),
                accuracy: (!cell.is_empty())
                    .then(|| mean(cell.iter().map(|r| f64::from(r.accuracy)))),
            });
        }
    }
    MetricReport {
        rows,
        averages,
        cross_tab,
    }
}

/// Scores every gold sample against its prediction; rows follow gold order.
pub fn evaluate_corpus(
    predictions: &[Prediction],
    gold: &[CommentUpdateSample],
    provider: &dyn EmbeddingProvider,
) -> Result<MetricReport> {
    let by_id: HashMap<&str, &str> = predictions
        .iter()
        .map(|p| (p.id.as_str(), p.prediction.as_str()))
        .collect();
    let gold_ids: HashSet<&str> = gold.iter().map(|g| g.id.as_str()).collect();
    let mut missing: Vec<&str> = gold_ids
        .iter()
        .copied()
        .filter(|id| !by_id.contains_key(id))
        .collect();
    missing.extend(by_id.keys().copied().filter(|id| !gold_ids.contains(id)));
    if !missing.is_empty() || by_id.len() != predictions.len() {
        missing.sort_unstable();
        return Err(Error::Contract(format!(
            "predictions and gold ids differ; unmatched ids: [{}]{}",
            missing.join(", "),
            if by_id.len() != predictions.len() {
                " (duplicate prediction ids)"
            } else {
                ""
            }
        )));
    }
    let rows = gold
        .iter()
        .map(|g| evaluate_row(&g.id, by_id[g.id.as_str()], g, provider))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::StubProvider;
    use approx::assert_abs_diff_eq;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy("returns the name", "returns the name"), 1);
        assert_eq!(accuracy("Returns the getName", "returns the get name"), 1);
        assert_eq!(accuracy("returns the name", "returns a name"), 0);
    }

    #[test]
    fn aed_examples() {
        assert_eq!(aed("a b c", "a b c"), 0);
        assert_eq!(aed("a b c", "a b d"), 1);
        assert_eq!(aed("a", "a b c"), 2);
    }

    #[test]
    fn red_examples() {
        assert_eq!(red("x y", "x y", "p q"), Some(0.0));
        assert_eq!(red("p q", "x y", "p q"), Some(1.0));
        // numerator: "a b c d" vs "a b e f" = 2; denominator: "w x y z" vs "a b e f" = 4
        assert_eq!(red("a b c d", "a b e f", "w x y z"), Some(0.5));
        assert_eq!(red("a", "same", "same"), None);
    }

    #[test]
    fn bleu_examples() {
        assert_abs_diff_eq!(
            bleu4("the cat sat down", "the cat sat down"),
            1.0,
            epsilon = 1e-12
        );
        assert!(bleu4("a b c", "x y z") < 0.05);
        assert_abs_diff_eq!(
            bleu4("a b c d", "a b c d e"),
            (-0.25f64).exp(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn meteor_examples() {
        assert_abs_diff_eq!(
            meteor("returns name", "returns name"),
            0.9375,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(meteor("returns", "returns"), 0.5, epsilon = 1e-12);
        assert_eq!(meteor("a b", "c d"), 0.0);
    }

    #[test]
    fn meteor_stem_stage() {
        // "returns" / "return" share a stem: 2 matches, 1 chunk.
        assert_abs_diff_eq!(
            meteor("returns value", "return value"),
            0.9375,
            epsilon = 1e-12
        );
    }

    struct Syn;
    impl SynonymMatcher for Syn {
        fn are_synonyms(&self, a: &str, b: &str) -> bool {
            (a, b) == ("yields", "returns")
        }
    }

    #[test]
    fn meteor_synonym_stage_is_pluggable() {
        assert!(meteor("yields x", "returns x") < 0.6);
        let opts = MeteorOptions {
            synonyms: Some(&Syn),
        };
        assert_abs_diff_eq!(
            meteor_with("yields x", "returns x", &opts),
            0.9375,
            epsilon = 1e-12
        );
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l_f1("a b c", "a b c"), 1.0);
        assert_abs_diff_eq!(rouge_l_f1("a b", "a c"), 0.5, epsilon = 1e-12);
        assert_eq!(rouge_l_f1("a b", "c d"), 0.0);
    }

    #[test]
    fn sentence_sim_examples() {
        let p = StubProvider::new(32, 4);
        assert_abs_diff_eq!(
            sentence_sim("same text", "same text", &p).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        let s = sentence_sim("returns foo", "gets bar", &p).unwrap();
        let expected = cosine(
            &sentence_embed("returns foo", &p).unwrap(),
            &sentence_embed("gets bar", &p).unwrap(),
        );
        assert_eq!(s, expected);
        assert!((-1.0..=1.0).contains(&s));
    }

    fn typed(old_code: &str, new_code: &str, old: &str, new: &str) -> UpdateType {
        classify_update_type(&CommentUpdateSample::new(
            "t",
            old_code,
            old,
            new_code,
            Some(new.into()),
        ))
        .unwrap()
    }

    #[test]
    fn update_type_examples() {
        assert_eq!(
            typed(
                "List getItems()",
                "Map getItems()",
                "returns the list",
                "returns the map"
            ),
            UpdateType {
                source: SourceType::CodeInd,
                count: CountType::SingleToken
            }
        );
        assert_eq!(
            typed("x.getFoo();", "x.getBar();", "calls getFoo", "calls getBar"),
            UpdateType {
                source: SourceType::CodeInd,
                count: CountType::SingleSubToken
            }
        );
        assert_eq!(
            typed(
                "int size() { return n; }",
                "int size() { return count; }",
                "returns the number of stored elements",
                "gives back how many entries exist right now"
            ),
            UpdateType {
                source: SourceType::NonCodeInd,
                count: CountType::MultiTokens
            }
        );
    }

    #[test]
    fn unchanged_comment_is_contract_error() {
        let s = CommentUpdateSample::new("t", "a", "Returns X", "b", Some("returns x".into()));
        assert!(matches!(classify_update_type(&s), Err(Error::Contract(_))));
    }

    fn gold(id: &str, old: &str, gt: &str) -> CommentUpdateSample {
        CommentUpdateSample::new(
            id,
            "int f() { return a; }",
            old,
            "int f() { return b; }",
            Some(gt.into()),
        )
    }

    #[test]
    fn perfect_predictions() {
        let p = StubProvider::new(16, 1);
        let g = vec![
            gold("1", "returns a", "returns b"),
            gold("2", "gets x", "gets the b value"),
        ];
        let preds: Vec<_> = g
            .iter()
            .map(|s| Prediction {
                id: s.id.clone(),
                prediction: s.new_comment.clone().unwrap(),
            })
            .collect();
        let r = evaluate_corpus(&preds, &g, &p).unwrap();
        assert_eq!(r.averages.accuracy, 1.0);
        assert_eq!(r.averages.aed, 0.0);
        assert_eq!(r.averages.red, Some(0.0));
        assert_abs_diff_eq!(r.averages.bleu4, 1.0, epsilon = 1e-12);
        assert_eq!(r.averages.f1, 1.0);
        assert_eq!(r.cross_tab.iter().map(|c| c.samples).sum::<usize>(), 2);
    }

    #[test]
    fn missing_ids_are_listed() {
        let p = StubProvider::new(8, 1);
        let g = vec![gold("1", "a", "b"), gold("2", "a", "c")];
        let preds = vec![Prediction {
            id: "1".into(),
            prediction: "b".into(),
        }];
        let err = evaluate_corpus(&preds, &g, &p).unwrap_err().to_string();
        assert!(err.contains('2'), "{err}");
    }
}
