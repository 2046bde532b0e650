use std::collections::{BTreeSet, HashSet};

use proptest::prelude::*;

use cup_core::augment::{augment_dataset, CandidateGenerator};
use cup_core::flatten::{
    embed_edit_tokens, new_side, old_side, token_diff, EditOp, Origin, EDIT_FEATURES,
};
use cup_core::llm::{cache_key, CompletionRequest, MockBackend};
use cup_core::metrics::{
    accuracy, aed, bleu4, evaluate_corpus, meteor, red, rouge_l_f1, Prediction,
};
use cup_core::normalize::{clean_response, NormalizeOptions};
use cup_core::prompt::{query_section, PromptStrategy, PROMPT_VERSION};
use cup_core::retrieve::{top_k_similar, DemonstrationPool, ExampleIndex};
use cup_core::sample::CommentUpdateSample;
use cup_core::synthetic::separable_samples;
use cup_core::tokenize::{
    camel_case_split, cosine, detokenize, sentence_embed, stable_hash64, EmbeddingProvider,
    StubProvider,
};

fn stub() -> StubProvider {
    StubProvider::new(16, 3)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 0..a.len() {
        for j in 0..b.len() {
            t[i + 1][j + 1] = if a[i] == b[j] {
                t[i][j] + 1
            } else {
                t[i][j + 1].max(t[i + 1][j])
            };
        }
    }
    t[a.len()][b.len()]
}

fn words(n: usize) -> impl Strategy<Value = String> {
    prop::collection::vec("[a-f]{1,3}", 0..=n).prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn camel_split_preserves_concatenation(s in "\\PC*") {
        prop_assert_eq!(camel_case_split(&s).concat(), s);
    }

    #[test]
    fn stub_tokenization_round_trips(s in "[ -~\t\n]{0,80}") {
        let seq = stub().tokenize(&s).unwrap();
        prop_assert_eq!(detokenize(seq.tokens()), s);
    }

    #[test]
    fn stub_is_deterministic(s in "[ -~]{0,40}") {
        let (a, b) = (stub(), stub());
        prop_assert_eq!(a.sentence_vector(&s).unwrap(), b.sentence_vector(&s).unwrap());
    }

    #[test]
    fn diff_reconstructs_and_is_minimal(
        old in prop::collection::vec("[a-e]", 0..50),
        new in prop::collection::vec("[a-e]", 0..50),
    ) {
        let script = token_diff(&old, &new);
        prop_assert_eq!(old_side(&script), old.iter().map(String::as_str).collect::<Vec<_>>());
        prop_assert_eq!(new_side(&script), new.iter().map(String::as_str).collect::<Vec<_>>());
        let edits = script.iter().filter(|t| t.op != EditOp::Equal).count();
        prop_assert_eq!(edits, old.len() + new.len() - 2 * lcs(&old, &new));
        for t in &script {
            match t.op {
                EditOp::Insert => prop_assert_eq!(t.origin, Origin::New),
                EditOp::Delete | EditOp::Equal => prop_assert_eq!(t.origin, Origin::Old),
            }
        }
    }

    #[test]
    fn edit_rows_end_in_one_hot_and_flag(
        old in prop::collection::vec("[a-e]", 0..12),
        new in prop::collection::vec("[a-e]", 1..12),
    ) {
        let p = stub();
        let script = token_diff(&old, &new);
        let m = embed_edit_tokens::<f64>(&script, &p).unwrap();
        prop_assert_eq!(m.ncols(), p.dimension() + EDIT_FEATURES);
        for row in m.rows() {
            let tail: Vec<f64> = row.iter().rev().take(EDIT_FEATURES).rev().copied().collect();
            let hot = &tail[..3];
            prop_assert!(hot.iter().all(|&x| x == 0.0 || x == 1.0));
            prop_assert_eq!(hot.iter().sum::<f64>(), 1.0);
            prop_assert!(tail[3] == 0.0 || tail[3] == 1.0);
        }
    }

    #[test]
    fn cleaning_is_idempotent(s in "[ -~\n`*\"]{0,60}") {
        let opts = NormalizeOptions::default();
        let once = clean_response(&s, &opts);
        prop_assert_eq!(clean_response(&once, &opts), once);
    }

    #[test]
    fn distinct_requests_get_distinct_keys(
        p1 in "[a-z ]{1,20}", p2 in "[a-z ]{1,20}",
        t1 in 0u8..3, t2 in 0u8..3,
        m1 in "[ab]", m2 in "[ab]",
    ) {
        let a = CompletionRequest::new(m1, p1, f64::from(t1) / 10.0);
        let b = CompletionRequest::new(m2, p2, f64::from(t2) / 10.0);
        prop_assert_eq!(a == b, cache_key(&a, PROMPT_VERSION) == cache_key(&b, PROMPT_VERSION));
    }

    #[test]
    fn aed_is_a_metric(x in words(12), y in words(12), z in words(12)) {
        prop_assert_eq!(aed(&x, &y), aed(&y, &x));
        prop_assert!(aed(&x, &z) <= aed(&x, &y) + aed(&y, &z));
        prop_assert_eq!(aed(&x, &x), 0);
    }

    #[test]
    fn self_comparison_is_perfect(x in "[a-zA-Z]{1,8}( [a-zA-Z]{1,8}){0,8}") {
        prop_assert_eq!(accuracy(&x, &x), 1);
        prop_assert_eq!(rouge_l_f1(&x, &x), 1.0);
    }

    #[test]
    fn metrics_stay_in_range(x in "[ -~]{0,40}", y in "[ -~]{0,40}", old in "[ -~]{0,40}") {
        prop_assert!(accuracy(&x, &y) <= 1);
        for v in [bleu4(&x, &y), meteor(&x, &y), rouge_l_f1(&x, &y)] {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
        if let Some(r) = red(&x, &y, &old) {
            prop_assert!(r >= 0.0 && r.is_finite());
        }
    }
}

fn corpus_from(codes: &[String]) -> Vec<CommentUpdateSample> {
    codes
        .iter()
        .enumerate()
        .map(|(i, c)| {
            CommentUpdateSample::new(
                format!("s{i:02}"),
                "int f() {}",
                "old",
                c.as_str(),
                Some("new".into()),
            )
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn retrieval_matches_brute_force(
        codes in prop::collection::vec("[a-d]{1,4}( [a-d]{1,4}){0,5}", 2..12),
        query in "[a-d]{1,4}( [a-d]{1,4}){0,5}",
        k in 0usize..14,
        exclude in prop::option::of(0usize..12),
    ) {
        let p = stub();
        let corpus = corpus_from(&codes);
        let index = ExampleIndex::build(&corpus, &p).unwrap();
        let exclude_id = exclude.map(|i| format!("s{i:02}"));
        let got = top_k_similar(&index, &p, &query, k, exclude_id.as_deref()).unwrap();

        let q = sentence_embed(&query, &p).unwrap();
        let mut oracle: Vec<(f64, String)> = corpus
            .iter()
            .filter(|s| Some(&s.id) != exclude_id.as_ref())
            .map(|s| (cosine(&q, &sentence_embed(&s.new_code, &p).unwrap()), s.id.clone()))
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        oracle.truncate(k);
        let got_ids: Vec<&str> = got.iter().map(|n| n.id.as_str()).collect();
        let want_ids: Vec<&str> = oracle.iter().map(|(_, id)| id.as_str()).collect();
        prop_assert_eq!(got_ids, want_ids);

        let excluded_present = exclude_id.as_ref().is_some_and(|id| corpus.iter().any(|s| &s.id == id));
        let available = corpus.len() - usize::from(excluded_present);
        prop_assert_eq!(got.len(), k.min(available));
    }

    #[test]
    fn augmentation_partitions_ids(n in 1usize..10, seed in any::<u64>(), mask in any::<u32>()) {
        let p = stub();
        let samples: Vec<CommentUpdateSample> = separable_samples(n, 3, seed).into_iter().map(|(s, _)| s).collect();
        let by_code: Vec<(String, String, bool)> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.new_code.clone(), s.new_comment.clone().unwrap(), mask >> (i % 32) & 1 == 1))
            .collect();
        // Flagged samples only ever get the ground truth back.
        let backend = MockBackend::with_responder(vec!["m".into()], move |req| {
            let (_, gt, echo) = by_code.iter().find(|(code, _, _)| query_section(&req.prompt).contains(code.as_str()))?;
            Some(if *echo { gt.clone() } else { format!("{gt} {}", stable_hash64(req.prompt.as_bytes()) % 7) })
        });
        let pool = DemonstrationPool::new(samples.clone(), &p).unwrap();
        let generator = CandidateGenerator::new(&backend, None, &pool, &p);
        let strategies: Vec<PromptStrategy> = [0, 1].iter().map(|&k| PromptStrategy::new("m", k, 0.2).unwrap()).collect();
        let out = augment_dataset(&samples, &strategies, &generator, 2).unwrap();

        let groups: BTreeSet<&str> = out.groups.iter().map(|g| g.id.as_str()).collect();
        let discarded: BTreeSet<&str> = out.summary.discarded_ids.iter().map(String::as_str).collect();
        prop_assert!(groups.is_disjoint(&discarded));
        let all: BTreeSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
        prop_assert_eq!(groups.union(&discarded).copied().collect::<BTreeSet<_>>(), all);
        for g in &out.groups {
            prop_assert!(g.validate().is_ok());
        }
    }

    #[test]
    fn cross_tab_counts_cover_the_corpus(n in 1usize..15, seed in any::<u64>(), picks in prop::collection::vec(0usize..4, 15)) {
        let p = stub();
        let samples = separable_samples(n, 3, seed);
        let gold: Vec<CommentUpdateSample> = samples.iter().map(|(s, _)| s.clone()).collect();
        let preds: Vec<Prediction> = samples
            .iter()
            .zip(&picks)
            .map(|((s, negs), &k)| Prediction {
                id: s.id.clone(),
                prediction: negs.get(k).cloned().unwrap_or_else(|| s.new_comment.clone().unwrap()),
            })
            .collect();
        let report = evaluate_corpus(&preds, &gold, &p).unwrap();
        prop_assert_eq!(report.cross_tab.iter().map(|c| c.samples).sum::<usize>(), n);
        let ids: HashSet<&str> = report.rows.iter().map(|r| r.id.as_str()).collect();
        prop_assert_eq!(ids.len(), n);
        let mean = report.rows.iter().map(|r| f64::from(r.accuracy)).sum::<f64>() / n as f64;
        prop_assert!((report.averages.accuracy - mean).abs() < 1e-12);
    }
}
