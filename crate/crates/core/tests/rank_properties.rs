use approx::assert_relative_eq;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cup_core::augment::{CandidateComment, Provenance};
use cup_core::rank::{listwise_loss, CupRank, PairInput, RankerConfig};
use cup_core::synthetic::separable_samples;
use cup_core::tokenize::StubProvider;

fn tiny_model(embed_dim: usize, seed: u64) -> CupRank<f64> {
    CupRank::init(RankerConfig {
        embed_dim,
        model_dim: 8,
        attention_heads: 2,
        ffn_dim: 16,
        proj_dim: 4,
        dropout: 0.0,
        seed,
        ..RankerConfig::default()
    })
    .unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
}

proptest! {
    #[test]
    fn loss_is_positive(
        pos in -1.0f64..=1.0,
        negs in prop::collection::vec(-1.0f64..=1.0, 1..9),
        lambda in 0.02f64..=1.0,
    ) {
        let l = listwise_loss(pos, &negs, lambda).unwrap();
        prop_assert!(l > 0.0 && l.is_finite(), "{l}");
    }

    #[test]
    fn loss_vanishes_for_perfect_separation(n in 1usize..9, lambda in 0.02f64..=0.2) {
        let l = listwise_loss(1.0, &vec![-1.0; n], lambda).unwrap();
        let bound = n as f64 * (-2.0 / lambda).exp();
        prop_assert!(l <= bound * (1.0 + 1e-9), "{l} > {bound}");
    }

    #[test]
    fn raising_a_negative_raises_the_loss(
        pos in -1.0f64..=1.0,
        negs in prop::collection::vec(-1.0f64..=1.0, 1..9),
        which in any::<prop::sample::Index>(),
        delta in 0.01f64..=0.5,
        lambda in 0.2f64..=1.0,
    ) {
        let i = which.index(negs.len());
        let mut raised = negs.clone();
        raised[i] += delta;
        prop_assert!(listwise_loss(pos, &raised, lambda).unwrap() > listwise_loss(pos, &negs, lambda).unwrap());
    }

    #[test]
    fn loss_ignores_negative_order(
        pos in -1.0f64..=1.0,
        negs in prop::collection::vec(-1.0f64..=1.0, 1..9),
        lambda in 0.02f64..=1.0,
        seed in any::<u64>(),
    ) {
        let mut shuffled = negs.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        assert_relative_eq!(
            listwise_loss(pos, &negs, lambda).unwrap(),
            listwise_loss(pos, &shuffled, lambda).unwrap(),
            max_relative = 1e-12
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn padding_leaves_embeddings_unchanged(
        seed in any::<u64>(),
        code_len in 1usize..7,
        comment_len in 1usize..7,
        code_pad in 0usize..5,
        comment_pad in 0usize..5,
        fill in -3.0f64..3.0,
    ) {
        let model = tiny_model(12, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let input = PairInput::new(random_matrix(&mut rng, code_len, 12), random_matrix(&mut rng, comment_len, 12));
        let padded = input.padded(code_len + code_pad, comment_len + comment_pad, fill);
        let (za, zb) = model.encode(&input).unwrap();
        let (pa, pb) = model.encode(&padded).unwrap();
        for (x, y) in za.iter().zip(&pa).chain(zb.iter().zip(&pb)) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn top_candidate_ignores_input_order(seed in any::<u64>(), perm_seed in any::<u64>()) {
        let provider = StubProvider::new(12, 5);
        let model = tiny_model(16, seed);
        let (sample, negatives) = separable_samples(1, 3, seed).remove(0);
        let candidates: Vec<CandidateComment> = std::iter::once(sample.new_comment.clone().unwrap())
            .chain(negatives)
            .enumerate()
            .map(|(k, t)| CandidateComment::new(t, Provenance::new("m", k, 0.2)))
            .collect();
        let ranked = model.rank_candidates(&sample, &candidates, &provider).unwrap();
        let scores: Vec<f64> = ranked.iter().map(|s| s.score).collect();
        prop_assume!(scores.windows(2).all(|w| w[0] > w[1]));

        let mut shuffled = candidates.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(perm_seed));
        let again = model.rank_candidates(&sample, &shuffled, &provider).unwrap();
        prop_assert_eq!(&again[0].candidate.text, &ranked[0].candidate.text);
        for w in again.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
    }
}
