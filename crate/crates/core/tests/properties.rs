use proptest::prelude::*;

use mcm_core::codemix::{
    extract_substitutable_spans, generate_codemixed, satisfies_mlf, Alignment, ParallelPair,
};
use mcm_core::corpus::{Origin, Tag};
use mcm_core::distill::{loss_nll, loss_pred};
use mcm_core::metrics::{
    codemix_complexity, cosine, edit_distance, text_similarity, vqa_accuracy, Gold, LabeledSentence,
};
use mcm_core::tensor::{Graph, Tensor};

fn words(max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(
        prop::sample::select(vec!["a", "b", "c", "d", "e", "7", "?"]),
        1..max,
    )
    .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn tag() -> impl Strategy<Value = Tag> {
    prop::sample::select(vec![
        Tag::O,
        Tag::Adj,
        Tag::Np,
        Tag::NePer,
        Tag::NeLoc,
        Tag::NeOrg,
    ])
}

/// A pair with arbitrary tags and an arbitrary (possibly crossing) alignment.
fn pair_and_links() -> impl Strategy<Value = (ParallelPair, Alignment)> {
    (1usize..8, 1usize..10).prop_flat_map(|(n, m)| {
        (
            prop::collection::vec(tag(), n),
            prop::collection::vec(prop::option::of(0..n), m),
        )
            .prop_map(move |(tags, links)| {
                let pair = ParallelPair {
                    lang: "xa".into(),
                    en_tokens: (0..n).map(|i| format!("e{i}")).collect(),
                    en_tags: tags,
                    xx_tokens: (0..m).map(|j| format!("x{j}")).collect(),
                    gold: None,
                };
                (pair, Alignment { links, oov: 0 })
            })
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..6,
        seed in prop::collection::vec(-30.0f64..30.0, 30),
        mask_bits in prop::collection::vec(any::<bool>(), 6),
    ) {
        let data: Vec<f64> = (0..rows * cols).map(|i| seed[i % seed.len()] * (1.0 + i as f64)).collect();
        let mut mask: Vec<bool> = mask_bits[..cols].to_vec();
        mask[0] = true;
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap()).unwrap();
        for y in [g.softmax(x).unwrap(), g.softmax_masked(x, &mask, rows).unwrap()] {
            for r in g.value(y).data().chunks(cols) {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn generated_sentences_keep_the_matrix_frame((pair, links) in pair_and_links()) {
        let c = extract_substitutable_spans(&pair, &links);
        let r = generate_codemixed(&pair, &c);
        prop_assert!(satisfies_mlf(&r, &pair.xx_tokens));
        prop_assert_eq!(r.tokens.len(), r.origin.len());
        let kept = r.origin.iter().filter(|o| **o == Origin::Matrix).count();
        let replaced: usize = r.applied.iter().map(|a| a.xx_span.len()).sum();
        prop_assert_eq!(kept + replaced, pair.xx_tokens.len());
        for a in &r.applied {
            prop_assert!(pair.en_tags[a.en_span.clone()].iter().all(|t| *t == a.tag));
        }
    }

    #[test]
    fn similarity_scores_stay_in_range(c in words(12), r in words(12)) {
        let s = text_similarity(&c, &r).unwrap();
        prop_assert!((0.0..=100.0).contains(&s.bleu));
        prop_assert!((0.0..=100.0).contains(&s.rouge_l));
        prop_assert!(s.ter >= 0.0);
        let same = text_similarity(&r, &r).unwrap();
        prop_assert!(same.ter == 0.0 && (same.rouge_l - 100.0).abs() < 1e-9);
    }

    #[test]
    fn one_insertion_moves_the_edit_count_by_at_most_one(
        c in words(12),
        r in words(12),
        at in any::<prop::sample::Index>(),
        w in prop::sample::select(vec!["a", "z"]),
    ) {
        let mut c2 = c.clone();
        c2.insert(at.index(c.len() + 1), w.to_string());
        let (d1, d2) = (edit_distance(&c, &r), edit_distance(&c2, &r));
        prop_assert!(d1.abs_diff(d2) <= 1);
        let (t1, t2) = (text_similarity(&c, &r).unwrap().ter, text_similarity(&c2, &r).unwrap().ter);
        prop_assert!((t1 - t2).abs() <= 100.0 / r.len() as f64 + 1e-9);
    }

    #[test]
    fn complexity_ignores_label_names(
        toks in words(15),
        langs in prop::collection::vec(0usize..3, 15),
        perm in Just([0usize, 1, 2]).prop_shuffle(),
    ) {
        let names = ["en", "hi", "bn"];
        let n = toks.len();
        let a: Vec<String> = langs[..n].iter().map(|&l| names[l].to_string()).collect();
        let b: Vec<String> = langs[..n].iter().map(|&l| format!("lang{}", perm[l])).collect();
        let ca = codemix_complexity(&LabeledSentence::new(toks.clone(), a).unwrap()).unwrap();
        let cb = codemix_complexity(&LabeledSentence::new(toks, b).unwrap()).unwrap();
        prop_assert_eq!(ca, cb);
        prop_assert!((0.0..100.0).contains(&ca.cmi));
        prop_assert!((0.0..=100.0).contains(&ca.spf));
    }

    #[test]
    fn vqa_accuracy_and_cosine_stay_in_range(
        votes in prop::collection::vec(prop::sample::select(vec!["red", "blue"]), 0..12),
        a in prop::collection::vec(-5.0f64..5.0, 4),
        b in prop::collection::vec(-5.0f64..5.0, 4),
    ) {
        let gold = Gold::Annotators(votes.iter().map(|s| s.to_string()).collect());
        let acc = vqa_accuracy("red", &gold);
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&cosine(&a, &b)));
    }

    #[test]
    fn matching_losses_are_nonnegative(
        p in prop::collection::vec(0.0f64..=1.0, 6),
        q in prop::collection::vec(0.0f64..=1.0, 6),
        gold in prop::collection::vec(prop::sample::select(vec![0.0, 1.0]), 6),
    ) {
        let mut g = Graph::new();
        let t = g.constant(Tensor::new(vec![2, 3], p).unwrap()).unwrap();
        let s = g.constant(Tensor::new(vec![2, 3], q).unwrap()).unwrap();
        let y = g.constant(Tensor::new(vec![2, 3], gold).unwrap()).unwrap();
        let pred = loss_pred(&mut g, t, s).unwrap();
        let nll = loss_nll(&mut g, y, s).unwrap();
        let mse = g.mse(t, s).unwrap();
        for v in [pred, nll, mse] {
            let x = g.value(v).item();
            prop_assert!(x.is_finite() && x >= 0.0);
        }
    }
}
