use std::path::Path;

use proptest::prelude::*;

use gag::checkpoint::{decode, encode, CheckpointKind};
use gag::lm::tokenizer::{tokenize, ANCHOR};
use gag::numerics::{nll_loss, softmax, Axis, ParamSet, Tensor};
use gag::router::{kmeans, KMeansConfig};
use gag::template::{AnswerTemplate, KNOWLEDGE_FIELD, QUERY_FIELD};

fn unit(v: Vec<f32>) -> Option<Vec<f32>> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    (n > 1e-3).then(|| v.into_iter().map(|x| x / n).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..12, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| ((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 33) % 2000) as f64 / 50.0 - 20.0)
            .collect();
        let t = Tensor::new(vec![rows, cols], data).unwrap();
        let p = softmax(&t, Axis::Cols).unwrap();
        for r in 0..rows {
            let row = p.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        let targets: Vec<usize> = (0..rows).map(|r| r % cols).collect();
        prop_assert!(nll_loss(&t, &targets, &vec![true; rows]).unwrap() >= 0.0);
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(
        a in prop::collection::vec(-1e6f32..1e6, 1..40),
        b in prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 1..40),
        seed in any::<u64>(),
    ) {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::vector(a));
        p.insert("b.c", Tensor::vector(b));
        let bytes = encode(CheckpointKind::Expert, &serde_json::json!({"d": 1}), seed, &p).unwrap();
        prop_assert_eq!(&bytes[..4], b"GAG1");
        let back = decode(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.header.seed, seed);
        prop_assert_eq!(back.params.content_hash(), p.content_hash());
        prop_assert_eq!(back.params, p);
    }

    #[test]
    fn kmeans_sse_never_increases(
        raw in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 6), 12..80),
        k in 1usize..6,
        seed in any::<u64>(),
    ) {
        let points: Vec<Vec<f32>> = raw.into_iter().filter_map(unit).collect();
        prop_assume!(points.len() >= k);
        let r = kmeans(&points, &KMeansConfig { clusters: k, n_init: 2, max_iter: 50, seed }).unwrap();
        prop_assert!(r.sse_history.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs()));
        prop_assert_eq!(r.centroids.len(), k);
        for c in &r.centroids {
            let n = c.iter().map(|x| x * x).sum::<f32>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn injected_prompt_adds_exactly_one_token(query in "[a-z0-9 :?]{1,60}") {
        let t = AnswerTemplate::new("Knowledge: {knowledge}\nQuestion: {query}\nAnswer: ").unwrap();
        let prompt = t.with_slot(&query).unwrap();
        prop_assert_eq!(prompt.ids.iter().filter(|&&id| id == ANCHOR).count(), 1);
        let empty = t.text().replace(KNOWLEDGE_FIELD, "").replace(QUERY_FIELD, &query);
        prop_assert_eq!(prompt.len(), 1 + tokenize(&empty).len() + 1);
    }
}
