use proptest::collection::vec;
use proptest::prelude::*;

use caseq::data::{build_splits, test_subset, truncate_prefix, Dataset, EventSequence};
use caseq::eval::{hr_at_k, ndcg_at_k, rank_of_target};
use caseq::model::{
    forward, load_checkpoint, path_index, save_checkpoint, Backbone, BaselineMode, CaseqConfig, CaseqParams,
    RoutingMode,
};
use caseq::objective::kl_divergence;
use caseq::rng::stream;
use caseq::scm::{backdoor_sum, elbo_enumerate, log_marginal, true_posterior, ScmSpec};
use caseq::tensor::{finite_diff_check, Tape, Tensor};

fn simplex(raw: Vec<f64>) -> Vec<f64> {
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

fn dataset(lengths: &[usize]) -> Dataset {
    let seqs = lengths
        .iter()
        .map(|&n| EventSequence::new((0..n as u32).map(|i| 1 + i % 4).collect()).unwrap())
        .collect();
    Dataset::new(seqs, 4).unwrap()
}

fn params_from(config: &CaseqConfig, values: &[f64]) -> CaseqParams {
    let mut p = CaseqParams::zeros(config);
    let mut i = 0;
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = values[i % values.len()];
            i += 1;
        }
    }
    p
}

proptest! {
    #[test]
    fn split_roles_partition_positions(lengths in vec(2usize..30, 1..8), g in 0usize..6) {
        let ds = dataset(&lengths);
        let split = build_splits(&ds, g);
        for (i, &n) in lengths.iter().enumerate() {
            let mut seen: Vec<usize> = split.train.iter().chain(&split.valid).chain(&split.test)
                .filter(|e| e.seq == i)
                .map(|e| e.position)
                .collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (2..=n).collect::<Vec<_>>());
        }
        let mut by_gap = 0;
        for gap in 0..=g {
            let subset = test_subset(&split, gap).unwrap();
            prop_assert!(subset.iter().all(|e| e.gap == Some(gap)));
            by_gap += subset.len();
        }
        prop_assert_eq!(by_gap, split.test.len());
        prop_assert!(test_subset(&split, g + 1).is_err());
    }

    #[test]
    fn truncation_keeps_the_suffix(seq in vec(1u32..9, 1..40), cap in 1usize..50) {
        let out = truncate_prefix(&seq, cap);
        prop_assert_eq!(out.len(), seq.len().min(cap));
        prop_assert_eq!(out, &seq[seq.len() - out.len()..]);
    }

    #[test]
    fn softmax_rows_are_simplices(data in vec(-30.0f64..30.0, 12), tau in 0.05f64..5.0) {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3, 4], data).unwrap());
        let p = x.softmax_rows(tau).unwrap().value();
        for r in 0..3 {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn composite_gradients_match_differences(data in vec(-1.5f64..1.5, 6)) {
        let x = Tensor::new(vec![2, 3], data).unwrap();
        let err = finite_diff_check(
            |tape, v| {
                let w = tape.constant(Tensor::new(vec![3, 2], vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.7]).unwrap());
                Ok(v.matmul(w)?.tanh().mul(v.slice(0, &[2, 2])?.sigmoid())?.sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        prop_assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn path_indices_round_trip(k in 1usize..5, d in 1usize..4, raw in 0usize..1000) {
        let size = k.pow(d as u32);
        let i = raw % size;
        let p = path_index(i, k, d).unwrap();
        prop_assert_eq!(p.0.len(), d);
        prop_assert!(p.0.iter().all(|&u| u < k));
        prop_assert_eq!(p.index(k), i);
        prop_assert!(path_index(size, k, d).is_err());
    }

    #[test]
    fn posterior_rows_are_simplices(
        k in 1usize..4,
        d in 1usize..3,
        attention in any::<bool>(),
        values in vec(-1.0f64..1.0, 16),
        seq in vec(1u32..6, 1..7),
    ) {
        let config = CaseqConfig {
            event_types: 5,
            dim: 3,
            units: k,
            layers: d,
            tau: 0.9,
            backbone: if attention { Backbone::CausalAttention } else { Backbone::RecurrentGated },
            max_len: 8,
            routing: RoutingMode::Gumbel,
            baseline: BaselineMode::None,
        };
        let params = params_from(&config, &values);
        let tape = Tape::new();
        let vars = params.register(&tape);
        let mut rng = stream(1, &[]);
        let pass = forward(&vars, &seq, &config, RoutingMode::Gumbel, &mut rng).unwrap();
        let post = pass.posterior.value();
        prop_assert_eq!(post.dims2(), (seq.len(), k.pow(d as u32)));
        for t in 0..post.rows() {
            prop_assert!((post.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        prop_assert!(pass.logits.value().is_finite());
    }

    #[test]
    fn checkpoints_round_trip(values in vec(-1e3f64..1e3, 1..20), attention in any::<bool>()) {
        let config = CaseqConfig {
            event_types: 4,
            dim: 2,
            units: 2,
            layers: 1,
            backbone: if attention { Backbone::CausalAttention } else { Backbone::RecurrentGated },
            max_len: 6,
            ..CaseqConfig::default()
        };
        let params = params_from(&config, &values);
        let bytes = save_checkpoint(&config, &params);
        let (c2, p2) = load_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&c2, &config);
        prop_assert_eq!(&p2, &params);
        prop_assert_eq!(save_checkpoint(&c2, &p2), bytes.clone());
        prop_assert!(load_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn ranks_and_metrics_are_consistent(logits in vec(-5.0f64..5.0, 2..15), pick in 0usize..100) {
        let m = logits.len();
        let target = (pick % m) as u32 + 1;
        let r = rank_of_target(&logits, target, None).unwrap();
        prop_assert!((1..=m).contains(&r));
        let cands: Vec<u32> = vec![target];
        prop_assert_eq!(rank_of_target(&logits, target, Some(&cands)).unwrap(), 1);
        let ranks = vec![r, 1, m];
        let mut last = 0.0;
        for k in 1..=m {
            let hr = hr_at_k(&ranks, k).unwrap();
            let nd = ndcg_at_k(&ranks, k).unwrap();
            prop_assert!(hr >= last);
            prop_assert!(nd <= hr + 1e-15);
            last = hr;
        }
    }

    #[test]
    fn kl_is_non_negative(q in vec(0.0f64..1.0, 4), p in vec(0.01f64..1.0, 4)) {
        prop_assume!(q.iter().sum::<f64>() > 1e-6);
        let kl = kl_divergence(&simplex(q), &simplex(p)).unwrap();
        prop_assert!(kl >= -1e-12);
    }

    #[test]
    fn elbo_never_exceeds_the_evidence(seed in 0u64..10_000, q in vec(0.0f64..1.0, 3), y in 1u32..5, last in 1u32..5, t in 2usize..40) {
        prop_assume!(q.iter().sum::<f64>() > 1e-6);
        let mut r = stream(seed, &[]);
        let spec = ScmSpec::random(&mut r, 3, 4, 0.4);
        let prefix = [1, last];
        let bd = backdoor_sum(&spec, &prefix, t);
        prop_assert!((bd.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lm = log_marginal(&spec, &prefix, t, y);
        prop_assert!(elbo_enumerate(&spec, &prefix, t, y, &simplex(q)) <= lm + 1e-12);
        let post = true_posterior(&spec, &prefix, t, y).unwrap();
        prop_assert!((elbo_enumerate(&spec, &prefix, t, y, &post) - lm).abs() < 1e-12);
    }
}
