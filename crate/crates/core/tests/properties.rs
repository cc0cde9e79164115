//! Property tests over the public API: losses, aggregation, sampling and the corpus.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use strata_core::aggregation::{aggregate_avg, sample_uniform};
use strata_core::autodiff::{Graph, Scalar, Tensor};
use strata_core::corpus::{generate_synthetic, GeneratorConfig};
use strata_core::objectives::{nce_from_logits, nce_grouped, PositiveMask, Temperature};

fn unit_rows(rows: &[Vec<f64>]) -> Tensor {
    let normed: Vec<Vec<Scalar>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
            r.iter().map(|x| (x / n) as Scalar).collect()
        })
        .collect();
    Tensor::from_rows(&normed).unwrap()
}

fn loss(a: &Tensor, t: &Tensor, mask: &PositiveMask, tau: Scalar) -> Scalar {
    let mut g = Graph::new();
    let (av, tv) = (g.constant(a.clone()), g.constant(t.clone()));
    let l = nce_grouped(&mut g, av, tv, mask, Temperature::new(tau).unwrap()).unwrap();
    g.value(l).item().unwrap()
}

/// mean over anchors of -log(sum_pos exp(s/tau) / sum_all exp(s/tau)), written out directly.
fn loss_by_hand(a: &Tensor, t: &Tensor, labels: &[usize], tau: f64) -> f64 {
    let (ar, tr) = (a.rows().unwrap(), t.rows().unwrap());
    let n = ar.len();
    let mut total = 0.0;
    for i in 0..n {
        let s: Vec<f64> = (0..n)
            .map(|j| ar[i].iter().zip(&tr[j]).map(|(x, y)| (*x as f64) * (*y as f64)).sum::<f64>() / tau)
            .collect();
        let all: f64 = s.iter().map(|x| x.exp()).sum();
        let pos: f64 = (0..n).filter(|&j| labels[j] == labels[i]).map(|j| s[j].exp()).sum();
        total += -(pos / all).ln();
    }
    total / n as f64
}

fn batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>)> {
    (2usize..7, 2usize..6).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n),
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n),
            prop::collection::vec(0usize..3, n),
        )
    })
}

proptest! {
    #[test]
    fn grouped_loss_matches_the_written_out_definition((a, t, labels) in batch(), tau in 0.05f64..2.0) {
        let (a, t) = (unit_rows(&a), unit_rows(&t));
        let mask = PositiveMask::from_labels(&labels);
        let got = loss(&a, &t, &mask, tau as Scalar) as f64;
        let want = loss_by_hand(&a, &t, &labels, tau);
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn relabeling_the_batch_leaves_the_loss_unchanged((a, t, labels) in batch(), seed in any::<u64>()) {
        let n = labels.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pa: Vec<Vec<f64>> = perm.iter().map(|&i| a[i].clone()).collect();
        let pt: Vec<Vec<f64>> = perm.iter().map(|&i| t[i].clone()).collect();
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let l0 = loss(&unit_rows(&a), &unit_rows(&t), &PositiveMask::from_labels(&labels), 0.1);
        let l1 = loss(&unit_rows(&pa), &unit_rows(&pt), &PositiveMask::from_labels(&pl), 0.1);
        prop_assert!((l0 - l1).abs() < 1e-10);
    }

    #[test]
    fn raising_a_positive_logit_lowers_the_loss(
        (n, logits) in (2usize..7).prop_flat_map(|n| (Just(n), prop::collection::vec(-5.0f64..5.0, n * n))),
        labels_seed in any::<u64>(),
        pick in any::<prop::sample::Index>(),
        delta in 0.01f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(labels_seed);
        let labels: Vec<usize> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 0..3)).collect();
        let mask = PositiveMask::from_labels(&labels);
        let positives: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| mask.get(i, j)).collect();
        let (i, j) = positives[pick.index(positives.len())];
        // an anchor whose every candidate is positive has zero loss whatever the logits
        prop_assume!((0..n).any(|k| !mask.get(i, k)));
        let eval = |vals: &[f64]| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![n, n], vals.iter().map(|&v| v as Scalar).collect()).unwrap());
            let l = nce_from_logits(&mut g, x, &mask).unwrap();
            g.value(l).item().unwrap()
        };
        let mut raised = logits.clone();
        raised[i * n + j] += delta;
        prop_assert!(eval(&raised) < eval(&logits));
    }

    #[test]
    fn average_aggregation_is_bitwise_permutation_invariant(
        seq in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..12),
        seed in any::<u64>(),
    ) {
        let mut shuffled = seq.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let run = |rows: &[Vec<f64>]| {
            let k = rows.len();
            let data: Vec<Scalar> = rows.iter().flatten().map(|&x| x as Scalar).collect();
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![1, k, 4], data).unwrap());
            match aggregate_avg(&mut g, x) {
                Ok(y) => Some(g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()),
                Err(_) => None,
            }
        };
        prop_assert_eq!(run(&seq), run(&shuffled));
    }

    #[test]
    fn uniform_sampling_is_sorted_in_range_and_spread(n in 1usize..64, k in 1usize..32) {
        let idx = sample_uniform(n, k).unwrap();
        prop_assert_eq!(idx.len(), k);
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(idx.iter().all(|&i| i < n));
        prop_assert_eq!(idx[0], 0);
        if k <= n {
            let mut dedup = idx.clone();
            dedup.dedup();
            prop_assert_eq!(dedup.len(), k);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generated_corpora_are_consistent(seed in any::<u64>(), clips in 2usize..9, intents in 1usize..4) {
        let cfg = GeneratorConfig {
            num_videos: 6,
            num_eval_videos: 2,
            clips_per_video: clips,
            num_intents: intents * 2,
            token_noise: 0.0,
            ..GeneratorConfig::default()
        };
        let data = generate_synthetic(&cfg, seed).unwrap();
        let layout = cfg.token_layout();
        for v in data.train.videos.iter().chain(&data.eval.videos) {
            v.validate().unwrap();
            prop_assert!(v.latent_intent_id < cfg.num_intents);
            // the summary names the intent; each narration names its clip's action
            prop_assert!(v.summary_tokens.tokens.contains(&(layout.goal_start + v.latent_intent_id as u32)));
            for c in &v.clips {
                prop_assert!(c.action_label < cfg.num_actions());
                prop_assert!(c.narration_tokens.tokens.contains(&(layout.object_start + c.action_label as u32)));
                prop_assert_eq!(c.frames.valid_len, cfg.frames_per_clip);
                prop_assert!(c.frames.frames.iter().flatten().all(|x| x.is_finite()));
            }
        }
        // same seed, same corpus
        prop_assert_eq!(&generate_synthetic(&cfg, seed).unwrap().train, &data.train);
    }
}
