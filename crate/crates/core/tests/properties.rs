use ndarray::{Array2, Array3};
use proptest::prelude::*;

use hetpref::datasets::{AnonymousSample, DatasetFile, FullAnnotationSample, Records};
use hetpref::losses::{ConsistentAgreement, Dpo, LossConfig, Objective};
use hetpref::preference::{cycle_products, nbc, optimal_policy, pref_prob};
use hetpref::survey::min_tv_flip;
use hetpref::{Link, PairwiseMatrix, Policy, RewardTable, SamplingDistribution, Scope, UserPopulation};

fn reward_table(n_resp: usize, n_types: usize) -> impl Strategy<Value = RewardTable<f64>> {
    prop::collection::vec(-5.0..5.0f64, n_resp * n_types).prop_map(move |v| {
        RewardTable::new(Array3::from_shape_vec((1, n_resp, n_types), v).unwrap()).unwrap()
    })
}

fn weights(k: usize) -> impl Strategy<Value = UserPopulation<f64>> {
    prop::collection::vec(0.05..1.0f64, k).prop_map(move |w| {
        UserPopulation::from_unnormalized((0..k).map(|u| format!("u{u}")).collect(), w).unwrap()
    })
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01..1.0f64, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|p| p / s).collect()
    })
}

fn instance() -> impl Strategy<Value = (RewardTable<f64>, UserPopulation<f64>, Vec<f64>)> {
    (3usize..6, 1usize..4).prop_flat_map(|(n, k)| (reward_table(n, k), weights(k), distribution(n)))
}

fn anon_data(n: usize) -> impl Strategy<Value = Vec<AnonymousSample>> {
    prop::collection::vec((0..n, 0..n, 1..n, 0u8..2), 1..30).prop_map(move |v| {
        v.into_iter()
            .map(|(x, y1, off, o)| AnonymousSample { x, y1, y2: (y1 + off) % n, o })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn marginal_preferences_are_complementary((r, pop, _) in instance(), t in 0.3..3.0f64) {
        let link = Link::with_temperature(t).unwrap();
        let n = r.n_responses();
        for a in 0..n {
            for b in 0..n {
                let ab = pref_prob(&r, &pop, &link, 0, a, b, Scope::Marginal).unwrap();
                let ba = pref_prob(&r, &pop, &link, 0, b, a, Scope::Marginal).unwrap();
                prop_assert!((ab + ba - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn borda_scores_average_to_one_half((r, pop, d) in instance()) {
        let dist = SamplingDistribution::repeated(&d, 1).unwrap();
        let s = nbc(&r, &pop, &Link::logistic(), &dist, 0).unwrap();
        let mean: f64 = s.iter().zip(&d).map(|(a, b)| a * b).sum();
        prop_assert!((mean - 0.5).abs() < 1e-12);
        prop_assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn per_type_shifts_leave_borda_and_optimum_unchanged(
        (r, pop, d) in instance(),
        shifts in prop::collection::vec(-20.0..20.0f64, 3),
    ) {
        let mut shifted = r.values().clone();
        for ((_, _, u), v) in shifted.indexed_iter_mut() {
            *v += shifts[u % 3];
        }
        let shifted = RewardTable::new(shifted).unwrap();
        let dist = SamplingDistribution::repeated(&d, 1).unwrap();
        let link = Link::logistic();
        let a = nbc(&r, &pop, &link, &dist, 0).unwrap();
        let b = nbc(&shifted, &pop, &link, &dist, 0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-10);
        }
        let pi_ref = Policy::uniform(1, r.n_responses());
        let p1 = optimal_policy(&r, &pop, &pi_ref, 0.7).unwrap().probs();
        let p2 = optimal_policy(&shifted, &pop, &pi_ref, 0.7).unwrap().probs();
        prop_assert!(p1.iter().zip(p2.iter()).all(|(x, y)| (x - y).abs() < 1e-10));
    }

    #[test]
    fn link_inverse_round_trips(z in -8.0..8.0f64, t in 0.5..5.0f64) {
        let link = Link::with_temperature(t).unwrap();
        let back = link.inverse(link.value(z)).unwrap();
        prop_assert!((back - z).abs() < 1e-6 * (1.0 + z.abs()));
    }

    #[test]
    fn single_bradley_terry_cycles_balance(r in prop::collection::vec(-6.0..6.0f64, 3..7)) {
        let n = r.len();
        let table = Array2::from_shape_vec((n, 1), r).unwrap();
        let p = PairwiseMatrix::from_rewards(&table, &[1.0], &Link::logistic()).unwrap();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if i != j && j != k && i != k {
                        let (f, b) = cycle_products(&p, i, j, k).unwrap();
                        prop_assert!((f - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn dpo_is_invariant_to_per_prompt_logit_shifts(
        data in anon_data(4),
        logits in prop::collection::vec(-3.0..3.0f64, 16),
        shift in prop::collection::vec(-10.0..10.0f64, 4),
    ) {
        let logits = Array2::from_shape_vec((4, 4), logits).unwrap();
        let shifted = Array2::from_shape_fn((4, 4), |(x, y)| logits[[x, y]] + shift[x]);
        let loss = Dpo::new(&Policy::uniform(4, 4), LossConfig { alpha: 0.0, ..LossConfig::default() }).unwrap();
        let a = loss.loss_grad(&logits, &data, None).unwrap();
        let b = loss.loss_grad(&shifted, &data, None).unwrap();
        prop_assert!((a.loss - b.loss).abs() < 1e-10);
        // gradient rows sum to zero: only logit differences matter
        for row in a.grad.rows() {
            prop_assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn consistent_loss_ignores_disagreeing_records(
        data in anon_data(3),
        extra in prop::collection::vec((0usize..3, 0usize..3, 1usize..3), 1..10),
    ) {
        let full: Vec<_> = data
            .iter()
            .map(|s| FullAnnotationSample { x: s.x, y1: s.y1, y2: s.y2, o_vec: vec![s.o; 3] })
            .collect();
        let mut mixed = full.clone();
        mixed.extend(extra.into_iter().map(|(x, y1, off)| FullAnnotationSample {
            x,
            y1,
            y2: (y1 + off) % 3,
            o_vec: vec![0, 1, 1],
        }));
        let loss = ConsistentAgreement::new(&Policy::uniform(3, 3), LossConfig::default()).unwrap();
        let logits = Array2::from_shape_fn((3, 3), |(x, y)| (x as f64 - y as f64) * 0.3);
        let a = loss.loss_grad(&logits, &full, None).unwrap();
        let b = loss.loss_grad(&logits, &mixed, None).unwrap();
        // disagreement records contribute nothing to the gradient direction
        let scale = full.len() as f64 / mixed.len() as f64;
        for (x, y) in a.grad.iter().zip(b.grad.iter()) {
            prop_assert!((x * scale - y).abs() < 1e-12);
        }
    }

    #[test]
    fn anonymous_datasets_round_trip(data in anon_data(5), seed in any::<u64>()) {
        let file = DatasetFile::new(seed, "abc".into(), Records::Anonymous(data));
        let bytes = file.to_bytes().unwrap();
        let back = DatasetFile::read_jsonl(&bytes[..]).unwrap();
        prop_assert_eq!(&back, &file);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn flip_solutions_are_feasible((r, pop, _) in instance()) {
        let n = r.n_responses();
        let table = r.values().index_axis(ndarray::Axis(0), 0).to_owned();
        let p = PairwiseMatrix::from_rewards(&table, pop.weights(), &Link::logistic()).unwrap();
        let uniform = vec![1.0 / n as f64; n];
        let s = p.scores(&uniform).unwrap();
        let (eps, delta) = (1e-5, 1e-5);
        for i in 0..n {
            for j in 0..n {
                if i == j || !(s[i] > s[j] + 1e-9) {
                    continue;
                }
                let sol = min_tv_flip(&p, i, j, eps, delta).unwrap();
                if let (Some(tv), Some(q)) = (sol.tv, sol.q) {
                    prop_assert!(q.iter().all(|&v| v >= eps - 1e-12));
                    prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    let sq = p.scores(&q).unwrap();
                    prop_assert!(sq[j] - sq[i] >= delta - 1e-9);
                    let d = 0.5 * q.iter().map(|v| (v - 1.0 / n as f64).abs()).sum::<f64>();
                    prop_assert!((d - tv).abs() < 1e-9);
                }
            }
        }
    }
}
