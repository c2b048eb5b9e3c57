mod common;

use common::{brute_force_subset_max, ce_pair, random_net, random_tensor};
use proptest::prelude::*;
use rss_core::attacks::{pgd_search, AttackConfig};
use rss_core::data::{self, Dataset};
use rss_core::gates::GateConfig;
use rss_core::losses::{cvar_optimal_theta, cvar_value};
use rss_core::metrics::{adversarial_curve, natural_accuracy, stability_score};
use rss_core::network::Classifier;
use rss_core::{rng, Tensor};

fn losses(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 1..=max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cvar_minimum_is_the_top_subset_mean(l in losses(10), pick in 0usize..10) {
        let a = pick % l.len() + 1;
        let theta = cvar_optimal_theta(&l, a).unwrap();
        let at_opt = cvar_value(&l, theta, a);
        prop_assert!((at_opt - brute_force_subset_max(&l, a)).abs() < 1e-9);
        for probe in [-6.0, -1.0, 0.0, 0.5, 3.0, 6.0] {
            prop_assert!(cvar_value(&l, probe, a) >= at_opt - 1e-12);
        }
    }

    #[test]
    fn robust_loss_dominates_plain_loss(seed in 0u64..1000, rho in 0.0f64..0.5) {
        let params = random_net(&[4, 5, 3], seed, false);
        let mut r = rng::stream(seed, "prop/x");
        let x = random_tensor(6, 4, 2.0, &mut r);
        let y: Vec<usize> = (0..6).map(|i| (i + seed as usize) % 3).collect();
        let (ce, rce) = ce_pair(&params, &x, &y, rho);
        for (c, rc) in ce.iter().zip(&rce) {
            prop_assert!(rc >= c, "robust {rc} < plain {c}");
        }
        if rho == 0.0 {
            prop_assert_eq!(ce, rce);
        }
    }

    #[test]
    fn pgd_stays_inside_the_ball(seed in 0u64..1000, radius in 0.0f64..0.5, restarts in 1usize..3) {
        let params = random_net(&[3, 6, 2], seed, false);
        let model = Classifier::new(&params, &GateConfig::default());
        let mut r = rng::stream(seed, "prop/pgd");
        let x = random_tensor(5, 3, 1.0, &mut r);
        let y = vec![0, 1, 0, 1, 1];
        let cfg = AttackConfig { steps: 8, restarts, ..AttackConfig::standard(radius, seed) };
        let res = pgd_search(&model, &x, &y, &cfg).unwrap();
        for (a, b) in res.x_adv.as_slice().iter().zip(x.as_slice()) {
            prop_assert!((a - b).abs() <= radius + 1e-12);
        }
        let clean = model.predict(&x).unwrap();
        for i in 0..5 {
            if clean[i] != y[i] {
                prop_assert!(res.fooled[i]);
            }
        }
    }

    #[test]
    fn splits_partition_every_row(labels in prop::collection::vec(0usize..4, 5..200), seed in any::<u64>()) {
        let s = data::split(&labels, seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        prop_assert!(s.sizes().iter().all(|&c| c > 0));
        let again = data::resplit_train_val(&s, &labels, seed.wrapping_add(1));
        prop_assert_eq!(&again.test, &s.test);
        let mut tv: Vec<usize> = again.train.iter().chain(&again.val).copied().collect();
        let mut orig: Vec<usize> = s.train.iter().chain(&s.val).copied().collect();
        tv.sort_unstable();
        orig.sort_unstable();
        prop_assert_eq!(tv, orig);
    }

    #[test]
    fn stability_score_bounds_and_symmetry(
        preds in prop::collection::vec(prop::collection::vec(0usize..3, 7), 2..6),
        shift in 0usize..7,
    ) {
        let k = 3;
        let score = stability_score(&preds, k).unwrap();
        let s = preds.len() as f64;
        let bound = 1.0 - 1.0 / (k as f64).min(s);
        prop_assert!(score >= 0.0 && score <= bound + 1e-12);
        // Invariant to reordering models and to permuting points.
        let mut reversed = preds.clone();
        reversed.reverse();
        prop_assert!((stability_score(&reversed, k).unwrap() - score).abs() < 1e-12);
        let rotated: Vec<Vec<usize>> = preds.iter().map(|p| {
            let mut p = p.clone();
            p.rotate_left(shift);
            p
        }).collect();
        prop_assert!((stability_score(&rotated, k).unwrap() - score).abs() < 1e-12);
        // Relabeling classes consistently changes nothing.
        let relabeled: Vec<Vec<usize>> = preds.iter().map(|p| p.iter().map(|c| (c + 1) % k).collect()).collect();
        prop_assert!((stability_score(&relabeled, k).unwrap() - score).abs() < 1e-12);
    }

    #[test]
    fn gate_samples_lie_in_the_unit_interval(log_alpha in -8.0f64..8.0, u in 1e-9f64..(1.0 - 1e-9)) {
        let cfg = GateConfig::default();
        let z = cfg.sample_value(log_alpha, u);
        prop_assert!((0.0..=1.0).contains(&z));
        let t = cfg.test_value(log_alpha);
        prop_assert!((0.0..=1.0).contains(&t));
        let p = cfg.prob_nonzero(log_alpha);
        prop_assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn adversarial_curve_never_rises(seed in 0u64..500) {
        let params = random_net(&[3, 8, 3], seed, false);
        let model = Classifier::new(&params, &GateConfig::default());
        let mut r = rng::stream(seed, "prop/curve");
        let x: Tensor<f64> = random_tensor(12, 3, 1.0, &mut r);
        let y: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let base = AttackConfig { steps: 5, ..AttackConfig::standard(0.0, seed) };
        let curve = adversarial_curve(&model, &x, &y, &[0.3, 0.0, 0.05, 1.0], &base).unwrap();
        let nat = natural_accuracy(&model, &x, &y).unwrap();
        prop_assert!((curve[0].1 - nat).abs() < 1e-12, "radius 0 must equal natural accuracy");
        for w in curve.windows(2) {
            prop_assert!(w[0].0 < w[1].0);
            prop_assert!(w[1].1 <= w[0].1);
        }
    }

    #[test]
    fn cache_round_trips(
        rows in 1usize..20,
        m in 1usize..5,
        seed in any::<u64>(),
        with_split in any::<bool>(),
    ) {
        let mut r = rng::stream(seed, "prop/cache");
        let x: Vec<f64> = random_tensor(rows, m, 1e6, &mut r).into_vec();
        let y: Vec<usize> = (0..rows).map(|i| i % 3).collect();
        let names = (0..m).map(|j| format!("f{j}")).collect();
        let classes = (0..3).map(|c| format!("c{c}")).collect();
        let d = Dataset::new(m, x, y.clone(), names, classes).unwrap();
        let split = (with_split && rows >= 5).then(|| data::split(&y, seed).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.rssdata");
        data::save_cache(&path, &d, split.as_ref()).unwrap();
        let (back, back_split) = data::load_cache(&path).unwrap();
        prop_assert_eq!(back, d);
        prop_assert_eq!(back_split, split);
    }
}

#[test]
fn truncated_cache_is_rejected() {
    let d = data::synthetic_two_class(10, 2, 1, 1.0, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.rssdata");
    data::save_cache(&path, &d, None).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(data::load_cache(&path).is_err());
    std::fs::write(&path, b"garbage").unwrap();
    assert!(data::load_cache(&path).is_err());
}
