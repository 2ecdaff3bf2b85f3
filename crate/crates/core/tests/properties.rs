use overlap_gan::data::{build_ring_overlap, build_two_gaussian_toy};
use overlap_gan::eval::{dma_with, frechet_distance, posterior_matrix_bayes};
use overlap_gan::losses::{gradient_penalty, kl_ac_loss_value, kl_cp_loss_value, kl_divergence};
use overlap_gan::models::{check_simplex, PGanNets};
use overlap_gan::tensor::{lr_schedule, softmax_in_place, AdamConfig, AdamState, Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn simplex(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0f64..8.0, c).prop_map(|mut v| {
        softmax_in_place(&mut v);
        v
    })
}

fn simplex_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..7).prop_flat_map(|c| (simplex(c), simplex(c)))
}

fn row(v: &[f64]) -> Tensor {
    Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kl_nonnegative_and_zero_on_self((p, q) in simplex_pair()) {
        let pq = kl_divergence(&row(&p), &row(&q)).unwrap();
        prop_assert!(pq >= -1e-12, "KL = {pq}");
        prop_assert!(kl_divergence(&row(&p), &row(&p)).unwrap().abs() < 1e-12);
        let cp = kl_cp_loss_value(&row(&p), &row(&q)).unwrap();
        prop_assert!((cp - pq).abs() < 1e-12);
    }

    #[test]
    fn kl_cp_on_one_hot_is_kl_ac(s in (2usize..7).prop_flat_map(simplex), k in 0usize..7) {
        let k = k % s.len();
        let mut y = vec![0.0; s.len()];
        y[k] = 1.0;
        let cp = kl_cp_loss_value(&row(&y), &row(&s)).unwrap();
        let ac = kl_ac_loss_value(&row(&s), &row(&y)).unwrap();
        prop_assert!((cp - ac).abs() <= 1e-12);
        // direct two-term oracle for one-hot targets
        let oracle = -s[k].max((-30f64).exp()).ln();
        prop_assert!((ac - oracle).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_on_simplex(v in prop::collection::vec(-50.0f64..50.0, 1..10)) {
        let mut v = v;
        softmax_in_place(&mut v);
        prop_assert!(check_simplex(&row(&v), 1e-12).is_ok());
    }

    #[test]
    fn lr_schedule_is_nonincreasing_and_ends_at_zero(total in 1u64..10_000, t in 0u64..10_000, alpha in 1e-6f64..1.0) {
        let t = t % total;
        let a = lr_schedule(t, alpha, total).unwrap();
        let b = lr_schedule(t + 1, alpha, total).unwrap();
        prop_assert!(b <= a && a <= alpha && b >= 0.0);
        prop_assert_eq!(lr_schedule(total, alpha, total).unwrap(), 0.0);
    }

    #[test]
    fn tensor_json_roundtrip_is_bit_exact(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
        let t = Tensor::new(vec![values.len()], values).unwrap();
        let back: Tensor = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn frechet_symmetric_and_nonnegative(seed in 0u64..1000, shift in -3.0f64..3.0, scale in 0.2f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = overlap_gan::data::sample_noise(50, 2, &mut rng);
        let b = overlap_gan::data::sample_noise(60, 2, &mut rng).map(|v| scale * v + shift);
        let ab = frechet_distance(&a, &b).unwrap().distance;
        let ba = frechet_distance(&b, &a).unwrap().distance;
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn bayes_posteriors_on_simplex(x in -10.0f64..10.0, y in -10.0f64..10.0) {
        for ds in [build_two_gaussian_toy(), build_ring_overlap(10, "10to5").unwrap(), build_ring_overlap(7, "7to3").unwrap()] {
            let p = ds.bayes_posterior(&[x, y]);
            prop_assert!(check_simplex(&row(&p.probs), 1e-12).is_ok());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pgan_outputs_on_simplex_for_any_init(seed in 0u64..10_000, c in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nets = PGanNets::new(c, 8, &mut rng);
        let (s, y) = nets.sample(16, &mut rng).unwrap();
        prop_assert!(check_simplex(&s, 1e-9).is_ok());
        prop_assert!(check_simplex(&y, 0.0).is_ok());
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point(values in prop::collection::vec(-5.0f64..5.0, 1..20), steps in 1usize..5) {
        let mut p = Tensor::new(vec![values.len()], values.clone()).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), [&p]);
        let zeros = vec![0.0; values.len()];
        for _ in 0..steps {
            adam.step(&mut [&mut p], &[&zeros], 1e-3).unwrap();
        }
        prop_assert_eq!(p.data(), &values[..]);
    }

    #[test]
    fn dma_is_a_fraction(seed in 0u64..1000) {
        let ds = build_ring_overlap(10, "10to5").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = dma_with(&ds, 16, |_, n| Ok(overlap_gan::data::sample_noise(n, 2, &mut rng).map(|v| 5.0 * v))).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.mean));
        prop_assert!(r.per_state.iter().all(|a| (0.0..=1.0).contains(a)));
    }
}

#[test]
fn gradient_penalty_is_symmetric_in_distribution() {
    // swapping the real and fake batches maps eps to 1 - eps, which has the
    // same distribution
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let real = overlap_gan::data::sample_noise(8, 2, &mut rng);
    let fake = overlap_gan::data::sample_noise(8, 2, &mut rng).map(|v| 2.0 * v + 1.0);
    let critic = |g: &mut Graph, xs: &[overlap_gan::tensor::Var]| {
        let sq = g.mul(xs[0], xs[0])?;
        let t = g.tanh(sq);
        g.sum_axis(t, 1)
    };
    let draws = 1000;
    let sample = |a: &Tensor, b: &Tensor, seed: u64| -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..draws)
            .map(|_| {
                let mut g = Graph::new();
                let p = gradient_penalty(&mut g, &[a], &[b], &mut rng, critic).unwrap();
                g.value(p).data()[0]
            })
            .collect()
    };
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m, var / v.len() as f64)
    };
    let (m1, se1) = stats(&sample(&real, &fake, 1));
    let (m2, se2) = stats(&sample(&fake, &real, 2));
    let sigma = (se1 + se2).sqrt();
    assert!((m1 - m2).abs() < 3.0 * sigma, "{m1} vs {m2} (sigma {sigma})");
}

#[test]
fn ring_bayes_posterior_matrix_support() {
    let ds = build_ring_overlap(10, "10to5").unwrap();
    let m = posterior_matrix_bayes(&ds, 20_000, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let c = ds.num_classes();
    for (j, r) in m.rows.iter().enumerate() {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // classes sharing a component with j: j-1, j, j+1 (cyclic)
        let support = [(j + c - 1) % c, j, (j + 1) % c];
        let off: f64 = (0..c).filter(|k| !support.contains(k)).map(|k| r[k]).sum();
        assert!(off < 0.02, "row {j} off-support mass {off}");
    }
    // row A is heaviest on B and E after A itself
    let a = &m.rows[0];
    assert!(a[1] > a[2] && a[4] > a[3]);
}
