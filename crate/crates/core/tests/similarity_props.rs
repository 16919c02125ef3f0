use proptest::prelude::*;

use spkd::similarity::{activation_gram, flatten, sp_loss, LayerPairSet, Taps};
use spkd::{Graph, Tensor};

fn map_strategy(max_b: usize) -> impl Strategy<Value = Tensor<f64>> {
    (2..=max_b, 1..=4usize, 1..=3usize, 1..=3usize).prop_flat_map(|(b, c, h, w)| {
        prop::collection::vec(-3.0..3.0f64, b * c * h * w)
            .prop_map(move |v| Tensor::from_f64(&[b, c, h, w], &v).unwrap())
    })
}

fn paired_maps() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>)> {
    (2..=6usize, 1..=4usize, 1..=3usize, 1..=4usize, 1..=2usize).prop_flat_map(|(b, ct, ht, cs, hs)| {
        (
            prop::collection::vec(-3.0..3.0f64, b * ct * ht * ht),
            prop::collection::vec(-3.0..3.0f64, b * cs * hs * hs),
        )
            .prop_map(move |(t, s)| {
                (
                    Tensor::from_f64(&[b, ct, ht, ht], &t).unwrap(),
                    Tensor::from_f64(&[b, cs, hs, hs], &s).unwrap(),
                )
            })
    })
}

fn loss(t: &Tensor<f64>, s: &Tensor<f64>) -> f64 {
    let g = Graph::new();
    let tt: Taps<f64> = [("t".to_string(), g.constant(t.clone()))].into_iter().collect();
    let st: Taps<f64> = [("s".to_string(), g.constant(s.clone()))].into_iter().collect();
    sp_loss(&tt, &st, &LayerPairSet::single("t", "s")).unwrap().item()
}

proptest! {
    #[test]
    fn gram_is_symmetric_and_positive_semidefinite(a in map_strategy(6), probe in prop::collection::vec(-1.0..1.0f64, 6)) {
        let g = Graph::new();
        let gram = activation_gram(&g.constant(a.clone()), "x").unwrap();
        let u = gram.unnormalized.value();
        let b = a.shape()[0];
        for i in 0..b {
            for j in 0..b {
                prop_assert_eq!(u.at2(i, j), u.at2(j, i));
            }
        }
        let quad: f64 = (0..b).flat_map(|i| (0..b).map(move |j| (i, j))).map(|(i, j)| probe[i] * u.at2(i, j) * probe[j]).sum();
        prop_assert!(quad >= -1e-8);
        let n = gram.normalized.value();
        for i in 0..b {
            let norm: f64 = (0..b).map(|j| n.at2(i, j).powi(2)).sum::<f64>().sqrt();
            prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_nonnegative_and_bounded((t, s) in paired_maps()) {
        // each normalized row has unit norm, so ‖G_T − G_S‖² ≤ 4b
        let b = t.shape()[0] as f64;
        let v = loss(&t, &s);
        prop_assert!(v >= 0.0 && v <= 4.0 / b + 1e-12);
    }

    #[test]
    fn loss_ignores_positive_rescaling((t, s) in paired_maps(), c in 0.001..1000.0f64) {
        let base = loss(&t, &s);
        prop_assert!((loss(&t.map(|v| c * v), &s) - base).abs() <= 1e-6);
        prop_assert!((loss(&t, &s.map(|v| c * v)) - base).abs() <= 1e-6);
    }

    #[test]
    fn loss_follows_a_shared_batch_permutation((t, s) in paired_maps(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let b = t.shape()[0];
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let moved = loss(&t.select_rows(&perm).unwrap(), &s.select_rows(&perm).unwrap());
        prop_assert!((moved - loss(&t, &s)).abs() <= 1e-12);
    }

    #[test]
    fn self_distillation_is_exactly_zero(a in map_strategy(8)) {
        prop_assert_eq!(loss(&a, &a), 0.0);
    }

    #[test]
    fn flatten_then_reshape_is_identity(a in map_strategy(5)) {
        let g = Graph::new();
        let q = flatten(&g.constant(a.clone()), "x").unwrap();
        let back = q.q.reshape(a.shape()).unwrap().value();
        prop_assert_eq!(&*back, &a);
    }

    #[test]
    fn softmax_rows_sum_to_one(z in prop::collection::vec(-50.0..50.0f64, 12), t in 0.1..20.0f64) {
        let g = Graph::new();
        let p = g.constant(Tensor::from_f64(&[3, 4], &z).unwrap()).softmax(t).unwrap().value();
        for row in p.data().chunks(4) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
