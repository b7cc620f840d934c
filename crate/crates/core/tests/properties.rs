//! Property tests over random inputs.

use dacl::bank::ClassMemoryBank;
use dacl::cotrain::warmup_lambda;
use dacl::geometry::{density_multi_scale, density_single_scale, knn_graph, ClassEmbedding, Origin, ScaleSet};
use dacl::loss::{claim1_verify, positiveness, soft_contrastive_loss, ClassContrast, LossOptions};
use dacl::metrics::{asd, dice_jaccard, LabelMap};
use dacl::prototype::{masked_average_pool, BinaryMask, FeatureMap};
use dacl::sampler::{sample_all, SamplerConfig};
use dacl::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn normalized(v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-3).then(|| v.into_iter().map(|x| x / n).collect())
}

fn pool_strategy(d: usize, max: usize) -> impl Strategy<Value = Vec<ClassEmbedding>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), 2..max).prop_map(|vs| {
        vs.into_iter()
            .filter_map(normalized)
            .enumerate()
            .map(|(i, v)| ClassEmbedding::new(v, 0, Origin::Batch, i as u64 * 7 + 3))
            .collect()
    })
}

fn label_map(w: usize, h: usize) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(0u8..2, w * h).prop_map(move |l| LabelMap::new(w, h, l).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn density_is_bounded_and_order_free(pool in pool_strategy(5, 40), k in 1usize..6) {
        prop_assume!(pool.len() >= 2);
        let scales = ScaleSet::single(k).unwrap();
        let d = density_multi_scale(&pool, &pool, &scales).unwrap();
        prop_assert!(d.iter().all(|x| (-1.0 - 1e-12..=1.0 + 1e-12).contains(x)));
        let single = density_single_scale(&knn_graph(&pool, &pool, k).unwrap()).unwrap();
        prop_assert_eq!(&d, &single);
        let mut rev = pool.clone();
        rev.reverse();
        prop_assert_eq!(density_multi_scale(&pool, &rev, &scales).unwrap(), d);
    }

    #[test]
    fn closer_neighbor_never_lowers_density(pool in pool_strategy(4, 30), k in 1usize..5) {
        prop_assume!(pool.len() >= 2);
        let q = &pool[0];
        let scales = ScaleSet::single(k).unwrap();
        let before = density_multi_scale(std::slice::from_ref(q), &pool, &scales).unwrap()[0];
        let mut grown = pool.clone();
        grown.push(ClassEmbedding::new(q.vector.clone(), 0, Origin::Bank, 1_000_000));
        let after = density_multi_scale(std::slice::from_ref(q), &grown, &scales).unwrap()[0];
        prop_assert!(after >= before - 1e-15);
    }

    #[test]
    fn pooling_ignores_pixel_order_and_scale(
        values in prop::collection::vec(-2.0f64..2.0, 12 * 3),
        bits in prop::collection::vec(any::<bool>(), 12),
        s in 0.1f64..10.0,
        rot in 0usize..12,
    ) {
        prop_assume!(bits.iter().any(|&b| b));
        let f = FeatureMap::new(4, 3, 3, values.clone()).unwrap();
        let m = BinaryMask { width: 4, height: 3, bits: bits.clone() };
        let base = masked_average_pool(&f, &m).unwrap().unwrap();

        let mut pv = values.clone();
        pv.rotate_left(rot * 3);
        let mut pb = bits.clone();
        pb.rotate_left(rot);
        let permuted = masked_average_pool(
            &FeatureMap::new(4, 3, 3, pv).unwrap(),
            &BinaryMask { width: 4, height: 3, bits: pb },
        ).unwrap().unwrap();
        for (a, b) in base.iter().zip(&permuted) {
            prop_assert!((a - b).abs() < 1e-12);
        }

        let scaled = FeatureMap::new(4, 3, 3, values.iter().map(|v| v * s).collect()).unwrap();
        let sv = masked_average_pool(&scaled, &m).unwrap().unwrap();
        for (a, b) in base.iter().zip(&sv) {
            prop_assert!((a * s - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bank_never_exceeds_capacity(cap in 1usize..20, bursts in prop::collection::vec(0usize..6, 1..40)) {
        let mut bank = ClassMemoryBank::new(0, cap).unwrap();
        let mut seq = 0u64;
        let mut pushed = 0;
        for n in bursts {
            let before = bank.len();
            bank.push((0..n).map(|_| {
                seq += 1;
                ClassEmbedding::new(vec![1.0], 0, Origin::Batch, seq).with_density(seq as f64 * 1e-3)
            })).unwrap();
            pushed += n;
            prop_assert!(bank.len() <= cap && bank.len() >= before);
            prop_assert_eq!(bank.len(), pushed.min(cap));
        }
        for e in bank.snapshot() {
            prop_assert_eq!(e.density, Some(e.seq_id as f64 * 1e-3));
        }
    }

    #[test]
    fn anchors_sit_below_batch_positives(
        dens in prop::collection::vec((0u8..3, 0.0f64..1.0), 2..40),
        n_q in 1usize..6,
        n_p in 1usize..8,
        n_m in 1usize..8,
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let batch: Vec<ClassEmbedding> = dens
            .iter()
            .enumerate()
            .map(|(i, &(c, d))| ClassEmbedding::new(vec![1.0, 0.0], c as usize, Origin::Batch, i as u64).with_density(d))
            .collect();
        let cfg = SamplerConfig { n_q, n_p_plus: n_p, n_p_minus: n_m, random: false, negatives_from_all: false };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for s in sample_all(&batch, &vec![Vec::new(); 3], &cfg, &mut rng) {
            prop_assert!(s.anchors.len() <= n_q && s.positives.len() <= n_p && s.negatives.len() <= n_m);
            let top = s.anchors.iter().filter_map(|a| a.density).fold(f64::NEG_INFINITY, f64::max);
            let bottom = s.positives.iter().filter_map(|p| p.density).fold(f64::INFINITY, f64::min);
            prop_assert!(top <= bottom);
        }
    }

    #[test]
    fn positiveness_sums_to_one_and_divides_by_gamma(
        raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..8),
        center in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let Some(center) = normalized(center) else { return Ok(()) };
        let anchors: Vec<ClassEmbedding> = raw
            .into_iter()
            .filter_map(normalized)
            .enumerate()
            .map(|(i, v)| ClassEmbedding::new(v, 0, Origin::Batch, i as u64))
            .collect();
        prop_assume!(!anchors.is_empty());
        let w = positiveness(0, &anchors, &center, &vec![1.0; anchors.len()]).unwrap();
        prop_assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let w2 = positiveness(0, &anchors, &center, &vec![2.0; anchors.len()]).unwrap();
        for (a, b) in w.weights.iter().zip(&w2.weights) {
            prop_assert!((a / 2.0 - b).abs() < 1e-15);
        }
    }

    #[test]
    fn simplex_optimum_ignores_weight_scale(w in prop::collection::vec(0.2f64..4.0, 2..6), c in 0.1f64..10.0) {
        let a = claim1_verify(&w, 20_000, 1.0).unwrap();
        let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
        let b = claim1_verify(&scaled, 20_000, 1.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn warmup_increases_after_the_gate(t in 1000usize..2999) {
        let a = warmup_lambda(t, 3000, 0.1, 5.0).unwrap();
        let b = warmup_lambda(t + 1, 3000, 0.1, 5.0).unwrap();
        prop_assert!(a < b && b <= 0.1);
    }

    #[test]
    fn overlap_metrics_are_symmetric(a in label_map(7, 6), b in label_map(7, 6)) {
        let ab = dice_jaccard(&a, &b, 1).unwrap();
        let ba = dice_jaccard(&b, &a, 1).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(asd(&a, &b, 1).unwrap(), asd(&b, &a, 1).unwrap());
    }

    #[test]
    fn surface_distance_survives_joint_translation(a in label_map(5, 5), b in label_map(5, 5), dx in 0usize..4, dy in 0usize..4) {
        let shift = |m: &LabelMap| {
            let mut out = vec![0u8; 12 * 12];
            for y in 0..5 {
                for x in 0..5 {
                    out[(y + 2 + dy) * 12 + x + 2 + dx] = m.labels[y * 5 + x];
                }
            }
            LabelMap::new(12, 12, out).unwrap()
        };
        let pad = |m: &LabelMap| {
            let mut out = vec![0u8; 12 * 12];
            for y in 0..5 {
                for x in 0..5 {
                    out[(y + 2) * 12 + x + 2] = m.labels[y * 5 + x];
                }
            }
            LabelMap::new(12, 12, out).unwrap()
        };
        prop_assert_eq!(asd(&pad(&a), &pad(&b), 1).unwrap(), asd(&shift(&a), &shift(&b), 1).unwrap());
    }

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-30.0f64..30.0, 4 * 5)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![4, 5], values).unwrap());
        let s = tape.softmax_lastdim(x);
        for r in 0..4 {
            prop_assert!((tape.value(s).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn contrastive_loss_leaves_keys_without_gradient() {
    let mut tape = Tape::new();
    let anchors = Tensor::new(vec![2, 2], vec![0.6, 0.8, 1.0, 0.0]).unwrap().with_requires_grad(true);
    let neg = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap().with_requires_grad(true);
    let a = tape.leaf(&anchors);
    let n = tape.leaf(&neg);
    let cls = ClassContrast {
        class_id: 0,
        anchors: a,
        center: vec![0.8, 0.6],
        negatives: vec![tape.value(n).data().to_vec()],
        gamma: vec![1.0, 1.0],
    };
    let opts = LossOptions { tau: 0.5, uniform_w: false, infonce_denominator: false };
    let terms = soft_contrastive_loss(&mut tape, &[cls], opts).unwrap();
    let g = tape.backward(terms.total).unwrap();
    assert!(g.get(a).unwrap().iter().any(|v| *v != 0.0));
    assert!(g.get(n).is_none_or(|v| v.iter().all(|x| *x == 0.0)));
}

#[test]
fn lower_center_similarity_raises_the_anchor_term() {
    // the negative stays orthogonal to every anchor below
    let term = |anchor: [f64; 3]| {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 3], anchor.to_vec()).unwrap());
        let cls = ClassContrast {
            class_id: 0,
            anchors: a,
            center: vec![1.0, 0.0, 0.0],
            negatives: vec![vec![0.0, 0.0, 1.0]],
            gamma: vec![1.0],
        };
        let opts = LossOptions { tau: 0.3, uniform_w: false, infonce_denominator: false };
        let t = soft_contrastive_loss(&mut tape, &[cls], opts).unwrap();
        tape.value(t.total).data()[0]
    };
    let near = term([1.0, 0.0, 0.0]);
    let mid = term([0.8, 0.6, 0.0]);
    let far = term([0.0, 1.0, 0.0]);
    assert!(near < mid && mid < far);
}
