use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vega_core::anchor::{anchor_distribution, anchor_scores, build_centers, sample_anchor, AnchorChoice, AnchorSet, SamplingPolicy};

/// Compensated summation, independent of the accumulation in the library.
fn kahan_mean(vecs: &[Vec<f32>], k: usize) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in vecs {
        let y = v[k] as f64 - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum / vecs.len() as f64
}

fn random_instances(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> Vec<Vec<Vec<f32>>> {
    (0..classes)
        .map(|_| {
            let n = rng.random_range(1..50);
            (0..n)
                .map(|_| (0..dim).map(|_| rng.random_range(-100.0f32..100.0)).collect())
                .collect()
        })
        .collect()
}

#[test]
fn centers_match_compensated_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let inst = random_instances(&mut rng, 5, 24);
        let names: Vec<String> = (0..5).map(|c| format!("k{c}")).collect();
        let centers = build_centers(&names, &inst).unwrap();
        for (c, center) in centers.iter().enumerate() {
            for (k, &v) in center.iter().enumerate() {
                let want = kahan_mean(&inst[c], k);
                assert!((v as f64 - want).abs() <= 1e-6 * want.abs().max(1.0), "class {c} dim {k}");
            }
        }
    }
}

#[test]
fn center_frequency_is_one_minus_q() {
    let inst = vec![vec![vec![1.0f32, 0.0]; 7]];
    let set = AnchorSet::new(vec!["x".into()], inst).unwrap();
    let n = 100_000;
    for q in [0.0, 0.2, 0.5, 0.7, 1.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let policy = SamplingPolicy::new(q).unwrap();
        let centers = (0..n)
            .filter(|_| sample_anchor(&set, 0, &policy, &mut rng) == AnchorChoice::Center)
            .count();
        let p = 1.0 - q;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((centers as f64 - n as f64 * p).abs() <= 3.0 * sigma, "q={q}: {centers} centers");
    }
}

#[test]
fn instance_draws_are_uniform() {
    let k = 10;
    let set = AnchorSet::new(vec!["x".into()], vec![vec![vec![1.0f32]; k]]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let policy = SamplingPolicy::new(1.0).unwrap();
    let mut counts = vec![0usize; k];
    let n = 50_000;
    for _ in 0..n {
        match sample_anchor(&set, 0, &policy, &mut rng) {
            AnchorChoice::Instance(j) => counts[j] += 1,
            AnchorChoice::Center => panic!("q=1 drew a center"),
        }
    }
    let expected = n as f64 / k as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9th percentile of chi-square with 9 degrees of freedom.
    assert!(chi2 < 27.88, "chi2 {chi2}");
}

#[test]
fn sampling_policy_rejects_out_of_range_q() {
    assert!(SamplingPolicy::new(-0.1).is_err());
    assert!(SamplingPolicy::new(1.5).is_err());
    assert!(SamplingPolicy::new(f64::NAN).is_err());
}

/// Cosine computed directly in f64.
fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

proptest! {
    #[test]
    fn scores_match_direct_cosine(
        x in prop::collection::vec(-5.0f32..5.0, 8),
        a in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 8), 1..6),
    ) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-2));
        prop_assume!(a.iter().all(|r| r.iter().any(|v| v.abs() > 1e-2)));
        let refs: Vec<&[f32]> = a.iter().map(Vec::as_slice).collect();
        let (s, warnings) = anchor_scores(&x, &refs).unwrap();
        prop_assert!(warnings.is_empty());
        for (got, row) in s.iter().zip(&a) {
            prop_assert!((*got as f64 - cosine(&x, row)).abs() < 1e-5);
        }
    }

    #[test]
    fn scores_are_scale_invariant(
        x in prop::collection::vec(-5.0f32..5.0, 6),
        a in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 6), 1..5),
        scale in 0.01f32..100.0,
    ) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-2));
        prop_assume!(a.iter().all(|r| r.iter().any(|v| v.abs() > 1e-2)));
        let refs: Vec<&[f32]> = a.iter().map(Vec::as_slice).collect();
        let scaled: Vec<f32> = x.iter().map(|v| v * scale).collect();
        let (s1, _) = anchor_scores(&x, &refs).unwrap();
        let (s2, _) = anchor_scores(&scaled, &refs).unwrap();
        for (p, q) in s1.iter().zip(&s2) {
            prop_assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn distribution_is_a_probability_vector(s in prop::collection::vec(-1.0f32..1.0, 1..10)) {
        let d = anchor_distribution(&s).unwrap();
        prop_assert!((d.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        prop_assert!(d.iter().all(|&p| p > 0.0));
    }
}

#[test]
fn zero_vector_scores_zero_with_warning() {
    let a = [1.0f32, 2.0];
    let (s, warnings) = anchor_scores(&[0.0, 0.0], &[&a]).unwrap();
    assert_eq!(s, vec![0.0]);
    assert!(!warnings.is_empty());
}

#[test]
fn per_class_truncation_and_alignment() {
    let set = AnchorSet::new(
        vec!["a".into(), "b".into()],
        vec![vec![vec![1.0, 0.0], vec![3.0, 0.0]], vec![vec![0.0, 2.0]]],
    )
    .unwrap();
    assert_eq!(set.center(0), &[2.0, 0.0]);
    let flipped = set.aligned_to(&["b".into(), "a".into()]).unwrap();
    assert_eq!(flipped.center(0), &[0.0, 2.0]);
    assert!(set.aligned_to(&["a".into(), "c".into()]).is_err());
    let truncated = AnchorSet::from_file(&set.centers_file(), Some(1)).unwrap();
    assert_eq!(truncated.instances(0).len(), 1);
}
