use std::collections::BTreeMap;

use vega_core::gradcheck::{check_objective, fixture, objective_gradients};
use vega_core::model::{Batch, Model, ModelConfig, ModelShape};
use vega_core::objective::{AblationMode, LossWeights, Term};
use vega_core::train::inference_model;
use vega_core::PerModality;
use vega_autodiff::gradcheck::GradCheckConfig;

fn max_diff(a: &BTreeMap<String, Vec<f64>>, b: &BTreeMap<String, Vec<f64>>) -> f64 {
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    a.iter()
        .flat_map(|(k, va)| va.iter().zip(&b[k]).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Removing a term from the graph and zeroing its weight are the same
/// objective.
#[test]
fn zeroed_weight_equals_removed_term() {
    let full = AblationMode::Full.plan();
    for seed in [1, 2] {
        let fx = fixture(seed, &full).unwrap();
        let (_, reference) = objective_gradients(&fx, &full, &LossWeights::default(), seed).unwrap();
        for mode in [
            AblationMode::NoAncFuse,
            AblationMode::NoAncUni,
            AblationMode::NoAncDist,
            AblationMode::ClsOnly,
            AblationMode::AnchorOnly,
        ] {
            let plan = mode.plan();
            let mut zeroed = LossWeights::default();
            for t in Term::ALL.into_iter().filter(|&t| !plan.has(t)) {
                zeroed.set(t, 0.0);
            }
            let (va, ga) = objective_gradients(&fx, &full, &zeroed, seed).unwrap();
            let (vb, gb) = objective_gradients(&fx, &plan, &LossWeights::default(), seed).unwrap();
            assert!((va - vb).abs() <= 1e-6, "{mode}: loss {va} vs {vb}");
            assert!(max_diff(&ga, &gb) <= 1e-6, "{mode}: gradients differ");
            assert!(max_diff(&ga, &reference) > 1e-6, "{mode}: removing terms changed nothing");
        }
    }
}

#[test]
fn removing_terms_one_at_a_time_matches_without() {
    let full = AblationMode::Full.plan();
    let fx = fixture(3, &full).unwrap();
    for t in Term::ALL {
        let mut w = LossWeights::default();
        w.set(t, 0.0);
        let (_, ga) = objective_gradients(&fx, &full, &w, 3).unwrap();
        let (_, gb) = objective_gradients(&fx, &full.without(t), &LossWeights::default(), 3).unwrap();
        assert!(max_diff(&ga, &gb) <= 1e-6, "{}", t.name());
    }
}

#[test]
fn full_objective_passes_finite_differences() {
    let cfg = GradCheckConfig {
        max_entries_per_input: Some(4),
        ..GradCheckConfig::default()
    };
    for mode in [AblationMode::Full, AblationMode::SingleBranch, AblationMode::ClsTeacherAnc] {
        let r = check_objective(7, &mode.plan(), &LossWeights::default(), cfg).unwrap();
        assert!(r.report.checked > 100);
        assert!(r.report.passed(), "{mode}: {:?}", &r.report.mismatches[..r.report.mismatches.len().min(3)]);
    }
}

#[test]
fn anchoring_head_does_not_change_test_time_logits() {
    let plan = AblationMode::Full.plan();
    let fx = fixture(4, &plan).unwrap();
    let with_head = fx.model.clone();
    assert!(with_head.shape.vega);
    let without = inference_model(&with_head);
    assert!(!without.shape.vega);
    let batch = Batch::from_dataset(&fx.dataset, &[0]);
    let a = with_head.fused_logits(&fx.store, &batch).unwrap();
    let b = without.fused_logits(&without.select_params(&fx.store).unwrap(), &batch).unwrap();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert!(without.select_params(&fx.store).unwrap().count("vega.") == 0);
}

#[test]
fn anchoring_head_share_at_full_scale() {
    let shape = |vega| ModelShape {
        input_dims: PerModality([1024, 1582, 342]),
        num_classes: 6,
        num_speakers: 2,
        d_anc: 768,
        vega,
        single_branch: false,
    };
    let with = Model::new(ModelConfig::default(), shape(true)).unwrap().param_counts();
    let without = Model::new(ModelConfig::default(), shape(false)).unwrap().param_counts();
    assert_eq!(with.total - without.total, with.vega);
    let share = with.vega as f64 / with.total as f64;
    assert!((0.02..=0.10).contains(&share), "share {share}");
}
