//! Finite-difference check of the complete training objective on a tiny
//! synthetic batch, plus exact objective gradients for comparisons.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vega_autodiff::gradcheck::{analytic_gradients, check, GradCheckConfig, GradCheckReport};
use vega_autodiff::{Graph, Tensor, Var};

use crate::anchor::{AnchorSet, SamplingPolicy};
use crate::data::{synth_generate, Dataset, SynthSpec};
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::heads::HeadConfig;
use crate::modality::PerModality;
use crate::model::{Batch, Model, ModelConfig, ModelShape};
use crate::objective::{build_objective_with, FrozenTeachers, LossWeights, ObjectivePlan};
use crate::params::{Bound, ParamStore};

/// A small model, its parameters, a two-utterance batch and one sampled
/// anchor matrix, all derived from `seed`.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub model: Model,
    pub store: ParamStore,
    pub batch: Batch,
    pub anchors: Vec<f32>,
    pub dataset: Dataset,
    pub anchor_set: AnchorSet,
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d: 8,
            k: 1,
            heads: 2,
            transformer_layers: 1,
            dropout: 0.1,
            ..EncoderConfig::default()
        },
        heads: HeadConfig {
            proj_hidden: Some(8),
            ..HeadConfig::default()
        },
    }
}

pub fn fixture(seed: u64, plan: &ObjectivePlan) -> Result<Fixture> {
    let spec = SynthSpec {
        num_classes: 3,
        num_conversations: 1,
        utterances_per_conv: 2,
        dims: PerModality([4, 3, 5]),
        anchor_dim: 6,
        anchors_per_class: 3,
        separation: 1.0,
        seed,
    };
    let (dataset, anchor_file) = synth_generate(&spec)?;
    let anchor_set = AnchorSet::from_file(&anchor_file, None)?;
    let model = Model::new(
        tiny_model_config(),
        ModelShape::for_dataset(&dataset, anchor_set.dim(), true, plan.single_branch),
    )?;
    // Move off the initialization so zero biases and unit gains are not
    // special points of the check.
    let mut store = model.init(seed);
    let mut jitter = ChaCha8Rng::seed_from_u64(seed);
    jitter.set_stream(7);
    for (_, p) in store.iter_mut() {
        for v in &mut p.values {
            *v += jitter.random_range(-0.2f32..0.2);
        }
    }
    let batch = Batch::from_dataset(&dataset, &[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let choices = anchor_set.sample_all(&SamplingPolicy { q: 0.5 }, &mut rng);
    let anchors = anchor_set.matrix(&choices);
    Ok(Fixture {
        model,
        store,
        batch,
        anchors,
        dataset,
        anchor_set,
    })
}

/// Builds the objective in `g` from already-bound parameters. Dropout masks
/// come from `seed`, so repeated calls see identical masks.
pub fn objective_graph(
    g: &mut Graph<f64>,
    p: &Bound,
    fx: &Fixture,
    plan: &ObjectivePlan,
    weights: &LossWeights,
    seed: u64,
    frozen: Option<&FrozenTeachers<f64>>,
) -> Result<(Var, FrozenTeachers<f64>)> {
    let mut r1 = ChaCha8Rng::seed_from_u64(seed);
    r1.set_stream(2);
    let mut r2 = ChaCha8Rng::seed_from_u64(seed);
    r2.set_stream(3);
    let out = fx.model.forward(g, p, &fx.batch, true, &mut r1, &mut r2)?;
    let c = fx.anchor_set.num_classes();
    let a = g.constant(Tensor::from_f32([c, fx.anchor_set.dim()], &fx.anchors)?);
    let obj = build_objective_with(g, &out, Some(a), &fx.batch.labels, plan, weights, frozen)?;
    let teachers = FrozenTeachers {
        fused: g.values(obj.fused_probs).to_vec(),
        anc_fused: obj.anc_fused_probs.map(|v| g.values(v).to_vec()),
    };
    Ok((obj.total, teachers))
}

/// Objective value and gradient of every parameter, in double precision.
pub fn objective_gradients(
    fx: &Fixture,
    plan: &ObjectivePlan,
    weights: &LossWeights,
    seed: u64,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let inputs = fx.store.to_f64_tensors()?;
    let paths: Vec<String> = fx.store.paths().map(str::to_string).collect();
    let f = |g: &mut Graph<f64>, vars: &[Var]| {
        let p = Bound::from_vars(paths.iter().map(String::as_str), vars);
        objective_graph(g, &p, fx, plan, weights, seed, None)
            .map(|(v, _)| v)
            .map_err(to_tensor_error)
    };
    let (value, grads) = analytic_gradients(&inputs, &f)?;
    Ok((value, paths.iter().cloned().zip(grads).collect()))
}

fn to_tensor_error(e: crate::Error) -> vega_autodiff::TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => vega_autodiff::TensorError::InvalidArgument {
            op: "objective",
            msg: other.to_string(),
        },
    }
}

#[derive(Debug, Clone)]
pub struct ObjectiveCheck {
    pub seed: u64,
    pub params: usize,
    pub report: GradCheckReport,
}

/// Central differences on every parameter entry of the full objective.
///
/// Distillation teachers are detached in training, so the check holds them
/// at their values for the unperturbed parameters.
pub fn check_objective(seed: u64, plan: &ObjectivePlan, weights: &LossWeights, cfg: GradCheckConfig) -> Result<ObjectiveCheck> {
    let fx = fixture(seed, plan)?;
    let inputs = fx.store.to_f64_tensors()?;
    let paths: Vec<String> = fx.store.paths().map(str::to_string).collect();
    let teachers = {
        let mut g = Graph::<f64>::new();
        let p = fx.store.bind(&mut g)?;
        objective_graph(&mut g, &p, &fx, plan, weights, seed, None)?.1
    };
    let f = |g: &mut Graph<f64>, vars: &[Var]| {
        let p = Bound::from_vars(paths.iter().map(String::as_str), vars);
        objective_graph(g, &p, &fx, plan, weights, seed, Some(&teachers))
            .map(|(v, _)| v)
            .map_err(to_tensor_error)
    };
    let report = check(&inputs, f, cfg)?;
    Ok(ObjectiveCheck {
        seed,
        params: fx.store.total(),
        report,
    })
}
