//! Training loop, evaluation, and anchor-alignment measurement.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vega_autodiff::{Graph, Tensor};

use crate::anchor::{AnchorSet, SamplingPolicy};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{Batch, Model, ModelConfig, ModelShape};
use crate::objective::{build_objective, AblationMode, LossReport, LossWeights};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Conversations per optimizer step.
    pub batch_size: usize,
    /// Stop after this many epochs without a validation w-F1 improvement;
    /// 0 disables early stopping.
    pub patience: usize,
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub sampling: SamplingPolicy,
    pub ablation: AblationMode,
    /// Keep only the first n instance anchors of each class.
    pub images_per_class: Option<usize>,
    /// Build the anchoring head even when the objective does not use it
    /// (`None` builds it exactly when needed).
    pub vega_head: Option<bool>,
    /// Emit a log event for every optimizer step, not just every epoch.
    pub log_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 15,
            patience: 10,
            optimizer: AdamWConfig::default(),
            weights: LossWeights::default(),
            sampling: SamplingPolicy::default(),
            ablation: AblationMode::Full,
            images_per_class: None,
            vega_head: None,
            log_steps: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.images_per_class == Some(0) {
            return Err(Error::Config("images_per_class must be at least 1".into()));
        }
        self.optimizer.validate()?;
        self.weights.validate()?;
        self.sampling.validate()
    }

    pub fn builds_vega_head(&self) -> bool {
        let plan = self.ablation.plan();
        self.vega_head.unwrap_or(plan.uses_anchors()) || plan.single_branch
    }
}

/// Independent random streams of one run.
struct Streams {
    shuffle: ChaCha8Rng,
    dropout: ChaCha8Rng,
    vega_dropout: ChaCha8Rng,
    anchors: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            shuffle: stream(1),
            dropout: stream(2),
            vega_dropout: stream(3),
            anchors: stream(4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEvent {
    Step {
        epoch: usize,
        step: usize,
        loss: LossReport,
    },
    Epoch {
        epoch: usize,
        mean_loss: f64,
        val_acc: f64,
        val_weighted_f1: f64,
        best_epoch: usize,
    },
    EarlyStop {
        epoch: usize,
        best_epoch: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Parameters at the best validation epoch (the initialization when no
    /// epoch ran).
    pub best: ParamStore,
    pub last: ParamStore,
    /// 1-based; 0 means the initialization.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Model used at test time: same supervision weights, no anchoring head
/// unless classification itself happens in anchor space.
pub fn inference_model(model: &Model) -> Model {
    let mut shape = model.shape.clone();
    shape.vega = false;
    Model {
        config: model.config.clone(),
        shape,
    }
}

/// Fused-classifier predictions for the given conversations, in order.
pub fn predict(model: &Model, store: &ParamStore, ds: &Dataset, convs: &[usize]) -> Result<Vec<usize>> {
    let inf = inference_model(model);
    let params = inf.select_params(store)?;
    let mut preds = Vec::new();
    for chunk in convs.chunks(15) {
        preds.extend(inf.predict(&params, &Batch::from_dataset(ds, chunk))?);
    }
    Ok(preds)
}

pub fn evaluate(model: &Model, store: &ParamStore, ds: &Dataset, convs: &[usize]) -> Result<MetricsReport> {
    if model.shape.num_classes != ds.num_classes() {
        return Err(Error::ClassMismatch {
            model: model.shape.num_classes,
            data: ds.num_classes(),
        });
    }
    let preds = predict(model, store, ds, convs)?;
    let labels: Vec<usize> = convs.iter().flat_map(|&c| ds.conversations[c].labels()).collect();
    MetricsReport::from_predictions(&ds.classes, &labels, &preds)
}

/// Mean cosine between each utterance's projected fused feature and its own
/// class's center anchor, in eval mode.
pub fn mean_center_cosine(
    model: &Model,
    store: &ParamStore,
    ds: &Dataset,
    convs: &[usize],
    anchors: &AnchorSet,
) -> Result<f64> {
    if !model.shape.vega && !model.shape.single_branch {
        return Err(Error::Config("measuring anchor alignment needs the anchoring head".into()));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in convs.chunks(15) {
        let batch = Batch::from_dataset(ds, chunk);
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g)?;
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward(&mut g, &p, &batch, false, &mut r1, &mut r2)?;
        let fp = out.fused_proj.expect("anchoring head present");
        let centers = g.constant(Tensor::new(
            [anchors.num_classes(), anchors.dim()],
            anchors.center_matrix(),
        )?);
        let cos = g.row_cosine(fp, centers)?;
        let c = anchors.num_classes();
        for (r, &y) in batch.labels.iter().enumerate() {
            total += g.values(cos)[r * c + y] as f64;
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

/// Runs one optimizer step and returns its loss report.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &Model,
    store: &mut ParamStore,
    opt: &mut AdamW,
    batch: &Batch,
    anchors: Option<&AnchorSet>,
    cfg: &TrainConfig,
    streams: &mut Streams,
    step: usize,
) -> Result<LossReport> {
    let plan = cfg.ablation.plan();
    let mut g = Graph::<f32>::new();
    let p = store.bind(&mut g)?;
    let out = model.forward(&mut g, &p, batch, true, &mut streams.dropout, &mut streams.vega_dropout)?;
    let anchor_var = if plan.uses_anchors() {
        let set = anchors.ok_or_else(|| Error::Config("objective uses anchors but no anchor set was given".into()))?;
        // One draw per class per step, shared by every utterance in the batch.
        let choices = set.sample_all(&cfg.sampling, &mut streams.anchors);
        Some(g.constant(Tensor::new([set.num_classes(), set.dim()], set.matrix(&choices))?))
    } else {
        None
    };
    let obj = build_objective(&mut g, &out, anchor_var, &batch.labels, &plan, &cfg.weights)?;
    let report = LossReport::from_vars(&g, &obj);
    if let Some((term, value)) = report.non_finite() {
        return Err(Error::NonFiniteLoss { step, term, value });
    }
    g.backward(obj.total)?;
    let grads: BTreeMap<String, Vec<f32>> = p
        .iter()
        .map(|(path, &v)| {
            g.grad(v)
                .map(|gr| (path.clone(), gr.to_vec()))
                .ok_or_else(|| Error::MissingGrad(path.clone()))
        })
        .collect::<Result<_>>()?;
    opt.step(store, &grads)?;
    Ok(report)
}

/// Trains on `train` conversations, selecting the best epoch by validation
/// w-F1 on `val`. Deterministic for a fixed seed.
#[allow(clippy::too_many_arguments)]
pub fn train(
    ds: &Dataset,
    train_convs: &[usize],
    val_convs: &[usize],
    anchors: Option<&AnchorSet>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut dyn FnMut(&LogEvent),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_convs.is_empty() {
        return Err(Error::EmptySplit { name: "train" });
    }
    if val_convs.is_empty() {
        return Err(Error::EmptySplit { name: "validation" });
    }
    let plan = cfg.ablation.plan();
    let vega = cfg.builds_vega_head();
    let anchors = match anchors {
        Some(a) => {
            let a = a.aligned_to(&ds.classes)?;
            Some(match cfg.images_per_class {
                Some(k) => AnchorSet::new(
                    a.classes().to_vec(),
                    (0..a.num_classes()).map(|c| a.instances(c)[..k.min(a.instances(c).len())].to_vec()).collect(),
                )?,
                None => a,
            })
        }
        None if vega || plan.uses_anchors() => {
            return Err(Error::Config("this configuration needs an anchor file".into()));
        }
        None => None,
    };
    let d_anc = anchors.as_ref().map_or(0, AnchorSet::dim);
    let model = Model::new(
        model_cfg.clone(),
        ModelShape::for_dataset(ds, d_anc, vega, plan.single_branch),
    )?;

    let mut store = model.init(seed);
    let mut opt = AdamW::new(cfg.optimizer);
    let mut streams = Streams::new(seed);
    let mut best = store.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut order = train_convs.to_vec();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut streams.shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch = Batch::from_dataset(ds, chunk);
            let report = train_step(&model, &mut store, &mut opt, &batch, anchors.as_ref(), cfg, &mut streams, step)?;
            loss_sum += report.total;
            batches += 1;
            if cfg.log_steps {
                log(&LogEvent::Step { epoch, step, loss: report });
            }
        }
        let val = evaluate(&model, &store, ds, val_convs)?;
        if val.weighted_f1 > best_score {
            best_score = val.weighted_f1;
            best_epoch = epoch;
            best = store.clone();
        }
        let mean_loss = loss_sum / batches as f64;
        log(&LogEvent::Epoch {
            epoch,
            mean_loss,
            val_acc: val.acc,
            val_weighted_f1: val.weighted_f1,
            best_epoch,
        });
        history.push(EpochRecord { epoch, mean_loss, val });
        if cfg.patience > 0 && epoch - best_epoch >= cfg.patience {
            log(&LogEvent::EarlyStop { epoch, best_epoch });
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        best,
        last: store,
        best_epoch,
        history,
    })
}
