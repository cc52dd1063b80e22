//! Full network: encoder plus both branches, batched over conversations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vega_autodiff::{Graph, Scalar, Var};

use crate::data::Dataset;
use crate::encoder::{encode_conversation, encoder_specs, ConvInput, EncoderConfig, Fwd};
use crate::error::{Error, Result};
use crate::heads::{head_specs, heads_forward, HeadConfig, HeadLayout, HeadOutputs};
use crate::modality::PerModality;
use crate::nn::argmax;
use crate::params::{count_params, Bound, ParamSpec, ParamStore};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.heads.validate()
    }
}

/// Data-dependent sizes plus which optional parts are built.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelShape {
    pub input_dims: PerModality<usize>,
    pub num_classes: usize,
    pub num_speakers: usize,
    pub d_anc: usize,
    /// Build the anchoring projection heads.
    pub vega: bool,
    pub single_branch: bool,
}

impl ModelShape {
    pub fn for_dataset(ds: &Dataset, d_anc: usize, vega: bool, single_branch: bool) -> Self {
        Self {
            input_dims: ds.input_dims(),
            num_classes: ds.num_classes(),
            num_speakers: ds.num_speakers,
            d_anc,
            vega,
            single_branch,
        }
    }
}

/// Parameter counts per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub encoder: usize,
    pub supervision: usize,
    pub vega: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub shape: ModelShape,
}

/// Encoder inputs and concatenated labels for a group of conversations.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub convs: Vec<ConvInput>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_dataset(ds: &Dataset, conversations: &[usize]) -> Self {
        let mut convs = Vec::with_capacity(conversations.len());
        let mut labels = Vec::new();
        for &c in conversations {
            let conv = &ds.conversations[c];
            convs.push(ConvInput {
                features: PerModality::from_fn(|m| ds.conversation_features(conv, m)),
                speakers: conv.speakers(),
            });
            labels.extend(conv.labels());
        }
        Self { convs, labels }
    }

    pub fn num_rows(&self) -> usize {
        self.labels.len()
    }
}

impl Model {
    pub fn new(config: ModelConfig, shape: ModelShape) -> Result<Self> {
        config.validate()?;
        if shape.num_classes == 0 || shape.num_speakers == 0 {
            return Err(Error::Config("model needs at least one class and one speaker".into()));
        }
        if (shape.vega || shape.single_branch) && shape.d_anc == 0 {
            return Err(Error::Config("anchor dimension must be positive".into()));
        }
        Ok(Self { config, shape })
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout {
            modalities: self.config.encoder.active(),
            d: self.config.encoder.d,
            d_anc: self.shape.d_anc,
            num_classes: self.shape.num_classes,
            vega: self.shape.vega,
            single_branch: self.shape.single_branch,
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut specs = encoder_specs(&self.config.encoder, &self.shape.input_dims, self.shape.num_speakers);
        specs.extend(head_specs(&self.config.heads, &self.layout()));
        specs
    }

    pub fn param_counts(&self) -> ParamCounts {
        let specs = self.specs();
        ParamCounts {
            encoder: count_params(&specs, "encoder."),
            supervision: count_params(&specs, "sup."),
            vega: count_params(&specs, "vega."),
            total: count_params(&specs, ""),
        }
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        ParamStore::initialize(&self.specs(), seed)
    }

    /// Keeps exactly this model's parameters from `store`, checking shapes.
    pub fn select_params(&self, store: &ParamStore) -> Result<ParamStore> {
        let specs = self.specs();
        for s in &specs {
            let p = store.get(&s.path).ok_or_else(|| Error::MissingParam(s.path.clone()))?;
            if p.shape != s.shape {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    s.path, p.shape, s.shape
                )));
            }
        }
        Ok(store.filtered(|path| specs.iter().any(|s| s.path == path)))
    }

    /// Encodes each conversation separately, stacks the rows, then runs both
    /// branches.
    pub fn forward<T: Scalar, R1: Rng + ?Sized, R2: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        batch: &Batch,
        train: bool,
        rng: &mut R1,
        vega_rng: &mut R2,
    ) -> Result<HeadOutputs> {
        let active = self.config.encoder.active();
        let mut per_mod: Vec<Vec<Var>> = vec![Vec::with_capacity(batch.convs.len()); active.len()];
        {
            let mut f = Fwd { g: &mut *g, p, train, rng: &mut *rng };
            for conv in &batch.convs {
                for (i, (_, v)) in encode_conversation(&mut f, &self.config.encoder, conv)?.into_iter().enumerate() {
                    per_mod[i].push(v);
                }
            }
        }
        let streams = per_mod
            .iter()
            .map(|vs| if vs.len() == 1 { Ok(vs[0]) } else { g.concat(vs, 0) })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        heads_forward(g, p, &self.config.heads, &self.layout(), &streams, train, rng, vega_rng)
    }

    /// Test-time fused-classifier logits, row-major `[rows, classes]`. No
    /// dropout, no anchors.
    pub fn fused_logits(&self, store: &ParamStore, batch: &Batch) -> Result<Vec<f32>> {
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g)?;
        // Eval mode never draws from these.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut vrng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, &p, batch, false, &mut rng, &mut vrng)?;
        Ok(g.values(out.fused_logits).to_vec())
    }

    /// Argmax of [`Model::fused_logits`] per utterance.
    pub fn predict(&self, store: &ParamStore, batch: &Batch) -> Result<Vec<usize>> {
        let c = self.shape.num_classes;
        Ok(self.fused_logits(store, batch)?.chunks(c).map(argmax).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::Modality;

    fn full_scale_model(vega: bool) -> Model {
        Model::new(
            ModelConfig::default(),
            ModelShape {
                input_dims: PerModality([1024, 1582, 342]),
                num_classes: 6,
                num_speakers: 2,
                d_anc: 768,
                vega,
                single_branch: false,
            },
        )
        .unwrap()
    }

    #[test]
    fn counts_partition_total() {
        let c = full_scale_model(true).param_counts();
        assert_eq!(c.encoder + c.supervision + c.vega, c.total);
        let hidden = 1024;
        assert_eq!(c.vega, 2 * (1280 * hidden + hidden + hidden * 768 + 768));
        let without = full_scale_model(false).param_counts();
        assert_eq!(without.vega, 0);
        assert_eq!(without.total + c.vega, c.total);
    }

    #[test]
    fn modality_order_follows_canonical() {
        let mut cfg = ModelConfig::default();
        cfg.encoder.modalities = vec![Modality::Visual, Modality::Text];
        let m = Model::new(cfg, full_scale_model(false).shape).unwrap();
        assert_eq!(m.layout().modalities, vec![Modality::Text, Modality::Visual]);
    }
}
