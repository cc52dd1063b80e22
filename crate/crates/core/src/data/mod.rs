//! Conversation data model, on-disk formats, splitting and synthetic data.

pub(crate) mod binary;
mod manifest;
mod split;
mod synth;

use std::sync::Arc;

pub use binary::{
    decode_anchor_file, decode_feature_table, encode_anchor_file, encode_feature_table,
    read_anchor_file, read_feature_file, write_anchor_file, write_feature_file, ANCHOR_MAGIC,
    FEATURE_MAGIC,
};
pub use manifest::{load_manifest, write_manifest, Manifest, ManifestConversation, ManifestUtterance};
pub use split::{split, split_indices, Split};
pub use synth::{synth_generate, SynthSpec};

use crate::error::FormatError;
use crate::modality::{Modality, PerModality};

/// Utterance-level feature vectors of one modality, row-major `num_rows × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub modality: Modality,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureTable {
    pub fn new(modality: Modality, dim: usize, data: Vec<f32>) -> Result<Self, FormatError> {
        if dim == 0 {
            return Err(FormatError::ZeroDim);
        }
        if data.len() % dim != 0 {
            return Err(FormatError::Invalid(format!(
                "{} values do not fill rows of width {dim}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite { index });
        }
        Ok(Self { modality, dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub label: usize,
    /// Row of each modality's feature table holding this utterance.
    pub rows: PerModality<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub id: String,
    /// Temporal order.
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.label).collect()
    }

    pub fn speakers(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.speaker).collect()
    }
}

/// A resolved dataset. Feature tables are shared between splits and never
/// mutated after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub num_speakers: usize,
    pub features: PerModality<Arc<FeatureTable>>,
    pub conversations: Vec<Conversation>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_utterances(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    pub fn input_dims(&self) -> PerModality<usize> {
        self.features.map(|_, t| t.dim())
    }

    /// Row-major `N × d_m` features of one conversation in one modality.
    pub fn conversation_features(&self, conv: &Conversation, m: Modality) -> Vec<f32> {
        let table = &self.features[m];
        conv.utterances
            .iter()
            .flat_map(|u| table.row(u.rows[m]).iter().copied())
            .collect()
    }

    /// Same classes, speakers and feature tables with a different set of
    /// conversations.
    pub fn with_conversations(&self, conversations: Vec<Conversation>) -> Dataset {
        Dataset {
            classes: self.classes.clone(),
            num_speakers: self.num_speakers,
            features: self.features.clone(),
            conversations,
        }
    }

    /// Checks the invariants `load_manifest` guarantees. Errors name the
    /// offending conversation and utterance.
    pub fn validate(&self) -> crate::Result<()> {
        use crate::error::Error;
        if self.classes.is_empty() {
            return Err(Error::Argument("dataset has no classes".into()));
        }
        for conv in &self.conversations {
            if conv.utterances.is_empty() {
                return Err(Error::Argument(format!("conversation {:?} is empty", conv.id)));
            }
            for u in &conv.utterances {
                let fail = |msg: String| Error::Utterance {
                    conversation: conv.id.clone(),
                    utterance: u.id.clone(),
                    msg,
                };
                if u.label >= self.classes.len() {
                    return Err(fail(format!(
                        "label {} out of range for {} classes",
                        u.label,
                        self.classes.len()
                    )));
                }
                if u.speaker >= self.num_speakers {
                    return Err(fail(format!(
                        "speaker {} out of range for {} speakers",
                        u.speaker, self.num_speakers
                    )));
                }
                for (m, table) in self.features.iter() {
                    if u.rows[m] >= table.num_rows() {
                        return Err(fail(format!(
                            "{m} row {} out of range for a {}-row feature file",
                            u.rows[m],
                            table.num_rows()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-class visual embeddings as stored in a VEA1 file.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorClass {
    pub name: String,
    /// Row-major `n_c × dim`.
    pub vectors: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorFile {
    pub dim: usize,
    pub classes: Vec<AnchorClass>,
}

impl AnchorFile {
    pub fn class_count(&self, c: usize) -> usize {
        self.classes[c].vectors.len() / self.dim
    }

    pub fn vector(&self, c: usize, i: usize) -> &[f32] {
        &self.classes[c].vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        if self.dim == 0 {
            return Err(FormatError::ZeroDim);
        }
        let mut seen = std::collections::HashSet::new();
        let mut offset = 0;
        for class in &self.classes {
            if !seen.insert(class.name.as_str()) {
                return Err(FormatError::DuplicateClass(class.name.clone()));
            }
            if class.vectors.is_empty() {
                return Err(FormatError::EmptyClass(class.name.clone()));
            }
            if class.vectors.len() % self.dim != 0 {
                return Err(FormatError::Invalid(format!(
                    "class {:?} holds {} values, not a multiple of {}",
                    class.name,
                    class.vectors.len(),
                    self.dim
                )));
            }
            if let Some(i) = class.vectors.iter().position(|v| !v.is_finite()) {
                return Err(FormatError::NonFinite { index: offset + i });
            }
            for (index, v) in class.vectors.chunks(self.dim).enumerate() {
                if v.iter().all(|&x| x == 0.0) {
                    return Err(FormatError::ZeroVector {
                        class: class.name.clone(),
                        index,
                    });
                }
            }
            offset += class.vectors.len();
        }
        Ok(())
    }
}
