use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{AnchorClass, AnchorFile, Conversation, Dataset, FeatureTable, Utterance};
use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};

/// Parameters of the synthetic conversation generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub num_conversations: usize,
    pub utterances_per_conv: usize,
    pub dims: PerModality<usize>,
    pub anchor_dim: usize,
    pub anchors_per_class: usize,
    /// Distance of each class mean from the origin, in units of the
    /// per-component noise standard deviation.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 6,
            num_conversations: 60,
            utterances_per_conv: 20,
            dims: PerModality([64, 48, 32]),
            anchor_dim: 32,
            anchors_per_class: 35,
            separation: 8.0,
            seed: 1,
        }
    }
}

const EMOTIONS: [&str; 6] = ["happy", "sad", "neutral", "angry", "excited", "frustrated"];

fn class_names(n: usize) -> Vec<String> {
    if n <= EMOTIONS.len() {
        EMOTIONS[..n].iter().map(|s| s.to_string()).collect()
    } else {
        (0..n).map(|i| format!("class{i}")).collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `count` random unit vectors in `dim` dimensions, mutually orthogonal when
/// `count <= dim` (Gram-Schmidt on Gaussian draws).
fn class_directions(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = gaussian(rng, dim);
        if dirs.len() < dim {
            for d in &dirs {
                let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(d).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|a| *a /= norm);
        dirs.push(v);
    }
    dirs
}

/// Generates a labelled dataset and a matching anchor file. A pure function
/// of `spec`.
///
/// Each class gets a random unit direction per modality and in anchor space.
/// Features are `separation·direction + N(0, I)`; anchor instances are drawn
/// the same way in their own space, independent of the feature spaces.
/// Labels cycle through the classes; two speakers alternate turns.
pub fn synth_generate(spec: &SynthSpec) -> Result<(Dataset, AnchorFile)> {
    if !(spec.separation >= 0.0) || !spec.separation.is_finite() {
        return Err(Error::Argument(format!(
            "separation must be a finite value >= 0, got {}",
            spec.separation
        )));
    }
    let counts = [
        ("num_classes", spec.num_classes),
        ("num_conversations", spec.num_conversations),
        ("utterances_per_conv", spec.utterances_per_conv),
        ("anchor_dim", spec.anchor_dim),
        ("anchors_per_class", spec.anchors_per_class),
    ];
    for (name, v) in counts {
        if v == 0 {
            return Err(Error::Argument(format!("{name} must be at least 1")));
        }
    }
    if let Some((m, _)) = spec.dims.iter().find(|(_, &d)| d == 0) {
        return Err(Error::Argument(format!("feature dimension for {m} must be at least 1")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.num_classes;
    let dirs = spec.dims.map(|_, &d| class_directions(&mut rng, c, d));
    let anchor_dirs = class_directions(&mut rng, c, spec.anchor_dim);

    let total = spec.num_conversations * spec.utterances_per_conv;
    let mut data: PerModality<Vec<f32>> = spec.dims.map(|_, &d| Vec::with_capacity(total * d));
    let mut conversations = Vec::with_capacity(spec.num_conversations);
    for conv in 0..spec.num_conversations {
        let mut utterances = Vec::with_capacity(spec.utterances_per_conv);
        for u in 0..spec.utterances_per_conv {
            let row = conv * spec.utterances_per_conv + u;
            let label = row % c;
            for m in Modality::ALL {
                let noise = gaussian(&mut rng, spec.dims[m]);
                data[m].extend(
                    dirs[m][label]
                        .iter()
                        .zip(noise)
                        .map(|(d, n)| (spec.separation * d + n) as f32),
                );
            }
            utterances.push(Utterance {
                id: format!("c{conv:04}_u{u:03}"),
                speaker: u % 2,
                label,
                rows: PerModality([row; 3]),
            });
        }
        conversations.push(Conversation {
            id: format!("c{conv:04}"),
            utterances,
        });
    }

    let names = class_names(c);
    let mut classes = Vec::with_capacity(c);
    for (k, name) in names.iter().enumerate() {
        let mut vectors = Vec::with_capacity(spec.anchors_per_class * spec.anchor_dim);
        for _ in 0..spec.anchors_per_class {
            let noise = gaussian(&mut rng, spec.anchor_dim);
            vectors.extend(
                anchor_dirs[k]
                    .iter()
                    .zip(noise)
                    .map(|(d, n)| (spec.separation * d + n) as f32),
            );
        }
        classes.push(AnchorClass {
            name: name.clone(),
            vectors,
        });
    }

    let mut tables = Vec::with_capacity(3);
    for m in Modality::ALL {
        let table = FeatureTable::new(m, spec.dims[m], std::mem::take(&mut data[m]))
            .map_err(|e| Error::Argument(e.to_string()))?;
        tables.push(Arc::new(table));
    }
    let dataset = Dataset {
        classes: names,
        num_speakers: 2,
        features: PerModality([tables[0].clone(), tables[1].clone(), tables[2].clone()]),
        conversations,
    };
    let anchors = AnchorFile {
        dim: spec.anchor_dim,
        classes,
    };
    Ok((dataset, anchors))
}
