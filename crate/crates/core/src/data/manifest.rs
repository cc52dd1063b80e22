use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::binary::{read_feature_file, write_feature_file};
use super::{Conversation, Dataset, Utterance};
use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};

/// JSON dataset manifest. Feature file paths are resolved relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub num_speakers: usize,
    pub feature_files: BTreeMap<String, String>,
    pub conversations: Vec<ManifestConversation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestConversation {
    pub id: String,
    pub utterances: Vec<ManifestUtterance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestUtterance {
    pub id: String,
    pub speaker: usize,
    pub label: usize,
    pub rows: BTreeMap<String, usize>,
}

fn modality_map<T: Clone>(
    path: &Path,
    what: &str,
    map: &BTreeMap<String, T>,
) -> Result<PerModality<T>> {
    for key in map.keys() {
        key.parse::<Modality>().map_err(|msg| Error::Manifest {
            path: path.to_owned(),
            msg: format!("{what}: {msg}"),
        })?;
    }
    let mut out = Vec::with_capacity(3);
    for m in Modality::ALL {
        let v = map.get(m.tag()).ok_or_else(|| Error::Manifest {
            path: path.to_owned(),
            msg: format!("{what}: missing modality {m}"),
        })?;
        out.push(v.clone());
    }
    Ok(PerModality([out[0].clone(), out[1].clone(), out[2].clone()]))
}

/// Loads and fully resolves a dataset manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_owned(),
        msg: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let files = modality_map(path, "feature_files", &manifest.feature_files)?;
    let mut tables = Vec::with_capacity(3);
    for m in Modality::ALL {
        tables.push(Arc::new(read_feature_file(base.join(&files[m]), m)?));
    }
    let features = PerModality([tables[0].clone(), tables[1].clone(), tables[2].clone()]);

    let mut conversations = Vec::with_capacity(manifest.conversations.len());
    for conv in &manifest.conversations {
        let mut utterances = Vec::with_capacity(conv.utterances.len());
        for u in &conv.utterances {
            let rows = modality_map(path, &format!("conversation {:?} utterance {:?}", conv.id, u.id), &u.rows)?;
            utterances.push(Utterance {
                id: u.id.clone(),
                speaker: u.speaker,
                label: u.label,
                rows,
            });
        }
        conversations.push(Conversation {
            id: conv.id.clone(),
            utterances,
        });
    }
    let dataset = Dataset {
        classes: manifest.classes,
        num_speakers: manifest.num_speakers,
        features,
        conversations,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes the three feature files and `manifest.json` into `dir`, returning
/// the manifest path.
pub fn write_manifest(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut feature_files = BTreeMap::new();
    for (m, table) in dataset.features.iter() {
        let name = format!("features_{}.vft", m.tag());
        write_feature_file(dir.join(&name), table)?;
        feature_files.insert(m.tag().to_owned(), name);
    }
    let manifest = Manifest {
        classes: dataset.classes.clone(),
        num_speakers: dataset.num_speakers,
        feature_files,
        conversations: dataset
            .conversations
            .iter()
            .map(|c| ManifestConversation {
                id: c.id.clone(),
                utterances: c
                    .utterances
                    .iter()
                    .map(|u| ManifestUtterance {
                        id: u.id.clone(),
                        speaker: u.speaker,
                        label: u.label,
                        rows: u.rows.iter().map(|(m, &r)| (m.tag().to_owned(), r)).collect(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
