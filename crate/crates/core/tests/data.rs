use std::collections::BTreeSet;

use vega_core::data::{load_manifest, split, split_indices, synth_generate, write_manifest, SynthSpec};
use vega_core::{Error, Modality};

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        num_conversations: 10,
        utterances_per_conv: 4,
        dims: vega_core::PerModality([5, 4, 3]),
        anchor_dim: 6,
        anchors_per_class: 3,
        seed,
        ..SynthSpec::default()
    }
}

#[test]
fn manifest_round_trip() {
    let (ds, _) = synth_generate(&small_spec(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = write_manifest(&ds, dir.path()).unwrap();
    let back = load_manifest(&path).unwrap();
    assert_eq!(back.classes, ds.classes);
    assert_eq!(back.conversations, ds.conversations);
    for m in Modality::ALL {
        assert_eq!(back.features[m].data(), ds.features[m].data());
    }
}

fn edit_manifest(edit: impl FnOnce(&mut serde_json::Value)) -> Error {
    let (ds, _) = synth_generate(&small_spec(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = write_manifest(&ds, dir.path()).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    edit(&mut v);
    std::fs::write(&path, v.to_string()).unwrap();
    load_manifest(&path).unwrap_err()
}

#[test]
fn out_of_range_label_names_the_utterance() {
    let err = edit_manifest(|v| v["conversations"][2]["utterances"][1]["label"] = 6.into());
    match err {
        Error::Utterance { conversation, utterance, msg } => {
            assert_eq!(conversation, "c0002");
            assert_eq!(utterance, "c0002_u001");
            assert!(msg.contains("label 6"), "{msg}");
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn out_of_range_row_and_speaker_rejected() {
    let err = edit_manifest(|v| v["conversations"][0]["utterances"][0]["rows"]["V"] = 10_000.into());
    assert!(err.to_string().contains("row 10000"), "{err}");
    let err = edit_manifest(|v| v["conversations"][0]["utterances"][3]["speaker"] = 2.into());
    assert!(err.to_string().contains("speaker 2"), "{err}");
}

#[test]
fn missing_modality_and_unknown_key_rejected() {
    let err = edit_manifest(|v| {
        v["conversations"][1]["utterances"][0]["rows"].as_object_mut().unwrap().remove("A");
    });
    assert!(matches!(err, Error::Manifest { .. }), "{err}");
    assert!(err.to_string().contains("missing modality"), "{err}");
    let err = edit_manifest(|v| v["extra"] = 1.into());
    assert!(matches!(err, Error::Manifest { .. }), "{err}");
}

#[test]
fn split_is_a_deterministic_partition() {
    let [tr, va, te] = split_indices(60, [0.8, 0.1, 0.1], 9).unwrap();
    assert_eq!((tr.len(), va.len(), te.len()), (48, 6, 6));
    let all: BTreeSet<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
    assert_eq!(all, (0..60).collect());
    assert_eq!(split_indices(60, [0.8, 0.1, 0.1], 9).unwrap(), [tr.clone(), va, te]);
    assert_ne!(split_indices(60, [0.8, 0.1, 0.1], 10).unwrap()[0], tr);

    let (ds, _) = synth_generate(&small_spec(1)).unwrap();
    let s = split(&ds, [0.8, 0.1, 0.1], 2).unwrap();
    assert_eq!(s.train.conversations.len() + s.val.conversations.len() + s.test.conversations.len(), 10);
    let ids: BTreeSet<&str> = [&s.train, &s.val, &s.test]
        .iter()
        .flat_map(|d| d.conversations.iter().map(|c| c.id.as_str()))
        .collect();
    assert_eq!(ids.len(), 10);
}

#[test]
fn split_rejects_bad_ratios_and_empty_parts() {
    assert!(split_indices(60, [0.5, 0.5, 0.5], 0).is_err());
    assert!(split_indices(60, [1.0, 0.0, 0.0], 0).is_err());
    assert!(matches!(split_indices(3, [0.8, 0.1, 0.1], 0), Err(Error::EmptySplit { .. })));
}

#[test]
fn synth_is_a_pure_function_of_its_spec() {
    let (a, fa) = synth_generate(&small_spec(5)).unwrap();
    let (b, fb) = synth_generate(&small_spec(5)).unwrap();
    assert_eq!(a, b);
    assert_eq!(fa, fb);
    let (c, _) = synth_generate(&small_spec(6)).unwrap();
    assert_ne!(a.features[Modality::Text].data(), c.features[Modality::Text].data());
}

/// Per-class means of the concatenated features.
fn class_means(ds: &vega_core::data::Dataset, convs: &[usize]) -> Vec<Vec<f64>> {
    let dim: usize = ds.input_dims().iter().map(|(_, &d)| d).sum();
    let mut sums = vec![vec![0.0; dim]; ds.num_classes()];
    let mut counts = vec![0usize; ds.num_classes()];
    for &c in convs {
        for u in &ds.conversations[c].utterances {
            let row: Vec<f32> = Modality::ALL
                .iter()
                .flat_map(|&m| ds.features[m].row(u.rows[m]).to_vec())
                .collect();
            sums[u.label].iter_mut().zip(&row).for_each(|(s, &x)| *s += x as f64);
            counts[u.label] += 1;
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|v| v / n as f64).collect())
        .collect()
}

fn concat_row(ds: &vega_core::data::Dataset, u: &vega_core::data::Utterance) -> Vec<f64> {
    Modality::ALL
        .iter()
        .flat_map(|&m| ds.features[m].row(u.rows[m]).iter().map(|&x| x as f64).collect::<Vec<_>>())
        .collect()
}

#[test]
fn separated_class_means_are_far_apart() {
    // Orthonormal directions scaled by 8 are 8·sqrt(2) apart in every
    // modality; sampling noise must not eat more than a fifth of that.
    for seed in 0..100 {
        let (ds, _) = synth_generate(&SynthSpec { seed, ..SynthSpec::default() }).unwrap();
        let all: Vec<usize> = (0..ds.conversations.len()).collect();
        let means = class_means(&ds, &all);
        let mut offset = 0;
        for (_, &d) in ds.input_dims().iter() {
            for i in 0..means.len() {
                for j in i + 1..means.len() {
                    let dist = (offset..offset + d)
                        .map(|k| (means[i][k] - means[j][k]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    assert!(dist >= 8.0 * 2f64.sqrt() * 0.8, "seed {seed}: classes {i},{j} at {dist}");
                }
            }
            offset += d;
        }
    }
}

#[test]
fn unseparated_data_defeats_a_nearest_mean_probe() {
    for seed in 1..=3 {
        let (ds, _) = synth_generate(&SynthSpec {
            separation: 0.0,
            seed,
            ..SynthSpec::default()
        })
        .unwrap();
        let [tr, _, te] = split_indices(ds.conversations.len(), [0.5, 0.25, 0.25], seed).unwrap();
        let means = class_means(&ds, &tr);
        let (mut hit, mut n) = (0, 0);
        for &c in &te {
            for u in &ds.conversations[c].utterances {
                let x = concat_row(&ds, u);
                let pred = (0..means.len())
                    .min_by(|&a, &b| {
                        let da: f64 = x.iter().zip(&means[a]).map(|(p, q)| (p - q).powi(2)).sum();
                        let db: f64 = x.iter().zip(&means[b]).map(|(p, q)| (p - q).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                hit += usize::from(pred == u.label);
                n += 1;
            }
        }
        let acc = hit as f64 / n as f64;
        assert!((acc - 1.0 / 6.0).abs() <= 0.10, "seed {seed}: probe accuracy {acc}");
    }
}

#[test]
fn synth_rejects_bad_specs() {
    assert!(synth_generate(&SynthSpec { separation: -1.0, ..small_spec(1) }).is_err());
    assert!(synth_generate(&SynthSpec { num_classes: 0, ..small_spec(1) }).is_err());
    assert!(synth_generate(&SynthSpec { dims: vega_core::PerModality([5, 0, 3]), ..small_spec(1) }).is_err());
}
