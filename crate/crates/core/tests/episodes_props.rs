mod common;

use std::collections::BTreeSet;

use fairmeta::episodes::{
    format_dataset, generate_synthetic_family, parse_dataset, read_dataset, write_dataset, Dataset, EpisodeSource,
    EpisodeSpec, Example, CLUSTER_SIGMA,
};
use fairmeta::fairness::{dbc, decision_distance, DistanceKind, ProtectedVector};
use fairmeta::{Error, Tape, Tensor};
use proptest::prelude::*;
use std::path::Path;

#[test]
fn thousand_episodes_are_well_formed() {
    let family = common::biased_family(5);
    let data = family.materialize(30, 9);
    let spec = EpisodeSpec::new(4, 3, 5).unwrap();
    for seed in 0..1000u64 {
        let source: &dyn EpisodeSource = if seed % 2 == 0 { &family } else { &data };
        let ep = source.sample_episode(&spec, seed).unwrap();
        let support: BTreeSet<u64> = ep.support.iter().map(|e| e.uid).collect();
        let query: BTreeSet<u64> = ep.query.iter().map(|e| e.uid).collect();
        assert_eq!(support.len(), 12);
        assert_eq!(query.len(), 20);
        assert!(support.is_disjoint(&query));

        let labels: BTreeSet<usize> = ep.episode_labels.values().copied().collect();
        assert_eq!(labels, (0..4).collect());
        for (&class_id, &label) in &ep.episode_labels {
            let in_support = ep.support.iter().filter(|e| e.class_id == class_id).count();
            let in_query = ep.query.iter().filter(|e| e.class_id == class_id).count();
            assert_eq!((in_support, in_query), (3, 5));
            assert!(ep.support.iter().chain(&ep.query).filter(|e| e.class_id == class_id).all(|e| e.label == label));
        }
    }
}

#[test]
fn protected_rates_converge_to_class_probabilities() {
    let family = generate_synthetic_family(10, 4, 1.0, 17).unwrap();
    let n = 4000;
    let data = family.materialize(n, 3);
    for class in &family.classes {
        let p = class.protected_prob;
        assert!((0.1..=0.9).contains(&p));
        let rate = data.examples.iter().filter(|e| e.class_id == class.class_id).map(|e| f64::from(e.s)).sum::<f64>()
            / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((rate - p).abs() <= 3.0 * se, "class {}: rate {rate} vs p {p}", class.class_id);
    }
}

#[test]
fn unbiased_family_gives_zero_mean_dbc_for_best_response() {
    let family = generate_synthetic_family(10, 8, 0.0, 23).unwrap();
    assert!(family.classes.iter().all(|c| c.protected_prob == 0.5));
    let spec = EpisodeSpec::new(3, 5, 15).unwrap();
    let dbcs: Vec<f64> = (0..200u64)
        .map(|seed| {
            let ep = family.sample_episode(&spec, seed).unwrap();
            // Bayes posterior under the known isotropic Gaussian clusters.
            let mut means = vec![Vec::new(); spec.ways];
            for (&class_id, &label) in &ep.episode_labels {
                means[label] = family.class(class_id).unwrap().mean.clone();
            }
            let mut probs = Vec::new();
            for e in &ep.query {
                let logits: Vec<f64> = means
                    .iter()
                    .map(|m| -m.iter().zip(&e.features).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2.0 * CLUSTER_SIGMA.powi(2)))
                    .collect();
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
                probs.extend(logits.iter().map(|l| (l - top).exp() / z));
            }
            let tape = Tape::new();
            let p = tape.constant(Tensor::matrix(ep.query.len(), spec.ways, probs).unwrap());
            let d = decision_distance(p, DistanceKind::MaxProb).unwrap();
            let s = ProtectedVector::new(ep.query.iter().map(|e| e.s).collect()).unwrap();
            dbc(&s, d).unwrap().item()
        })
        .collect();
    let (mean, std) = fairmeta::meta::mean_std(&dbcs);
    let se = std / (dbcs.len() as f64).sqrt();
    assert!(mean.abs() <= 3.0 * se, "mean {mean}, se {se}");
}

#[test]
fn too_few_classes_is_reported() {
    let family = generate_synthetic_family(3, 4, 0.5, 1).unwrap();
    let spec = EpisodeSpec::new(5, 1, 1).unwrap();
    assert!(family.sample_episode(&spec, 0).is_err());
    let small = family.materialize(2, 0);
    assert!(small.sample_episode(&EpisodeSpec::new(2, 2, 1).unwrap(), 0).is_err());
}

#[test]
fn dataset_file_round_trip() {
    let data = generate_synthetic_family(4, 3, 0.6, 2).unwrap().materialize(5, 8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.txt");
    write_dataset(&data, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), data);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("#fairmeta-dataset v1 dim=3\n"));
    assert!(!text.contains('\r'));

    let empty = Dataset::new(3, vec![]).unwrap();
    let text = format_dataset(&empty);
    assert_eq!(text.lines().count(), 1);
    assert_eq!(parse_dataset(&text, Path::new("empty")).unwrap(), empty);
}

#[test]
fn malformed_files_name_the_line() {
    let bad_s = "#fairmeta-dataset v1 dim=2\n0,0,1,0.5,0.5\n1,0,2,0.5,0.5\n";
    let err = parse_dataset(bad_s, Path::new("f")).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    let unknown = "#fairmeta-dataset v1 dim=2 color=red\n";
    assert!(parse_dataset(unknown, Path::new("f")).is_err());
    let short = "#fairmeta-dataset v1 dim=2\n0,0,1,0.5\n";
    assert!(matches!(parse_dataset(short, Path::new("f")), Err(Error::Parse { line: 2, .. })));
}

proptest! {
    #[test]
    fn arbitrary_datasets_round_trip(rows in prop::collection::vec((0u32..5, 0u8..=1, prop::collection::vec(-1e6f64..1e6, 3)), 0..30)) {
        let examples: Vec<Example> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (c, s, features))| Example { features, label: c as usize, class_id: c, s, uid: i as u64 })
            .collect();
        let data = Dataset::new(3, examples).unwrap();
        prop_assert_eq!(parse_dataset(&format_dataset(&data), Path::new("p")).unwrap(), data);
    }
}
