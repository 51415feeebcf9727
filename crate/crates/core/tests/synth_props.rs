use std::collections::BTreeMap;

use hyciss::presets;
use hyciss::synth::{self, are_siblings, class_frequencies, Dataset, Scene, SceneSpec};
use hyciss::taxonomy::{NodeId, BACKGROUND};
use hyciss::Error;
use proptest::prelude::*;

fn spec() -> SceneSpec {
    presets::scene_spec(presets::ENDOVIS_LIKE_12, 32, 32).unwrap()
}

fn pixels_by_leaf(scenes: &[Scene], per_leaf: usize) -> BTreeMap<NodeId, Vec<[f64; 3]>> {
    let mut out: BTreeMap<NodeId, Vec<[f64; 3]>> = BTreeMap::new();
    for s in scenes {
        // stride through the image so samples spread across objects
        for p in (0..s.labels.len()).step_by(7) {
            let l = s.labels[p];
            if l == BACKGROUND {
                continue;
            }
            let v = out.entry(l).or_default();
            if v.len() < per_leaf {
                let px = &s.image.data[3 * p..3 * p + 3];
                v.push([px[0] as f64 / 255.0, px[1] as f64 / 255.0, px[2] as f64 / 255.0]);
            }
        }
    }
    out
}

#[test]
fn siblings_confuse_a_colour_classifier_more_than_non_siblings() {
    let spec = spec();
    let tax = spec.taxonomy().unwrap();
    let reference = pixels_by_leaf(&synth::generate(&spec, 300, 1), 60);
    let queries = pixels_by_leaf(&synth::generate(&spec, 300, 2), 300);
    let refs: Vec<(NodeId, [f64; 3])> = reference.iter().flat_map(|(&l, v)| v.iter().map(move |c| (l, *c))).collect();
    let (mut sib, mut sib_n, mut non, mut non_n) = (0usize, 0usize, 0usize, 0usize);
    for (&truth, pxs) in &queries {
        let has_siblings = tax.leaves().iter().any(|&m| m != truth && are_siblings(&tax, truth, m));
        for q in pxs {
            let (pred, _) = refs
                .iter()
                .map(|(l, c)| (*l, synth::color_distance(*c, *q)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            if has_siblings {
                sib_n += 1;
                sib += (pred != truth && are_siblings(&tax, truth, pred)) as usize;
            }
            non_n += 1;
            non += (pred != truth && !are_siblings(&tax, truth, pred)) as usize;
        }
    }
    let (sib_rate, non_rate) = (sib as f64 / sib_n as f64, non as f64 / non_n as f64);
    assert!(sib_rate > non_rate, "sibling confusion {sib_rate:.3} vs non-sibling {non_rate:.3}");
}

#[test]
fn class_frequencies_are_imbalanced() {
    let spec = spec();
    let scenes = synth::generate(&spec, 1000, 0);
    let freq = class_frequencies(&spec, &scenes);
    let max = freq.iter().map(|f| f.1).max().unwrap() as f64;
    let min = freq.iter().map(|f| f.1).min().unwrap() as f64;
    assert!(min > 0.0, "{freq:?}");
    assert!(min / max < 0.15, "ratio {:.3} from {freq:?}", min / max);
}

#[test]
fn presets_validate() {
    for name in presets::SCENE_PRESETS {
        let s = presets::scene_spec(name, 32, 32).unwrap();
        s.validate().unwrap();
    }
}

#[test]
fn empty_and_repeated_generation() {
    let spec = spec();
    assert!(synth::generate(&spec, 0, 5).is_empty());
    assert_eq!(synth::generate(&spec, 20, 5), synth::generate(&spec, 20, 5));
    assert_ne!(synth::generate(&spec, 5, 5), synth::generate(&spec, 5, 6));
}

#[test]
fn dataset_round_trips_and_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let data = Dataset::generate(&spec(), 12, 4, 9).unwrap();
    let manifest = synth::save_dataset(dir.path(), &data).unwrap();
    assert_eq!(manifest.splits.len(), 2);
    let back = synth::load_dataset(dir.path()).unwrap();
    assert_eq!(back.train, data.train);
    assert_eq!(back.val, data.val);
    assert_eq!(back.spec, data.spec);

    // flip one byte of some image file
    let victim = std::fs::read_dir(dir.path().join("train"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "img"))
        .unwrap();
    let mut bytes = std::fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&victim, bytes).unwrap();
    assert!(matches!(synth::load_dataset(dir.path()), Err(Error::Format { .. })));

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(synth::load_dataset(empty.path()), Err(Error::MissingRun(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn labels_are_leaves_or_background(seed in any::<u64>(), index in 0u64..10_000) {
        let spec = spec();
        let tax = spec.taxonomy().unwrap();
        let scene = synth::render(&spec, seed, index);
        prop_assert_eq!(scene.labels.len(), 32 * 32);
        prop_assert_eq!(scene.image.data.len(), 32 * 32 * 3);
        prop_assert!(scene.labels.iter().all(|&l| l == BACKGROUND || (tax.contains(l) && tax.is_leaf(l))));
        prop_assert_eq!(synth::render(&spec, seed, index), scene);
    }
}
