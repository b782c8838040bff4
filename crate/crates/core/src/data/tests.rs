use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn profile(rho: f64, scale: f64) -> SpeakerProfile {
    SpeakerProfile {
        id: 0,
        mean: (0..20).map(|j| j as f64 * 0.5 - 3.0).collect(),
        scale,
        rho,
    }
}

fn small_spec(scenario: Scenario) -> DatasetSpec {
    DatasetSpec {
        train: 40,
        test: 15,
        ..DatasetSpec::mini_s(scenario)
    }
}

#[test]
fn noiseless_stream_is_the_mean() {
    let p = profile(0.0, 0.0);
    let x = synth_speaker_stream(&p, 30, 1);
    for t in 0..30 {
        assert_eq!(x.row(t), p.mean.as_slice());
    }
}

#[test]
fn same_seed_same_stream() {
    let p = profile(0.5, 1.0);
    assert_eq!(synth_speaker_stream(&p, 100, 9), synth_speaker_stream(&p, 100, 9));
    assert_ne!(synth_speaker_stream(&p, 100, 9), synth_speaker_stream(&p, 100, 10));
}

#[test]
fn long_run_mean_approaches_speaker_mean() {
    let p = profile(0.5, 1.0);
    let t = 10_000;
    let x = synth_speaker_stream(&p, t, 4);
    let bound = 3.0 * p.scale / (t as f64).sqrt();
    for j in 0..20 {
        let mean = (0..t).map(|r| x.row(r)[j]).sum::<f64>() / t as f64;
        assert!((mean - p.mean[j]).abs() < bound, "dim {j}: {mean} vs {}", p.mean[j]);
    }
}

fn streams(k: usize, frames: usize) -> Vec<Tensor> {
    (0..k)
        .map(|i| {
            let data = (0..frames * 2).map(|v| (i * 10_000 + v) as f64).collect();
            Tensor::new(vec![frames, 2], data).unwrap()
        })
        .collect()
}

#[test]
fn single_speaker_concat_is_identity() {
    let s = streams(1, 500);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (x, spans) = build_concat(&s, 500, &mut rng).unwrap();
    assert_eq!(x, s[0]);
    assert_eq!(spans, vec![0..500]);
}

#[test]
fn three_speaker_concat_partitions_the_utterance() {
    let s = streams(3, 500);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x, spans) = build_concat(&s, 500, &mut rng).unwrap();
    assert_eq!(spans[0].start, 0);
    assert_eq!(spans[2].end, 500);
    assert_eq!(spans[0].end, spans[1].start);
    assert_eq!(spans[1].end, spans[2].start);
    for (j, span) in spans.iter().enumerate() {
        assert!(span.len() >= 50);
        for t in span.clone() {
            assert_eq!(x.row(t), s[j].row(t));
        }
    }
}

#[test]
fn concat_rejects_bad_speaker_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(build_concat(&streams(4, 50), 50, &mut rng).is_err());
    assert!(build_concat(&[], 50, &mut rng).is_err());
    assert!(build_overlap(&streams(4, 50)).is_err());
}

#[test]
fn overlap_examples() {
    let s = streams(1, 10);
    assert_eq!(build_overlap(&s).unwrap(), s[0]);
    let same = vec![s[0].clone(), s[0].clone(), s[0].clone()];
    assert!(build_overlap(&same).unwrap().max_abs_diff(&s[0]) < 1e-12);
    let neg = s[0].map(|v| -v);
    let mixed = build_overlap(&[s[0].clone(), neg]).unwrap();
    assert!(mixed.data().iter().all(|&v| v == 0.0));
    let short = Tensor::zeros(vec![9, 2]);
    assert!(build_overlap(&[s[0].clone(), short]).is_err());
}

proptest! {
    #[test]
    fn concat_frames_come_from_exactly_one_stream(k in 1usize..=3, total in 30usize..300, seed in any::<u64>()) {
        let s = streams(k, total);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, spans) = build_concat(&s, total, &mut rng).unwrap();
        let covered: usize = spans.iter().map(|r| r.len()).sum();
        prop_assert_eq!(covered, total);
        for t in 0..total {
            let sources = s.iter().filter(|st| st.row(t) == x.row(t)).count();
            prop_assert_eq!(sources, 1);
        }
        for span in &spans {
            prop_assert!(span.len() >= total.div_ceil(10));
        }
    }

    #[test]
    fn overlap_is_linear(a in prop::collection::vec(-5.0f64..5.0, 12), b in prop::collection::vec(-5.0f64..5.0, 12), c in -3.0f64..3.0) {
        let ta = Tensor::new(vec![6, 2], a).unwrap();
        let tb = Tensor::new(vec![6, 2], b).unwrap();
        let mix_then_scale = build_overlap(&[ta.clone(), tb.clone()]).unwrap().map(|v| v * c);
        let scale_then_mix = build_overlap(&[ta.map(|v| v * c), tb.map(|v| v * c)]).unwrap();
        prop_assert!(mix_then_scale.max_abs_diff(&scale_then_mix) < 1e-12);
    }
}

#[test]
fn speaker_means_are_well_separated() {
    let spec = DatasetSpec::mini_s(Scenario::Concat);
    let profiles = speaker_profiles(&spec, 3).unwrap();
    assert_eq!(profiles.len(), 20);
    for a in &profiles {
        for b in &profiles[a.id + 1..] {
            let d: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(d >= 4.0 * spec.scale);
        }
    }
}

#[test]
fn mini_s_shape() {
    let spec = DatasetSpec::mini_s(Scenario::Overlap);
    assert_eq!((spec.num_speakers, spec.train, spec.test), (20, 600, 200));
    assert_eq!(spec.frames(), 500);
}

#[test]
fn too_few_speakers_rejected() {
    let spec = DatasetSpec {
        num_speakers: 2,
        ..small_spec(Scenario::Concat)
    };
    assert!(generate_examples(&spec, 0, Execution::Sequential).is_err());
}

#[test]
fn examples_have_valid_labels_and_lengths() {
    for scenario in [Scenario::Concat, Scenario::Overlap] {
        let spec = small_spec(scenario);
        let (train, test) = generate_examples(&spec, 7, Execution::Parallel).unwrap();
        assert_eq!((train.len(), test.len()), (40, 15));
        for ex in train.iter().chain(&test) {
            assert!((1..=3).contains(&ex.speakers.len()));
            assert!(ex.speakers.windows(2).all(|w| w[0] < w[1]));
            assert!(ex.speakers.iter().all(|&s| s < 20));
            assert_eq!(ex.features.shape(), &[500, 20]);
            assert_eq!(ex.scenario, scenario);
        }
        let train_ids: std::collections::HashSet<_> = train.iter().map(|e| &e.id).collect();
        assert!(test.iter().all(|e| !train_ids.contains(&e.id)));
    }
}

#[test]
fn generation_does_not_depend_on_execution() {
    let spec = small_spec(Scenario::Concat);
    let a = generate_examples(&spec, 11, Execution::Sequential).unwrap();
    let b = generate_examples(&spec, 11, Execution::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn speaker_occurrences_match_uniform_sampling() {
    let spec = DatasetSpec::mini_s(Scenario::Concat);
    let profiles = speaker_profiles(&spec, 1).unwrap();
    let n = spec.train;
    let mut counts = vec![0usize; spec.num_speakers];
    for i in 0..n {
        let ex = synth_utterance(&spec, &profiles, 1, i).unwrap();
        for &s in &ex.speakers {
            counts[s] += 1;
        }
    }
    // Each utterance holds 1, 2 or 3 speakers uniformly, so a given speaker
    // appears with probability 2/K independently per utterance.
    let p = 2.0 / spec.num_speakers as f64;
    let expected = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for (s, &c) in counts.iter().enumerate() {
        assert!((c as f64 - expected).abs() < 5.0 * sigma, "speaker {s}: {c} vs {expected}");
    }
}

#[test]
fn dataset_files_round_trip_and_are_reproducible() {
    let spec = small_spec(Scenario::Overlap);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let written = generate_dataset(&spec, 5, a.path(), Execution::Parallel).unwrap();
    generate_dataset(&spec, 5, b.path(), Execution::Sequential).unwrap();
    for file in ["dataset.json", "train.jsonl", "test.jsonl", "features/train-00003.hvf"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert_eq!(x, y, "{file}");
    }

    let manifest = load_manifest(a.path()).unwrap();
    assert_eq!(manifest, written);
    let (train, _) = generate_examples(&spec, 5, Execution::Sequential).unwrap();
    let loaded = load_split(a.path(), &manifest, Split::Train, Execution::Parallel).unwrap();
    assert_eq!(loaded, train);
}

#[test]
fn out_of_range_labels_are_rejected() {
    let spec = small_spec(Scenario::Concat);
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&spec, 2, dir.path(), Execution::Sequential).unwrap();
    let path = dir.path().join("test.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let first = text.lines().next().unwrap();
    let entry: ManifestEntry = serde_json::from_str(first).unwrap();
    let bad = ManifestEntry {
        speakers: vec![25],
        ..entry
    };
    let rewritten = serde_json::to_string(&bad).unwrap() + "\n" + &text[first.len() + 1..];
    std::fs::write(&path, rewritten).unwrap();
    assert!(load_manifest(dir.path()).is_err());
}
