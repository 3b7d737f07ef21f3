//! End-to-end audio frontend tests: the reference-MFCC oracle, augmentation
//! statistics, and dataset indexing over a synthesized directory tree.

use std::path::Path;

use cellsearch_audio::augment::{augment_traced, NoisePool};
use cellsearch_audio::dataset::{
    scan_dataset, BatchOptions, DataSplit, Label, SpeechPipeline, KEYWORDS,
};
use cellsearch_audio::mfcc::{extract_mfcc, MfccConfig};
use cellsearch_audio::reference::mfcc_reference;
use cellsearch_audio::wav::{write_pcm16, WavClip};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn pure_tone_matches_the_reference_pipeline() {
    let clip = WavClip {
        samples: (0..16000)
            .map(|i| (std::f64::consts::TAU * 440.0 * i as f64 / 16000.0).sin() as f32 * 0.6)
            .collect(),
        sample_rate: 16000,
    };
    let cfg = MfccConfig::default();
    let got = extract_mfcc(&clip, &cfg).unwrap();
    assert_eq!(got.frames(), 101);
    assert_eq!(got.coeffs(), 40);
    let want = mfcc_reference(&clip, &cfg);
    let mut max_diff = 0.0f64;
    for (&g, &w) in got.data().iter().zip(&want) {
        max_diff = max_diff.max((g - w).abs());
    }
    assert!(max_diff < 1e-6, "max |impl - reference| = {max_diff:e}");
}

#[test]
fn noisy_speechlike_clip_matches_the_reference_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    use rand::Rng;
    let clip = WavClip {
        samples: (0..16000)
            .map(|i| {
                let t = i as f64 / 16000.0;
                let tone = (std::f64::consts::TAU * (300.0 + 900.0 * t) * t).sin() * 0.4;
                (tone + rng.random_range(-0.05..0.05)) as f32
            })
            .collect(),
        sample_rate: 16000,
    };
    let cfg = MfccConfig::default();
    let got = extract_mfcc(&clip, &cfg).unwrap();
    let want = mfcc_reference(&clip, &cfg);
    for (&g, &w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-6);
    }
}

fn toy_noise_pool(seed: u64) -> NoisePool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    NoisePool::new(vec![
        WavClip {
            samples: (0..48000).map(|_| rng.random_range(-0.4..0.4)).collect(),
            sample_rate: 16000,
        },
        WavClip {
            samples: (0..32000).map(|_| rng.random_range(-0.2..0.2)).collect(),
            sample_rate: 16000,
        },
    ])
}

#[test]
fn noise_fires_at_eighty_percent_over_ten_thousand_draws() {
    let clip = WavClip { samples: vec![0.1; 16000], sample_rate: 16000 };
    let pool = toy_noise_pool(1);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut fired = 0usize;
    let n = 10_000;
    for _ in 0..n {
        let (out, trace) = augment_traced(&clip, &pool, &mut rng);
        assert_eq!(out.samples.len(), 16000);
        if trace.noise_applied {
            fired += 1;
        }
    }
    let frac = fired as f64 / n as f64;
    assert!((frac - 0.8).abs() < 0.015, "noise fired in {frac} of draws");
}

#[test]
fn shift_is_uniform_by_chi_square() {
    let clip = WavClip { samples: vec![0.0; 16000], sample_rate: 16000 };
    let pool = toy_noise_pool(2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let bins = 20usize;
    let mut counts = vec![0usize; bins];
    let n = 10_000;
    for _ in 0..n {
        let (_, trace) = augment_traced(&clip, &pool, &mut rng);
        assert!((-100.0..=100.0).contains(&trace.shift_ms));
        let bin = (((trace.shift_ms + 100.0) / 200.0 * bins as f64) as usize).min(bins - 1);
        counts[bin] += 1;
    }
    let expected = n as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 0.99 quantile of chi-square with 19 degrees of freedom
    assert!(chi2 < 36.191, "chi-square statistic {chi2} rejects uniformity");
}

/// Write a short utterance; the pipeline pads to one second.
fn write_clip(path: &Path, freq: f64, len: usize) {
    let samples: Vec<f32> = (0..len)
        .map(|i| (std::f64::consts::TAU * freq * i as f64 / 16000.0).sin() as f32 * 0.4)
        .collect();
    write_pcm16(path, &samples, 16000).unwrap();
}

/// Layout: `per_keyword` clips per keyword directory, a few unknown-word
/// directories, two noise recordings.
fn build_tree(root: &Path, per_keyword: usize, unknown: &[(&str, usize)]) {
    for (k, kw) in KEYWORDS.iter().enumerate() {
        let dir = root.join(kw);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..per_keyword {
            let name = format!("{kw}spk{i:03}_nohash_0.wav");
            write_clip(&dir.join(name), 300.0 + 40.0 * k as f64, 2400);
        }
    }
    for (word, count) in unknown {
        let dir = root.join(word);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..*count {
            let name = format!("{word}spk{i:03}_nohash_0.wav");
            write_clip(&dir.join(name), 950.0, 2400);
        }
    }
    let noise_dir = root.join("_background_noise_");
    std::fs::create_dir_all(&noise_dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    use rand::Rng;
    for (i, len) in [40000usize, 36000].iter().enumerate() {
        let samples: Vec<f32> = (0..*len).map(|_| rng.random_range(-0.3..0.3)).collect();
        write_pcm16(&noise_dir.join(format!("noise_{i}.wav")), &samples, 16000).unwrap();
    }
}

#[test]
fn scan_labels_files_and_synthesizes_silence() {
    let dir = tempfile::tempdir().unwrap();
    build_tree(dir.path(), 3, &[("bird", 4), ("bed", 2)]);
    let index = scan_dataset(dir.path()).unwrap();

    let counts = index.label_counts(None);
    for label in &[Label::Yes, Label::No, Label::Stop] {
        assert_eq!(counts[label.index()], 3, "{label:?}");
    }
    assert_eq!(counts[Label::Unknown.index()], 6);
    // silence synthesized at the mean keyword class size
    assert_eq!(counts[Label::Silence.index()], 3);
    assert_eq!(index.noise_files.len(), 2);

    // determinism: identical tree, identical index
    let again = scan_dataset(dir.path()).unwrap();
    assert_eq!(index.records.len(), again.records.len());
    for (a, b) in index.records.iter().zip(&again.records) {
        assert_eq!(a.path, b.path);
        assert_eq!(a.label, b.label);
        assert_eq!(a.split, b.split);
        assert_eq!(a.speaker, b.speaker);
    }
}

#[test]
fn scan_errors_name_whats_missing() {
    let dir = tempfile::tempdir().unwrap();
    let err = scan_dataset(&dir.path().join("nope")).unwrap_err();
    assert!(err.to_string().contains("missing dataset root"), "{err}");

    // keyword directories but no noise
    for kw in KEYWORDS {
        std::fs::create_dir_all(dir.path().join(kw)).unwrap();
    }
    let err = scan_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("_background_noise_"), "{err}");
}

#[test]
fn scan_rejects_missing_keyword_directory() {
    let dir = tempfile::tempdir().unwrap();
    build_tree(dir.path(), 2, &[]);
    std::fs::remove_dir_all(dir.path().join("left")).unwrap();
    let err = scan_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("`left/`"), "{err}");
}

#[test]
fn manifest_matches_a_directory_recount() {
    let dir = tempfile::tempdir().unwrap();
    build_tree(dir.path(), 3, &[("bird", 4)]);
    let index = scan_dataset(dir.path()).unwrap();
    let manifest = index.export_manifest();
    let mut on_disk = 0usize;
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let sub = entry.unwrap().path();
        if sub.is_dir() && sub.file_name().unwrap() != "_background_noise_" {
            on_disk += std::fs::read_dir(&sub).unwrap().count();
        }
    }
    let speech_rows =
        manifest.lines().skip(1).filter(|l| !l.contains(",silence,")).count();
    assert_eq!(speech_rows, on_disk);
    assert!(manifest.starts_with("path,label,split,speaker\n"));
}

#[test]
fn no_speaker_straddles_splits_in_the_index() {
    let dir = tempfile::tempdir().unwrap();
    build_tree(dir.path(), 4, &[("bird", 6)]);
    let index = scan_dataset(dir.path()).unwrap();
    let mut by_speaker: std::collections::HashMap<&str, Vec<_>> = Default::default();
    for r in &index.records {
        by_speaker.entry(r.speaker.as_str()).or_default().push(r.split);
    }
    for (speaker, splits) in by_speaker {
        assert!(splits.windows(2).all(|w| w[0] == w[1]), "{speaker} spans splits");
    }
}

#[test]
fn evaluation_batches_are_bit_identical_across_passes() {
    let dir = tempfile::tempdir().unwrap();
    build_tree(dir.path(), 4, &[("bird", 4)]);
    let pipeline = SpeechPipeline::open(dir.path(), MfccConfig::default()).unwrap();
    let opts =
        BatchOptions { batch_size: 4, epoch_seed: 9, class_balance: false, augment: false };
    let collect = || -> Vec<u32> {
        pipeline
            .batches(DataSplit::Val, opts)
            .map(|b| b.unwrap())
            .flat_map(|b| b.features.into_iter().map(f32::to_bits).collect::<Vec<_>>())
            .collect()
    };
    let a = collect();
    let b = collect();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn training_batches_have_contract_shape_and_reshuffle() {
    let dir = tempfile::tempdir().unwrap();
    build_tree(dir.path(), 4, &[("bird", 4)]);
    let pipeline = SpeechPipeline::open(dir.path(), MfccConfig::default()).unwrap();
    let opts =
        BatchOptions { batch_size: 4, epoch_seed: 0, class_balance: false, augment: true };
    let batch = pipeline.batches(DataSplit::Train, opts).next().unwrap().unwrap();
    assert_eq!(batch.batch, 4);
    assert_eq!(batch.frames, 101);
    assert_eq!(batch.coeffs, 40);
    assert_eq!(batch.features.len(), 4 * 101 * 40);
    assert!(batch.labels.iter().all(|&l| l < 12));

    let opts2 = BatchOptions { epoch_seed: 1, ..opts };
    let batch2 = pipeline.batches(DataSplit::Train, opts2).next().unwrap().unwrap();
    assert_ne!(batch.labels, batch2.labels);
}

#[test]
fn class_balance_keeps_unknown_near_one_twelfth() {
    let dir = tempfile::tempdir().unwrap();
    build_tree(dir.path(), 25, &[("bird", 40), ("bed", 40), ("cat", 40)]);
    let index = scan_dataset(dir.path()).unwrap();
    let plan = index.epoch_plan(DataSplit::TrainVal, 5, true);
    let unknown = plan
        .iter()
        .filter(|&&i| index.records[i].label == Label::Unknown)
        .count();
    let frac = unknown as f64 / plan.len() as f64;
    assert!((frac - 1.0 / 12.0).abs() < 0.02, "unknown fraction {frac}");

    // without balancing the unknown class dominates
    let plan = index.epoch_plan(DataSplit::TrainVal, 5, false);
    let unknown = plan
        .iter()
        .filter(|&&i| index.records[i].label == Label::Unknown)
        .count();
    assert!(unknown as f64 / plan.len() as f64 > 0.25);
}
