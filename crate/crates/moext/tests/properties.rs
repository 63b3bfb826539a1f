//! Property-based invariants over the data pipeline, losses, and metrics.

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use moext::data::{
    augment_training_set, build_expansion_sets, load_manifest, resolve_apex, save_manifest,
    DatasetId, Manifest, Sample,
};
use moext::eval::{uar, uf1, acc, ConfusionMatrix};
use moext::losses::{ss_loss, LossConfig, PretrainFeatures};
use moext::model::Projector;

fn small_image(seed: u64, h: usize, w: usize) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn((3, h, w), || rng.gen_range(0.0..1.0f32))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// The mirror+rotation augmentation always produces exactly 10x the
    /// input pairs, and pair 0 of each group is the original.
    #[test]
    fn augmentation_is_exactly_tenfold(n in 1usize..5, seed in 0u64..1000) {
        let pairs: Vec<_> = (0..n)
            .map(|i| (small_image(seed + i as u64, 12, 12), small_image(seed + 100 + i as u64, 12, 12)))
            .collect();
        let out = augment_training_set(&pairs, seed);
        prop_assert_eq!(out.len(), 10 * n);
        for (i, pair) in pairs.iter().enumerate() {
            prop_assert_eq!(&out[10 * i].0, &pair.0);
            prop_assert_eq!(&out[10 * i].1, &pair.1);
        }
    }

    /// Expansion sets have m instances per frame and keep the original as
    /// instance 0, bit-identical.
    #[test]
    fn expansion_sets_keep_original_first(m in 2usize..=4, seed in 0u64..1000) {
        let onset = small_image(seed, 10, 10);
        let apex = small_image(seed + 7, 10, 10);
        let (set_o, set_a) = build_expansion_sets(&onset, &apex, m, seed).unwrap();
        prop_assert_eq!(set_o.len(), m);
        prop_assert_eq!(set_a.len(), m);
        prop_assert_eq!(&set_o[0], &onset);
        prop_assert_eq!(&set_a[0], &apex);
        for img in set_o.iter().chain(set_a.iter()) {
            prop_assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    /// A resolved apex always lies inside [onset, offset], for every clip
    /// kind and pseudo-apex setting.
    #[test]
    fn resolved_apex_is_in_bounds(
        onset in 0usize..50,
        len in 0usize..50,
        apex_off in proptest::option::of(0usize..50),
        is_macro in any::<bool>(),
        n in 1usize..10,
    ) {
        let offset = onset + len;
        let apex_idx = apex_off.map(|a| onset + a.min(len));
        let apex = resolve_apex(onset, apex_idx, offset, is_macro, n).unwrap();
        prop_assert!(apex >= onset && apex <= offset);
    }

    /// Saving and re-loading a manifest preserves every sample.
    #[test]
    fn manifest_roundtrip(rows in 1usize..6, seed in 0u64..500) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<Sample> = (0..rows)
            .map(|i| {
                let onset = rng.gen_range(0..20usize);
                let offset = onset + rng.gen_range(0..20usize);
                let is_macro = rng.gen_bool(0.3);
                // Loading always re-derives the pseudo-apex of general
                // (macro) expression clips, so store that value up front.
                let apex_idx = if is_macro {
                    resolve_apex(onset, None, offset, true, 5).unwrap()
                } else {
                    rng.gen_range(onset..=offset)
                };
                Sample {
                    dataset_id: DatasetId::Synth,
                    subject_id: format!("s{:02}", rng.gen_range(0..5u8)),
                    clip_id: format!("c{i:02}"),
                    frames_dir: dir.path().join(format!("f{i}")),
                    onset_idx: onset,
                    apex_idx,
                    offset_idx: offset,
                    label: ["happiness", "surprise", "others"][rng.gen_range(0..3)].to_string(),
                    is_macro,
                }
            })
            .collect();
        let manifest = Manifest::from_samples(DatasetId::Synth, samples);
        let path = dir.path().join("manifest.csv");
        save_manifest(&manifest, &path).unwrap();
        let back = load_manifest(&path, DatasetId::Synth, 5).unwrap();
        prop_assert_eq!(manifest, back);
    }

    /// Relabeling classes by a permutation permutes nothing in the macro
    /// metrics: UF1, UAR, and ACC are invariant.
    #[test]
    fn metrics_are_permutation_invariant(c in 2usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts = Array2::from_shape_simple_fn((c, c), || rng.gen_range(1..15u64));
        let names: Vec<String> = (0..c).map(|i| format!("k{i}")).collect();
        let cm = ConfusionMatrix::from_counts(names.clone(), counts.clone()).unwrap();

        let mut perm: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permuted = Array2::from_shape_fn((c, c), |(i, j)| counts[(perm[i], perm[j])]);
        let pnames: Vec<String> = perm.iter().map(|&i| names[i].clone()).collect();
        let pm = ConfusionMatrix::from_counts(pnames, permuted).unwrap();

        prop_assert!((uf1(&cm).unwrap() - uf1(&pm).unwrap()).abs() < 1e-12);
        prop_assert!((uar(&cm).unwrap() - uar(&pm).unwrap()).abs() < 1e-12);
        prop_assert!((acc(&cm).unwrap() - acc(&pm).unwrap()).abs() < 1e-12);
    }

    /// The onset/apex contrastive loss is invariant to permuting instances
    /// within the onset set and within the apex set.
    #[test]
    fn ss_loss_is_within_set_permutation_invariant(
        n in 1usize..3,
        m in 2usize..4,
        d in 1usize..6,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Array3::from_shape_simple_fn((n, 2 * m, d), || rng.gen_range(-1.0..1.0f64));
        let texture = Array3::from_shape_simple_fn((n, 2 * m, d), || rng.gen_range(-1.0..1.0f64));
        let mut proj = Projector::<f64>::new(d, &mut rng);
        let cfg = LossConfig { epsilon: 0.3, alpha1: 0.5, alpha2: 1.0, m, n };

        let feats = PretrainFeatures::new(shape.clone(), texture.clone()).unwrap();
        let base = ss_loss(&feats, &mut proj, &cfg).unwrap();

        // Swap two onset instances and two apex instances of one sample.
        let mut swapped = shape;
        let i = rng.gen_range(0..n);
        for (a, b) in [(0usize, m - 1), (m, 2 * m - 1)] {
            let row_a = swapped.slice(ndarray::s![i, a, ..]).to_owned();
            let row_b = swapped.slice(ndarray::s![i, b, ..]).to_owned();
            swapped.slice_mut(ndarray::s![i, a, ..]).assign(&row_b);
            swapped.slice_mut(ndarray::s![i, b, ..]).assign(&row_a);
        }
        let feats2 = PretrainFeatures::new(swapped, texture).unwrap();
        let permuted = ss_loss(&feats2, &mut proj, &cfg).unwrap();
        prop_assert!((base - permuted).abs() < 1e-12, "{} vs {}", base, permuted);
    }
}
