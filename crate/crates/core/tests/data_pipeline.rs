use bimamba::data::io::{decode_pgm, decode_rawv, encode_pgm, encode_rawv, read_dataset, write_dataset};
use bimamba::data::{
    augment, line_integral, parallel_project, pixel_mean_auroc, synth_dataset, two_view_oracle_auroc, AugmentParams,
    Axis, Split, SynthConfig, Volume,
};
use bimamba::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

fn small() -> SynthConfig {
    SynthConfig::with_size(8, 8)
}

fn random_volume(extents: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = extents.iter().product();
    Volume::new(extents, (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect()).unwrap()
}

#[test]
fn projection_of_an_impulse_lands_on_one_pixel() {
    let mut v = Volume::filled([4, 5, 6], 0.0).unwrap();
    v.set(2, 3, 1, 7.0);
    let f = line_integral(&v, Axis::Frontal);
    assert_eq!(f.shape(), [4, 6]);
    for (i, &p) in f.data().iter().enumerate() {
        assert_eq!(p, if i == 2 * 6 + 1 { 7.0 / 5.0 } else { 0.0 });
    }
    let l = line_integral(&v, Axis::Lateral);
    assert_eq!(l.shape(), [4, 5]);
    assert_eq!(l.data()[2 * 5 + 3], 7.0 / 6.0);
    let img = parallel_project(&v, Axis::Frontal);
    assert_eq!(img.data().iter().filter(|&&p| p == 1.0).count(), 1);
    assert_eq!(img.data().iter().filter(|&&p| p == 0.0).count(), 23);
}

#[test]
fn projection_is_linear_before_normalization() {
    let (a, b) = (random_volume([3, 4, 5], 1), random_volume([3, 4, 5], 2));
    let sum: Vec<f32> = a.voxels().iter().zip(b.voxels()).map(|(x, y)| 2.0 * x - 3.0 * y).collect();
    let ab = Volume::new([3, 4, 5], sum).unwrap();
    for axis in [Axis::Frontal, Axis::Lateral] {
        let (pa, pb, pab) = (line_integral(&a, axis), line_integral(&b, axis), line_integral(&ab, axis));
        for i in 0..pa.data().len() {
            let expect = 2.0 * pa.data()[i] - 3.0 * pb.data()[i];
            assert!((pab.data()[i] - expect).abs() < 1e-5);
        }
    }
}

#[test]
fn synthetic_data_is_deterministic_in_the_seed() {
    let a = synth_dataset(4, 40, &small()).unwrap();
    assert_eq!(a, synth_dataset(4, 40, &small()).unwrap());
    assert_ne!(a, synth_dataset(5, 40, &small()).unwrap());
}

#[test]
fn label_balance_and_stratified_split() {
    let cfg = SynthConfig::with_size(16, 16);
    let d = synth_dataset(1, 1000, &cfg).unwrap();
    assert_eq!(d.positives(), 300);
    let [tr, va, te] = d.manifest.fractions();
    assert!((tr - 0.7).abs() < 1e-9 && (va - 0.1).abs() < 1e-9 && (te - 0.2).abs() < 1e-9);
    for split in Split::ALL {
        let s = d.split(split);
        let frac = s.iter().filter(|x| x.label).count() as f64 / s.len() as f64;
        assert!((frac - 0.3).abs() <= 0.02, "{split:?} {frac}");
    }
}

#[test]
fn task_needs_both_views() {
    let d = synth_dataset(1, 1000, &SynthConfig::with_size(64, 64)).unwrap();
    let all: Vec<_> = d.samples.iter().collect();
    let frontal = pixel_mean_auroc(&all, true).unwrap();
    let lateral = pixel_mean_auroc(&all, false).unwrap();
    let oracle = two_view_oracle_auroc(&all).unwrap();
    assert!(frontal < 0.75 && lateral < 0.75, "{frontal} {lateral}");
    assert!(oracle > 0.95, "{oracle}");
}

#[test]
fn too_few_subjects_and_bad_probabilities_are_rejected() {
    assert!(synth_dataset(0, 9, &small()).is_err());
    let bad = SynthConfig {
        positive_fraction: 1.5,
        ..small()
    };
    assert!(synth_dataset(0, 20, &bad).is_err());
}

#[test]
fn dataset_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth_dataset(2, 20, &small()).unwrap();
    write_dataset(dir.path(), &d).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.manifest, d.manifest);
    assert_eq!(back.samples.len(), d.samples.len());
    for (a, b) in d.samples.iter().zip(&back.samples) {
        assert_eq!((a.label, &a.subject_id), (b.label, &b.subject_id));
        for (x, y) in a.frontal.data().iter().zip(b.frontal.data()) {
            assert!((x - y).abs() <= 1.0 / 65535.0);
        }
        for (x, y) in a.lateral.data().iter().zip(b.lateral.data()) {
            assert!((x - y).abs() <= 1.0 / 65535.0);
        }
    }
}

#[test]
fn identity_augmentation_returns_the_input() {
    let d = synth_dataset(3, 10, &small()).unwrap();
    let img = &d.samples[0].frontal;
    assert_eq!(&AugmentParams::identity(8, 8).apply(img), img);
}

#[test]
fn flip_only_mirrors_columns() {
    let img = Tensor::new(&[2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let p = AugmentParams {
        flip: true,
        ..AugmentParams::identity(2, 3)
    };
    assert_eq!(p.apply(&img).data(), [3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
}

#[test]
fn both_views_share_one_augmentation() {
    let d = synth_dataset(3, 10, &small()).unwrap();
    let mut s = d.samples[0].clone();
    s.lateral = s.frontal.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let out = augment(&s, &mut rng);
        assert_eq!(out.frontal, out.lateral);
        assert_eq!((out.label, &out.subject_id), (s.label, &s.subject_id));
        assert!(out.frontal.data().iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pgm_round_trip_within_one_level(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w).map(|_| rng.random_range(0.0f32..=1.0)).collect();
        let img = Tensor::new(&[h, w], data).unwrap();
        let back = decode_pgm(&encode_pgm(&img).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1.0 / 65535.0);
        }
    }

    #[test]
    fn rawv_round_trip_is_bit_exact(
        dz in 1usize..5, dy in 1usize..5, dx in 1usize..5,
        bits in prop::collection::vec(any::<u32>(), 64),
    ) {
        let voxels: Vec<f32> = (0..dz * dy * dx)
            .map(|i| f32::from_bits(bits[i]))
            .map(|v| if v.is_finite() { v } else { 0.0 })
            .collect();
        let v = Volume::new([dz, dy, dx], voxels).unwrap();
        let back = decode_rawv(&encode_rawv(&v)).unwrap();
        prop_assert_eq!(back.extents(), v.extents());
        let same = back.voxels().iter().zip(v.voxels()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }

    #[test]
    fn splits_partition_the_subjects(n in 10usize..80, seed in any::<u64>()) {
        let d = synth_dataset(seed, n, &SynthConfig::with_size(4, 4)).unwrap();
        let mut seen = HashSet::new();
        for split in Split::ALL {
            for id in d.manifest.ids(split) {
                prop_assert!(seen.insert(id.clone()), "{} in two splits", id);
            }
        }
        prop_assert_eq!(seen.len(), n);
        prop_assert_eq!(d.split(Split::Train).len() + d.split(Split::Val).len() + d.split(Split::Test).len(), n);
    }

    #[test]
    fn augmentation_stays_in_range_and_shape(seed in any::<u64>()) {
        let d = synth_dataset(seed, 10, &small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = augment(&d.samples[0], &mut rng);
        prop_assert_eq!(out.frontal.shape(), &[8, 8]);
        prop_assert!(out.frontal.data().iter().chain(out.lateral.data()).all(|p| (0.0..=1.0).contains(p)));
    }
}
