use jobvs::volume::{load_label, load_volume, resample_label, resample_to_spacing, save_volume, zscore, LabelVolume, Volume};
use ndarray::Array3;
use proptest::prelude::*;

fn random_volume(shape: [usize; 3], spacing: [f64; 3], seed: u64) -> Volume {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = Array3::from_shape_simple_fn((shape[0], shape[1], shape[2]), || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 33) as f32 / (1u64 << 31) as f32) * 100.0 - 20.0
    });
    Volume::new(data, spacing, [1.5, -2.0, 0.25]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn resampling_preserves_physical_extent(
        shape in prop::array::uniform3(1usize..24),
        spacing in prop::array::uniform3(0.3f64..2.5),
        target in prop::array::uniform3(0.3f64..2.5),
        seed in any::<u64>(),
    ) {
        let vol = random_volume(shape, spacing, seed);
        let out = resample_to_spacing(&vol, target).unwrap();
        for a in 0..3 {
            let extent_in = shape[a] as f64 * spacing[a];
            let extent_out = out.shape()[a] as f64 * target[a];
            prop_assert!((extent_out - extent_in).abs() <= spacing[a].max(target[a]) + 1e-9);
        }
        prop_assert_eq!(out.spacing(), target);
        prop_assert_eq!(out.origin(), vol.origin());
        // Interpolation never leaves the input range.
        let (lo, hi) = vol.as_slice().iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        prop_assert!(out.as_slice().iter().all(|&v| v >= lo - 1e-4 && v <= hi + 1e-4));

        let labels = LabelVolume::like(vol.data().mapv(|v| u8::from(v > 30.0)), &vol).unwrap();
        let rl = resample_label(&labels, target).unwrap();
        prop_assert_eq!(rl.shape(), out.shape());
        prop_assert!(rl.as_slice().iter().all(|&v| v <= 1));
    }

    #[test]
    fn zscore_standardizes_any_non_constant_image(
        shape in prop::array::uniform3(2usize..12),
        seed in any::<u64>(),
    ) {
        let z = zscore(&random_volume(shape, [1.0; 3], seed)).unwrap();
        let n = z.len() as f64;
        let mean = z.as_slice().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = z.as_slice().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-6);
        prop_assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn nifti_round_trip_is_exact_for_all_supported_extensions() {
    let dir = tempfile::tempdir().unwrap();
    let vol = random_volume([7, 5, 3], [0.7, 1.1, 2.9], 4);
    let labels = LabelVolume::like(vol.data().mapv(|v| u8::from(v > 20.0)), &vol).unwrap();
    for name in ["a.nii.gz", "b.nii", "c.raw"] {
        let p = dir.path().join(name);
        save_volume(&vol, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.data(), vol.data(), "{name}");
        for a in 0..3 {
            assert!((back.spacing()[a] - vol.spacing()[a]).abs() <= 1e-6);
        }
    }
    let p = dir.path().join("m.nii.gz");
    save_volume(&labels, &p).unwrap();
    assert_eq!(load_label(&p).unwrap().data(), labels.data());
}
