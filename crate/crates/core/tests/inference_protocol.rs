use jobvs::inference::{
    apply_brain_mask, binarize, evaluate_modes, masked_modes, masking_invariant_holds, predict_image, sliding_window,
    MaskSource, PatchProbs, PredictionVolume,
};
use jobvs::model::{build_model, LatticeConfig, TaskMode};
use jobvs::nn::Tensor;
use jobvs::phantom::{generate_phantom, PhantomConfig};
use jobvs::volume::{LabelVolume, Volume};
use jobvs::Result;
use ndarray::Array3;

fn small_phantom() -> PhantomConfig {
    PhantomConfig {
        size: 32,
        brain_axes: [0.3, 0.32, 0.28],
        ..Default::default()
    }
}

/// A non-linear, position-dependent patch predictor.
fn squash(t: &Tensor) -> Result<PatchProbs> {
    let v: Vec<f32> = t.data().iter().enumerate().map(|(i, x)| 1.0 / (1.0 + (-(x * 3.0 - 1.0 + (i % 7) as f32 * 0.1)).exp())).collect();
    Ok(PatchProbs {
        brain: Some(v.iter().map(|p| 1.0 - p).collect()),
        vessel: Some(v),
    })
}

#[test]
fn blending_does_not_depend_on_worker_count() {
    let rec = generate_phantom(&small_phantom(), 1).unwrap();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| sliding_window(&rec.image, [16, 16, 16], 0.5, squash).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.vessel.unwrap().data(), b.vessel.unwrap().data());
    assert_eq!(a.brain.unwrap().data(), b.brain.unwrap().data());
}

#[test]
fn masking_never_raises_probabilities_and_removes_only_outside() {
    let rec = generate_phantom(&small_phantom(), 0).unwrap();
    let pred = sliding_window(&rec.image, [16, 16, 16], 0.5, squash).unwrap();
    let bm = apply_brain_mask(&pred, &rec.brain).unwrap();
    assert!(masking_invariant_holds(&pred, &bm, &rec.brain));
    let (n, b) = (pred.vessel.as_ref().unwrap(), bm.vessel.as_ref().unwrap());
    assert!(b.as_slice().iter().zip(n.as_slice()).all(|(b, n)| b <= n));
    assert_eq!(bm.brain.as_ref().unwrap().data(), pred.brain.as_ref().unwrap().data());
}

#[test]
fn brain_masking_cannot_lower_precision_when_only_negatives_are_removed() {
    // Phantom vessels lie inside the brain, so the ground-truth brain mask only
    // removes negatives.
    let rec = generate_phantom(&PhantomConfig::default(), 2).unwrap();
    let img = rec.image.data();
    let (lo, hi) = img.iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    let prob = Volume::like(img.mapv(|v| (v - lo) / (hi - lo)), &rec.image).unwrap();
    let nbm = PredictionVolume {
        vessel: Some(prob),
        brain: None,
    };
    let bm = apply_brain_mask(&nbm, &rec.brain).unwrap();
    let precision = |p: &PredictionVolume, t: f64| {
        let m = binarize(p.vessel.as_ref().unwrap(), t);
        let tp = m.as_slice().iter().zip(rec.vessel.as_slice()).filter(|(&a, &b)| a == 1 && b == 1).count();
        tp as f64 / m.count().max(1) as f64
    };
    for t in [0.3, 0.5, 0.7, 0.8, 0.9] {
        assert!(precision(&bm, t) >= precision(&nbm, t), "threshold {t}");
    }
}

#[test]
fn modes_follow_the_model_heads() {
    let rec = generate_phantom(&small_phantom(), 3).unwrap();
    let cfg = LatticeConfig {
        base_channels: 4,
        patch_size: [16; 3],
        ..Default::default()
    };
    let joint = build_model(&cfg, 0).unwrap();
    let m = evaluate_modes(&joint, None, &rec, 0.5).unwrap();
    assert_eq!(m.mask_source, MaskSource::Predicted);
    assert_eq!(m.mask, binarize(m.nbm.brain.as_ref().unwrap(), 0.5));
    assert!(masking_invariant_holds(&m.nbm, &m.bm, &m.mask));
    // NBM is the plain prediction, independent of any mask.
    let plain = predict_image(&joint, None, &rec.image, 0.5).unwrap();
    assert_eq!(plain.vessel.unwrap().data(), m.nbm.vessel.as_ref().unwrap().data());

    let single = build_model(
        &LatticeConfig {
            task_mode: TaskMode::VesselOnly,
            ..cfg
        },
        0,
    )
    .unwrap();
    let m = evaluate_modes(&single, None, &rec, 0.5).unwrap();
    assert_eq!(m.mask_source, MaskSource::GroundTruth);
    assert_eq!(m.mask, rec.brain);
    assert!(m.bm.brain.is_none());
}

#[test]
fn predictions_map_back_onto_the_original_grid() {
    let rec = generate_phantom(&small_phantom(), 4).unwrap();
    let model = build_model(
        &LatticeConfig {
            base_channels: 4,
            patch_size: [16; 3],
            ..Default::default()
        },
        1,
    )
    .unwrap();
    let stats = jobvs::volume::CohortStats {
        median_spacing: [0.8, 0.8, 0.8],
        vessel_clip_lo: -1.0,
        vessel_clip_hi: 3.0,
        global_mean: 0.0,
        global_std: 1.0,
    };
    let p = predict_image(&model, Some(&stats), &rec.image, 0.5).unwrap();
    for v in [p.vessel.unwrap(), p.brain.unwrap()] {
        assert!(v.same_geometry(&rec.image));
        assert!(v.as_slice().iter().all(|x| (0.0..=1.0).contains(x)));
    }
    let ones = LabelVolume::like(Array3::from_elem((32, 32, 32), 1u8), &rec.image).unwrap();
    let m = masked_modes(
        PredictionVolume {
            vessel: Some(rec.image.clone()),
            brain: None,
        },
        &jobvs::volume::SubjectRecord::new("x", rec.image.clone(), ones, rec.vessel.clone()).unwrap(),
    )
    .unwrap();
    assert_eq!(m.bm.vessel.unwrap().data(), rec.image.data());
}
