mod common;

use common::*;
use jobvs::inference::binarize;
use jobvs::metrics::{average_precision, cl_dice, dsc, is_simple, max_f1, skeletonize3d};
use jobvs::volume::Volume;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(bits: u32) -> Array3<u8> {
    Array3::from_shape_fn((2, 2, 2), |(i, j, k)| ((bits >> (i * 4 + j * 2 + k)) & 1) as u8)
}

#[test]
fn exhaustive_binary_pairs_on_a_2x2x2_grid() {
    for a in 0..256 {
        let pa = grid(a);
        for b in 0..256 {
            let pb = grid(b);
            let (sa, sb) = (pa.as_slice().unwrap(), pb.as_slice().unwrap());
            assert_eq!(dsc(sa, sb).unwrap(), dsc_oracle(sa, sb));
            let c = cl_dice(&pa, &pb).unwrap();
            assert!((c - cl_dice_oracle(&pa, &pb)).abs() <= 1e-12);
            assert!((c - cl_dice(&pb, &pa).unwrap()).abs() <= 1e-12, "clDice must be symmetric");
            assert_eq!(dsc(sa, sb).unwrap(), dsc(sb, sa).unwrap());
        }
    }
}

#[test]
fn exhaustive_two_level_probabilities_on_a_2x2x2_grid() {
    for g in 1..256 {
        let gt = grid(g);
        let gt = gt.as_slice().unwrap();
        for p in 0..256 {
            let prob: Vec<f32> = grid(p).iter().map(|&v| if v == 1 { 0.7 } else { 0.2 }).collect();
            assert_eq!(average_precision(&prob, gt).unwrap(), ap_oracle(&prob, gt));
            assert_eq!(max_f1(&prob, gt).unwrap(), max_f1_oracle(&prob, gt));
        }
    }
}

#[test]
fn random_instances_match_oracles_and_f1_equals_dice_at_its_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let shape: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=4));
        let n: usize = shape.iter().product();
        let levels = rng.random_range(2..=n.max(2));
        let prob: Vec<f32> = (0..n).map(|_| rng.random_range(0..levels) as f32 / levels as f32).collect();
        let mut gt: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        gt[rng.random_range(0..n)] = 1;
        assert_eq!(average_precision(&prob, &gt).unwrap(), ap_oracle(&prob, &gt));
        let (f1, t) = max_f1(&prob, &gt).unwrap();
        assert_eq!((f1, t), max_f1_oracle(&prob, &gt));
        let vol = Volume::new(Array3::from_shape_vec((shape[0], shape[1], shape[2]), prob.clone()).unwrap(), [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(f1, dsc(binarize(&vol, t as f64).as_slice(), &gt).unwrap());
        let at_half = dsc(binarize(&vol, 0.5).as_slice(), &gt).unwrap();
        assert!(f1 >= at_half);
    }
}

#[test]
fn ranking_metrics_ignore_monotone_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let prob: Vec<f32> = (0..40).map(|_| rng.random_range(0..10) as f32 / 10.0).collect();
        let mut gt: Vec<u8> = (0..40).map(|_| u8::from(rng.random_bool(0.3))).collect();
        gt[0] = 1;
        let warped: Vec<f32> = prob.iter().map(|p| (p * 3.0).exp() - 0.5).collect();
        assert_eq!(average_precision(&prob, &gt).unwrap(), average_precision(&warped, &gt).unwrap());
        assert_eq!(max_f1(&prob, &gt).unwrap().0, max_f1(&warped, &gt).unwrap().0);
    }
}

#[test]
fn skeletons_of_random_tubes_keep_topology() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..24 {
        let m = random_tubes(14, rng.random_range(1..4), &mut rng);
        let s = skeletonize3d(&m);
        assert!(s.iter().zip(m.iter()).all(|(&a, &b)| a <= b));
        assert_eq!(components(&s, |v| v != 0, true), components(&m, |v| v != 0, true));
        assert_eq!(skeletonize3d(&s), s, "thinning must reach a fixpoint");
        assert!(s.iter().filter(|&&v| v != 0).count() < m.iter().filter(|&&v| v != 0).count());
    }
}

#[test]
fn simple_points_preserve_global_topology() {
    // Deleting a voxel judged simple must not change the number of 26-connected
    // foreground or 6-connected background components.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    while checked < 400 {
        let m = Array3::from_shape_fn((5, 5, 5), |(i, j, k)| {
            let interior = (1..4).contains(&i) && (1..4).contains(&j) && (1..4).contains(&k);
            u8::from(interior && rng.random_bool(0.55))
        });
        if m[[2, 2, 2]] == 0 {
            continue;
        }
        let nb: [bool; 27] = std::array::from_fn(|d| m[[1 + d / 9, 1 + (d / 3) % 3, 1 + d % 3]] != 0);
        if !is_simple(&nb) {
            continue;
        }
        let mut cut = m.clone();
        cut[[2, 2, 2]] = 0;
        assert_eq!(components(&cut, |v| v != 0, true), components(&m, |v| v != 0, true));
        assert_eq!(components(&cut, |v| v == 0, false), components(&m, |v| v == 0, false));
        checked += 1;
    }
}

#[test]
fn cl_dice_worked_partial_overlap() {
    // Prediction covers half of a straight ground-truth centreline.
    let mut gt = Array3::<u8>::zeros((3, 3, 12));
    let mut pred = gt.clone();
    for k in 1..11 {
        gt[[1, 1, k]] = 1;
    }
    for k in 1..6 {
        pred[[1, 1, k]] = 1;
    }
    assert!((cl_dice(&pred, &gt).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    let mut far = Array3::<u8>::zeros((3, 3, 12));
    far[[0, 0, 0]] = 1;
    assert_eq!(cl_dice(&far, &gt).unwrap(), 0.0);
    assert_eq!(cl_dice(&gt, &gt).unwrap(), 1.0);
}
