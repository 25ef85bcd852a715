use std::collections::VecDeque;

use jobvs::metrics::dsc;
use jobvs::phantom::{generate_cohort, generate_phantom, PhantomConfig};
use ndarray::Array3;

fn components_26(mask: &Array3<u8>) -> usize {
    let (a, b, c) = mask.dim();
    let mut seen = Array3::<bool>::from_elem((a, b, c), false);
    let mut n = 0;
    for ((i, j, k), &v) in mask.indexed_iter() {
        if v == 0 || seen[[i, j, k]] {
            continue;
        }
        n += 1;
        seen[[i, j, k]] = true;
        let mut q = VecDeque::from([[i, j, k]]);
        while let Some(p) = q.pop_front() {
            for d in 0..27 {
                let o = [d / 9, (d / 3) % 3, d % 3];
                let nb: Option<[usize; 3]> = (0..3)
                    .map(|x| (p[x] + o[x]).checked_sub(1))
                    .collect::<Option<Vec<_>>>()
                    .and_then(|v| v.try_into().ok());
                let Some(nb) = nb else { continue };
                if nb[0] >= a || nb[1] >= b || nb[2] >= c {
                    continue;
                }
                if mask[nb] != 0 && !seen[nb] {
                    seen[nb] = true;
                    q.push_back(nb);
                }
            }
        }
    }
    n
}

#[test]
fn default_cohort_has_sparse_vessels_inside_one_brain_component() {
    let cohort = generate_cohort(&PhantomConfig::default(), 10).unwrap();
    let mut ids: Vec<&str> = cohort.iter().map(|r| r.id.as_str()).collect();
    ids.dedup();
    assert_eq!(ids.len(), 10);
    for rec in &cohort {
        let frac = rec.vessel.count() as f64 / rec.brain.count() as f64;
        assert!((0.001..=0.05).contains(&frac), "{}: vessel fraction {frac}", rec.id);
        assert_eq!(components_26(rec.brain.data()), 1, "{}", rec.id);
        assert!(rec.vessel.as_slice().iter().zip(rec.brain.as_slice()).all(|(&v, &b)| v == 0 || b == 1));
    }
}

#[test]
fn skull_intensity_confounds_vessels_without_noise() {
    let cfg = PhantomConfig {
        noise_std: 0.0,
        ..Default::default()
    };
    for idx in 0..3 {
        let rec = generate_phantom(&cfg, idx).unwrap();
        let img = rec.image.as_slice();
        let (mut skull, mut n_skull, mut vessel, mut n_vessel) = (0.0, 0, 0.0, 0);
        for ((&v, &b), &x) in rec.vessel.as_slice().iter().zip(rec.brain.as_slice()).zip(img) {
            if v == 1 {
                vessel += x as f64;
                n_vessel += 1;
            } else if b == 0 && (x as f64 - cfg.skull_intensity).abs() < 1e-6 {
                skull += x as f64;
                n_skull += 1;
            }
        }
        assert!(n_skull > 0 && n_vessel > 0);
        let (skull, vessel) = (skull / n_skull as f64, vessel / n_vessel as f64);
        assert!((skull - vessel).abs() <= 0.1 * vessel, "skull {skull} vessel {vessel}");
    }
}

#[test]
fn different_seeds_give_different_trees() {
    let a = generate_phantom(&PhantomConfig::default(), 0).unwrap();
    let b = generate_phantom(&PhantomConfig { seed: 1, ..Default::default() }, 0).unwrap();
    let d = dsc(a.vessel.as_slice(), b.vessel.as_slice()).unwrap();
    assert!(d < 0.9, "vessel Dice between seeds {d}");
}

#[test]
fn cohort_equals_individual_generation() {
    let cfg = PhantomConfig {
        size: 32,
        brain_axes: [0.3, 0.32, 0.28],
        ..Default::default()
    };
    let cohort = generate_cohort(&cfg, 3).unwrap();
    for (i, rec) in cohort.iter().enumerate() {
        assert_eq!(rec, &generate_phantom(&cfg, i).unwrap());
    }
}
