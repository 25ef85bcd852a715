//! Brute-force reference implementations and small fixtures shared by the
//! integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use jobvs::metrics::skeletonize3d;
use ndarray::Array3;
use rand::Rng;

pub fn positives(mask: &[u8]) -> BTreeSet<usize> {
    mask.iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| i).collect()
}

pub fn dsc_oracle(pred: &[u8], gt: &[u8]) -> f64 {
    let (p, g) = (positives(pred), positives(gt));
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    (2 * p.intersection(&g).count()) as f64 / (p.len() + g.len()) as f64
}

/// Confusion counts of the mask `prob >= t`.
fn counts_at(prob: &[f32], gt: &[u8], t: f32) -> (usize, usize, usize) {
    let pred: Vec<u8> = prob.iter().map(|&p| u8::from(p >= t)).collect();
    let (p, g) = (positives(&pred), positives(gt));
    let tp = p.intersection(&g).count();
    (tp, p.len() - tp, g.len() - tp)
}

fn thresholds_desc(prob: &[f32]) -> Vec<f32> {
    let mut t: Vec<f32> = prob.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

/// Precision-recall integration by re-thresholding the whole grid at every distinct value.
pub fn ap_oracle(prob: &[f32], gt: &[u8]) -> f64 {
    let n_pos = positives(gt).len();
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for t in thresholds_desc(prob) {
        let (tp, fp, _) = counts_at(prob, gt, t);
        if tp > prev_tp {
            ap += tp as f64 / (tp + fp) as f64 * ((tp - prev_tp) as f64 / n_pos as f64);
        }
        prev_tp = tp;
    }
    ap
}

pub fn max_f1_oracle(prob: &[f32], gt: &[u8]) -> (f64, f32) {
    let mut best = (-1.0, f32::INFINITY);
    for t in thresholds_desc(prob) {
        let (tp, fp, fn_) = counts_at(prob, gt, t);
        let f1 = (2 * tp) as f64 / (2 * tp + fp + fn_) as f64;
        if f1 > best.0 || (f1 == best.0 && t < best.1) {
            best = (f1, t);
        }
    }
    best
}

pub fn cl_dice_oracle(pred: &Array3<u8>, gt: &Array3<u8>) -> f64 {
    let (p, g) = (positives(pred.as_slice().unwrap()), positives(gt.as_slice().unwrap()));
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    let sp = positives(skeletonize3d(pred).as_slice().unwrap());
    let sg = positives(skeletonize3d(gt).as_slice().unwrap());
    if sp.is_empty() || sg.is_empty() {
        return 0.0;
    }
    let tprec = sp.intersection(&g).count() as f64 / sp.len() as f64;
    let tsens = sg.intersection(&p).count() as f64 / sg.len() as f64;
    if tprec + tsens == 0.0 {
        0.0
    } else {
        2.0 * tprec * tsens / (tprec + tsens)
    }
}

/// Connected components of the voxels where `fg(value)` holds; `full` selects
/// 26-adjacency, otherwise 6-adjacency.
pub fn components(mask: &Array3<u8>, fg: impl Fn(u8) -> bool, full: bool) -> usize {
    let (a, b, c) = mask.dim();
    let dims = [a as isize, b as isize, c as isize];
    let mut seen = Array3::<bool>::from_elem((a, b, c), false);
    let offsets: Vec<[isize; 3]> = (0..27)
        .map(|d: isize| [d / 9 - 1, (d / 3) % 3 - 1, d % 3 - 1])
        .filter(|o| *o != [0, 0, 0] && (full || o.iter().map(|v| v.abs()).sum::<isize>() == 1))
        .collect();
    let mut n = 0;
    for (idx, &v) in mask.indexed_iter() {
        let start = [idx.0, idx.1, idx.2];
        if !fg(v) || seen[start] {
            continue;
        }
        n += 1;
        seen[start] = true;
        let mut q = VecDeque::from([start]);
        while let Some(p) = q.pop_front() {
            for o in &offsets {
                let nb: [isize; 3] = std::array::from_fn(|x| p[x] as isize + o[x]);
                if (0..3).any(|x| nb[x] < 0 || nb[x] >= dims[x]) {
                    continue;
                }
                let nb = nb.map(|v| v as usize);
                if fg(mask[nb]) && !seen[nb] {
                    seen[nb] = true;
                    q.push_back(nb);
                }
            }
        }
    }
    n
}

/// Random polyline of unit-radius-ish tubes inside an `n`-cube.
pub fn random_tubes<R: Rng>(n: usize, n_tubes: usize, rng: &mut R) -> Array3<u8> {
    let mut m = Array3::<u8>::zeros((n, n, n));
    let nf = n as f64;
    for _ in 0..n_tubes {
        let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(1.0..nf - 2.0));
        let b: [f64; 3] = std::array::from_fn(|_| rng.random_range(1.0..nf - 2.0));
        let r = rng.random_range(0.6..1.6);
        for ((i, j, k), v) in m.indexed_iter_mut() {
            let p = [i as f64, j as f64, k as f64];
            let ab: [f64; 3] = std::array::from_fn(|x| b[x] - a[x]);
            let ap: [f64; 3] = std::array::from_fn(|x| p[x] - a[x]);
            let len2: f64 = ab.iter().map(|v| v * v).sum();
            let t = (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0);
            let d2: f64 = (0..3).map(|x| (ap[x] - t * ab[x]).powi(2)).sum();
            if d2 <= r * r {
                *v = 1;
            }
        }
    }
    m
}
