//! Synthetic angiography-like head phantoms.
//!
//! Each phantom is a noisy 3D image holding an ellipsoidal brain, a bright
//! skull shell around it and a tree of bright tubes inside the brain. The
//! skull is as bright as the vessels, so intensity alone cannot separate
//! vessels from extracranial tissue.
//!
//! Vessel contrast fades along the distal part of terminal branches (thin
//! vessels lose signal toward their tips, as with inflow saturation in real
//! scans). Labelled tube voxels carry the full local contrast; a one-voxel
//! unlabelled halo around each tube blends into the surrounding tissue.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, SubjectRecord, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Edge length of the cubic grid in voxels.
    pub size: usize,
    /// Isotropic voxel size in mm.
    pub spacing: f64,
    /// Brain ellipsoid semi-axes as fractions of `size`.
    pub brain_axes: [f64; 3],
    /// Skull shell thickness in voxels.
    pub skull_thickness: f64,
    pub n_vessel_roots: usize,
    /// Number of bifurcation generations below each root.
    pub branch_depth: usize,
    /// Root radius range in voxels; radii shrink by 0.7 per generation, never below 1.
    pub vessel_radius_range: [f64; 2],
    /// Fraction of the root contrast kept per generation.
    pub contrast_decay: f64,
    /// Distal fraction of each terminal branch over which contrast fades to zero.
    pub tip_fade: f64,
    pub background_intensity: f64,
    pub brain_intensity: f64,
    pub skull_intensity: f64,
    pub vessel_intensity: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 64,
            spacing: 0.5,
            brain_axes: [0.34, 0.38, 0.30],
            skull_thickness: 3.0,
            n_vessel_roots: 3,
            branch_depth: 3,
            vessel_radius_range: [1.6, 2.4],
            contrast_decay: 0.9,
            tip_fade: 1.0,
            background_intensity: 0.05,
            brain_intensity: 0.35,
            skull_intensity: 0.90,
            vessel_intensity: 0.95,
            noise_std: 0.03,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size < 32 {
            return bad(format!("phantom size must be >= 32, got {}", self.size));
        }
        if !(self.spacing > 0.0) {
            return bad("phantom spacing must be positive".into());
        }
        if self.brain_axes.iter().any(|&a| !(a > 0.0 && a < 0.5)) {
            return bad(format!("brain_axes must lie in (0, 0.5), got {:?}", self.brain_axes));
        }
        let rim = self.skull_thickness + 1.0;
        if self.brain_axes.iter().any(|&a| a * self.size as f64 + rim >= self.size as f64 / 2.0) {
            return bad("brain and skull do not fit inside the grid".into());
        }
        if !(self.skull_thickness >= 1.0) {
            return bad("skull_thickness must be >= 1 voxel".into());
        }
        if self.n_vessel_roots == 0 {
            return bad("n_vessel_roots must be >= 1".into());
        }
        let [r0, r1] = self.vessel_radius_range;
        if !(r0 >= 1.0 && r1 >= r0) {
            return bad(format!("vessel_radius_range must satisfy 1 <= lo <= hi, got {:?}", self.vessel_radius_range));
        }
        if !(self.contrast_decay > 0.0 && self.contrast_decay <= 1.0) {
            return bad("contrast_decay must be in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.tip_fade) {
            return bad("tip_fade must be in [0, 1]".into());
        }
        if (self.skull_intensity - self.vessel_intensity).abs() > 0.1 * self.vessel_intensity.abs() {
            return bad(format!(
                "skull intensity {} must be within 10% of vessel intensity {}",
                self.skull_intensity, self.vessel_intensity
            ));
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative".into());
        }
        Ok(())
    }
}

type P3 = [f64; 3];

fn sub(a: P3, b: P3) -> P3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: P3, b: P3) -> P3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: P3, s: f64) -> P3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: P3, b: P3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: P3) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: P3) -> P3 {
    scale(a, 1.0 / norm(a).max(1e-12))
}

fn random_unit(rng: &mut ChaCha8Rng) -> P3 {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    unit([n.sample(rng), n.sample(rng), n.sample(rng)])
}

/// One straight tube piece with its radius and relative contrast at both ends.
#[derive(Clone, Copy, Debug)]
struct Capsule {
    a: P3,
    b: P3,
    radius: f64,
    contrast: [f64; 2],
}

impl Capsule {
    /// Distance from `p` to the axis and the contrast at the closest axis point.
    fn probe(&self, p: P3) -> (f64, f64) {
        let ab = sub(self.b, self.a);
        let t = (dot(sub(p, self.a), ab) / dot(ab, ab).max(1e-12)).clamp(0.0, 1.0);
        let d = norm(sub(p, add(self.a, scale(ab, t))));
        (d, self.contrast[0] + t * (self.contrast[1] - self.contrast[0]))
    }
}

struct TreeBuilder<'a> {
    rng: &'a mut ChaCha8Rng,
    capsules: Vec<Capsule>,
    decay: f64,
    tip_fade: f64,
}

impl TreeBuilder<'_> {
    /// Recursive midpoint displacement of the segment `a -> b` into a polyline.
    fn polyline(&mut self, a: P3, b: P3, levels: usize, out: &mut Vec<P3>) {
        if levels == 0 {
            out.push(b);
            return;
        }
        let len = norm(sub(b, a));
        let jitter = random_unit(self.rng);
        let mid = add(scale(add(a, b), 0.5), scale(jitter, 0.15 * len));
        self.polyline(a, mid, levels - 1, out);
        self.polyline(mid, b, levels - 1, out);
    }

    fn branch(&mut self, start: P3, dir: P3, length: f64, radius: f64, depth: usize, generation: usize) {
        let end = add(start, scale(dir, length));
        let mut pts = vec![start];
        self.polyline(start, end, 2, &mut pts);
        let c0 = self.decay.powi(generation as i32);
        // Contrast at arclength fraction `s` along this branch.
        let fade = if depth == 0 { self.tip_fade } else { 0.0 };
        let contrast = |s: f64| {
            if fade > 0.0 && s > 1.0 - fade {
                c0 * ((1.0 - s) / fade).powi(2)
            } else {
                c0
            }
        };
        let seg: Vec<f64> = pts.windows(2).map(|w| norm(sub(w[1], w[0]))).collect();
        let total: f64 = seg.iter().sum::<f64>().max(1e-12);
        let mut walked = 0.0;
        for (w, len) in pts.windows(2).zip(&seg) {
            let s0 = walked / total;
            walked += len;
            let s1 = walked / total;
            self.capsules.push(Capsule {
                a: w[0],
                b: w[1],
                radius,
                contrast: [contrast(s0), contrast(s1)],
            });
        }
        if depth == 0 {
            return;
        }
        let tip = *pts.last().expect("non-empty polyline");
        let heading = unit(sub(tip, pts[pts.len() - 2]));
        for _ in 0..2 {
            // Tilt the heading by a random angle in roughly [25, 55] degrees.
            let side = unit(sub(random_unit(self.rng), scale(heading, dot(random_unit(self.rng), heading))));
            let tilt = self.rng.random_range(0.45..1.0);
            let child = unit(add(heading, scale(side, tilt)));
            let r = (radius * 0.7).max(1.0);
            self.branch(tip, child, length * 0.75, r, depth - 1, generation + 1);
        }
    }
}

/// Generates subject `subject_index`; a pure function of `(cfg, subject_index)`.
pub fn generate_phantom(cfg: &PhantomConfig, subject_index: usize) -> Result<SubjectRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(subject_index as u64);

    let n = cfg.size;
    let nf = n as f64;
    let centre: P3 = std::array::from_fn(|_| nf / 2.0 - 0.5 + rng.random_range(-1.5..1.5));
    let axes: P3 = std::array::from_fn(|a| cfg.brain_axes[a] * nf * rng.random_range(0.95..1.05));
    let skull_axes: P3 = std::array::from_fn(|a| axes[a] + cfg.skull_thickness);
    let ellipse = |p: P3, ax: P3| -> f64 { (0..3).map(|a| ((p[a] - centre[a]) / ax[a]).powi(2)).sum() };

    let mut tree = TreeBuilder {
        rng: &mut rng,
        capsules: Vec::new(),
        decay: cfg.contrast_decay,
        tip_fade: cfg.tip_fade,
    };
    let [r_lo, r_hi] = cfg.vessel_radius_range;
    for _ in 0..cfg.n_vessel_roots {
        // Roots sit in the inner half of the brain and head in a random direction.
        let start: P3 = loop {
            let p: P3 = std::array::from_fn(|a| centre[a] + axes[a] * tree.rng.random_range(-0.5..0.5));
            if ellipse(p, axes) < 0.25 {
                break p;
            }
        };
        let dir = random_unit(tree.rng);
        let radius = if r_hi > r_lo { tree.rng.random_range(r_lo..=r_hi) } else { r_lo };
        let length = axes.iter().cloned().fold(f64::INFINITY, f64::min) * 0.6;
        tree.branch(start, dir, length, radius, cfg.branch_depth, 0);
    }
    let capsules = tree.capsules;

    let mut brain = Array3::<u8>::zeros((n, n, n));
    let mut skull = Array3::<u8>::zeros((n, n, n));
    for ((i, j, k), b) in brain.indexed_iter_mut() {
        let p = [i as f64, j as f64, k as f64];
        if ellipse(p, axes) <= 1.0 {
            *b = 1;
        } else if ellipse(p, skull_axes) <= 1.0 {
            skull[[i, j, k]] = 1;
        }
    }

    // Vessel signal in [0, 1]: the strongest contrast-weighted partial-volume coverage.
    let mut signal = Array3::<f64>::zeros((n, n, n));
    let mut vessel = Array3::<u8>::zeros((n, n, n));
    for c in &capsules {
        let reach = c.radius + 1.0;
        let lo: [usize; 3] = std::array::from_fn(|a| (c.a[a].min(c.b[a]) - reach).floor().clamp(0.0, nf - 1.0) as usize);
        let hi: [usize; 3] = std::array::from_fn(|a| (c.a[a].max(c.b[a]) + reach).ceil().clamp(0.0, nf - 1.0) as usize);
        for i in lo[0]..=hi[0] {
            for j in lo[1]..=hi[1] {
                for k in lo[2]..=hi[2] {
                    if brain[[i, j, k]] == 0 {
                        continue;
                    }
                    let (d, contrast) = c.probe([i as f64, j as f64, k as f64]);
                    let cover = (c.radius + 1.0 - d).clamp(0.0, 1.0);
                    let s = &mut signal[[i, j, k]];
                    *s = s.max(cover * contrast);
                    if d <= c.radius {
                        vessel[[i, j, k]] = 1;
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("finite noise");
    let mut image = Array3::<f32>::zeros((n, n, n));
    for ((idx, v), (&b, &s)) in image.indexed_iter_mut().zip(brain.iter().zip(skull.iter())) {
        let base = if b != 0 {
            let sig = signal[idx];
            cfg.brain_intensity + sig * (cfg.vessel_intensity - cfg.brain_intensity)
        } else if s != 0 {
            cfg.skull_intensity
        } else {
            cfg.background_intensity
        };
        let eps = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        *v = (base + eps) as f32;
    }

    let spacing = [cfg.spacing; 3];
    let origin = [0.0; 3];
    SubjectRecord::new(
        format!("phantom_{subject_index:03}"),
        Volume::new(image, spacing, origin)?,
        LabelVolume::new(brain, spacing, origin)?,
        LabelVolume::new(vessel, spacing, origin)?,
    )
}

/// Generates subjects `0..n` in parallel; identical to calling [`generate_phantom`] for each index.
pub fn generate_cohort(cfg: &PhantomConfig, n: usize) -> Result<Vec<SubjectRecord>> {
    if n == 0 {
        return Err(Error::Config("cohort size must be >= 1".into()));
    }
    cfg.validate()?;
    (0..n).into_par_iter().map(|i| generate_phantom(cfg, i)).collect()
}
