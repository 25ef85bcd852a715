//! Topology-preserving 3D thinning.
//!
//! Border voxels are peeled in six directional sub-iterations. A voxel is
//! removed only if it is simple (26-connected foreground, 6-connected
//! background) and not a curve end point, and every removal is re-checked
//! against the current image, so the result keeps the component and tunnel
//! structure of the input.

use std::sync::OnceLock;

use ndarray::Array3;

const CENTER: usize = 13;

fn offset(i: usize) -> [isize; 3] {
    [(i / 9) as isize - 1, ((i / 3) % 3) as isize - 1, (i % 3) as isize - 1]
}

struct Tables {
    /// 26-adjacency between cube positions (centre excluded).
    adj26: Vec<Vec<usize>>,
    /// 6-adjacency restricted to the 18-neighbourhood.
    adj6_in_18: Vec<Vec<usize>>,
    in18: [bool; 27],
    face: [bool; 27],
}

fn tables() -> &'static Tables {
    static T: OnceLock<Tables> = OnceLock::new();
    T.get_or_init(|| {
        let l1 = |o: [isize; 3]| o.iter().map(|v| v.abs()).sum::<isize>();
        let in18: [bool; 27] = std::array::from_fn(|i| i != CENTER && l1(offset(i)) <= 2);
        let face: [bool; 27] = std::array::from_fn(|i| l1(offset(i)) == 1);
        let mut adj26 = vec![Vec::new(); 27];
        let mut adj6_in_18 = vec![Vec::new(); 27];
        for a in 0..27 {
            for b in 0..27 {
                if a == b || a == CENTER || b == CENTER {
                    continue;
                }
                let (oa, ob) = (offset(a), offset(b));
                let d: [isize; 3] = std::array::from_fn(|k| (oa[k] - ob[k]).abs());
                if d.iter().all(|&v| v <= 1) {
                    adj26[a].push(b);
                }
                if in18[a] && in18[b] && d.iter().sum::<isize>() == 1 {
                    adj6_in_18[a].push(b);
                }
            }
        }
        Tables {
            adj26,
            adj6_in_18,
            in18,
            face,
        }
    })
}

/// Number of connected components among `members` under `adj`, optionally
/// counting only components that contain a position satisfying `must_touch`.
fn components(members: &[bool; 27], adj: &[Vec<usize>], must_touch: Option<&[bool; 27]>) -> usize {
    let mut seen = [false; 27];
    let mut count = 0;
    let mut stack = Vec::with_capacity(27);
    for start in 0..27 {
        if !members[start] || seen[start] {
            continue;
        }
        let mut touches = must_touch.is_none();
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            if let Some(t) = must_touch {
                touches |= t[p];
            }
            for &q in &adj[p] {
                if members[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        count += usize::from(touches);
    }
    count
}

/// Whether deleting the centre of the 3x3x3 neighbourhood `nb` preserves topology.
pub fn is_simple(nb: &[bool; 27]) -> bool {
    let t = tables();
    let mut fg = *nb;
    fg[CENTER] = false;
    if components(&fg, &t.adj26, None) != 1 {
        return false;
    }
    let bg: [bool; 27] = std::array::from_fn(|i| t.in18[i] && !nb[i]);
    components(&bg, &t.adj6_in_18, Some(&t.face)) == 1
}

struct Padded {
    data: Vec<bool>,
    dims: [usize; 3],
}

impl Padded {
    fn new(mask: &Array3<u8>) -> Self {
        let (a, b, c) = mask.dim();
        let dims = [a + 2, b + 2, c + 2];
        let mut data = vec![false; dims.iter().product()];
        for ((i, j, k), &v) in mask.indexed_iter() {
            data[((i + 1) * dims[1] + j + 1) * dims[2] + k + 1] = v != 0;
        }
        Self { data, dims }
    }

    fn neighbourhood(&self, at: usize) -> [bool; 27] {
        let (s0, s1) = ((self.dims[1] * self.dims[2]) as isize, self.dims[2] as isize);
        std::array::from_fn(|i| {
            let o = offset(i);
            self.data[(at as isize + o[0] * s0 + o[1] * s1 + o[2]) as usize]
        })
    }
}

/// Medial-axis approximation of a binary mask by iterative thinning.
pub fn skeletonize3d(mask: &Array3<u8>) -> Array3<u8> {
    let mut img = Padded::new(mask);
    let d = img.dims;
    let (s0, s1) = ((d[1] * d[2]) as isize, d[2] as isize);
    let dirs: [isize; 6] = [-s0, s0, -s1, s1, -1, 1];
    let removable = |nb: &[bool; 27]| nb.iter().filter(|&&v| v).count() - 1 > 1 && is_simple(nb);
    loop {
        let mut changed = false;
        for &dir in &dirs {
            let candidates: Vec<usize> = (0..img.data.len())
                .filter(|&at| img.data[at] && !img.data[(at as isize + dir) as usize])
                .filter(|&at| removable(&img.neighbourhood(at)))
                .collect();
            for at in candidates {
                if removable(&img.neighbourhood(at)) {
                    img.data[at] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let (a, b, c) = mask.dim();
    Array3::from_shape_fn((a, b, c), |(i, j, k)| u8::from(img.data[((i + 1) * d[1] + j + 1) * d[2] + k + 1]))
}
