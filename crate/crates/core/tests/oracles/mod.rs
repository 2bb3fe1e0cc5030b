//! Brute-force reference implementations shared by the property and
//! acceptance suites.

#![allow(dead_code)]

use ndarray::Array3;

pub fn brute_dsc(a: &Array3<bool>, b: &Array3<bool>) -> f64 {
    let (mut i, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        i += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * i as f64 / (na + nb) as f64
    }
}

pub fn brute_border(m: &Array3<bool>) -> Vec<[usize; 3]> {
    let (dz, dy, dx) = m.dim();
    let mut out = Vec::new();
    for ((z, y, x), &v) in m.indexed_iter() {
        if !v {
            continue;
        }
        let p = [z as i64, y as i64, x as i64];
        let edge = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]].iter().any(|o: &[i64; 3]| {
            let q = [p[0] + o[0], p[1] + o[1], p[2] + o[2]];
            q.iter().any(|&c| c < 0) || q[0] >= dz as i64 || q[1] >= dy as i64 || q[2] >= dx as i64 || !m[[q[0] as usize, q[1] as usize, q[2] as usize]]
        });
        if edge {
            out.push([z, y, x]);
        }
    }
    out
}

pub fn brute_nsd(a: &Array3<bool>, b: &Array3<bool>, tol: f64, spacing: [f64; 3]) -> f64 {
    let (ba, bb) = (brute_border(a), brute_border(b));
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let d = |p: &[usize; 3], q: &[usize; 3]| (0..3).map(|i| ((p[i] as f64 - q[i] as f64) * spacing[i]).powi(2)).sum::<f64>().sqrt();
    let within = |from: &[[usize; 3]], to: &[[usize; 3]]| from.iter().filter(|p| to.iter().map(|q| d(p, q)).fold(f64::INFINITY, f64::min) <= tol).count();
    (within(&ba, &bb) + within(&bb, &ba)) as f64 / (ba.len() + bb.len()) as f64
}

/// Binary mask of the voxels whose index satisfies `inside`.
pub fn mask_where(shape: [usize; 3], inside: impl Fn([usize; 3]) -> bool) -> Array3<bool> {
    Array3::from_shape_fn(shape, |(z, y, x)| inside([z, y, x]))
}
