//! Normalisation kernels shared by the network and its gradient tests.

use num_traits::Float;

fn cast<T: Float>(v: usize) -> T {
    T::from(v).expect("count fits the float type")
}

/// Per-channel standardisation over `n = data.len() / channels` voxels.
/// Returns the normalised values and each channel's `1 / sqrt(var + eps)`.
pub fn instnorm_forward<T: Float>(data: &[T], channels: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let n = data.len() / channels;
    let mut out = vec![T::zero(); data.len()];
    let mut inv = Vec::with_capacity(channels);
    for c in 0..channels {
        let x = &data[c * n..(c + 1) * n];
        let mean = x.iter().fold(T::zero(), |a, &v| a + v) / cast(n);
        let var = x.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / cast(n);
        let s = (var + eps).sqrt().recip();
        for (o, &v) in out[c * n..(c + 1) * n].iter_mut().zip(x) {
            *o = (v - mean) * s;
        }
        inv.push(s);
    }
    (out, inv)
}

/// Gradient of the input given the gradient of the normalised output.
pub fn instnorm_backward<T: Float>(grad: &[T], normed: &[T], inv_std: &[T]) -> Vec<T> {
    let channels = inv_std.len();
    let n = grad.len() / channels;
    let mut out = vec![T::zero(); grad.len()];
    for c in 0..channels {
        let g = &grad[c * n..(c + 1) * n];
        let h = &normed[c * n..(c + 1) * n];
        let mg = g.iter().fold(T::zero(), |a, &v| a + v) / cast(n);
        let mgh = g.iter().zip(h).fold(T::zero(), |a, (&gv, &hv)| a + gv * hv) / cast(n);
        for i in 0..n {
            out[c * n + i] = inv_std[c] * (g[i] - mg - h[i] * mgh);
        }
    }
    out
}

/// Cached state of a difference weighting forward pass.
#[derive(Debug, Clone)]
pub struct DiffWeightCache<T> {
    pub normed: Vec<T>,
    pub inv_std: Vec<T>,
}

/// `xt * gate + xt` with `gate = gamma * InstNorm(xt - x0) + beta` per channel,
/// or the bare normalised difference when no affine is given.
pub fn diff_weight_forward<T: Float>(
    x0: &[T],
    xt: &[T],
    channels: usize,
    eps: T,
    affine: Option<(&[T], &[T])>,
) -> (Vec<T>, DiffWeightCache<T>) {
    let diff: Vec<T> = xt.iter().zip(x0).map(|(&a, &b)| a - b).collect();
    let (normed, inv_std) = instnorm_forward(&diff, channels, eps);
    let n = xt.len() / channels;
    let out = (0..xt.len())
        .map(|i| {
            let gate = match affine {
                Some((g, b)) => g[i / n] * normed[i] + b[i / n],
                None => normed[i],
            };
            xt[i] * gate + xt[i]
        })
        .collect();
    (out, DiffWeightCache { normed, inv_std })
}

pub struct DiffWeightGrads<T> {
    pub x0: Vec<T>,
    pub xt: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn diff_weight_backward<T: Float>(
    grad: &[T],
    xt: &[T],
    cache: &DiffWeightCache<T>,
    affine: Option<(&[T], &[T])>,
) -> DiffWeightGrads<T> {
    let channels = cache.inv_std.len();
    let n = xt.len() / channels;
    let mut dxt = vec![T::zero(); xt.len()];
    let mut dgate = vec![T::zero(); xt.len()];
    let mut dgamma = vec![T::zero(); if affine.is_some() { channels } else { 0 }];
    let mut dbeta = dgamma.clone();
    for i in 0..xt.len() {
        let c = i / n;
        let h = cache.normed[i];
        let gate = match affine {
            Some((g, b)) => g[c] * h + b[c],
            None => h,
        };
        dxt[i] = grad[i] * (gate + T::one());
        let gg = grad[i] * xt[i];
        dgate[i] = match affine {
            Some((g, _)) => {
                dgamma[c] = dgamma[c] + gg * h;
                dbeta[c] = dbeta[c] + gg;
                gg * g[c]
            }
            None => gg,
        };
    }
    let ddiff = instnorm_backward(&dgate, &cache.normed, &cache.inv_std);
    let dx0 = ddiff.iter().map(|&v| -v).collect();
    for (a, &b) in dxt.iter_mut().zip(&ddiff) {
        *a = *a + b;
    }
    DiffWeightGrads { x0: dx0, xt: dxt, gamma: dgamma, beta: dbeta }
}
