//! Independent reference implementations used as oracles by the test
//! suites. Nothing here shares code with the fast paths it checks: the
//! convolution is the direct nested-loop formulation, the Adam oracle is a
//! scalar recurrence, and the finite-difference probe only ever calls a
//! user-supplied closure.

use crate::kernels::ConvSpec;

/// Direct nested-loop 2-d convolution (NCHW x OIKhKw), float64.
pub fn conv2d_naive(
    input: &[f64],
    kernel: &[f64],
    dims: [usize; 4],
    kdims: [usize; 4],
    spec: &ConvSpec,
) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let [o, ic, kh, kw] = kdims;
    let g = spec.groups;
    let (cg, og) = (c / g, o / g);
    assert_eq!(ic, cg);
    let oh = spec.out_extent(h, kh);
    let ow = spec.out_extent(w, kw);
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            let gi = oi / og;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cg {
                        let in_plane = ((ni * c + gi * cg + ci) * h) * w;
                        for ky in 0..kh {
                            let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                - spec.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                    - spec.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let iv = input[in_plane + iy as usize * w + ix as usize];
                                let kv = kernel[((oi * cg + ci) * kh + ky) * kw + kx];
                                acc += iv * kv;
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Central finite differences of a scalar-valued function at `x`.
/// Returns d f / d x[i] for each coordinate, step `h`.
pub fn finite_diff_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Finite differences over a sampled subset of coordinates.
pub fn finite_diff_grad_at(
    x: &[f64],
    coords: &[usize],
    h: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Relative error with an absolute floor for near-zero pairs.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Scalar Adam recurrence: one parameter, constant hyper-parameters.
/// Mirrors the tensor optimiser contract: weight decay is added to the
/// gradient, moments are bias-corrected.
pub struct ScalarAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: f64,
    v: f64,
    t: u64,
}

impl ScalarAdam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        ScalarAdam { lr, beta1, beta2, eps, weight_decay, m: 0.0, v: 0.0, t: 0 }
    }

    pub fn step(&mut self, param: &mut f64, grad: f64) {
        self.t += 1;
        let g = grad + self.weight_decay * *param;
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g;
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g;
        let mhat = self.m / (1.0 - self.beta1.powi(self.t as i32));
        let vhat = self.v / (1.0 - self.beta2.powi(self.t as i32));
        *param -= self.lr * mhat / (vhat.sqrt() + self.eps);
    }
}
