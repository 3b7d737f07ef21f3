//! Inner numeric loops shared by the tape operations: matrix products,
//! patch expansion (im2col) convolution, a direct depthwise path, pooling,
//! linear layers.
//!
//! Border handling is segmented: each (kernel-offset, output-row) pair
//! precomputes the valid output-column range, so the hot loops carry no
//! per-element bounds checks. The convolution here is the fast path;
//! `reference::conv2d_naive` keeps the nested-loop formulation used as the
//! oracle in tests.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn plain(stride: usize, padding: usize) -> Self {
        ConvSpec { stride, padding, dilation: 1, groups: 1 }
    }

    pub fn out_extent(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.padding - self.dilation * (kernel - 1) - 1) / self.stride + 1
    }
}

/// Valid output range [lo, hi) for one kernel offset: input index
/// o * stride + k_off - padding stays inside [0, extent).
#[inline]
fn valid_range(out_extent: usize, extent: usize, stride: usize, k_off: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > k_off { (padding - k_off).div_ceil(stride) } else { 0 };
    let hi = if extent + padding > k_off {
        (((extent + padding - k_off - 1) / stride) + 1).min(out_extent)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// c[m,n] += a[m,k] * b[k,n]
pub fn matmul_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T
/// The dot product runs over four fixed-order lanes so it vectorises.
pub fn matmul_abt_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let chunks = k / 4 * 4;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut lanes = [F::zero(); 4];
            for (ap, bp) in arow[..chunks].chunks_exact(4).zip(brow[..chunks].chunks_exact(4)) {
                lanes[0] = lanes[0] + ap[0] * bp[0];
                lanes[1] = lanes[1] + ap[1] * bp[1];
                lanes[2] = lanes[2] + ap[2] * bp[2];
                lanes[3] = lanes[3] + ap[3] * bp[3];
            }
            let mut acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
            for p in chunks..k {
                acc = acc + arow[p] * brow[p];
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
pub fn matmul_atb_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

/// Expand one sample/group into a (ic*kh*kw) x (oh*ow) patch matrix.
fn im2col<F: Scalar>(
    input: &[F],
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &ConvSpec,
    ic: usize,
    cols: &mut [F],
) {
    let oh = spec.out_extent(h, kh);
    let ow = spec.out_extent(w, kw);
    let p = oh * ow;
    let (s, d, pad) = (spec.stride, spec.dilation, spec.padding);
    for c in 0..ic {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_range(oh, h, s, ky * d, pad);
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * p;
                let (ox_lo, ox_hi) = valid_range(ow, w, s, kx * d, pad);
                let dst_all = &mut cols[row..row + p];
                dst_all[..oy_lo * ow].iter_mut().for_each(|v| *v = F::zero());
                dst_all[oy_hi * ow..].iter_mut().for_each(|v| *v = F::zero());
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky * d - pad;
                    let src_row = iy * w;
                    let dst = &mut dst_all[oy * ow..(oy + 1) * ow];
                    dst[..ox_lo].iter_mut().for_each(|v| *v = F::zero());
                    dst[ox_hi..].iter_mut().for_each(|v| *v = F::zero());
                    if s == 1 {
                        let base = ox_lo + kx * d - pad;
                        dst[ox_lo..ox_hi].copy_from_slice(&plane[src_row + base..src_row + base + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox] = plane[src_row + ox * s + kx * d - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of a patch matrix back onto the input plane (adjoint of im2col).
fn col2im_acc<F: Scalar>(
    cols: &[F],
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &ConvSpec,
    ic: usize,
    dinput: &mut [F],
) {
    let oh = spec.out_extent(h, kh);
    let ow = spec.out_extent(w, kw);
    let p = oh * ow;
    let (s, d, pad) = (spec.stride, spec.dilation, spec.padding);
    for c in 0..ic {
        let plane = &mut dinput[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_range(oh, h, s, ky * d, pad);
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * p;
                let (ox_lo, ox_hi) = valid_range(ow, w, s, kx * d, pad);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky * d - pad;
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    if s == 1 {
                        let base = iy * w + ox_lo + kx * d - pad;
                        let dst = &mut plane[base..base + (ox_hi - ox_lo)];
                        for (dv, sv) in dst.iter_mut().zip(&src[ox_lo..ox_hi]) {
                            *dv = *dv + *sv;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            let at = iy * w + ox * s + kx * d - pad;
                            plane[at] = plane[at] + src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_depthwise(dims: &[usize; 4], kdims: &[usize; 4], spec: &ConvSpec) -> bool {
    spec.groups == dims[1] && kdims[0] == dims[1] && kdims[1] == 1
}

/// Direct depthwise convolution: one kernel plane per channel, no patch
/// matrix. Stride-1 inner loops are contiguous axpy over output rows.
fn depthwise_forward<F: Scalar>(
    input: &[F],
    kernel: &[F],
    dims: [usize; 4],
    kdims: [usize; 4],
    spec: &ConvSpec,
    out: &mut [F],
) {
    let [n, c, h, w] = dims;
    let [_, _, kh, kw] = kdims;
    let oh = spec.out_extent(h, kh);
    let ow = spec.out_extent(w, kw);
    let (s, d, pad) = (spec.stride, spec.dilation, spec.padding);
    for plane_idx in 0..n * c {
        let ci = plane_idx % c;
        let x = &input[plane_idx * h * w..(plane_idx + 1) * h * w];
        let y = &mut out[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_range(oh, h, s, ky * d, pad);
            for kx in 0..kw {
                let wv = kernel[(ci * kh + ky) * kw + kx];
                let (ox_lo, ox_hi) = valid_range(ow, w, s, kx * d, pad);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky * d - pad;
                    let dst = &mut y[oy * ow + ox_lo..oy * ow + ox_hi];
                    if s == 1 {
                        let base = iy * w + ox_lo + kx * d - pad;
                        let src = &x[base..base + dst.len()];
                        for (dv, sv) in dst.iter_mut().zip(src) {
                            *dv = *dv + wv * *sv;
                        }
                    } else {
                        for (o, dv) in dst.iter_mut().enumerate() {
                            let ox = ox_lo + o;
                            *dv = *dv + wv * x[iy * w + ox * s + kx * d - pad];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<F: Scalar>(
    input: &[F],
    kernel: &[F],
    dout: &[F],
    dims: [usize; 4],
    kdims: [usize; 4],
    spec: &ConvSpec,
    dinput: Option<&mut Vec<F>>,
    dkernel: Option<&mut Vec<F>>,
) {
    let [n, c, h, w] = dims;
    let [_, _, kh, kw] = kdims;
    let oh = spec.out_extent(h, kh);
    let ow = spec.out_extent(w, kw);
    let (s, d, pad) = (spec.stride, spec.dilation, spec.padding);
    let mut dinput = dinput;
    let mut dkernel = dkernel;
    for plane_idx in 0..n * c {
        let ci = plane_idx % c;
        let x = &input[plane_idx * h * w..(plane_idx + 1) * h * w];
        let dy = &dout[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_range(oh, h, s, ky * d, pad);
            for kx in 0..kw {
                let (ox_lo, ox_hi) = valid_range(ow, w, s, kx * d, pad);
                if ox_lo >= ox_hi {
                    continue;
                }
                let wv = kernel[(ci * kh + ky) * kw + kx];
                let mut wgrad = F::zero();
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky * d - pad;
                    let dy_row = &dy[oy * ow + ox_lo..oy * ow + ox_hi];
                    if s == 1 {
                        let base = iy * w + ox_lo + kx * d - pad;
                        if let Some(di) = dinput.as_deref_mut() {
                            let dplane = &mut di[plane_idx * h * w..(plane_idx + 1) * h * w];
                            let dst = &mut dplane[base..base + dy_row.len()];
                            for (dv, gv) in dst.iter_mut().zip(dy_row) {
                                *dv = *dv + wv * *gv;
                            }
                        }
                        if dkernel.is_some() {
                            let src = &x[base..base + dy_row.len()];
                            for (sv, gv) in src.iter().zip(dy_row) {
                                wgrad = wgrad + *sv * *gv;
                            }
                        }
                    } else {
                        for (o, gv) in dy_row.iter().enumerate() {
                            let ox = ox_lo + o;
                            let at = iy * w + ox * s + kx * d - pad;
                            if let Some(di) = dinput.as_deref_mut() {
                                let dplane = &mut di[plane_idx * h * w..(plane_idx + 1) * h * w];
                                dplane[at] = dplane[at] + wv * *gv;
                            }
                            if dkernel.is_some() {
                                wgrad = wgrad + x[at] * *gv;
                            }
                        }
                    }
                }
                if let Some(dk) = dkernel.as_deref_mut() {
                    let at = (ci * kh + ky) * kw + kx;
                    dk[at] = dk[at] + wgrad;
                }
            }
        }
    }
}

/// input [n,c,h,w], kernel [o, c/groups, kh, kw] -> output [n,o,oh,ow]
pub fn conv2d_forward<F: Scalar>(
    input: &[F],
    kernel: &[F],
    dims: [usize; 4],
    kdims: [usize; 4],
    spec: &ConvSpec,
) -> Vec<F> {
    let [n, c, h, w] = dims;
    let [o, ic, kh, kw] = kdims;
    let oh = spec.out_extent(h, kh);
    let ow = spec.out_extent(w, kw);
    let mut out = vec![F::zero(); n * o * oh * ow];
    if is_depthwise(&dims, &kdims, spec) {
        depthwise_forward(input, kernel, dims, kdims, spec, &mut out);
        return out;
    }
    let g = spec.groups;
    let (cg, og) = (c / g, o / g);
    debug_assert_eq!(ic, cg);
    let p = oh * ow;
    let krows = cg * kh * kw;
    let mut cols = vec![F::zero(); krows * p];
    for ni in 0..n {
        for gi in 0..g {
            let in_off = (ni * c + gi * cg) * h * w;
            im2col(&input[in_off..in_off + cg * h * w], h, w, kh, kw, spec, cg, &mut cols);
            let kmat = &kernel[gi * og * krows..(gi + 1) * og * krows];
            let out_off = (ni * o + gi * og) * p;
            matmul_acc(kmat, &cols, og, krows, p, &mut out[out_off..out_off + og * p]);
        }
    }
    out
}

/// Accumulates input and kernel gradients; pass `None` to skip either side.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Scalar>(
    input: &[F],
    kernel: &[F],
    dout: &[F],
    dims: [usize; 4],
    kdims: [usize; 4],
    spec: &ConvSpec,
    dinput: Option<&mut Vec<F>>,
    dkernel: Option<&mut Vec<F>>,
) {
    if is_depthwise(&dims, &kdims, spec) {
        depthwise_backward(input, kernel, dout, dims, kdims, spec, dinput, dkernel);
        return;
    }
    let [n, c, h, w] = dims;
    let [o, _ic, kh, kw] = kdims;
    let oh = spec.out_extent(h, kh);
    let ow = spec.out_extent(w, kw);
    let g = spec.groups;
    let (cg, og) = (c / g, o / g);
    let p = oh * ow;
    let krows = cg * kh * kw;
    let mut cols = vec![F::zero(); krows * p];
    let mut dcols = vec![F::zero(); krows * p];
    let mut dinput = dinput;
    let mut dkernel = dkernel;
    for ni in 0..n {
        for gi in 0..g {
            let in_off = (ni * c + gi * cg) * h * w;
            let out_off = (ni * o + gi * og) * p;
            let dout_g = &dout[out_off..out_off + og * p];
            if dkernel.is_some() {
                im2col(&input[in_off..in_off + cg * h * w], h, w, kh, kw, spec, cg, &mut cols);
                let dk = dkernel.as_deref_mut().unwrap();
                matmul_abt_acc(
                    dout_g,
                    &cols,
                    og,
                    p,
                    krows,
                    &mut dk[gi * og * krows..(gi + 1) * og * krows],
                );
            }
            if dinput.is_some() {
                dcols.iter_mut().for_each(|v| *v = F::zero());
                let kmat = &kernel[gi * og * krows..(gi + 1) * og * krows];
                matmul_atb_acc(kmat, dout_g, og, krows, p, &mut dcols);
                let di = dinput.as_deref_mut().unwrap();
                col2im_acc(&dcols, h, w, kh, kw, spec, cg, &mut di[in_off..in_off + cg * h * w]);
            }
        }
    }
}

pub fn pool_out_extent(input: usize, k: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - k) / stride + 1
}

/// Max pooling; returns (output, argmax flat indices into the input).
/// The scan is branchless (select rather than jump) so it vectorises;
/// offsets are visited in row-major order and the first maximum wins ties.
pub fn max_pool_forward<F: Scalar>(
    input: &[F],
    dims: [usize; 4],
    k: usize,
    stride: usize,
    padding: usize,
) -> (Vec<F>, Vec<usize>) {
    let [n, c, h, w] = dims;
    let oh = pool_out_extent(h, k, stride, padding);
    let ow = pool_out_extent(w, k, stride, padding);
    let mut out = vec![F::neg_infinity(); n * c * oh * ow];
    let mut arg = vec![usize::MAX; n * c * oh * ow];
    // plane-local winner index, selected branchlessly
    let mut local = vec![0u32; oh * ow];
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        let x = &input[base..base + h * w];
        let y = &mut out[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(oh, h, stride, ky, padding);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(ow, w, stride, kx, padding);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - padding;
                    let row = oy * ow;
                    let dst = &mut y[row + ox_lo..row + ox_hi];
                    let aro = &mut local[row + ox_lo..row + ox_hi];
                    if stride == 1 {
                        let b = iy * w + ox_lo + kx - padding;
                        let src = &x[b..b + dst.len()];
                        for ((dv, av), (o, sv)) in
                            dst.iter_mut().zip(aro.iter_mut()).zip(src.iter().enumerate())
                        {
                            let take = *sv > *dv;
                            *dv = if take { *sv } else { *dv };
                            *av = if take { (b + o) as u32 } else { *av };
                        }
                    } else {
                        for (o, (dv, av)) in dst.iter_mut().zip(aro.iter_mut()).enumerate() {
                            let ox = ox_lo + o;
                            let at = iy * w + ox * stride + kx - padding;
                            let take = x[at] > *dv;
                            *dv = if take { x[at] } else { *dv };
                            *av = if take { at as u32 } else { *av };
                        }
                    }
                }
            }
        }
        let a = &mut arg[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
        for (av, &l) in a.iter_mut().zip(&local) {
            *av = base + l as usize;
        }
    }
    (out, arg)
}

/// Per-axis count of in-bounds kernel cells for each output position.
fn pool_counts(out_extent: usize, extent: usize, k: usize, stride: usize, padding: usize) -> Vec<usize> {
    let mut counts = vec![0usize; out_extent];
    for k_off in 0..k {
        let (lo, hi) = valid_range(out_extent, extent, stride, k_off, padding);
        for c in counts.iter_mut().take(hi).skip(lo) {
            *c += 1;
        }
    }
    counts
}

/// Average pooling; padded cells are excluded from the divisor.
pub fn avg_pool_forward<F: Scalar>(
    input: &[F],
    dims: [usize; 4],
    k: usize,
    stride: usize,
    padding: usize,
) -> Vec<F> {
    let [n, c, h, w] = dims;
    let oh = pool_out_extent(h, k, stride, padding);
    let ow = pool_out_extent(w, k, stride, padding);
    let cy = pool_counts(oh, h, k, stride, padding);
    let cx = pool_counts(ow, w, k, stride, padding);
    let mut out = vec![F::zero(); n * c * oh * ow];
    for plane_idx in 0..n * c {
        let x = &input[plane_idx * h * w..(plane_idx + 1) * h * w];
        let y = &mut out[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(oh, h, stride, ky, padding);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(ow, w, stride, kx, padding);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - padding;
                    let dst = &mut y[oy * ow + ox_lo..oy * ow + ox_hi];
                    if stride == 1 {
                        let base = iy * w + ox_lo + kx - padding;
                        let src = &x[base..base + dst.len()];
                        for (dv, sv) in dst.iter_mut().zip(src) {
                            *dv = *dv + *sv;
                        }
                    } else {
                        for (o, dv) in dst.iter_mut().enumerate() {
                            let ox = ox_lo + o;
                            *dv = *dv + x[iy * w + ox * stride + kx - padding];
                        }
                    }
                }
            }
        }
        for oy in 0..oh {
            let row = &mut y[oy * ow..(oy + 1) * ow];
            for (ox, v) in row.iter_mut().enumerate() {
                *v = *v / F::from_usize(cy[oy] * cx[ox]);
            }
        }
    }
    out
}

pub fn avg_pool_backward<F: Scalar>(
    dout: &[F],
    dims: [usize; 4],
    k: usize,
    stride: usize,
    padding: usize,
    dinput: &mut [F],
) {
    let [n, c, h, w] = dims;
    let oh = pool_out_extent(h, k, stride, padding);
    let ow = pool_out_extent(w, k, stride, padding);
    let cy = pool_counts(oh, h, k, stride, padding);
    let cx = pool_counts(ow, w, k, stride, padding);
    for plane_idx in 0..n * c {
        let dy = &dout[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
        let dx = &mut dinput[plane_idx * h * w..(plane_idx + 1) * h * w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(oh, h, stride, ky, padding);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(ow, w, stride, kx, padding);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - padding;
                    for ox in ox_lo..ox_hi {
                        let ix = ox * stride + kx - padding;
                        let share = dy[oy * ow + ox] / F::from_usize(cy[oy] * cx[ox]);
                        dx[iy * w + ix] = dx[iy * w + ix] + share;
                    }
                }
            }
        }
    }
}
