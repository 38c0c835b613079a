//! Layer kernels over channel-interleaved (HWC) slices.

use super::real::Real;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Kernel taps `lo..hi` that land inside an input of length `len` for
    /// output coordinate `o`, and the input coordinate of tap `lo`.
    #[inline]
    fn taps(&self, o: usize, len: usize) -> (usize, usize, usize) {
        let start = o * self.stride;
        let lo = self.padding.saturating_sub(start);
        let hi = (len + self.padding).saturating_sub(start).min(self.kernel);
        (lo, hi.max(lo), start + lo - self.padding)
    }

    /// Output coordinates `lo..hi` whose tap `k` lands inside the input.
    #[inline]
    fn valid_outputs(&self, k: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(k).div_ceil(self.stride);
        let hi = (in_len + self.padding).checked_sub(k + 1).map_or(0, |m| m / self.stride + 1).min(out_len);
        (lo, hi.max(lo))
    }
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (ca, cb) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for j in 0..8 {
            acc[j] += ca[j] * cb[j];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Cross-correlation. Weights are laid out `[ky][kx][in_c][out_c]`, so for
/// one kernel row the valid taps form one contiguous run of both input
/// values and weight rows.
pub(crate) fn conv_forward<T: Real>(g: &ConvGeometry, input: &[T], weights: &[T], bias: &[T], out: &mut [T]) {
    match g.out_c {
        8 => conv_forward_n::<T, 8>(g, input, weights, bias, out),
        16 => conv_forward_n::<T, 16>(g, input, weights, bias, out),
        32 => conv_forward_n::<T, 32>(g, input, weights, bias, out),
        _ => conv_forward_any(g, input, weights, bias, out),
    }
}

/// Output channels fixed at compile time so the accumulator stays in
/// registers.
fn conv_forward_n<T: Real, const N: usize>(g: &ConvGeometry, input: &[T], weights: &[T], bias: &[T], out: &mut [T]) {
    let (cin, k) = (g.in_c, g.kernel);
    let bias: &[T; N] = bias.try_into().expect("bias length");
    for oy in 0..g.out_h {
        let (ky0, ky1, iy0) = g.taps(oy, g.in_h);
        for ox in 0..g.out_w {
            let (kx0, kx1, ix0) = g.taps(ox, g.in_w);
            let run = (kx1 - kx0) * cin;
            let mut acc = *bias;
            for (dy, ky) in (ky0..ky1).enumerate() {
                let x = &input[((iy0 + dy) * g.in_w + ix0) * cin..][..run];
                let w = &weights[(ky * k + kx0) * cin * N..][..run * N];
                for (&v, row) in x.iter().zip(w.chunks_exact(N)) {
                    for j in 0..N {
                        acc[j] += v * row[j];
                    }
                }
            }
            out[(oy * g.out_w + ox) * N..][..N].copy_from_slice(&acc);
        }
    }
}

fn conv_forward_any<T: Real>(g: &ConvGeometry, input: &[T], weights: &[T], bias: &[T], out: &mut [T]) {
    let (cin, cout, k) = (g.in_c, g.out_c, g.kernel);
    for oy in 0..g.out_h {
        let (ky0, ky1, iy0) = g.taps(oy, g.in_h);
        for ox in 0..g.out_w {
            let (kx0, kx1, ix0) = g.taps(ox, g.in_w);
            let run = (kx1 - kx0) * cin;
            let o = &mut out[(oy * g.out_w + ox) * cout..][..cout];
            o.copy_from_slice(bias);
            for (dy, ky) in (ky0..ky1).enumerate() {
                let x = &input[((iy0 + dy) * g.in_w + ix0) * cin..][..run];
                let w = &weights[(ky * k + kx0) * cin * cout..][..run * cout];
                for (&v, row) in x.iter().zip(w.chunks_exact(cout)) {
                    axpy(o, v, row);
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients from `dz` (gradient w.r.t. the
/// pre-activation output) and, when `dx` is given, overwrites it with the
/// input gradient. `wt` is scratch for the flipped, transposed kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    weights: &[T],
    dz: &[T],
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
    wt: &mut alloc::vec::Vec<T>,
) {
    match g.out_c {
        8 => conv_weight_grad_n::<T, 8>(g, input, dz, dw, db),
        16 => conv_weight_grad_n::<T, 16>(g, input, dz, dw, db),
        32 => conv_weight_grad_n::<T, 32>(g, input, dz, dw, db),
        _ => conv_weight_grad_any(g, input, dz, dw, db),
    }
    let Some(dx) = dx else { return };
    if g.stride != 1 {
        conv_input_grad_strided(g, weights, dz, dx);
        return;
    }
    // wt[ky][kx][co][ci] = w[k−1−ky][k−1−kx][ci][co]: the input gradient of
    // a stride-1 correlation is a correlation of dz with this kernel
    let (cin, cout, k) = (g.in_c, g.out_c, g.kernel);
    wt.clear();
    wt.resize(weights.len(), T::ZERO);
    for ky in 0..k {
        for kx in 0..k {
            let src = ((k - 1 - ky) * k + (k - 1 - kx)) * cin * cout;
            let dst = (ky * k + kx) * cout * cin;
            for ci in 0..cin {
                for co in 0..cout {
                    wt[dst + co * cin + ci] = weights[src + ci * cout + co];
                }
            }
        }
    }
    let flipped = ConvGeometry {
        in_h: g.out_h,
        in_w: g.out_w,
        in_c: cout,
        out_h: g.in_h,
        out_w: g.in_w,
        out_c: cin,
        kernel: k,
        stride: 1,
        padding: k - 1 - g.padding,
    };
    let zero = [T::ZERO; 64];
    match cin {
        8 => conv_forward_n::<T, 8>(&flipped, dz, wt, &zero[..8], dx),
        16 => conv_forward_n::<T, 16>(&flipped, dz, wt, &zero[..16], dx),
        32 => conv_forward_n::<T, 32>(&flipped, dz, wt, &zero[..32], dx),
        _ if cin <= 64 => conv_forward_any(&flipped, dz, wt, &zero[..cin], dx),
        _ => {
            let bias = alloc::vec![T::ZERO; cin];
            conv_forward_any(&flipped, dz, wt, &bias, dx)
        }
    }
}

/// Tap-major weight gradient: for each kernel tap and block of input
/// channels the partial sums over every output position stay in registers.
fn conv_weight_grad_n<T: Real, const N: usize>(g: &ConvGeometry, input: &[T], dz: &[T], dw: &mut [T], db: &mut [T]) {
    const B: usize = 4;
    let (cin, k) = (g.in_c, g.kernel);
    let mut bias_acc = [T::ZERO; N];
    for d in dz.chunks_exact(N) {
        for j in 0..N {
            bias_acc[j] += d[j];
        }
    }
    for (b, a) in db.iter_mut().zip(bias_acc) {
        *b += a;
    }
    for ky in 0..k {
        let (oy0, oy1) = g.valid_outputs(ky, g.out_h, g.in_h);
        for kx in 0..k {
            let (ox0, ox1) = g.valid_outputs(kx, g.out_w, g.in_w);
            for c0 in (0..cin).step_by(B) {
                let cb = B.min(cin - c0);
                let mut acc = [[T::ZERO; N]; B];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.padding;
                    for ox in ox0..ox1 {
                        let ix = ox * g.stride + kx - g.padding;
                        let x = &input[(iy * g.in_w + ix) * cin + c0..][..cb];
                        let d: &[T; N] = dz[(oy * g.out_w + ox) * N..][..N].try_into().expect("N values");
                        if cb == B {
                            for c in 0..B {
                                for j in 0..N {
                                    acc[c][j] += x[c] * d[j];
                                }
                            }
                        } else {
                            for c in 0..cb {
                                for j in 0..N {
                                    acc[c][j] += x[c] * d[j];
                                }
                            }
                        }
                    }
                }
                for c in 0..cb {
                    let row = &mut dw[((ky * k + kx) * cin + c0 + c) * N..][..N];
                    for j in 0..N {
                        row[j] += acc[c][j];
                    }
                }
            }
        }
    }
}

fn conv_weight_grad_any<T: Real>(g: &ConvGeometry, input: &[T], dz: &[T], dw: &mut [T], db: &mut [T]) {
    let (cin, cout, k) = (g.in_c, g.out_c, g.kernel);
    for oy in 0..g.out_h {
        let (ky0, ky1, iy0) = g.taps(oy, g.in_h);
        for ox in 0..g.out_w {
            let (kx0, kx1, ix0) = g.taps(ox, g.in_w);
            let run = (kx1 - kx0) * cin;
            let d = &dz[(oy * g.out_w + ox) * cout..][..cout];
            for (b, &v) in db.iter_mut().zip(d) {
                *b += v;
            }
            for (dy, ky) in (ky0..ky1).enumerate() {
                let x = &input[((iy0 + dy) * g.in_w + ix0) * cin..][..run];
                let gw = &mut dw[(ky * k + kx0) * cin * cout..][..run * cout];
                for (&v, row) in x.iter().zip(gw.chunks_exact_mut(cout)) {
                    axpy(row, v, d);
                }
            }
        }
    }
}

/// Scatter form of the input gradient, used for strides above one.
fn conv_input_grad_strided<T: Real>(g: &ConvGeometry, weights: &[T], dz: &[T], dx: &mut [T]) {
    let (cin, cout, k) = (g.in_c, g.out_c, g.kernel);
    dx.iter_mut().for_each(|v| *v = T::ZERO);
    for oy in 0..g.out_h {
        let (ky0, ky1, iy0) = g.taps(oy, g.in_h);
        for ox in 0..g.out_w {
            let (kx0, kx1, ix0) = g.taps(ox, g.in_w);
            let d = &dz[(oy * g.out_w + ox) * cout..][..cout];
            for (dy, ky) in (ky0..ky1).enumerate() {
                for (dxx, kx) in (kx0..kx1).enumerate() {
                    let gx = &mut dx[((iy0 + dy) * g.in_w + ix0 + dxx) * cin..][..cin];
                    let w = &weights[(ky * k + kx) * cin * cout..][..cin * cout];
                    for (ci, row) in w.chunks_exact(cout).enumerate() {
                        gx[ci] += dot(row, d);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeometry {
    pub in_w: usize,
    pub c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub window: usize,
    pub stride: usize,
}

/// Max pooling; records the flat input index of each maximum. The first
/// maximum in raster order wins ties.
pub(crate) fn pool_forward<T: Real>(g: &PoolGeometry, input: &[T], out: &mut [T], argmax: &mut [u32]) {
    let c = g.c;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let o = (oy * g.out_w + ox) * c;
            let first = ((oy * g.stride) * g.in_w + ox * g.stride) * c;
            let (best, arg) = (&mut out[o..o + c], &mut argmax[o..o + c]);
            best.copy_from_slice(&input[first..first + c]);
            for (ch, a) in arg.iter_mut().enumerate() {
                *a = (first + ch) as u32;
            }
            for wy in 0..g.window {
                for wx in 0..g.window {
                    let base = ((oy * g.stride + wy) * g.in_w + ox * g.stride + wx) * c;
                    for (ch, (&v, (b, a))) in input[base..base + c].iter().zip(best.iter_mut().zip(arg.iter_mut())).enumerate() {
                        let gt = v > *b;
                        *b = if gt { v } else { *b };
                        *a = if gt { (base + ch) as u32 } else { *a };
                    }
                }
            }
        }
    }
}

pub(crate) fn pool_backward<T: Real>(dout: &[T], argmax: &[u32], dx: &mut [T]) {
    dx.iter_mut().for_each(|v| *v = T::ZERO);
    for (&d, &i) in dout.iter().zip(argmax) {
        dx[i as usize] += d;
    }
}

/// `out = W x + b` with `W` laid out `[out][in]`.
pub(crate) fn dense_forward<T: Real>(input: &[T], weights: &[T], bias: &[T], out: &mut [T]) {
    let n = input.len();
    for (o, (y, &b)) in out.iter_mut().zip(bias).enumerate() {
        *y = b + dot(&weights[o * n..][..n], input);
    }
}

pub(crate) fn dense_backward<T: Real>(
    input: &[T],
    weights: &[T],
    dz: &[T],
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    let n = input.len();
    for (o, &d) in dz.iter().enumerate() {
        db[o] += d;
        axpy(&mut dw[o * n..][..n], d, input);
    }
    if let Some(dx) = dx {
        dx.iter_mut().for_each(|v| *v = T::ZERO);
        for (o, &d) in dz.iter().enumerate() {
            axpy(dx, d, &weights[o * n..][..n]);
        }
    }
}

pub(crate) fn relu_in_place<T: Real>(v: &mut [T]) {
    // NaN passes through so divergence stays visible downstream
    for x in v {
        *x = if *x < T::ZERO { T::ZERO } else { *x };
    }
}

/// Zeroes gradient entries whose (post-activation) output was not positive.
pub(crate) fn relu_mask<T: Real>(activated: &[T], grad: &mut [T]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        *g = if a > T::ZERO { *g } else { T::ZERO };
    }
}

/// Softmax with max subtraction.
pub(crate) fn softmax<T: Real>(logits: &[T], out: &mut [T]) {
    let m = logits.iter().copied().fold(logits[0], T::max);
    let mut sum = T::ZERO;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_forward(g: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.out_h * g.out_w * g.out_c];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for co in 0..g.out_c {
                    let mut s = b[co];
                    for ky in 0..g.kernel {
                        for kx in 0..g.kernel {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                continue;
                            }
                            for ci in 0..g.in_c {
                                let xv = x[(iy as usize * g.in_w + ix as usize) * g.in_c + ci];
                                s += xv * w[((ky * g.kernel + kx) * g.in_c + ci) * g.out_c + co];
                            }
                        }
                    }
                    out[(oy * g.out_w + ox) * g.out_c + co] = s;
                }
            }
        }
        out
    }

    fn geometry(side: usize, in_c: usize, out_c: usize, kernel: usize, stride: usize, padding: usize) -> ConvGeometry {
        let o = (side + 2 * padding - kernel) / stride + 1;
        ConvGeometry { in_h: side, in_w: side, in_c, out_h: o, out_w: o, out_c, kernel, stride, padding }
    }

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    /// Every specialised channel count against the direct definition; the
    /// backward pass is checked through the adjoint identity
    /// `<conv(x), d> = <x, dx> + <w, dw> + <b, db>` for a linear layer.
    #[test]
    fn kernels_match_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &(in_c, out_c) in &[(3, 8), (8, 16), (16, 32), (2, 5), (8, 3), (5, 8)] {
            for &(kernel, stride, padding) in &[(3, 1, 0), (3, 1, 1), (3, 2, 1), (2, 2, 0), (5, 1, 2)] {
                let g = geometry(7, in_c, out_c, kernel, stride, padding);
                let x: Vec<f64> = (0..7 * 7 * in_c).map(|_| rng.random_range(-1.0..1.0)).collect();
                let w: Vec<f64> = (0..kernel * kernel * in_c * out_c).map(|_| rng.random_range(-1.0..1.0)).collect();
                let b: Vec<f64> = (0..out_c).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut out = vec![0.0; g.out_h * g.out_w * out_c];
                conv_forward(&g, &x, &w, &b, &mut out);
                close(&out, &naive_forward(&g, &x, &w, &b));

                let d: Vec<f64> = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let (mut dw, mut db, mut dx) = (vec![0.0; w.len()], vec![0.0; out_c], vec![0.0; x.len()]);
                conv_backward(&g, &x, &w, &d, &mut dw, &mut db, Some(&mut dx), &mut Vec::new());
                // weight and bias gradients: <conv(x; w, b), d> is linear in (w, b)
                let lhs: f64 = out.iter().zip(&d).map(|(a, b)| a * b).sum();
                let rhs: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum::<f64>() + b.iter().zip(&db).map(|(a, b)| a * b).sum::<f64>();
                assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()), "{in_c}->{out_c} k{kernel} s{stride} p{padding}");
                // input gradient: <conv(x; w, 0), d> is linear in x
                let zero = vec![0.0; out_c];
                let lin = naive_forward(&g, &x, &w, &zero);
                let lhs: f64 = lin.iter().zip(&d).map(|(a, b)| a * b).sum();
                let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
                assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()), "{in_c}->{out_c} k{kernel} s{stride} p{padding}");
            }
        }
    }

    #[test]
    fn pool_first_maximum_wins() {
        let g = PoolGeometry { in_w: 2, c: 1, out_h: 1, out_w: 1, window: 2, stride: 2 };
        let (mut out, mut arg) = ([0.0f64], [0u32]);
        pool_forward(&g, &[1.0, 3.0, 3.0, 2.0], &mut out, &mut arg);
        assert_eq!((out[0], arg[0]), (3.0, 1));
        let mut dx = [9.0; 4];
        pool_backward(&[5.0], &arg, &mut dx);
        assert_eq!(dx, [0.0, 5.0, 0.0, 0.0]);
    }
}
