//! Raw numeric kernels shared by the pure operations and the autodiff tape.
//! Everything here works on flat slices; shape handling lives with the caller.

use crate::scalar::Scalar;

/// Numerically stable softmax over the leading dimension: `x` is `[d, m]`
/// row-major and each column of length `d` is normalized independently.
pub fn softmax_dim0<T: Scalar>(x: &[T], d: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for j in 0..m {
        let mut mx = x[j];
        for i in 1..d {
            mx = mx.max(x[i * m + j]);
        }
        let mut sum = T::zero();
        for i in 0..d {
            let e = (x[i * m + j] - mx).exp();
            out[i * m + j] = e;
            sum += e;
        }
        for i in 0..d {
            out[i * m + j] = out[i * m + j] / sum;
        }
    }
    out
}

/// Softmax over the trailing dimension: `x` is `[m, d]` row-major and each
/// contiguous row of length `d` is normalized independently.
pub fn softmax_dim1<T: Scalar>(x: &[T], m: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..m {
        let row = &x[i * d..(i + 1) * d];
        let orow = &mut out[i * d..(i + 1) * d];
        let mut mx = row[0];
        for &v in row.iter() {
            mx = mx.max(v);
        }
        let mut sum = T::zero();
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

/// C\[m,n\] = A\[m,k\] · B\[k,n\]
pub fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// C\[m,n\] = A\[m,k\] · B\[n,k\]ᵀ (dot products of contiguous rows)
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                s += av * bv;
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// C\[k,n\] = A\[m,k\]ᵀ · B\[m,n\]
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Output spatial size of a convolution.
pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Direct 2-D convolution. `x` is `[cin,h,w]`, `w` is `[cout,cin,k,k]`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[T],
    bias: &[T],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, usize, usize) {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut out = vec![T::zero(); cout * oh * ow];
    for co in 0..cout {
        let ochan = &mut out[co * oh * ow..(co + 1) * oh * ow];
        for v in ochan.iter_mut() {
            *v = bias[co];
        }
        for ci in 0..cin {
            let xchan = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wgt[((co * cin + ci) * k + ky) * k + kx];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        // valid ox range so that ix = ox*stride + kx - pad ∈ [0, w)
                        let (lo, hi) = valid_range(ow, w, stride, kx, pad);
                        let orow = &mut ochan[oy * ow..(oy + 1) * ow];
                        let xrow = &xchan[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            let off = kx as isize - pad as isize;
                            for ox in lo..hi {
                                orow[ox] += wv * xrow[(ox as isize + off) as usize];
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                orow[ox] += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

fn valid_range(on: usize, n: usize, stride: usize, kd: usize, pad: usize) -> (usize, usize) {
    // smallest o with o*stride + kd - pad >= 0
    let lo = if kd >= pad {
        0
    } else {
        (pad - kd + stride - 1) / stride
    };
    // largest o with o*stride + kd - pad < n
    let hi_excl = if n + pad > kd {
        ((n + pad - kd - 1) / stride + 1).min(on)
    } else {
        0
    };
    (lo.min(on), hi_excl)
}

/// Gradient of `conv2d_forward` with respect to the input.
pub fn conv2d_back_input<T: Scalar>(
    g: &[T],
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[T],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut dx = vec![T::zero(); cin * h * w];
    for co in 0..cout {
        let gchan = &g[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let dchan = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wgt[((co * cin + ci) * k + ky) * k + kx];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let (lo, hi) = valid_range(ow, w, stride, kx, pad);
                        let grow = &gchan[oy * ow..(oy + 1) * ow];
                        let drow = &mut dchan[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            let off = kx as isize - pad as isize;
                            for ox in lo..hi {
                                drow[(ox as isize + off) as usize] += wv * grow[ox];
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                drow[ix as usize] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of `conv2d_forward` with respect to the weights.
pub fn conv2d_back_weight<T: Scalar>(
    g: &[T],
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut dw = vec![T::zero(); cout * cin * k * k];
    for co in 0..cout {
        let gchan = &g[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let xchan = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = T::zero();
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let (lo, hi) = valid_range(ow, w, stride, kx, pad);
                        let grow = &gchan[oy * ow..(oy + 1) * ow];
                        let xrow = &xchan[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            let off = kx as isize - pad as isize;
                            for ox in lo..hi {
                                acc += grow[ox] * xrow[(ox as isize + off) as usize];
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                acc += grow[ox] * xrow[ix as usize];
                            }
                        }
                    }
                    dw[((co * cin + ci) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    dw
}

/// Source coordinates and weights for bilinear upsampling by an integer
/// factor. Sample centers follow the half-pixel convention.
pub fn bilinear_taps(n_out: usize, n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let f = factor as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) / f - 0.5;
            let src = src.max(0.0).min((n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_matches_hand_result() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(mm(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree_with_mm() {
        let a = [1.0, -2.0, 0.5, 3.0, 1.0, -1.0]; // 2x3
        let b = [2.0, 0.0, 1.0, -1.0, 0.5, 2.0]; // 3x2
        let c = mm(&a, &b, 2, 3, 2);
        // A·Bᵀ where B is stored transposed
        let bt = [2.0, 1.0, 0.5, 0.0, -1.0, 2.0]; // 2x3 = Bᵀ
        assert_eq!(mm_nt(&a, &bt, 2, 3, 2), c);
        // Aᵀᵀ·B via mm_tn on Aᵀ
        let at = [1.0, 3.0, -2.0, 1.0, 0.5, -1.0]; // 3x2 = Aᵀ
        assert_eq!(mm_tn(&at, &b, 3, 2, 2), c);
    }

    #[test]
    fn conv_identity_kernel() {
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let wgt = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let (y, oh, ow) = conv2d_forward(&x, 1, 3, 3, &wgt, &[0.0], 1, 3, 1, 1);
        assert_eq!((oh, ow), (3, 3));
        assert_eq!(y, x);
    }

    #[test]
    fn conv_stride_two_shape() {
        let x = vec![1.0f64; 2 * 8 * 8];
        let wgt = vec![0.1f64; 4 * 2 * 9];
        let (_, oh, ow) = conv2d_forward(&x, 2, 8, 8, &wgt, &[0.0; 4], 4, 3, 2, 1);
        assert_eq!((oh, ow), (4, 4));
    }
}
