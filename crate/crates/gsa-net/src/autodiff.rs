//! Reverse-mode autodiff on a per-forward tape.
//!
//! Every differentiable operation in the network is a tape op with an
//! analytic backward. A tape is built per forward pass, `backward` walks it
//! once, and gradients are read out by [`Var`] or parameter id. Non-
//! differentiable selections (k-means masks, KNN indices) enter as constants;
//! gradients flow through the gathered values only.

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{PId, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct BackCtx<'a, T: Scalar> {
    values: &'a [Tensor<T>],
    parents: &'a [usize],
    out: &'a Tensor<T>,
    grad: &'a Tensor<T>,
}

impl<'a, T: Scalar> BackCtx<'a, T> {
    fn p(&self, slot: usize) -> &Tensor<T> {
        &self.values[self.parents[slot]]
    }
}

/// Accumulates gradients per tape node during the backward sweep.
pub struct GradStore<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    needs: Vec<bool>,
}

impl<T: Scalar> GradStore<T> {
    fn add(&mut self, idx: usize, shape: &[usize], contribution: impl FnOnce(&mut [T])) {
        if !self.needs[idx] {
            return;
        }
        let slot = &mut self.grads[idx];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(shape));
        }
        contribution(slot.as_mut().unwrap().data_mut());
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

type BackFn<T> = Box<dyn Fn(&BackCtx<'_, T>, &mut GradStore<T>)>;

struct Node<T: Scalar> {
    parents: Vec<usize>,
    back: Option<BackFn<T>>,
}

pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
    needs_grad: Vec<bool>,
    param_vars: Vec<(PId, Var)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            nodes: Vec::new(),
            needs_grad: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, parents: Vec<usize>, back: Option<BackFn<T>>) -> Var {
        let needs = !parents.is_empty() && parents.iter().any(|&p| self.needs_grad[p]);
        self.values.push(value);
        self.nodes.push(Node { parents, back });
        self.needs_grad.push(needs);
        Var(self.values.len() - 1)
    }

    /// Insert a tensor that does not require gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None)
    }

    /// Insert a tensor that requires gradients (an input under test).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Vec::new(), None);
        self.needs_grad[v.0] = true;
        v
    }

    /// Insert a parameter leaf. Repeated requests for the same id return the
    /// same node, so shared weights accumulate gradients correctly.
    pub fn param(&mut self, params: &Params<T>, id: PId) -> Var {
        if let Some(&(_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.input(params.get(id).clone());
        self.param_vars.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn param_vars(&self) -> &[(PId, Var)] {
        &self.param_vars
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Result<GradStore<T>> {
        if self.values[root.0].len() != 1 {
            return Err(Error::ShapeMismatch {
                context: "backward root must be scalar",
                expected: vec![1],
                got: self.values[root.0].shape().to_vec(),
            });
        }
        let mut store = GradStore {
            grads: (0..self.values.len()).map(|_| None).collect(),
            needs: self.needs_grad.clone(),
        };
        // The root gets a gradient regardless of needs_grad so that pure
        // constants can still be roots (grad simply stops there).
        store.needs[root.0] = true;
        store.grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            if store.grads[i].is_none() {
                continue;
            }
            let node = &self.nodes[i];
            if let Some(back) = &node.back {
                let grad = store.grads[i].take().unwrap();
                {
                    let ctx = BackCtx {
                        values: &self.values,
                        parents: &node.parents,
                        out: &self.values[i],
                        grad: &grad,
                    };
                    back(&ctx, &mut store);
                }
                store.grads[i] = Some(grad);
            }
        }
        Ok(store)
    }

    fn parent_needs(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    // ------------------------------------------------------------------
    // element-wise ops
    // ------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x + y, |_, _, _| (T::one(), T::one()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x - y, |_, _, _| (T::one(), -T::one()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x * y, |x, y, _| (y, x))
    }

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T + 'static,
        df: impl Fn(T, T, T) -> (T, T) + 'static,
    ) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ta.shape(), tb.shape(), "zip_op shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape(), data).unwrap();
        let shape = ta.shape().to_vec();
        let back: BackFn<T> = Box::new(move |ctx, store| {
            let (pa, pb) = (ctx.p(0), ctx.p(1));
            store.add(ctx.parents[0], &shape, |acc| {
                for (i, acc_v) in acc.iter_mut().enumerate() {
                    let (da, _) = df(pa.data()[i], pb.data()[i], ctx.out.data()[i]);
                    *acc_v += ctx.grad.data()[i] * da;
                }
            });
            store.add(ctx.parents[1], &shape, |acc| {
                for (i, acc_v) in acc.iter_mut().enumerate() {
                    let (_, db) = df(pa.data()[i], pb.data()[i], ctx.out.data()[i]);
                    *acc_v += ctx.grad.data()[i] * db;
                }
            });
        });
        self.push(value, vec![a.0, b.0], Some(back))
    }

    /// `a * mul + add`, element-wise with scalar constants.
    pub fn affine(&mut self, a: Var, mul: T, add: T) -> Var {
        let value = self.values[a.0].map(|v| v * mul + add);
        let shape = value.shape().to_vec();
        let back: BackFn<T> = Box::new(move |ctx, store| {
            store.add(ctx.parents[0], &shape, |acc| {
                for (acc_v, &g) in acc.iter_mut().zip(ctx.grad.data()) {
                    *acc_v += g * mul;
                }
            });
        });
        self.push(value, vec![a.0], Some(back))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(|v| v.max(T::zero()));
        let shape = value.shape().to_vec();
        let back: BackFn<T> = Box::new(move |ctx, store| {
            store.add(ctx.parents[0], &shape, |acc| {
                for ((acc_v, &g), &x) in acc.iter_mut().zip(ctx.grad.data()).zip(ctx.p(0).data()) {
                    if x > T::zero() {
                        *acc_v += g;
                    }
                }
            });
        });
        self.push(value, vec![a.0], Some(back))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(|v| T::one() / (T::one() + (-v).exp()));
        let shape = value.shape().to_vec();
        let back: BackFn<T> = Box::new(move |ctx, store| {
            store.add(ctx.parents[0], &shape, |acc| {
                for ((acc_v, &g), &y) in acc.iter_mut().zip(ctx.grad.data()).zip(ctx.out.data()) {
                    *acc_v += g * y * (T::one() - y);
                }
            });
        });
        self.push(value, vec![a.0], Some(back))
    }

    // ------------------------------------------------------------------
    // shape ops
    // ------------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.values[a.0].clone().reshaped(shape).expect("reshape");
        let in_shape = self.values[a.0].shape().to_vec();
        let back: BackFn<T> = Box::new(move |ctx, store| {
            store.add(ctx.parents[0], &in_shape, |acc| {
                for (acc_v, &g) in acc.iter_mut().zip(ctx.grad.data()) {
                    *acc_v += g;
                }
            });
        });
        self.push(value, vec![a.0], Some(back))
    }

    /// Concatenate along the leading dimension. Works for both feature
    /// blocks `[k,c]` (row concat) and grids `[c,h,w]` (channel concat).
    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.values[parts[0].0].shape().to_vec();
        let trailing: usize = first[1..].iter().product();
        let mut dim0 = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.values[p.0];
            assert_eq!(&t.shape()[1..], &first[1..], "concat0 trailing dims");
            dim0 += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = first;
        shape[0] = dim0;
        let value = Tensor::new(&shape, data).unwrap();
        let sizes: Vec<(usize, Vec<usize>)> = parts
            .iter()
            .map(|&p| {
                let s = self.values[p.0].shape().to_vec();
                (s[0] * trailing, s)
            })
            .collect();
        let back: BackFn<T> = Box::new(move |ctx, store| {
            let mut off = 0;
            for (slot, (len, shape)) in sizes.iter().enumerate() {
                let seg = &ctx.grad.data()[off..off + len];
                store.add(ctx.parents[slot], shape, |acc| {
                    for (acc_v, &g) in acc.iter_mut().zip(seg) {
                        *acc_v += g;
                    }
                });
                off += len;
            }
        });
        self.push(value, parts.iter().map(|v| v.0).collect(), Some(back))
    }

    /// Slice `[start, end)` along the leading dimension.
    pub fn slice0(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = &self.values[a.0];
        let shape = t.shape().to_vec();
        let trailing: usize = shape[1..].iter().product();
        assert!(start < end && end <= shape[0], "slice0 bounds");
        let mut out_shape = shape.clone();
        out_shape[0] = end - start;
        let data = t.data()[start * trailing..end * trailing].to_vec();
        let value = Tensor::new(&out_shape, data).unwrap();
        let back: BackFn<T> = Box::new(move |ctx, store| {
            store.add(ctx.parents[0], &shape, |acc| {
                for (i, &g) in ctx.grad.data().iter().enumerate() {
                    acc[start * trailing + i] += g;
                }
            });
        });
        self.push(value, vec![a.0], Some(back))
    }

    /// Slice columns `[start, end)` of a `[m,n]` block.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = &self.values[a.0];
        let (m, n) = (t.shape()[0], t.shape()[1]);
        assert!(start < end && end <= n, "slice_cols bounds");
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&t.data()[i * n + start..i * n + end]);
        }
        let value = Tensor::new(&[m, w], data).unwrap();
        let back: BackFn<T> = Box::new(move |ctx, store| {
            store.add(ctx.parents[0], &[m, n], |acc| {
                for i in 0..m {
                    for j in 0..w {
                        acc[i * n + start + j] += ctx.grad.data()[i * w + j];
                    }
                }
            });
        });
        self.push(value, vec![a.0], Some(back))
    }

    /// Concatenate `[m,ni]` blocks along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.values[parts[0].0].shape()[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.values[p.0].shape();
                assert_eq!(s[0], m, "concat_cols row count");
                s[1]
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut data = vec![T::zero(); m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(widths.iter()) {
            let src = self.values[p.0].data();
            for i in 0..m {
                data[i * n + off..i * n + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let value = Tensor::new(&[m, n], data).unwrap();
        let widths_c = widths.clone();
        let back: BackFn<T> = Box::new(move |ctx, store| {
            let mut off = 0;
            for (slot, &w) in widths_c.iter().enumerate() {
                store.add(ctx.parents[slot], &[m, w], |acc| {
                    for i in 0..m {
                        for j in 0..w {
                            acc[i * w + j] += ctx.grad.data()[i * n + off + j];
                        }
                    }
                });
                off += w;
            }
        });
        self.push(value, parts.iter().map(|v| v.0).collect(), Some(back))
    }

    /// Gather rows of a `[k,c]` block by index; gradients scatter back to the
    /// selected rows only.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let t = &self.values[a.0];
        let (k, c) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            assert!(i < k, "gather_rows index");
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(&[indices.len(), c], data).unwrap();
        let idx = indices.to_vec();
        let back: BackFn<T> = Box::new(move |ctx, store| {
            store.add(ctx.parents[0], &[k, c], |acc| {
                for (row, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        acc[i * c + j] += ctx.grad.data()[row * c + j];
                    }
                }
            });
        });
        self.push(value, vec![a.0], Some(back))
    }

    // ------------------------------------------------------------------
    // linear algebra
    // ------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                context: "matmul inner dim",
                expected: ta.shape().to_vec(),
                got: tb.shape().to_vec(),
            });
        }
        let data = kernels::mm(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(&[m, n], data).unwrap();
        let need_a = self.parent_needs(a);
        let need_b = self.parent_needs(b);
        let back: BackFn<T> = Box::new(move |ctx, store| {
            if need_a {
                let da = kernels::mm_nt(ctx.grad.data(), ctx.p(1).data(), m, n, k);
                store.add(ctx.parents[0], &[m, k], |acc| {
                    for (acc_v, g) in acc.iter_mut().zip(da) {
                        *acc_v += g;
                    }
                });
            }
            if need_b {
                let db = kernels::mm_tn(ctx.p(0).data(), ctx.grad.data(), m, k, n);
                store.add(ctx.parents[1], &[k, n], |acc| {
                    for (acc_v, g) in acc.iter_mut().zip(db) {
                        *acc_v += g;
                    }
                });
            }
        });
        Ok(self.push(value, vec![a.0, b.0], Some(back)))
    }

    /// `a[m,k] · b[n,k]ᵀ -> [m,n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (n, k2) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                context: "matmul_nt inner dim",
                expected: ta.shape().to_vec(),
                got: tb.shape().to_vec(),
            });
        }
        let data = kernels::mm_nt(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(&[m, n], data).unwrap();
        let need_a = self.parent_needs(a);
        let need_b = self.parent_needs(b);
        let back: BackFn<T> = Box::new(move |ctx, store| {
            if need_a {
                let da = kernels::mm(ctx.grad.data(), ctx.p(1).data(), m, n, k);
                store.add(ctx.parents[0], &[m, k], |acc| {
                    for (acc_v, g) in acc.iter_mut().zip(da) {
                        *acc_v += g;
                    }
                });
            }
            if need_b {
                let db = kernels::mm_tn(ctx.grad.data(), ctx.p(0).data(), m, n, k);
                store.add(ctx.parents[1], &[n, k], |acc| {
                    for (acc_v, g) in acc.iter_mut().zip(db) {
                        *acc_v += g;
                    }
                });
            }
        });
        Ok(self.push(value, vec![a.0, b.0], Some(back)))
    }

    /// Add a `[n]` bias to every row of `[m,n]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (&self.values[x.0], &self.values[b.0]);
        let (m, n) = (tx.shape()[0], tx.shape()[1]);
        assert_eq!(tb.len(), n, "bias length");
        let mut data = tx.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += tb.data()[j];
            }
        }
        let value = Tensor::new(&[m, n], data).unwrap();
        let back: BackFn<T> = Box::new(move |ctx, store| {
            store.add(ctx.parents[0], &[m, n], |acc| {
                for (acc_v, &g) in acc.iter_mut().zip(ctx.grad.data()) {
                    *acc_v += g;
                }
            });
            store.add(ctx.parents[1], &[n], |acc| {
                for i in 0..m {
                    for (j, acc_v) in acc.iter_mut().enumerate() {
                        *acc_v += ctx.grad.data()[i * n + j];
                    }
                }
            });
        });
        self.push(value, vec![x.0, b.0], Some(back))
    }

    /// `x[m,k] · w[k,n] + b[n]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        Ok(self.add_row_bias(y, b))
    }

    // ------------------------------------------------------------------
    // softmax / normalization
    // ------------------------------------------------------------------

    /// Softmax over the leading dimension of any tensor viewed as `[d, rest]`.
    pub fn softmax_dim0(&mut self, a: Var) -> Var {
        let t = &self.values[a.0];
        let shape = t.shape().to_vec();
        let d = shape[0];
        let m: usize = shape[1..].iter().product();
        let data = kernels::softmax_dim0(t.data(), d, m);
        let value = Tensor::new(&shape, data).unwrap();
        let back: BackFn<T> = Box::new(move |ctx, store| {
            let y = ctx.out.data();
            let g = ctx.grad.data();
            store.add(ctx.parents[0], ctx.out.shape(), |acc| {
                for j in 0..m {
                    let mut s = T::zero();
                    for i in 0..d {
                        s += g[i * m + j] * y[i * m + j];
                    }
                    for i in 0..d {
                        acc[i * m + j] += y[i * m + j] * (g[i * m + j] - s);
                    }
                }
            });
        });
        self.push(value, vec![a.0], Some(back))
    }

    /// Softmax over the trailing dimensions of a tensor viewed as `[rows, d]`.
    pub fn softmax_dim1(&mut self, a: Var) -> Var {
        let t = &self.values[a.0];
        let shape = t.shape().to_vec();
        let rows = shape[0];
        let d: usize = shape[1..].iter().product();
        let data = kernels::softmax_dim1(t.data(), rows, d);
        let value = Tensor::new(&shape, data).unwrap();
        let back: BackFn<T> = Box::new(move |ctx, store| {
            let y = ctx.out.data();
            let g = ctx.grad.data();
            store.add(ctx.parents[0], ctx.out.shape(), |acc| {
                for i in 0..rows {
                    let yr = &y[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let mut s = T::zero();
                    for (gy, yy) in gr.iter().zip(yr.iter()) {
                        s += *gy * *yy;
                    }
                    let ar = &mut acc[i * d..(i + 1) * d];
                    for ((acc_v, &gy), &yy) in ar.iter_mut().zip(gr).zip(yr) {
                        *acc_v += yy * (gy - s);
                    }
                }
            });
        });
        self.push(value, vec![a.0], Some(back))
    }

    /// Layer norm across each row of `[m,n]` with learned `gamma`/`beta`.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let t = &self.values[x.0];
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let gm = self.values[gamma.0].data().to_vec();
        let bt = self.values[beta.0].data().to_vec();
        let nf = T::of_usize(n);
        let mut data = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut xhat = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / nf;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..n {
                let xh = (row[j] - mean) * istd;
                xhat[i * n + j] = xh;
                data[i * n + j] = xh * gm[j] + bt[j];
            }
        }
        let value = Tensor::new(&[m, n], data).unwrap();
        let back: BackFn<T> = Box::new(move |ctx, store| {
            let g = ctx.grad.data();
            // d gamma, d beta
            store.add(ctx.parents[1], &[n], |acc| {
                for i in 0..m {
                    for (j, acc_v) in acc.iter_mut().enumerate() {
                        *acc_v += g[i * n + j] * xhat[i * n + j];
                    }
                }
            });
            store.add(ctx.parents[2], &[n], |acc| {
                for i in 0..m {
                    for (j, acc_v) in acc.iter_mut().enumerate() {
                        *acc_v += g[i * n + j];
                    }
                }
            });
            store.add(ctx.parents[0], &[m, n], |acc| {
                for i in 0..m {
                    let mut sum_gy = T::zero();
                    let mut sum_gyx = T::zero();
                    for j in 0..n {
                        let gy = g[i * n + j] * gm[j];
                        sum_gy += gy;
                        sum_gyx += gy * xhat[i * n + j];
                    }
                    let inv_n = T::one() / nf;
                    for j in 0..n {
                        let gy = g[i * n + j] * gm[j];
                        acc[i * n + j] += inv_std[i]
                            * (gy - inv_n * sum_gy - xhat[i * n + j] * inv_n * sum_gyx);
                    }
                }
            });
        });
        self.push(value, vec![x.0, gamma.0, beta.0], Some(back))
    }

    /// Normalize a `[c,h,w]` grid across channels at every pixel with learned
    /// per-channel scale and shift.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let t = &self.values[x.0];
        let shape = t.shape().to_vec();
        let c = shape[0];
        let hw: usize = shape[1..].iter().product();
        let gm = self.values[gamma.0].data().to_vec();
        let bt = self.values[beta.0].data().to_vec();
        let cf = T::of_usize(c);
        let mut data = vec![T::zero(); c * hw];
        let mut inv_std = vec![T::zero(); hw];
        let mut xhat = vec![T::zero(); c * hw];
        for p in 0..hw {
            let mut mean = T::zero();
            for i in 0..c {
                mean += t.data()[i * hw + p];
            }
            mean = mean / cf;
            let mut var = T::zero();
            for i in 0..c {
                let d = t.data()[i * hw + p] - mean;
                var += d * d;
            }
            var = var / cf;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[p] = istd;
            for i in 0..c {
                let xh = (t.data()[i * hw + p] - mean) * istd;
                xhat[i * hw + p] = xh;
                data[i * hw + p] = xh * gm[i] + bt[i];
            }
        }
        let value = Tensor::new(&shape, data).unwrap();
        let out_shape = shape.clone();
        let back: BackFn<T> = Box::new(move |ctx, store| {
            let g = ctx.grad.data();
            store.add(ctx.parents[1], &[c], |acc| {
                for (i, acc_v) in acc.iter_mut().enumerate() {
                    for p in 0..hw {
                        *acc_v += g[i * hw + p] * xhat[i * hw + p];
                    }
                }
            });
            store.add(ctx.parents[2], &[c], |acc| {
                for (i, acc_v) in acc.iter_mut().enumerate() {
                    for p in 0..hw {
                        *acc_v += g[i * hw + p];
                    }
                }
            });
            store.add(ctx.parents[0], &out_shape, |acc| {
                let inv_c = T::one() / cf;
                for p in 0..hw {
                    let mut sum_gy = T::zero();
                    let mut sum_gyx = T::zero();
                    for i in 0..c {
                        let gy = g[i * hw + p] * gm[i];
                        sum_gy += gy;
                        sum_gyx += gy * xhat[i * hw + p];
                    }
                    for i in 0..c {
                        let gy = g[i * hw + p] * gm[i];
                        acc[i * hw + p] += inv_std[p]
                            * (gy - inv_c * sum_gy - xhat[i * hw + p] * inv_c * sum_gyx);
                    }
                }
            });
        });
        self.push(value, vec![x.0, gamma.0, beta.0], Some(back))
    }

    // ------------------------------------------------------------------
    // convolution / resampling
    // ------------------------------------------------------------------

    /// 2-D convolution of `x[cin,h,w]` with `w[cout,cin,k,k]` and `b[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let tx = &self.values[x.0];
        let tw = &self.values[w.0];
        let (cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cout, cin2, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        assert_eq!(cin, cin2, "conv2d channel mismatch");
        let (data, oh, ow) = kernels::conv2d_forward(
            tx.data(),
            cin,
            h,
            wd,
            tw.data(),
            self.values[b.0].data(),
            cout,
            k,
            stride,
            pad,
        );
        let value = Tensor::new(&[cout, oh, ow], data).unwrap();
        let need_x = self.parent_needs(x);
        let back: BackFn<T> = Box::new(move |ctx, store| {
            let g = ctx.grad.data();
            if need_x {
                let dx = kernels::conv2d_back_input(
                    g,
                    cin,
                    h,
                    wd,
                    ctx.p(1).data(),
                    cout,
                    k,
                    stride,
                    pad,
                );
                store.add(ctx.parents[0], &[cin, h, wd], |acc| {
                    for (acc_v, gv) in acc.iter_mut().zip(dx) {
                        *acc_v += gv;
                    }
                });
            }
            let dw = kernels::conv2d_back_weight(
                g,
                ctx.p(0).data(),
                cin,
                h,
                wd,
                cout,
                k,
                stride,
                pad,
            );
            store.add(ctx.parents[1], &[cout, cin, k, k], |acc| {
                for (acc_v, gv) in acc.iter_mut().zip(dw) {
                    *acc_v += gv;
                }
            });
            store.add(ctx.parents[2], &[cout], |acc| {
                for (co, acc_v) in acc.iter_mut().enumerate() {
                    for &gv in &g[co * oh * ow..(co + 1) * oh * ow] {
                        *acc_v += gv;
                    }
                }
            });
        });
        self.push(value, vec![x.0, w.0, b.0], Some(back))
    }

    /// Bilinear upsampling of `[c,h,w]` by an integer factor.
    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Var {
        let t = &self.values[x.0];
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let (oh, ow) = (h * factor, w * factor);
        let ytaps = kernels::bilinear_taps(oh, h, factor);
        let xtaps = kernels::bilinear_taps(ow, w, factor);
        let mut data = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            let src = &t.data()[ch * h * w..(ch + 1) * h * w];
            let dst = &mut data[ch * oh * ow..(ch + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                    let fy = T::of_f64(fy);
                    let fx = T::of_f64(fx);
                    let a = src[y0 * w + x0];
                    let b = src[y0 * w + x1];
                    let cc = src[y1 * w + x0];
                    let d = src[y1 * w + x1];
                    let top = a + (b - a) * fx;
                    let bot = cc + (d - cc) * fx;
                    dst[oy * ow + ox] = top + (bot - top) * fy;
                }
            }
        }
        let value = Tensor::new(&[c, oh, ow], data).unwrap();
        let back: BackFn<T> = Box::new(move |ctx, store| {
            let g = ctx.grad.data();
            store.add(ctx.parents[0], &[c, h, w], |acc| {
                for ch in 0..c {
                    let dst = &mut acc[ch * h * w..(ch + 1) * h * w];
                    let gs = &g[ch * oh * ow..(ch + 1) * oh * ow];
                    for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                            let fy = T::of_f64(fy);
                            let fx = T::of_f64(fx);
                            let gv = gs[oy * ow + ox];
                            let one = T::one();
                            dst[y0 * w + x0] += gv * (one - fy) * (one - fx);
                            dst[y0 * w + x1] += gv * (one - fy) * fx;
                            dst[y1 * w + x0] += gv * fy * (one - fx);
                            dst[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
            });
        });
        self.push(value, vec![x.0], Some(back))
    }

    // ------------------------------------------------------------------
    // pooling / similarity
    // ------------------------------------------------------------------

    /// Global weighted average pooling: `features[c,h,w]` under a
    /// non-negative weight map `[1,h,w]` (or `[h,w]`), producing `[c]`.
    /// The denominator is clamped below by `eps`.
    pub fn gwap(&mut self, features: Var, weights: Var, eps: T) -> Var {
        let tf = &self.values[features.0];
        let tw = &self.values[weights.0];
        let c = tf.shape()[0];
        let hw: usize = tf.shape()[1..].iter().product();
        assert_eq!(tw.len(), hw, "gwap weight map size");
        let wsum: T = tw.data().iter().copied().sum();
        let denom = wsum.max(eps);
        let clamped = wsum < eps;
        let mut data = vec![T::zero(); c];
        for (i, item) in data.iter_mut().enumerate() {
            let mut s = T::zero();
            for p in 0..hw {
                s += tf.data()[i * hw + p] * tw.data()[p];
            }
            *item = s / denom;
        }
        let value = Tensor::new(&[c], data).unwrap();
        let f_shape = tf.shape().to_vec();
        let w_shape = tw.shape().to_vec();
        let back: BackFn<T> = Box::new(move |ctx, store| {
            let g = ctx.grad.data();
            let fv = ctx.p(0).data();
            let wv = ctx.p(1).data();
            let out = ctx.out.data();
            store.add(ctx.parents[0], &f_shape, |acc| {
                for i in 0..c {
                    let gi = g[i] / denom;
                    for p in 0..hw {
                        acc[i * hw + p] += gi * wv[p];
                    }
                }
            });
            store.add(ctx.parents[1], &w_shape, |acc| {
                // d out[i]/d w[p] = (x[i,p] - out[i])/denom, unless the
                // denominator was clamped, in which case the -out term drops.
                let mut g_dot_out = T::zero();
                if !clamped {
                    for i in 0..c {
                        g_dot_out += g[i] * out[i];
                    }
                }
                for (p, acc_v) in acc.iter_mut().enumerate() {
                    let mut s = T::zero();
                    for i in 0..c {
                        s += g[i] * fv[i * hw + p];
                    }
                    *acc_v += (s - g_dot_out) / denom;
                }
            });
        });
        self.push(value, vec![features.0, weights.0], Some(back))
    }

    /// Pixel-wise cosine similarity between a `[c,h,w]` grid and `[k,c]`
    /// vectors, producing `[k,h,w]`. The norm product is clamped below by
    /// `eps`, which defines zero-norm similarity as 0.
    pub fn cosine_map(&mut self, grid: Var, block: Var, eps: T) -> Result<Var> {
        let tg = &self.values[grid.0];
        let tb = &self.values[block.0];
        let (c, h, w) = (tg.shape()[0], tg.shape()[1], tg.shape()[2]);
        let (k, c2) = (tb.shape()[0], tb.shape()[1]);
        if c != c2 {
            return Err(Error::ShapeMismatch {
                context: "cosine_map feature dim",
                expected: tg.shape().to_vec(),
                got: tb.shape().to_vec(),
            });
        }
        let hw = h * w;
        let gnorm: Vec<T> = (0..hw)
            .map(|p| {
                let mut s = T::zero();
                for i in 0..c {
                    let v = tg.data()[i * hw + p];
                    s += v * v;
                }
                s.sqrt()
            })
            .collect();
        let bnorm: Vec<T> = (0..k)
            .map(|j| {
                let row = &tb.data()[j * c..(j + 1) * c];
                row.iter().map(|&v| v * v).sum::<T>().sqrt()
            })
            .collect();
        let mut data = vec![T::zero(); k * hw];
        for j in 0..k {
            let row = &tb.data()[j * c..(j + 1) * c];
            for p in 0..hw {
                let mut dot = T::zero();
                for (i, &rv) in row.iter().enumerate() {
                    dot += tg.data()[i * hw + p] * rv;
                }
                let den = (gnorm[p] * bnorm[j]).max(eps);
                data[j * hw + p] = dot / den;
            }
        }
        let value = Tensor::new(&[k, h, w], data).unwrap();
        let need_g = self.parent_needs(grid);
        let need_b = self.parent_needs(block);
        let back: BackFn<T> = Box::new(move |ctx, store| {
            let g = ctx.grad.data();
            let gv = ctx.p(0).data();
            let bv = ctx.p(1).data();
            let out = ctx.out.data();
            if need_g {
                store.add(ctx.parents[0], &[c, h, w], |acc| {
                    for j in 0..k {
                        let row = &bv[j * c..(j + 1) * c];
                        for p in 0..hw {
                            let den = (gnorm[p] * bnorm[j]).max(eps);
                            let clamped = gnorm[p] * bnorm[j] < eps;
                            let gd = g[j * hw + p] / den;
                            if clamped {
                                for (i, &rv) in row.iter().enumerate() {
                                    acc[i * hw + p] += gd * rv;
                                }
                            } else {
                                let coef = g[j * hw + p] * out[j * hw + p]
                                    / (gnorm[p] * gnorm[p]);
                                for (i, &rv) in row.iter().enumerate() {
                                    acc[i * hw + p] += gd * rv - coef * gv[i * hw + p];
                                }
                            }
                        }
                    }
                });
            }
            if need_b {
                store.add(ctx.parents[1], &[k, c], |acc| {
                    for j in 0..k {
                        let row = &bv[j * c..(j + 1) * c];
                        for p in 0..hw {
                            let den = (gnorm[p] * bnorm[j]).max(eps);
                            let clamped = gnorm[p] * bnorm[j] < eps;
                            let gd = g[j * hw + p] / den;
                            if clamped {
                                for i in 0..c {
                                    acc[j * c + i] += gd * gv[i * hw + p];
                                }
                            } else {
                                let coef = g[j * hw + p] * out[j * hw + p]
                                    / (bnorm[j] * bnorm[j]);
                                for (i, &rv) in row.iter().enumerate() {
                                    acc[j * c + i] += gd * gv[i * hw + p] - coef * rv;
                                }
                            }
                        }
                    }
                });
            }
        });
        Ok(self.push(value, vec![grid.0, block.0], Some(back)))
    }

    // ------------------------------------------------------------------
    // reductions
    // ------------------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.values[a.0].data().iter().copied().sum();
        let shape = self.values[a.0].shape().to_vec();
        let value = Tensor::scalar(s);
        let back: BackFn<T> = Box::new(move |ctx, store| {
            let g = ctx.grad.data()[0];
            store.add(ctx.parents[0], &shape, |acc| {
                for acc_v in acc.iter_mut() {
                    *acc_v += g;
                }
            });
        });
        self.push(value, vec![a.0], Some(back))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len();
        let s = self.sum_all(a);
        self.affine(s, T::one() / T::of_usize(n), T::zero())
    }

    /// Sum rows of `[k,c]` down to `[c]`.
    pub fn sum_dim0(&mut self, a: Var) -> Var {
        let t = &self.values[a.0];
        let k = t.shape()[0];
        let c: usize = t.shape()[1..].iter().product();
        let mut data = vec![T::zero(); c];
        for i in 0..k {
            for (j, item) in data.iter_mut().enumerate() {
                *item += t.data()[i * c + j];
            }
        }
        let value = Tensor::new(&[c], data).unwrap();
        let in_shape = t.shape().to_vec();
        let back: BackFn<T> = Box::new(move |ctx, store| {
            store.add(ctx.parents[0], &in_shape, |acc| {
                for i in 0..k {
                    for j in 0..c {
                        acc[i * c + j] += ctx.grad.data()[j];
                    }
                }
            });
        });
        self.push(value, vec![a.0], Some(back))
    }

    // ------------------------------------------------------------------
    // losses (target is a constant)
    // ------------------------------------------------------------------

    /// Soft IoU loss `1 - Σmin(p,g)/Σmax(p,g)` against a fixed target.
    pub fn iou_loss(&mut self, p: Var, target: &Tensor<T>) -> Result<Var> {
        let tp = &self.values[p.0];
        if tp.is_empty() {
            return Err(Error::EmptySet("iou_loss"));
        }
        if tp.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                context: "iou_loss",
                expected: target.shape().to_vec(),
                got: tp.shape().to_vec(),
            });
        }
        let mut inter = T::zero();
        let mut union = T::zero();
        for (&pv, &gv) in tp.data().iter().zip(target.data()) {
            inter += pv.min(gv);
            union += pv.max(gv);
        }
        let loss = if union > T::zero() {
            T::one() - inter / union
        } else {
            T::zero()
        };
        let value = Tensor::scalar(loss);
        let tgt = target.clone();
        let shape = tp.shape().to_vec();
        let back: BackFn<T> = Box::new(move |ctx, store| {
            if union <= T::zero() {
                return;
            }
            let go = ctx.grad.data()[0];
            let pv = ctx.p(0).data();
            store.add(ctx.parents[0], &shape, |acc| {
                let u2 = union * union;
                for ((acc_v, &p), &g) in acc.iter_mut().zip(pv).zip(tgt.data()) {
                    let dmin = if p <= g { T::one() } else { T::zero() };
                    let dmax = T::one() - dmin;
                    // d(1 - I/U)/dp = (I·dU - U·dI)/U²
                    *acc_v += go * (inter * dmax - union * dmin) / u2;
                }
            });
        });
        Ok(self.push(value, vec![p.0], Some(back)))
    }

    /// Weighted binary cross-entropy `Σ (floor + σ|p-g|)·BCE(p,g)` against a
    /// fixed target. `p` is clamped to `[1e-7, 1-1e-7]` inside.
    pub fn wbce_loss(&mut self, p: Var, target: &Tensor<T>, sigma: T, floor: T) -> Result<Var> {
        let tp = &self.values[p.0];
        if tp.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                context: "wbce_loss",
                expected: target.shape().to_vec(),
                got: tp.shape().to_vec(),
            });
        }
        let eps = T::of_f64(1e-7);
        let one = T::one();
        let clamp = move |v: T| v.max(eps).min(one - eps);
        let mut total = T::zero();
        for (&pv, &gv) in tp.data().iter().zip(target.data()) {
            let pc = clamp(pv);
            let bce = -(gv * pc.ln() + (one - gv) * (one - pc).ln());
            let w = floor + sigma * (pc - gv).abs();
            total += w * bce;
        }
        let value = Tensor::scalar(total);
        let tgt = target.clone();
        let shape = tp.shape().to_vec();
        let back: BackFn<T> = Box::new(move |ctx, store| {
            let go = ctx.grad.data()[0];
            let pv = ctx.p(0).data();
            store.add(ctx.parents[0], &shape, |acc| {
                for ((acc_v, &p), &g) in acc.iter_mut().zip(pv).zip(tgt.data()) {
                    if p <= eps || p >= one - eps {
                        continue; // clamped: zero gradient
                    }
                    let bce = -(g * p.ln() + (one - g) * (one - p).ln());
                    let w = floor + sigma * (p - g).abs();
                    let sign = if p > g {
                        T::one()
                    } else if p < g {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    let dbce = (p - g) / (p * (one - p));
                    *acc_v += go * (sigma * sign * bce + w * dbce);
                }
            });
        });
        Ok(self.push(value, vec![p.0], Some(back)))
    }
}
