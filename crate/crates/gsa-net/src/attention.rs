//! Attention building blocks shared by the feature aggregation transformer
//! and guided slot attention: scaled dot-product attention, a multi-head +
//! feed-forward transformer block with pre-norm residuals, and attentive
//! pooling over unordered sets.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{PId, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::FeatureBlock;
use rand::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Shape of one transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, heads: usize) -> Self {
        Self {
            model_dim,
            heads,
            ffn_hidden: 2 * model_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("attention dims must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// `softmax(QKᵀ/√d)·V` on plain feature blocks.
pub fn scaled_dot_attention<T: Scalar>(
    q: &FeatureBlock<T>,
    k: &FeatureBlock<T>,
    v: &FeatureBlock<T>,
) -> Result<FeatureBlock<T>> {
    if q.dim() != k.dim() {
        return Err(Error::ShapeMismatch {
            context: "attention Q/K dim",
            expected: vec![q.count(), q.dim()],
            got: vec![k.count(), k.dim()],
        });
    }
    if k.count() != v.count() {
        return Err(Error::ShapeMismatch {
            context: "attention K/V count",
            expected: vec![k.count(), k.dim()],
            got: vec![v.count(), v.dim()],
        });
    }
    let (m, d, kc) = (q.count(), q.dim(), k.count());
    let scale = T::one() / T::of_usize(d).sqrt();
    let mut scores = kernels::mm_nt(q.data(), k.data(), m, d, kc);
    for s in scores.iter_mut() {
        *s *= scale;
    }
    let attn = kernels::softmax_dim1(&scores, m, kc);
    let out = kernels::mm(&attn, v.data(), m, kc, v.dim());
    FeatureBlock::new(m, v.dim(), out)
}

/// Tape version of [`scaled_dot_attention`].
pub fn scaled_dot_attention_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    let d = tape.shape(q)[1];
    if tape.shape(k)[1] != d {
        return Err(Error::ShapeMismatch {
            context: "attention Q/K dim",
            expected: tape.shape(q).to_vec(),
            got: tape.shape(k).to_vec(),
        });
    }
    let scale = T::one() / T::of_usize(d).sqrt();
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.affine(scores, scale, T::zero());
    let attn = tape.softmax_dim1(scaled);
    tape.matmul(attn, v)
}

fn randn_scaled<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let mut t = Tensor::<T>::randn(shape, rng);
    t.scale_assign(T::of_f64(std));
    t
}

struct LayerNormParams {
    gamma: PId,
    beta: PId,
}

impl LayerNormParams {
    fn new<T: Scalar>(params: &mut Params<T>, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: params.add(format!("{prefix}.gamma"), Tensor::full(&[dim], T::one())),
            beta: params.add(format!("{prefix}.beta"), Tensor::zeros(&[dim])),
        }
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, x: Var) -> Var {
        let g = tape.param(params, self.gamma);
        let b = tape.param(params, self.beta);
        tape.layer_norm_rows(x, g, b, T::of_f64(LAYER_NORM_EPS))
    }
}

/// Linear layer handle (`[in,out]` weight plus bias).
pub struct LinearParams {
    pub w: PId,
    pub b: PId,
}

impl LinearParams {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut Params<T>,
        prefix: &str,
        dim_in: usize,
        dim_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / dim_in as f64).sqrt();
        Self {
            w: params.add(
                format!("{prefix}.w"),
                randn_scaled(&[dim_in, dim_out], std, rng),
            ),
            b: params.add(format!("{prefix}.b"), Tensor::zeros(&[dim_out])),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, x: Var) -> Result<Var> {
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        tape.linear(x, w, b)
    }
}

/// Pre-norm transformer block: multi-head attention over learned Q/K/V
/// projections with a residual, then a two-layer FFN with a residual.
pub struct TransformerBlock {
    pub cfg: AttentionConfig,
    ln_q: LayerNormParams,
    ln_k: LayerNormParams,
    ln_v: LayerNormParams,
    proj_q: LinearParams,
    proj_k: LinearParams,
    proj_v: LinearParams,
    proj_out: LinearParams,
    ln_ffn: LayerNormParams,
    ffn1: LinearParams,
    ffn2: LinearParams,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut Params<T>,
        prefix: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.model_dim;
        Self {
            cfg,
            ln_q: LayerNormParams::new(params, &format!("{prefix}.ln_q"), d),
            ln_k: LayerNormParams::new(params, &format!("{prefix}.ln_k"), d),
            ln_v: LayerNormParams::new(params, &format!("{prefix}.ln_v"), d),
            proj_q: LinearParams::new(params, &format!("{prefix}.q"), d, d, rng),
            proj_k: LinearParams::new(params, &format!("{prefix}.k"), d, d, rng),
            proj_v: LinearParams::new(params, &format!("{prefix}.v"), d, d, rng),
            proj_out: LinearParams::new(params, &format!("{prefix}.out"), d, d, rng),
            ln_ffn: LayerNormParams::new(params, &format!("{prefix}.ln_ffn"), d),
            ffn1: LinearParams::new(params, &format!("{prefix}.ffn1"), d, cfg.ffn_hidden, rng),
            ffn2: LinearParams::new(params, &format!("{prefix}.ffn2"), cfg.ffn_hidden, d, rng),
        }
    }

    /// Zero the output projection and second FFN layer so the block becomes
    /// the identity on its residual path.
    pub fn zero_update_init<T: Scalar>(&self, params: &mut Params<T>) {
        for pid in [self.proj_out.w, self.proj_out.b, self.ffn2.w, self.ffn2.b] {
            let t = params.get_mut(pid);
            *t = Tensor::zeros(t.shape());
        }
    }

    /// `q_src`, `k_src`, `v_src` are `[*, model_dim]` blocks; the residual
    /// runs along the query path.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        q_src: Var,
        k_src: Var,
        v_src: Var,
    ) -> Result<Var> {
        let d = self.cfg.model_dim;
        for (label, v) in [("q", q_src), ("k", k_src), ("v", v_src)] {
            if tape.shape(v).len() != 2 || tape.shape(v)[1] != d {
                return Err(Error::ShapeMismatch {
                    context: match label {
                        "q" => "transformer q_src",
                        "k" => "transformer k_src",
                        _ => "transformer v_src",
                    },
                    expected: vec![0, d],
                    got: tape.shape(v).to_vec(),
                });
            }
        }
        let qn = self.ln_q.apply(tape, params, q_src);
        let kn = self.ln_k.apply(tape, params, k_src);
        let vn = self.ln_v.apply(tape, params, v_src);
        let q = self.proj_q.apply(tape, params, qn)?;
        let k = self.proj_k.apply(tape, params, kn)?;
        let v = self.proj_v.apply(tape, params, vn)?;
        let dh = d / self.cfg.heads;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
            heads.push(scaled_dot_attention_on_tape(tape, qh, kh, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        let attn_out = self.proj_out.apply(tape, params, merged)?;
        let x = tape.add(q_src, attn_out);
        let xn = self.ln_ffn.apply(tape, params, x);
        let h1 = self.ffn1.apply(tape, params, xn)?;
        let h1 = tape.relu(h1);
        let h2 = self.ffn2.apply(tape, params, h1)?;
        Ok(tape.add(x, h2))
    }
}

/// Attentive pooling: a shared per-channel score layer, softmax over the set
/// dimension, element-wise weighting. Exactly permutation-invariant.
pub struct AttentivePool {
    score: PId,
    dim: usize,
}

impl AttentivePool {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut Params<T>,
        prefix: &str,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / dim as f64).sqrt();
        Self {
            score: params.add(
                format!("{prefix}.score"),
                randn_scaled(&[dim, dim], std, rng),
            ),
            dim,
        }
    }

    /// Pool a `[k,c]` block down to `[c]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        block: Var,
    ) -> Result<Var> {
        let shape = tape.shape(block);
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::ShapeMismatch {
                context: "attentive_pool block",
                expected: vec![0, self.dim],
                got: shape.to_vec(),
            });
        }
        if shape[0] == 0 {
            return Err(Error::EmptySet("attentive_pool"));
        }
        let w = tape.param(params, self.score);
        let scores = tape.matmul(block, w)?;
        let weights = tape.softmax_dim0(scores);
        let weighted = tape.mul(weights, block);
        Ok(tape.sum_dim0(weighted))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_key_returns_value_row() {
        let q = FeatureBlock::new(3, 2, vec![5.0, -1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        let k = FeatureBlock::new(1, 2, vec![1.0, 1.0]).unwrap();
        let v = FeatureBlock::new(1, 2, vec![7.0, -3.0]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), &[7.0, -3.0]);
        }
    }

    #[test]
    fn saturated_query_selects_matching_key() {
        // orthonormal keys, query = 100 * key1
        let k = FeatureBlock::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = FeatureBlock::new(2, 2, vec![10.0, 0.0, 0.0, 10.0]).unwrap();
        let q = FeatureBlock::new(1, 2, vec![0.0, 100.0]).unwrap();
        let out: FeatureBlock<f64> = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!(out.row(0)[0].abs() < 1e-9);
        assert!((out.row(0)[1] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_names_both_shapes() {
        let q = FeatureBlock::new(1, 3, vec![0.0; 3]).unwrap();
        let k = FeatureBlock::new(2, 2, vec![0.0; 4]).unwrap();
        let v = FeatureBlock::new(2, 2, vec![0.0; 4]).unwrap();
        let err = scaled_dot_attention(&q, &k, &v).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::<f64>::randn(&[3, 8], &mut rng);
        let k = Tensor::<f64>::randn(&[5, 8], &mut rng);
        let scale = 1.0 / 8.0f64.sqrt();
        let mut scores = kernels::mm_nt(q.data(), k.data(), 3, 8, 5);
        for s in scores.iter_mut() {
            *s *= scale;
        }
        let attn = kernels::softmax_dim1(&scores, 3, 5);
        for i in 0..3 {
            let sum: f64 = attn[i * 5..(i + 1) * 5].iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_update_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = Params::<f64>::new();
        let cfg = AttentionConfig::new(8, 2);
        let block = TransformerBlock::new(&mut params, "b", cfg, &mut rng);
        block.zero_update_init(&mut params);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::randn(&[3, 8], &mut rng));
        let kv = tape.constant(Tensor::randn(&[5, 8], &mut rng));
        let out = block.forward(&mut tape, &params, q, kv, kv).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(q).data());
    }

    #[test]
    fn block_output_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = Params::<f64>::new();
        let cfg = AttentionConfig::new(64, 4);
        let block = TransformerBlock::new(&mut params, "b", cfg, &mut rng);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::randn(&[7, 64], &mut rng));
        let kv = tape.constant(Tensor::randn(&[5, 64], &mut rng));
        let out = block.forward(&mut tape, &params, q, kv, kv).unwrap();
        assert_eq!(tape.shape(out), &[7, 64]);
        assert!(tape.value(out).is_finite());
    }

    #[test]
    fn single_head_matches_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = Params::<f64>::new();
        let cfg = AttentionConfig {
            model_dim: 6,
            heads: 1,
            ffn_hidden: 12,
        };
        let block = TransformerBlock::new(&mut params, "b", cfg, &mut rng);
        let q_in = Tensor::<f64>::randn(&[2, 6], &mut rng);
        let kv_in = Tensor::<f64>::randn(&[4, 6], &mut rng);
        let mut tape = Tape::new();
        let q = tape.constant(q_in.clone());
        let kv = tape.constant(kv_in.clone());
        let out = block.forward(&mut tape, &params, q, kv, kv).unwrap();

        // oracle: replay the composition with plain kernels
        let ln = |x: &Tensor<f64>, g: &str, b: &str| -> Tensor<f64> {
            let gm = params.get(params.id_of(g).unwrap()).data();
            let bt = params.get(params.id_of(b).unwrap()).data();
            let (m, n) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &x.data()[i * n..(i + 1) * n];
                let mean: f64 = row.iter().sum::<f64>() / n as f64;
                let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..n {
                    out[i * n + j] = (row[j] - mean) * istd * gm[j] + bt[j];
                }
            }
            Tensor::new(&[m, n], out).unwrap()
        };
        let lin = |x: &Tensor<f64>, w: &str, b: &str| -> Tensor<f64> {
            let wt = params.get(params.id_of(w).unwrap());
            let bt = params.get(params.id_of(b).unwrap()).data();
            let (m, k) = (x.shape()[0], x.shape()[1]);
            let n = wt.shape()[1];
            let mut out = kernels::mm(x.data(), wt.data(), m, k, n);
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] += bt[j];
                }
            }
            Tensor::new(&[m, n], out).unwrap()
        };
        let qn = lin(&ln(&q_in, "b.ln_q.gamma", "b.ln_q.beta"), "b.q.w", "b.q.b");
        let kn = lin(&ln(&kv_in, "b.ln_k.gamma", "b.ln_k.beta"), "b.k.w", "b.k.b");
        let vn = lin(&ln(&kv_in, "b.ln_v.gamma", "b.ln_v.beta"), "b.v.w", "b.v.b");
        let attn = scaled_dot_attention(
            &FeatureBlock::from_tensor(qn).unwrap(),
            &FeatureBlock::from_tensor(kn).unwrap(),
            &FeatureBlock::from_tensor(vn).unwrap(),
        )
        .unwrap();
        let proj = lin(attn.tensor(), "b.out.w", "b.out.b");
        let mut x = q_in.clone();
        x.add_assign(&proj);
        let h = lin(&ln(&x, "b.ln_ffn.gamma", "b.ln_ffn.beta"), "b.ffn1.w", "b.ffn1.b");
        let h = h.map(|v| v.max(0.0));
        let f = lin(&h, "b.ffn2.w", "b.ffn2.b");
        let mut expect = x.clone();
        expect.add_assign(&f);
        assert!(tape.value(out).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn attentive_pool_single_row_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = Params::<f64>::new();
        let pool = AttentivePool::new(&mut params, "p", 4, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let out = pool.forward(&mut tape, &params, x).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, -2.0, 3.0, 0.5]);
    }

    #[test]
    fn attentive_pool_constant_set_returns_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = Params::<f64>::new();
        let pool = AttentivePool::new(&mut params, "p", 3, &mut rng);
        let mut tape = Tape::new();
        let row = [0.3, -1.2, 2.0];
        let data: Vec<f64> = row.iter().copied().cycle().take(12).collect();
        let x = tape.constant(Tensor::new(&[4, 3], data).unwrap());
        let out = pool.forward(&mut tape, &params, x).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(row.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attentive_pool_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = Params::<f64>::new();
        let pool = AttentivePool::new(&mut params, "p", 16, &mut rng);
        let x = Tensor::<f64>::randn(&[6, 16], &mut rng);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut px = vec![0.0; 6 * 16];
        for (i, &p) in perm.iter().enumerate() {
            px[i * 16..(i + 1) * 16].copy_from_slice(&x.data()[p * 16..(p + 1) * 16]);
        }
        let mut t1 = Tape::new();
        let v1 = t1.constant(x.clone());
        let o1 = pool.forward(&mut t1, &params, v1).unwrap();
        let mut t2 = Tape::new();
        let v2 = t2.constant(Tensor::new(&[6, 16], px).unwrap());
        let o2 = pool.forward(&mut t2, &params, v2).unwrap();
        assert!(t1.value(o1).max_abs_diff(t2.value(o2)) < 1e-6);
    }
}
