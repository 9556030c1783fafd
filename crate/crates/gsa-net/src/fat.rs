//! Feature aggregation transformer: fuses reference-frame global features
//! with target-frame local features into the aggregated block `P_A`. Part
//! (a) pools each reference frame and attends from frames into local
//! features; part (b) attends from local features into the part-(a) output.
//! A plain single-block aggregator stands in when the FAT switch is off.

use crate::attention::{AttentionConfig, AttentivePool, LinearParams, TransformerBlock};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::extractors::GlobalVars;
use crate::params::Params;
use crate::scalar::Scalar;
use rand::Rng;

pub struct FatParams {
    pub cfg: AttentionConfig,
    intra_pool: AttentivePool,
    proj_gq: LinearParams,
    proj_lk: LinearParams,
    proj_lv: LinearParams,
    block_a: TransformerBlock,
    proj_lq: LinearParams,
    proj_glk: LinearParams,
    proj_glv: LinearParams,
    block_b: TransformerBlock,
}

impl FatParams {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut Params<T>,
        prefix: &str,
        c_l: usize,
        c_g: usize,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.model_dim;
        Self {
            cfg,
            intra_pool: AttentivePool::new(params, &format!("{prefix}.intra"), c_g, rng),
            proj_gq: LinearParams::new(params, &format!("{prefix}.gq"), c_g, d, rng),
            proj_lk: LinearParams::new(params, &format!("{prefix}.lk"), c_l, d, rng),
            proj_lv: LinearParams::new(params, &format!("{prefix}.lv"), c_l, d, rng),
            block_a: TransformerBlock::new(params, &format!("{prefix}.block_a"), cfg, rng),
            proj_lq: LinearParams::new(params, &format!("{prefix}.lq"), c_l, d, rng),
            proj_glk: LinearParams::new(params, &format!("{prefix}.glk"), d, d, rng),
            proj_glv: LinearParams::new(params, &format!("{prefix}.glv"), d, d, rng),
            block_b: TransformerBlock::new(params, &format!("{prefix}.block_b"), cfg, rng),
        }
    }

    /// Zero the update paths of both transformer blocks (tests only).
    pub fn zero_update_init<T: Scalar>(&self, params: &mut Params<T>) {
        self.block_a.zero_update_init(params);
        self.block_b.zero_update_init(params);
    }

    /// Attentive pooling over each reference frame's global vectors,
    /// stacking one pooled row per frame.
    pub fn intra_frame_pool<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        global: &GlobalVars,
    ) -> Result<Var> {
        let mut rows = Vec::with_capacity(global.per_frame.len());
        for &frame in &global.per_frame {
            let pooled = self.intra_pool.forward(tape, params, frame)?;
            let c = tape.shape(pooled)[0];
            rows.push(tape.reshape(pooled, &[1, c]));
        }
        Ok(tape.concat0(&rows))
    }

    /// Part (a): queries from pooled per-frame features, keys/values from
    /// local features, through the first transformer block.
    pub fn global_to_local<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        p_g_intra: Var,
        p_l: Var,
    ) -> Result<Var> {
        let q = self.proj_gq.apply(tape, params, p_g_intra)?;
        let k = self.proj_lk.apply(tape, params, p_l)?;
        let v = self.proj_lv.apply(tape, params, p_l)?;
        self.block_a.forward(tape, params, q, k, v)
    }

    /// Part (b): queries from local features, keys/values from the part-(a)
    /// output, producing the aggregated block `[D, model_dim]`.
    pub fn aggregate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        p_l: Var,
        p_gl: Var,
    ) -> Result<Var> {
        let q = self.proj_lq.apply(tape, params, p_l)?;
        let k = self.proj_glk.apply(tape, params, p_gl)?;
        let v = self.proj_glv.apply(tape, params, p_gl)?;
        self.block_b.forward(tape, params, q, k, v)
    }

    /// Full chain: intra-frame pooling, part (a), part (b).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        p_l: Var,
        global: &GlobalVars,
    ) -> Result<Var> {
        let intra = self.intra_frame_pool(tape, params, global)?;
        let p_gl = self.global_to_local(tape, params, intra, p_l)?;
        self.aggregate(tape, params, p_l, p_gl)
    }
}

/// FAT-off aggregation: one transformer block with queries from local
/// features and keys/values from the flattened global block, no attentive
/// pooling.
pub struct PlainAggregator {
    proj_q: LinearParams,
    proj_k: LinearParams,
    proj_v: LinearParams,
    block: TransformerBlock,
}

impl PlainAggregator {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut Params<T>,
        prefix: &str,
        c_l: usize,
        c_g: usize,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.model_dim;
        Self {
            proj_q: LinearParams::new(params, &format!("{prefix}.q"), c_l, d, rng),
            proj_k: LinearParams::new(params, &format!("{prefix}.k"), c_g, d, rng),
            proj_v: LinearParams::new(params, &format!("{prefix}.v"), c_g, d, rng),
            block: TransformerBlock::new(params, &format!("{prefix}.block"), cfg, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        p_l: Var,
        global: &GlobalVars,
    ) -> Result<Var> {
        let flat = tape.concat0(&global.per_frame);
        let q = self.proj_q.apply(tape, params, p_l)?;
        let k = self.proj_k.apply(tape, params, flat)?;
        let v = self.proj_v.apply(tape, params, flat)?;
        self.block.forward(tape, params, q, k, v)
    }
}

/// Either aggregation route, selected by the FAT ablation switch.
pub enum Aggregator {
    Fat(FatParams),
    Plain(PlainAggregator),
}

impl Aggregator {
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        p_l: Var,
        global: &GlobalVars,
    ) -> Result<Var> {
        match self {
            Aggregator::Fat(f) => f.forward(tape, params, p_l, global),
            Aggregator::Plain(p) => p.forward(tape, params, p_l, global),
        }
    }
}
