//! Per-stream feature products: guided slots from the target frame, local
//! features via feature-level k-means, and global features pooled from
//! reference-frame soft object regions.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{kmeans_features, GWAP_EPS};
use crate::params::{PId, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::{FeatureBlock, FeatureGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Number of slots: one foreground, one background.
pub const NUM_SLOTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotProvenance {
    Guided,
    Random,
}

/// Foreground/background slot vectors plus the masks they were pooled from.
#[derive(Debug, Clone)]
pub struct SlotState<T: Scalar> {
    pub slots: FeatureBlock<T>,
    pub provenance: SlotProvenance,
    pub slot_masks: FeatureGrid<T>,
}

/// Tape-resident slot state.
pub struct SlotVars {
    pub slots: Var,
    pub masks: Var,
    pub provenance: SlotProvenance,
}

impl SlotVars {
    pub fn materialize<T: Scalar>(&self, tape: &Tape<T>) -> Result<SlotState<T>> {
        Ok(SlotState {
            slots: FeatureBlock::from_tensor(tape.value(self.slots).clone())?,
            provenance: self.provenance,
            slot_masks: FeatureGrid::from_tensor(tape.value(self.masks).clone())?,
        })
    }
}

/// Slot generator: a 1×1 convolution compresses the target feature to one
/// channel per slot, a pixel-wise softmax turns those into slot masks, and
/// GWAP against the local feature grid pools the guided slots.
pub struct SlotGenerator {
    compress_w: PId,
    compress_b: PId,
}

impl SlotGenerator {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut Params<T>,
        prefix: &str,
        c_in: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / c_in as f64).sqrt();
        let mut w = Tensor::<T>::randn(&[NUM_SLOTS, c_in, 1, 1], rng);
        w.scale_assign(T::of_f64(std));
        Self {
            compress_w: params.add(format!("{prefix}.compress.w"), w),
            compress_b: params.add(
                format!("{prefix}.compress.b"),
                Tensor::zeros(&[NUM_SLOTS]),
            ),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        x_t: Var,
        x_l: Var,
    ) -> Result<SlotVars> {
        let st = tape.shape(x_t).to_vec();
        let sl = tape.shape(x_l).to_vec();
        if st[1..] != sl[1..] {
            return Err(Error::ShapeMismatch {
                context: "slot_generator spatial dims",
                expected: st,
                got: sl,
            });
        }
        let w = tape.param(params, self.compress_w);
        let b = tape.param(params, self.compress_b);
        let x_s = tape.conv2d(x_t, w, b, 1, 0);
        let masks = tape.softmax_dim0(x_s);
        let c_l = sl[0];
        let mut rows = Vec::with_capacity(NUM_SLOTS);
        for i in 0..NUM_SLOTS {
            let m = tape.slice0(masks, i, i + 1);
            let pooled = tape.gwap(x_l, m, T::of_f64(GWAP_EPS));
            rows.push(tape.reshape(pooled, &[1, c_l]));
        }
        let slots = tape.concat0(&rows);
        Ok(SlotVars {
            slots,
            masks,
            provenance: SlotProvenance::Guided,
        })
    }
}

/// Slots drawn from a unit Gaussian (the guided-slots-off ablation), with
/// uniform slot masks.
pub fn random_slots<T: Scalar>(c_l: usize, height: usize, width: usize, seed: u64) -> SlotState<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = Tensor::<T>::randn(&[NUM_SLOTS, c_l], &mut rng);
    let uniform = T::one() / T::of_usize(NUM_SLOTS);
    SlotState {
        slots: FeatureBlock::from_tensor(slots).expect("gaussian slots finite"),
        provenance: SlotProvenance::Random,
        slot_masks: FeatureGrid::from_tensor(Tensor::full(&[NUM_SLOTS, height, width], uniform))
            .expect("uniform masks"),
    }
}

/// Load a [`SlotState`] onto a tape as constants (used for random slots).
pub fn slots_to_tape<T: Scalar>(tape: &mut Tape<T>, state: &SlotState<T>) -> SlotVars {
    SlotVars {
        slots: tape.constant(state.slots.tensor().clone()),
        masks: tape.constant(state.slot_masks.tensor().clone()),
        provenance: state.provenance,
    }
}

/// Local features: one pooled vector per k-means cluster of the pixel-level
/// feature vectors, plus the binary cluster masks.
#[derive(Debug, Clone)]
pub struct LocalFeatures<T: Scalar> {
    pub block: FeatureBlock<T>,
    pub cluster_masks: Vec<FeatureGrid<T>>,
    pub labels: Vec<usize>,
}

pub struct LocalVars<T: Scalar> {
    pub block: Var,
    pub cluster_masks: Vec<FeatureGrid<T>>,
    pub labels: Vec<usize>,
}

/// Cluster `x_l` pixels into `d` groups (clamped to the pixel count with a
/// warning) and pool one local feature per cluster mask. The clustering is a
/// non-differentiable selection: gradients flow through the pooled features.
pub fn local_extractor_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x_l: Var,
    d: usize,
    seed: u64,
) -> Result<LocalVars<T>> {
    let shape = tape.shape(x_l).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let d = if d > hw {
        log::warn!("cluster count {d} exceeds {hw} pixels; clamping");
        hw
    } else {
        d
    };
    if d == 0 {
        return Err(Error::Config("cluster count must be positive".into()));
    }
    // pixel-major point matrix
    let vals = tape.value(x_l).data();
    let mut points = vec![T::zero(); hw * c];
    for ch in 0..c {
        for p in 0..hw {
            points[p * c + ch] = vals[ch * hw + p];
        }
    }
    let points = FeatureBlock::new(hw, c, points)?;
    let km = kmeans_features(&points, d, h, w, seed)?;
    let mut rows = Vec::with_capacity(d);
    for mask in &km.masks {
        let m = tape.constant(mask.tensor().clone());
        let pooled = tape.gwap(x_l, m, T::of_f64(GWAP_EPS));
        rows.push(tape.reshape(pooled, &[1, c]));
    }
    let block = tape.concat0(&rows);
    Ok(LocalVars {
        block,
        cluster_masks: km.masks,
        labels: km.labels,
    })
}

/// Pure wrapper over [`local_extractor_on_tape`].
pub fn local_extractor<T: Scalar>(
    x_l: &FeatureGrid<T>,
    d: usize,
    seed: u64,
) -> Result<LocalFeatures<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(x_l.tensor().clone());
    let lv = local_extractor_on_tape(&mut tape, x, d, seed)?;
    Ok(LocalFeatures {
        block: FeatureBlock::from_tensor(tape.value(lv.block).clone())?,
        cluster_masks: lv.cluster_masks,
        labels: lv.labels,
    })
}

/// Global features: per reference frame, soft object regions from a spatial
/// softmax and one pooled vector per region channel.
#[derive(Debug, Clone)]
pub struct GlobalFeatures<T: Scalar> {
    /// `N_R` blocks, each `C_G × C_G`.
    pub per_frame: Vec<FeatureBlock<T>>,
}

pub struct GlobalVars {
    pub per_frame: Vec<Var>,
}

pub fn global_extractor_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x_g: &[Var],
) -> Result<GlobalVars> {
    if x_g.is_empty() {
        return Err(Error::Config("global extractor needs >= 1 reference frame".into()));
    }
    let mut per_frame = Vec::with_capacity(x_g.len());
    for &frame in x_g {
        let shape = tape.shape(frame).to_vec();
        let c_g = shape[0];
        let regions = tape.softmax_dim1(frame); // softmax over H×W per channel
        let mut rows = Vec::with_capacity(c_g);
        for j in 0..c_g {
            let m = tape.slice0(regions, j, j + 1);
            let pooled = tape.gwap(frame, m, T::of_f64(GWAP_EPS));
            rows.push(tape.reshape(pooled, &[1, c_g]));
        }
        per_frame.push(tape.concat0(&rows));
    }
    Ok(GlobalVars { per_frame })
}

/// Pure wrapper over [`global_extractor_on_tape`].
pub fn global_extractor<T: Scalar>(x_g: &[FeatureGrid<T>]) -> Result<GlobalFeatures<T>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = x_g
        .iter()
        .map(|g| tape.constant(g.tensor().clone()))
        .collect();
    let gv = global_extractor_on_tape(&mut tape, &vars)?;
    let per_frame = gv
        .per_frame
        .iter()
        .map(|&v| FeatureBlock::from_tensor(tape.value(v).clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(GlobalFeatures { per_frame })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics;

    #[test]
    fn zero_compress_weights_give_uniform_masks_and_mean_slots() {
        let mut params = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sg = SlotGenerator::new(&mut params, "sg", 4, &mut rng);
        // zero out the compression
        for pid in [sg.compress_w, sg.compress_b] {
            let t = params.get_mut(pid);
            *t = Tensor::zeros(t.shape());
        }
        let mut tape = Tape::new();
        let x_t = tape.constant(Tensor::randn(&[4, 2, 2], &mut rng));
        let x_l_data = vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0];
        let x_l = tape.constant(Tensor::new(&[2, 2, 2], x_l_data).unwrap());
        let sv = sg.forward(&mut tape, &params, x_t, x_l).unwrap();
        for &m in tape.value(sv.masks).data() {
            assert!((m - 0.5).abs() < 1e-12);
        }
        let slots = tape.value(sv.slots);
        for i in 0..2 {
            assert!((slots.data()[i * 2] - 2.5).abs() < 1e-9);
            assert!((slots.data()[i * 2 + 1] - 25.0).abs() < 1e-7);
        }
        assert_eq!(sv.provenance, SlotProvenance::Guided);
    }

    #[test]
    fn slot_generator_shape_contract() {
        let mut params = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sg = SlotGenerator::new(&mut params, "sg", 8, &mut rng);
        let mut tape = Tape::new();
        let x_t = tape.constant(Tensor::randn(&[8, 4, 4], &mut rng));
        let x_l = tape.constant(Tensor::randn(&[64, 4, 4], &mut rng));
        let sv = sg.forward(&mut tape, &params, x_t, x_l).unwrap();
        assert_eq!(tape.shape(sv.slots), &[2, 64]);
        // per-pixel mask sums = 1
        let m = tape.value(sv.masks);
        for p in 0..16 {
            let s = m.data()[p] + m.data()[16 + p];
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn slot_generator_rejects_spatial_mismatch() {
        let mut params = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sg = SlotGenerator::new(&mut params, "sg", 4, &mut rng);
        let mut tape = Tape::new();
        let x_t = tape.constant(Tensor::zeros(&[4, 4, 4]));
        let x_l = tape.constant(Tensor::zeros(&[8, 2, 2]));
        assert!(sg.forward(&mut tape, &params, x_t, x_l).is_err());
    }

    #[test]
    fn random_slots_deterministic_and_seed_sensitive() {
        let a = random_slots::<f64>(16, 4, 4, 5);
        let b = random_slots::<f64>(16, 4, 4, 5);
        let c = random_slots::<f64>(16, 4, 4, 6);
        assert_eq!(a.slots.data(), b.slots.data());
        assert_ne!(a.slots.data(), c.slots.data());
        assert_eq!(a.provenance, SlotProvenance::Random);
        assert!(a.slot_masks.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn random_slots_are_roughly_centered() {
        // empirical mean over many draws ~ 0
        let mut sum = 0.0;
        let draws = 100;
        let c_l = 100; // 10k scalars total
        for seed in 0..draws {
            let s = random_slots::<f64>(c_l, 1, 1, seed);
            sum += s.slots.data().iter().sum::<f64>();
        }
        let mean = sum / (draws as f64 * 2.0 * c_l as f64);
        assert!(mean.abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn local_extractor_separable_rectangles() {
        // 2x4 grid: left half value 1, right half value 9
        let data = vec![1.0, 1.0, 9.0, 9.0, 1.0, 1.0, 9.0, 9.0];
        let x = FeatureGrid::new(1, 2, 4, data).unwrap();
        let lf = local_extractor(&x, 2, 3).unwrap();
        let mut rows: Vec<f64> = (0..2).map(|i| lf.block.row(i)[0]).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, vec![1.0, 9.0]);
        // masks partition
        for p in 0..8 {
            let hot: f64 = lf.cluster_masks.iter().map(|m| m.data()[p]).sum();
            assert_eq!(hot, 1.0);
        }
    }

    #[test]
    fn local_extractor_single_cluster_is_global_mean() {
        let data = vec![2.0, 4.0, 6.0, 8.0];
        let x = FeatureGrid::new(1, 2, 2, data).unwrap();
        let lf: LocalFeatures<f64> = local_extractor(&x, 1, 0).unwrap();
        assert_eq!(lf.block.count(), 1);
        assert!((lf.block.row(0)[0] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn local_extractor_rows_match_cluster_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = FeatureGrid::from_tensor(Tensor::<f64>::randn(&[6, 4, 4], &mut rng)).unwrap();
        let lf = local_extractor(&x, 8, 4).unwrap();
        for (d, mask) in lf.cluster_masks.iter().enumerate() {
            let oracle = numerics::gwap(&x, mask).unwrap();
            for (a, b) in lf.block.row(d).iter().zip(oracle.vector.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn global_extractor_constant_channels_pool_to_means() {
        // each channel constant -> softmax uniform over pixels -> pooled value
        // equals that channel's constant
        let data = vec![
            3.0, 3.0, 3.0, 3.0, // channel 0
            -1.0, -1.0, -1.0, -1.0, // channel 1
        ];
        let g = FeatureGrid::new(2, 2, 2, data).unwrap();
        let gf: GlobalFeatures<f64> = global_extractor(&[g]).unwrap();
        assert_eq!(gf.per_frame.len(), 1);
        let block = &gf.per_frame[0];
        assert_eq!(block.count(), 2);
        for j in 0..2 {
            assert!((block.row(j)[0] - 3.0).abs() < 1e-9);
            assert!((block.row(j)[1] + 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn global_extractor_matches_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frames: Vec<FeatureGrid<f64>> = (0..3)
            .map(|_| FeatureGrid::from_tensor(Tensor::randn(&[16, 8, 8], &mut rng)).unwrap())
            .collect();
        let gf = global_extractor(&frames).unwrap();
        for (t, frame) in frames.iter().enumerate() {
            let soft = numerics::softmax_spatial(frame).unwrap();
            for j in 0..16 {
                let mask = soft.channel(j);
                let oracle = numerics::gwap(frame, &mask).unwrap();
                for (a, b) in gf.per_frame[t].row(j).iter().zip(oracle.vector.data()) {
                    assert!((a - b).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn global_extractor_rejects_empty_reference_list() {
        let frames: Vec<FeatureGrid<f64>> = Vec::new();
        assert!(global_extractor(&frames).is_err());
    }
}
