//! Central finite-difference gradient checking at double precision.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// (input index, coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    let diff = (a - n).abs();
    if diff < 1e-8 {
        0.0
    } else {
        diff / a.abs().max(n.abs()).max(1e-6)
    }
}

/// Deterministic pseudo-random probe weights, used to reduce a non-scalar
/// op output to a scalar before differencing.
pub fn probe_weights(len: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9E37_79B9);
    let data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(&[len], data).unwrap()
}

/// Compare analytic gradients of a scalar-valued computation against central
/// finite differences. `build` receives a fresh tape and one `Var` per input
/// tensor and must return a scalar `Var`. At most `max_coords` evenly spaced
/// coordinates are checked per input.
pub fn grad_check<F>(
    build: F,
    inputs: &[Tensor<f64>],
    step: f64,
    max_coords: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    // analytic gradients
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = (n / max_coords.max(1)).max(1);
        let analytic = grads.get(vars[ii]);
        for coord in (0..n).step_by(stride) {
            let orig = input.data()[coord];
            work[ii].data_mut()[coord] = orig + step;
            let f_plus = eval(&work)?;
            work[ii].data_mut()[coord] = orig - step;
            let f_minus = eval(&work)?;
            work[ii].data_mut()[coord] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic.map_or(0.0, |g| g.data()[coord]);
            let e = rel_error(a, numeric);
            report.coords_checked += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = Some((ii, coord, a, numeric));
            }
        }
    }
    Ok(report)
}
