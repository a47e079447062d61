//! Central finite-difference gradient checking, shipped as a first-class
//! operation so verification suites are self-contained.

use super::params::{GradStore, ParamId, ParameterSet};
use rand::seq::SliceRandom;
use rand::Rng;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central finite difference of `f` w.r.t. one parameter coordinate.
pub fn central_difference<F: FnMut(&ParameterSet) -> f64>(
    params: &mut ParameterSet,
    id: ParamId,
    idx: usize,
    step: f64,
    f: &mut F,
) -> f64 {
    let orig = params.data(id)[idx];
    params.data_mut(id)[idx] = orig + step;
    let fp = f(params);
    params.data_mut(id)[idx] = orig - step;
    let fm = f(params);
    params.data_mut(id)[idx] = orig;
    (fp - fm) / (2.0 * step)
}

/// Compares analytic gradients against central differences on a sample of
/// coordinates. Returns the maximum relative error observed.
///
/// Relative error uses a floor of 1e-3 in the denominator so near-zero
/// gradients are compared at an absolute tolerance of ~1e-7.
pub fn max_rel_error<F: FnMut(&ParameterSet) -> f64, R: Rng>(
    params: &mut ParameterSet,
    analytic: &GradStore,
    step: f64,
    coords_per_tensor: usize,
    rng: &mut R,
    f: &mut F,
) -> f64 {
    let mut worst: f64 = 0.0;
    for id in 0..params.len() {
        let n = params.data(id).len();
        let mut idxs: Vec<usize> = (0..n).collect();
        if n > coords_per_tensor {
            idxs.shuffle(rng);
            idxs.truncate(coords_per_tensor);
        }
        for idx in idxs {
            let fd = central_difference(params, id, idx, step, f);
            let an = analytic.grads[id][idx];
            let denom = fd.abs().max(an.abs()).max(1e-3);
            worst = worst.max((fd - an).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tape::Tape;
    use crate::diffcore::tensor::TensorValue;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_loss_checks_out() {
        let mut params = ParameterSet::new();
        let p = params.register(
            "p",
            TensorValue::new(vec![4], vec![0.3, -1.2, 0.9, 2.0]).unwrap(),
        );
        let mut tape = Tape::new(true);
        let v = tape.param_vec(&params, p);
        let d = tape.dot(v, v);
        let loss = tape.scale(d, 0.5);
        let mut store = GradStore::zeros_like(&params);
        tape.backward(loss, &params, &mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = max_rel_error(
            &mut params,
            &store,
            DEFAULT_FD_STEP,
            16,
            &mut rng,
            &mut |ps: &ParameterSet| {
                let mut t = Tape::new(false);
                let v = t.param_vec(ps, p);
                let d = t.dot(v, v);
                let l = t.scale(d, 0.5);
                t.scalar(l)
            },
        );
        assert!(err < 1e-8, "err = {err}");
    }
}
