//! Central finite-difference verification of tape gradients.
//!
//! The check builds the same computation twice: once on the tape (analytic
//! gradients via the backward pass, seeded with ones so the implied scalar is
//! the sum of all outputs) and once numerically, perturbing one input element
//! at a time by `+/- eps` and differencing the summed output. It reports the
//! worst relative error over all elements of the checked input.

use super::graph::{Graph, VarId};
use super::{Tensor4, TensorError};

pub const DEFAULT_EPS: f64 = 1e-6;

/// Relative error between an analytic and a numeric derivative, guarded
/// against division by zero for pairs that are both (near) zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-12, analytic.abs() + numeric.abs())
}

/// Checks d(sum of outputs)/d(inputs[check]) and returns the worst relative
/// error. `build` must construct the same computation every time it is
/// called; it receives one leaf id per input, in order.
pub fn grad_check_many(
    inputs: &[Tensor4],
    check: usize,
    eps: f64,
    build: impl Fn(&mut Graph, &[VarId]) -> Result<VarId, TensorError>,
) -> Result<f64, TensorError> {
    assert!(check < inputs.len(), "checked input index out of range");
    assert!(eps > 0.0, "finite-difference step must be positive");

    let evaluate = |perturbed: &Tensor4| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let ids: Vec<VarId> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| g.leaf(if i == check { perturbed.clone() } else { t.clone() }))
            .collect();
        let root = build(&mut g, &ids)?;
        Ok(g.value(root).data().iter().sum())
    };

    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = build(&mut g, &ids)?;
    g.backward_ones(root)?;
    let analytic: Vec<f64> = match g.grad(ids[check]) {
        Some(t) => t.data().to_vec(),
        // No gradient path: the output is constant in this input.
        None => vec![0.0; inputs[check].shape().count()],
    };

    let mut worst = 0.0f64;
    let mut probe = inputs[check].clone();
    for i in 0..probe.data().len() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + eps;
        let plus = evaluate(&probe)?;
        probe.data_mut()[i] = original - eps;
        let minus = evaluate(&probe)?;
        probe.data_mut()[i] = original;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Single-input convenience wrapper around [`grad_check_many`].
pub fn grad_check(
    x: &Tensor4,
    build: impl Fn(&mut Graph, VarId) -> Result<VarId, TensorError>,
) -> Result<f64, TensorError> {
    grad_check_many(std::slice::from_ref(x), 0, DEFAULT_EPS, |g, ids| {
        build(g, ids[0])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::ConvParams;
    use crate::tensor::rng::Rng;
    use crate::tensor::Shape4;

    fn seeded(shape: Shape4, seed: u64) -> Tensor4 {
        let mut rng = Rng::seeded(seed);
        let mut t = Tensor4::zeros(shape);
        for v in t.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        t
    }

    /// Seeded values kept away from zero so kinked activations and pooling
    /// ties never sit within the finite-difference step.
    fn seeded_away_from_zero(shape: Shape4, seed: u64) -> Tensor4 {
        let mut t = seeded(shape, seed);
        for v in t.data_mut() {
            if v.abs() < 1e-2 {
                *v += 0.05_f64.copysign(*v + 1e-30);
            }
        }
        t
    }

    #[test]
    fn linear_maps_check_out_at_roundoff_level() {
        // d(sum(x + x))/dx = 2 exactly; only floating-point noise remains.
        // Small magnitudes keep the summed output near zero, so differencing
        // it does not sit on a cancellation floor.
        let mut x = seeded(Shape4::new(1, 2, 3, 3), 71);
        for v in x.data_mut() {
            *v *= 1e-2;
        }
        let err = grad_check(&x, |g, xid| g.add(xid, xid)).unwrap();
        assert!(err < 1e-10, "linear map finite differences drifted: {err}");
    }

    #[test]
    fn conv_gradients_match_finite_differences_for_all_leaves() {
        let x = seeded(Shape4::new(1, 2, 5, 5), 72);
        let mut rng = Rng::seeded(73);
        let p = ConvParams::he_init(3, 2, 3, 1, 1, &mut rng).unwrap();
        let inputs = [x, p.weight.clone(), p.bias.clone()];
        for check in 0..3 {
            let err = grad_check_many(&inputs, check, DEFAULT_EPS, |g, ids| {
                g.conv2d(ids[0], ids[1], ids[2], 1, 1)
            })
            .unwrap();
            assert!(err < 1e-5, "conv leaf {check} gradient error {err}");
        }
    }

    #[test]
    fn piecewise_ops_check_out_away_from_their_kinks() {
        let x = seeded_away_from_zero(Shape4::new(1, 2, 4, 4), 74);
        let err = grad_check(&x, |g, xid| g.leaky_relu(xid, 0.1)).unwrap();
        assert!(err < 1e-5, "leaky_relu gradient error {err}");

        let err = grad_check(&x, |g, xid| g.maxpool2(xid)).unwrap();
        assert!(err < 1e-5, "maxpool gradient error {err}");
    }

    #[test]
    fn a_mixed_chain_checks_out() {
        let x = seeded_away_from_zero(Shape4::new(1, 4, 4, 4), 75);
        let mut rng = Rng::seeded(76);
        // space_to_depth2 turns 4 channels into 16.
        let p = ConvParams::he_init(4, 16, 1, 1, 0, &mut rng).unwrap();
        let inputs = [x, p.weight.clone(), p.bias.clone()];
        let err = grad_check_many(&inputs, 0, DEFAULT_EPS, |g, ids| {
            let packed = g.space_to_depth2(ids[0])?;
            let mixed = g.conv2d(packed, ids[1], ids[2], 1, 0)?;
            let act = g.leaky_relu(mixed, 0.1)?;
            let up = g.upsample_nearest2(act);
            g.maxpool2(up)
        })
        .unwrap();
        assert!(err < 1e-5, "composite chain gradient error {err}");
    }

    #[test]
    fn constant_outputs_report_zero_error() {
        // The output ignores ids[0], so analytic and numeric are both zero.
        let x = seeded(Shape4::new(1, 1, 2, 2), 77);
        let c = Tensor4::from_row(&[5.0]);
        let err = grad_check_many(&[x, c], 0, DEFAULT_EPS, |_g, ids| Ok(ids[1])).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rel_err_is_symmetric_and_guarded() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!(rel_err(1.0, 1.0) < 1e-15);
        assert!((rel_err(1.0, 0.0) - 1.0).abs() < 1e-15);
        assert_eq!(rel_err(2.0, 1.0), rel_err(1.0, 2.0));
    }
}
