//! Dense-matrix math, reverse-mode autodiff for feedforward MLPs with layer
//! normalization, Adam, gradient clipping, EMA target updates, and running
//! normalization statistics. Everything is f64 and CPU-only.

mod adam;
mod matrix;
mod mlp;
mod stats;
mod tape;

pub use adam::{adam_step, clip_global_norm, ema_update, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use matrix::Matrix;
pub use mlp::{
    activation, layer_norm, linear_forward, Activation, LayerParams, LayerSpec, MlpSpec,
    ParamKind, ParamSet, LAYER_NORM_EPS,
};
pub use stats::{RunningStats, NORMALIZE_EPS};
pub use tape::{softplus, GradSink, NodeGrads, NodeId, Slot, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite value: {0}")]
    NonFinite(&'static str),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
}

#[cfg(test)]
mod grad_tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Loss of a 3-layer LayerNorm+ELU MLP as a pure function of params and
    /// input, used as the finite-difference target.
    fn mlp_scalar_loss(params: &ParamSet, x: &Matrix, target: &Matrix) -> f64 {
        let y = params.forward(x);
        let mut sum = 0.0;
        for (a, b) in y.data().iter().zip(target.data()) {
            sum += (a - b) * (a - b);
        }
        sum / y.len() as f64
    }

    #[test]
    fn linear_gradient_is_all_ones_for_identity_sum() {
        // loss = mean(x W) with W = I: dL/dx = 1/n each.
        let layer = LayerParams {
            w: Matrix::identity(3),
            b: Matrix::zeros(1, 3),
            ln_gain: None,
            ln_offset: None,
        };
        let mut sink = GradSink::for_nets(&[vec![&layer.w, &layer.b]]);
        let mut tape = Tape::new();
        let x = tape.input(Matrix::from_vec(1, 3, vec![0.3, -0.7, 2.0]).unwrap());
        let y = tape.linear(x, &layer, Slot { net: 0, tensor: 0 }, Slot { net: 0, tensor: 1 });
        let loss = tape.mse_loss(y, Matrix::zeros(1, 3));
        // d mean((x)^2) / dx = 2x/3; check against analytic value instead of ones
        // for the MSE form, then the pure-sum case via weights.
        let node_grads = tape.backward(&[(loss, 1.0)], &mut sink);
        let gx = node_grads.get(x).unwrap();
        for (g, xv) in gx.data().iter().zip([0.3, -0.7, 2.0]) {
            assert!((g - 2.0 * xv / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _case in 0..5 {
            let spec = MlpSpec::layer_norm_stack(4, &[6, 5, 3]);
            let mut params = ParamSet::init(spec, &mut rng, 1.0);
            let x = rand_matrix(&mut rng, 2, 4);
            let target = rand_matrix(&mut rng, 2, 3);

            let mut sink = GradSink::for_nets(&[params.tensors().into_iter().collect()]);
            let mut tape = Tape::new();
            let xid = tape.input(x.clone());
            let y = tape.mlp(0, &params, xid, false);
            let loss = tape.mse_loss(y, target.clone());
            let node_grads = tape.backward(&[(loss, 1.0)], &mut sink);
            let analytic_input = node_grads.get(xid).unwrap().clone();
            let analytic = sink.nets.remove(0);

            let h = 1e-5;
            // Every parameter tensor.
            for ti in 0..analytic.len() {
                for i in 0..analytic[ti].len() {
                    let orig = params.tensors()[ti].data()[i];
                    params.tensors_mut()[ti].data_mut()[i] = orig + h;
                    let up = mlp_scalar_loss(&params, &x, &target);
                    params.tensors_mut()[ti].data_mut()[i] = orig - h;
                    let dn = mlp_scalar_loss(&params, &x, &target);
                    params.tensors_mut()[ti].data_mut()[i] = orig;
                    let fd = (up - dn) / (2.0 * h);
                    let ad = analytic[ti].data()[i];
                    let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-4);
                    assert!(rel < 1e-4, "tensor {ti} entry {i}: ad={ad} fd={fd}");
                }
            }
            // Input gradient.
            let mut xp = x.clone();
            for i in 0..x.len() {
                let orig = x.data()[i];
                xp.data_mut()[i] = orig + h;
                let up = mlp_scalar_loss(&params, &xp, &target);
                xp.data_mut()[i] = orig - h;
                let dn = mlp_scalar_loss(&params, &xp, &target);
                xp.data_mut()[i] = orig;
                let fd = (up - dn) / (2.0 * h);
                let ad = analytic_input.data()[i];
                let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-4);
                assert!(rel < 1e-4, "input entry {i}: ad={ad} fd={fd}");
            }
        }
    }

    #[test]
    fn symmetric_bce_has_zero_logit_gradient() {
        // Zero logit (sigmoid 0.5) against target 0.5 sits at the BCE minimum.
        let mut sink = GradSink::for_nets(&[]);
        let mut tape = Tape::new();
        let logits = tape.input(Matrix::zeros(1, 4));
        let loss =
            tape.bce_logits_loss(logits, Matrix::filled(1, 4, 0.5), 1.0);
        let node_grads = tape.backward(&[(loss, 1.0)], &mut sink);
        let g = node_grads.get(logits).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn bce_reference_values() {
        // o=1, sigmoid(l)=0.5, p_c=10 -> 10*ln2; o=0 -> ln2.
        let mut tape = Tape::new();
        let logits = tape.input(Matrix::zeros(1, 1));
        let pos = tape.bce_logits_loss(logits, Matrix::filled(1, 1, 1.0), 10.0);
        let lnn2 = std::f64::consts::LN_2;
        assert!((tape.scalar(pos) - 10.0 * lnn2).abs() < 1e-12);

        let mut tape = Tape::new();
        let logits = tape.input(Matrix::zeros(1, 1));
        let neg = tape.bce_logits_loss(logits, Matrix::zeros(1, 1), 10.0);
        assert!((tape.scalar(neg) - lnn2).abs() < 1e-12);
    }

    #[test]
    fn gaussian_log_prob_reference_value() {
        // 1-D, mean 0, std 1, a=1: logp = -0.5 ln(2pi) - 0.5.
        let log_std = Matrix::zeros(1, 1);
        let mut tape = Tape::new();
        let mean = tape.input(Matrix::zeros(1, 1));
        let lp = tape.gaussian_log_prob(
            mean,
            &log_std,
            Slot { net: 0, tensor: 0 },
            Matrix::filled(1, 1, 1.0),
        );
        let expect = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5;
        assert!((tape.value(lp).get(0, 0) - expect).abs() < 1e-12);
        assert!((tape.value(lp).get(0, 0) + 1.4189).abs() < 1e-4);
    }

    #[test]
    fn gaussian_entropy_closed_form() {
        let log_std = Matrix::filled(1, 3, -0.5);
        let mut tape = Tape::new();
        let h = tape.gaussian_entropy(&log_std, Slot { net: 0, tensor: 0 });
        let expect = 3.0 * (0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() - 0.5);
        assert!((tape.scalar(h) - expect).abs() < 1e-12);
    }

    #[test]
    fn ppo_clip_surrogate_hand_case() {
        // rho = 2, A = 1, clip 0.2 -> per-sample surrogate min(2, 1.2) = 1.2.
        let log_std = Matrix::zeros(1, 1);
        let _ = &log_std;
        let mut tape = Tape::new();
        let lp = tape.input(Matrix::from_vec(1, 1, vec![std::f64::consts::LN_2]).unwrap());
        let loss = tape.ppo_clip_loss(lp, vec![0.0], vec![1.0], 0.2);
        assert!((tape.scalar(loss) + 1.2).abs() < 1e-12);
    }

    #[test]
    fn clipped_value_loss_zero_at_targets() {
        let mut tape = Tape::new();
        let v = tape.input(Matrix::from_vec(2, 1, vec![0.3, -0.8]).unwrap());
        let loss = tape.clipped_value_loss(v, vec![0.3, -0.8], vec![0.3, -0.8], 0.2);
        assert_eq!(tape.scalar(loss), 0.0);
    }
}
