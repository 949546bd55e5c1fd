use serde::{Deserialize, Serialize};

use super::{Matrix, NumericsError, ParamSet};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators mirroring one net's tensor list.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn for_tensors(tensors: &[&Matrix]) -> Self {
        AdamState {
            m: tensors.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect(),
            v: tensors.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect(),
            step: 0,
        }
    }

    pub fn for_params(params: &ParamSet) -> Self {
        Self::for_tensors(&params.tensors())
    }
}

/// One Adam update over a net's tensors. Errors on non-finite gradients
/// before touching any state.
pub fn adam_step(
    tensors: &mut [&mut Matrix],
    grads: &[Matrix],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), NumericsError> {
    if tensors.len() != grads.len() || tensors.len() != state.m.len() {
        return Err(NumericsError::ShapeMismatch {
            context: "adam_step",
            expected: format!("{} tensors", tensors.len()),
            got: format!("{} grads / {} moments", grads.len(), state.m.len()),
        });
    }
    for g in grads {
        if !g.all_finite() {
            return Err(NumericsError::NonFinite("gradient passed to adam_step"));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for ((tensor, grad), (m, v)) in tensors
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        debug_assert_eq!(tensor.shape(), grad.shape());
        let td = tensor.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..td.len() {
            let g = grad.data()[i];
            md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * g;
            vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            td[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip global norm.
pub fn clip_global_norm(grads: &mut [Vec<Matrix>], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0);
    let sq: f64 = grads.iter().flatten().map(|g| g.sq_sum()).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.scale(s);
        }
    }
    norm
}

/// theta_T <- (1 - tau) * theta_T + tau * theta.
pub fn ema_update(target: &mut ParamSet, online: &ParamSet, tau: f64) -> Result<(), NumericsError> {
    if target.spec != online.spec {
        return Err(NumericsError::ShapeMismatch {
            context: "ema_update",
            expected: "matching MlpSpec".into(),
            got: "different spec".into(),
        });
    }
    let online_tensors = online.tensors();
    for (t, o) in target.tensors_mut().into_iter().zip(online_tensors) {
        let td = t.data_mut();
        for (a, b) in td.iter_mut().zip(o.data()) {
            *a = (1.0 - tau) * *a + tau * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Activation, MlpSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_params(seed: u64) -> ParamSet {
        let spec = MlpSpec::elu_head(3, &[4], 2, Activation::Identity);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ParamSet::init(spec, &mut rng, 1.0)
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = small_params(1);
        let before = p.clone();
        let grads = p.zero_grads();
        let mut st = AdamState::for_params(&p);
        adam_step(&mut p.tensors_mut(), &grads, &mut st, 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_signed_lr() {
        // With bias correction, step 1 gives delta = -lr * g / (|g| + eps')
        // which is ~ -lr * sign(g) for |g| >> eps.
        let mut w = Matrix::from_vec(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let g = Matrix::from_vec(1, 3, vec![0.5, -2.0, 1e-3]).unwrap();
        let mut st = AdamState::for_tensors(&[&w]);
        adam_step(&mut [&mut w], std::slice::from_ref(&g), &mut st, 0.01).unwrap();
        for (wv, gv) in w.data().iter().zip(g.data()) {
            assert!((wv + 0.01 * gv.signum()).abs() < 1e-5, "w={wv} g={gv}");
        }
    }

    #[test]
    fn determinism_under_state_clone() {
        let mut p1 = small_params(2);
        let mut p2 = p1.clone();
        let grads: Vec<Matrix> =
            p1.tensors().iter().map(|t| t.map(|_| 0.123)).collect();
        let mut s1 = AdamState::for_params(&p1);
        let mut s2 = s1.clone();
        adam_step(&mut p1.tensors_mut(), &grads, &mut s1, 3e-4).unwrap();
        adam_step(&mut p2.tensors_mut(), &grads, &mut s2, 3e-4).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(s1.m, s2.m);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = small_params(3);
        let mut grads = p.zero_grads();
        grads[0].data_mut()[0] = f64::NAN;
        let mut st = AdamState::for_params(&p);
        assert!(adam_step(&mut p.tensors_mut(), &grads, &mut st, 1e-3).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clip_norm_cases() {
        // Below threshold: unchanged.
        let mut g = vec![vec![Matrix::from_vec(1, 2, vec![0.3, 0.4]).unwrap()]];
        let norm = clip_global_norm(&mut g, 1.0);
        assert!((norm - 0.5).abs() < 1e-12);
        assert_eq!(g[0][0].data(), &[0.3, 0.4]);

        // Above: scaled to max_norm, direction preserved.
        let mut g = vec![vec![Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap()]];
        let norm = clip_global_norm(&mut g, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((g[0][0].data()[0] - 0.6).abs() < 1e-12);
        assert!((g[0][0].data()[1] - 0.8).abs() < 1e-12);

        // Zero stays zero.
        let mut g = vec![vec![Matrix::zeros(2, 2)]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 0.0);
        assert_eq!(g[0][0], Matrix::zeros(2, 2));
    }

    #[test]
    fn ema_blend_and_fixed_point() {
        let online = small_params(4);
        let mut target = small_params(5);

        // theta_T = 0, theta = 1, tau = 0.01 -> 0.01.
        let mut t0 = Matrix::zeros(2, 2);
        let o1 = Matrix::filled(2, 2, 1.0);
        let mut tmp_target = online.clone();
        let mut tmp_online = online.clone();
        for t in tmp_target.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        for t in tmp_online.tensors_mut() {
            t.data_mut().fill(1.0);
        }
        ema_update(&mut tmp_target, &tmp_online, 0.01).unwrap();
        for t in tmp_target.tensors() {
            assert!(t.data().iter().all(|v| (v - 0.01).abs() < 1e-15));
        }
        let _ = (&mut t0, &o1);

        // Fixed point.
        let mut same = online.clone();
        ema_update(&mut same, &online, 0.01).unwrap();
        assert_eq!(same, online);

        // Geometric contraction toward fixed online params.
        for _ in 0..10 {
            ema_update(&mut target, &online, 0.01).unwrap();
        }
        let factor = 0.99f64.powi(10);
        let t5 = small_params(5);
        for ((t, o), t_init) in
            target.tensors().iter().zip(online.tensors()).zip(t5.tensors())
        {
            for i in 0..t.len() {
                let expect = o.data()[i] + factor * (t_init.data()[i] - o.data()[i]);
                assert!((t.data()[i] - expect).abs() < 1e-12);
            }
        }
    }
}
