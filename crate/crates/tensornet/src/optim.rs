//! Adam and heavy-ball momentum parameter updates.

use crate::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

/// One Adam step over a flat list of parameter tensors. State is created
/// lazily on the first call and must then be reused with an identical
/// parameter layout.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamState, hyper: AdamHyper) {
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let gd = g.data();
        for i in 0..pd.len() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gd[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gd[i] * gd[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            pd[i] -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MomentumHyper {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for MomentumHyper {
    fn default() -> Self {
        MomentumHyper {
            lr: 1e-3,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct MomentumState {
    velocity: Vec<Vec<f64>>,
}

/// Heavy-ball update: v <- mu v + g; p <- p - lr v.
pub fn momentum_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut MomentumState,
    hyper: MomentumHyper,
) {
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    }
    for ((p, g), vel) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        let pd = p.data_mut();
        let gd = g.data();
        for i in 0..pd.len() {
            vel[i] = hyper.momentum * vel[i] + gd[i];
            pd[i] -= hyper.lr * vel[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr_sign() {
        let mut p = Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        let g = Tensor::from_vec(&[3], vec![0.4, -0.02, 1e-3]).unwrap();
        let mut state = AdamState::default();
        let hyper = AdamHyper {
            lr: 0.1,
            ..Default::default()
        };
        adam_step(&mut [&mut p], &[&g], &mut state, hyper);
        // bias-corrected first step is lr * g/|g| up to eps
        for (after, gi) in p.data().iter().zip(g.data()) {
            let step = 1.0 - after;
            assert!((step - 0.1 * gi.signum()).abs() < 1e-3, "step {step}");
        }
    }

    #[test]
    fn momentum_zero_grad_zero_velocity_is_noop() {
        let mut p = Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[2]);
        let mut state = MomentumState::default();
        momentum_step(&mut [&mut p], &[&g], &mut state, MomentumHyper::default());
        assert_eq!(p, before);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // f(x) = ||x||^2 from a unit-norm start
        let n = 8;
        let mut x = Tensor::filled(&[n], 1.0 / (n as f64).sqrt());
        let mut state = AdamState::default();
        let hyper = AdamHyper {
            lr: 0.01,
            ..Default::default()
        };
        for _ in 0..200 {
            let g = Tensor::from_vec(&[n], x.data().iter().map(|v| 2.0 * v).collect()).unwrap();
            adam_step(&mut [&mut x], &[&g], &mut state, hyper);
        }
        let norm = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-2, "|x| = {norm}");
    }
}
