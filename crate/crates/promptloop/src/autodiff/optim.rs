//! Adam / AdamW with bias correction.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimKind {
    /// Adam; weight decay (if any) is coupled, added to the gradient.
    Adam,
    /// AdamW; weight decay is decoupled from the moment estimates.
    AdamW,
}

impl OptimKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimKind::Adam => "adam",
            OptimKind::AdamW => "adamw",
        }
    }

    pub fn parse(s: &str) -> Option<OptimKind> {
        match s {
            "adam" => Some(OptimKind::Adam),
            "adamw" => Some(OptimKind::AdamW),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState<T: Real> {
    pub kind: OptimKind,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(kind: OptimKind, lr: f64, weight_decay: f64, shapes: &[&[usize]]) -> Self {
        OptimState {
            kind,
            lr: T::c(lr),
            beta1: T::c(0.9),
            beta2: T::c(0.999),
            eps: T::c(1e-8),
            weight_decay: T::c(weight_decay),
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn for_params(kind: OptimKind, lr: f64, weight_decay: f64, params: &[Tensor<T>]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        Self::new(kind, lr, weight_decay, &shapes)
    }
}

/// One optimizer step, updating `params` in place.
pub fn optim_step<T: Real>(
    state: &mut OptimState<T>,
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::numerical(
            "optim_step",
            format!(
                "param/grad/state count mismatch: {} params, {} grads, {} slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for i in 0..params.len() {
        if params[i].shape() != grads[i].shape() || params[i].shape() != state.m[i].shape() {
            return Err(Error::numerical(
                "optim_step",
                format!(
                    "shape mismatch at param {i}: param {:?}, grad {:?}, state {:?}",
                    params[i].shape(),
                    grads[i].shape(),
                    state.m[i].shape()
                ),
            ));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::one() - state.beta1.powf(T::c(t as f64));
    let bc2 = T::one() - state.beta2.powf(T::c(t as f64));
    let one = T::one();

    for i in 0..params.len() {
        let p = params[i].data_mut();
        let gsrc = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let mut g = gsrc[j];
            if !g.is_finite() {
                return Err(Error::numerical("optim_step", format!("non-finite gradient at param {i}[{j}]")));
            }
            if state.kind == OptimKind::Adam {
                g += state.weight_decay * p[j];
            }
            m[j] = state.beta1 * m[j] + (one - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (one - state.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            let mut delta = mhat / (vhat.sqrt() + state.eps);
            if state.kind == OptimKind::AdamW {
                delta += state.weight_decay * p[j];
            }
            p[j] -= state.lr * delta;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_bit_exact_identity() {
        let mut params = vec![Tensor::new(&[3], vec![0.25, -1.5, 3.75f64])];
        let before = params.clone();
        let grads = vec![Tensor::zeros(&[3])];
        let mut st = OptimState::for_params(OptimKind::Adam, 1e-3, 0.0, &params);
        for _ in 0..5 {
            optim_step(&mut st, &mut params, &grads).unwrap();
        }
        assert_eq!(params, before);
        let mut st = OptimState::for_params(OptimKind::AdamW, 1e-3, 0.0, &params);
        optim_step(&mut st, &mut params, &grads).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adamw_decay_shrinks_weights_monotonically() {
        let mut params = vec![Tensor::new(&[2], vec![2.0, -2.0f64])];
        let grads = vec![Tensor::zeros(&[2])];
        let mut st = OptimState::for_params(OptimKind::AdamW, 0.1, 0.01, &params);
        let mut prev = 2.0;
        for _ in 0..10 {
            optim_step(&mut st, &mut params, &grads).unwrap();
            let now = params[0].data()[0];
            assert!(now < prev && now > 0.0, "{now} vs {prev}");
            assert_eq!(params[0].data()[1], -now);
            prev = now;
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_gradient_sign() {
        // With bias correction, step 1 moves by ~lr * g/|g| (eps aside).
        let mut params = vec![Tensor::new(&[2], vec![0.0, 0.0f64])];
        let grads = vec![Tensor::new(&[2], vec![10.0, -0.001])];
        let mut st = OptimState::for_params(OptimKind::Adam, 0.5, 0.0, &params);
        optim_step(&mut st, &mut params, &grads).unwrap();
        assert!((params[0].data()[0] + 0.5).abs() < 1e-6);
        assert!((params[0].data()[1] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut params = vec![Tensor::zeros(&[3])];
        let grads = vec![Tensor::<f64>::zeros(&[2])];
        let mut st = OptimState::for_params(OptimKind::Adam, 1e-3, 0.0, &params);
        assert!(optim_step(&mut st, &mut params, &grads).is_err());
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // minimize (x-3)^2
        let mut params = vec![Tensor::scalar(0.0f64)];
        let mut st = OptimState::for_params(OptimKind::Adam, 0.1, 0.0, &params);
        for _ in 0..400 {
            let x = params[0].item();
            let g = vec![Tensor::scalar(2.0 * (x - 3.0))];
            optim_step(&mut st, &mut params, &g).unwrap();
        }
        assert!((params[0].item() - 3.0).abs() < 1e-2);
    }
}
