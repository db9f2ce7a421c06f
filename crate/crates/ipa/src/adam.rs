//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second-moment accumulators for one ordered parameter list.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn for_params(params: &[&Tensor<f32>]) -> Self {
        Self::new(&params.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<f32>], &[Tensor<f32>]) {
        (&self.m, &self.v)
    }

    /// One Adam update in place. `params` and `grads` must align with the
    /// shapes this state was created for.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<f32>],
        grads: &[&Tensor<f32>],
        learning_rate: f64,
    ) -> Result<()> {
        if learning_rate < 0.0 {
            return Err(Error::Domain(format!(
                "learning rate must be >= 0, got {learning_rate}"
            )));
        }
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != grads[i].shape() || p.shape() != self.m[i].shape() {
                return Err(Error::Shape(format!(
                    "adam: param {} shape {:?}, grad {:?}, moment {:?}",
                    i,
                    p.shape(),
                    grads[i].shape(),
                    self.m[i].shape()
                )));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for i in 0..params.len() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].data();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] as f64 / bc1;
                let vhat = v[j] as f64 / bc2;
                p[j] -= (learning_rate * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecs(t: &Tensor<f32>) -> Vec<f32> {
        t.data().to_vec()
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut p = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = vecs(&p);
        let g = Tensor::zeros(vec![3]);
        let mut state = AdamState::new(&[vec![3]]);
        for _ in 0..5 {
            state.step(&mut [&mut p], &[&g], 0.1).unwrap();
        }
        assert_eq!(vecs(&p), before);
        assert_eq!(state.step_count(), 5);
    }

    #[test]
    fn first_step_with_unit_grad_moves_by_lr() {
        let mut p = Tensor::from_vec(vec![2], vec![0.0, 1.0]).unwrap();
        let g = Tensor::filled(vec![2], 1.0);
        let mut state = AdamState::new(&[vec![2]]);
        state.step(&mut [&mut p], &[&g], 0.1).unwrap();
        // bias-corrected mhat = vhat = 1 at t = 1, so the update is
        // -lr / (1 + eps) ~ -0.1
        assert!((p.data()[0] - (-0.1)).abs() < 1e-6);
        assert!((p.data()[1] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = Tensor::<f32>::from_vec(vec![2], vec![0.25, -3.5]).unwrap();
        let bits: Vec<u32> = p.data().iter().map(|x| x.to_bits()).collect();
        let g = Tensor::<f32>::from_vec(vec![2], vec![7.0, -0.1]).unwrap();
        let mut state = AdamState::new(&[vec![2]]);
        state.step(&mut [&mut p], &[&g], 0.0).unwrap();
        let after: Vec<u32> = p.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits, after);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::<f32>::zeros(vec![3]);
        let g = Tensor::<f32>::zeros(vec![2]);
        let mut state = AdamState::new(&[vec![3]]);
        assert!(matches!(
            state.step(&mut [&mut p], &[&g], 0.1),
            Err(Error::Shape(_))
        ));
    }
}
