use serde::{Deserialize, Serialize};

use super::graph::ParamSpec;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of steps taken.
    pub t: u64,
    pub names: Vec<String>,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[ParamSpec]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            names: params.iter().map(|p| p.name.clone()).collect(),
            m: params.iter().map(|p| vec![T::zero(); p.shape.iter().product()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.shape.iter().product()]).collect(),
        }
    }

    /// One bias-corrected Adam update in place. Nothing is modified when a
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam state holds {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::shape(format!("parameter `{}` changed size", self.names[i])));
            }
            if let Some(bad) = g.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter `{}` at index {bad}",
                    self.names[i]
                )));
            }
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        let one = T::one();
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pi, &gi), mi), vi) in p.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi = *pi - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state() -> (AdamState<f64>, Vec<Tensor<f64>>) {
        let spec = [ParamSpec {
            name: "w".into(),
            shape: [1, 1, 1, 1],
        }];
        (AdamState::new(&spec), vec![Tensor::scalar(0.5)])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, mut p) = scalar_state();
        s.step(&mut p, &[Tensor::scalar(0.0)], 1e-3).unwrap();
        assert_eq!(p[0].item(), 0.5);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn matches_hand_recurrence() {
        let (mut s, mut p) = scalar_state();
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.5f64);
        for t in 1..=3 {
            s.step(&mut p, &[Tensor::scalar(1.0)], 1e-3).unwrap();
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 1e-3 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0].item() - x).abs() < 1e-12);
        // with g = 1 every bias-corrected ratio is 1
        assert!((p[0].item() - (0.5 - 3.0 * 1e-3 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        for g in [-3.0, 1e-3, 250.0] {
            let (mut s, mut p) = scalar_state();
            s.step(&mut p, &[Tensor::scalar(g)], 1e-3).unwrap();
            let d = p[0].item() - 0.5;
            assert!((d.abs() - 1e-3).abs() < 1e-3 * 1e-4, "{d}");
            assert_eq!(d.signum(), -g.signum());
        }
    }

    #[test]
    fn lr_scale_equivariant() {
        // start at 0 so the displacement is read back without rounding
        let (mut s1, _) = scalar_state();
        let (mut s2, _) = scalar_state();
        let mut p1 = vec![Tensor::scalar(0.0)];
        let mut p2 = vec![Tensor::scalar(0.0)];
        s1.step(&mut p1, &[Tensor::scalar(0.7)], 1e-3).unwrap();
        s2.step(&mut p2, &[Tensor::scalar(0.7)], 2e-3).unwrap();
        assert_eq!(2.0 * p1[0].item(), p2[0].item());
    }

    #[test]
    fn non_finite_gradient_named() {
        let (mut s, mut p) = scalar_state();
        let e = s.step(&mut p, &[Tensor::scalar(f64::NAN)], 1e-3).unwrap_err();
        assert!(e.to_string().contains("`w`"));
        assert_eq!(s.t, 0);
        assert_eq!(p[0].item(), 0.5);
        assert!(s.step(&mut p, &[Tensor::scalar(1.0)], 0.0).is_err());
    }
}
