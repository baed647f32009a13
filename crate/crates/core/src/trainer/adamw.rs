//! AdamW with decoupled weight decay: the decay shrinks the parameter
//! directly before the adaptive step, it never enters the moment estimates.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug)]
pub struct AdamW<S: Scalar> {
    cfg: AdamWConfig,
    t: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    /// Moment buffers start at zero, one pair per parameter, in the caller's
    /// parameter order. That order must not change between steps.
    pub fn new(cfg: AdamWConfig, params: &[(String, &Tensor<S>)]) -> Self {
        let m = params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        let v = params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        AdamW { cfg, t: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all parameters. `grads` align with the constructor's
    /// parameter order.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor<S>)], grads: &[Tensor<S>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer holds {} parameter slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dim(format!(
                    "{name}: gradient shape {:?} does not match parameter shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::numeric(format!("non-finite gradient for {name}")));
            }
        }
        self.t += 1;
        let lr = S::from_f64(self.cfg.lr);
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let one = S::one();
        let eps = S::from_f64(self.cfg.eps);
        let decay = S::from_f64(self.cfg.lr * self.cfg.weight_decay);
        let bc1 = S::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = S::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        for (pi, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[pi].data_mut();
            let v = self.v[pi].data_mut();
            let pd = p.data_mut();
            for (ei, &ge) in g.data().iter().enumerate() {
                pd[ei] = pd[ei] - decay * pd[ei];
                m[ei] = b1 * m[ei] + (one - b1) * ge;
                v[ei] = b2 * v[ei] + (one - b2) * ge * ge;
                let m_hat = m[ei] / bc1;
                let v_hat = v[ei] / bc2;
                pd[ei] = pd[ei] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: wd }
    }

    fn one_param(value: f64) -> Vec<(String, Tensor<f64>)> {
        vec![("p".to_string(), Tensor::new(vec![1], vec![value]).unwrap())]
    }

    fn step(
        opt: &mut AdamW<f64>,
        params: &mut [(String, Tensor<f64>)],
        grads: &[Tensor<f64>],
    ) {
        let mut views: Vec<(String, &mut Tensor<f64>)> =
            params.iter_mut().map(|(n, t)| (n.clone(), t)).collect();
        opt.step(&mut views, grads).unwrap();
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let mut params = one_param(0.0);
        let refs: Vec<(String, &Tensor<f64>)> =
            params.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut opt = AdamW::new(cfg(0.0), &refs);
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        step(&mut opt, &mut params, &[g]);
        // bias correction makes the first step lr * g/|g| up to eps
        let got = params[0].1.data()[0];
        assert!((got + 0.1).abs() < 1e-8, "got {got}");
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = one_param(0.7);
        let refs: Vec<(String, &Tensor<f64>)> =
            params.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut opt = AdamW::new(cfg(0.0), &refs);
        for _ in 0..3 {
            let g = Tensor::new(vec![1], vec![0.0]).unwrap();
            step(&mut opt, &mut params, &[g]);
        }
        assert_eq!(params[0].1.data()[0], 0.7);
    }

    #[test]
    fn three_steps_match_hand_rolled_reference() {
        let grads = [0.3, -1.2, 0.05];
        let (lr, b1, b2, eps, wd) = (0.1, 0.9, 0.999, 1e-8, 0.04);
        let mut params = one_param(0.5);
        let refs: Vec<(String, &Tensor<f64>)> =
            params.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut opt = AdamW::new(cfg(wd), &refs);
        for &ge in &grads {
            let g = Tensor::new(vec![1], vec![ge]).unwrap();
            step(&mut opt, &mut params, &[g]);
        }

        // reference trajectory, written out step by step
        let mut theta = 0.5;
        let (mut m, mut v) = (0.0, 0.0);
        for (i, &ge) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            theta -= lr * wd * theta;
            m = b1 * m + (1.0 - b1) * ge;
            v = b2 * v + (1.0 - b2) * ge * ge;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        let got = params[0].1.data()[0];
        assert!((got - theta).abs() < 1e-12, "got {got}, want {theta}");
    }

    #[test]
    fn decay_shrinks_even_with_zero_gradient() {
        let mut params = one_param(1.0);
        let refs: Vec<(String, &Tensor<f64>)> =
            params.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut opt = AdamW::new(cfg(0.5), &refs);
        let g = Tensor::new(vec![1], vec![0.0]).unwrap();
        step(&mut opt, &mut params, &[g]);
        // decoupled decay applies regardless of the gradient
        assert!((params[0].1.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_is_a_numeric_error() {
        let mut params = one_param(0.0);
        let refs: Vec<(String, &Tensor<f64>)> =
            params.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut opt = AdamW::new(cfg(0.0), &refs);
        let mut g = Tensor::new(vec![1], vec![0.0]).unwrap();
        g.data_mut()[0] = f64::NAN;
        let mut views: Vec<(String, &mut Tensor<f64>)> =
            params.iter_mut().map(|(n, t)| (n.clone(), t)).collect();
        assert!(matches!(
            opt.step(&mut views, &[g]),
            Err(crate::error::Error::Numeric(_))
        ));
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let mut params = one_param(0.0);
        let refs: Vec<(String, &Tensor<f64>)> =
            params.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut opt = AdamW::new(cfg(0.0), &refs);
        let mut views: Vec<(String, &mut Tensor<f64>)> =
            params.iter_mut().map(|(n, t)| (n.clone(), t)).collect();
        assert!(opt.step(&mut views, &[]).is_err());
    }
}
