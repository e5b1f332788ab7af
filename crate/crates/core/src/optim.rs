//! Adam with bias correction and the warmup / inverse-sqrt schedule.

use std::collections::BTreeMap;

use crate::error::{config_err, shape_err, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// `base · min(step / warmup, sqrt(warmup / step))`, for `step ≥ 1`.
pub fn lr_schedule(step: u64, base_lr: f64, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(config_err!("learning-rate schedule starts at step 1"));
    }
    if warmup == 0 {
        return Ok(base_lr);
    }
    let (s, w) = (step as f64, warmup as f64);
    Ok(base_lr * (s / w).min((w / s).sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Moment buffers keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar = f32> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter in `params` at learning rate `lr`.
    /// Parameters without a gradient are treated as having a zero one.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params.tensor(name)?;
            if p.shape() != g.shape() {
                return Err(shape_err!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                ));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let shape = params.tensor(&name)?.shape().to_vec();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(shape.clone()));
            if m.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
                return Err(shape_err!("optimizer state for {name} does not match its parameter"));
            }
            let g = grads.get(&name);
            let p = params.get_mut(&name)?;
            for i in 0..p.numel() {
                let gi = g.map_or(0.0, |g| g.data()[i].as_f64());
                let mi = beta1 * m.data()[i].as_f64() + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i].as_f64() + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = T::from_f64(mi);
                v.data_mut()[i] = T::from_f64(vi);
                let delta = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                p.data_mut()[i] = T::from_f64(p.data()[i].as_f64() - delta);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let lr = |s| lr_schedule(s, 3e-4, 20000).unwrap();
        assert!((lr(20000) - 3e-4).abs() < 1e-18);
        assert!((lr(5000) - 7.5e-5).abs() < 1e-18);
        assert!((lr(80000) - 1.5e-4).abs() < 1e-18);
        assert!(lr_schedule(0, 3e-4, 20000).is_err());
        // continuity at the peak: one step either side moves by O(1/warmup)
        for s in [19999, 20001] {
            assert!((lr(s) - lr(20000)).abs() <= 1.01 * 3e-4 / 20000.0);
        }
    }

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64s([values.len()], values).unwrap());
        s
    }

    fn grads(values: &[f64]) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::from_f64s([values.len()], values).unwrap())])
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(&[0.5, -1.0, 2.0]);
        let mut opt = Adam::new(AdamConfig::default());
        opt.update(&mut p, &grads(&[1.0; 3]), 1e-3).unwrap();
        let expect = [0.5 - 1e-3, -1.0 - 1e-3, 2.0 - 1e-3];
        for (a, b) in p.tensor("w").unwrap().data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut p = store(&[0.5, -1.0]);
        let mut opt = Adam::new(AdamConfig::default());
        opt.update(&mut p, &grads(&[0.0, 0.0]), 1e-3).unwrap();
        opt.update(&mut p, &BTreeMap::new(), 1e-3).unwrap();
        assert_eq!(p.tensor("w").unwrap().data(), &[0.5, -1.0]);
        assert_eq!(opt.step, 2);
    }

    #[test]
    fn two_steps_match_hand_reference() {
        let mut p = store(&[1.0, -2.0, 0.5]);
        let mut opt = Adam::new(AdamConfig::default());
        let (g1, g2) = ([0.1, -0.2, 0.3], [-0.4, 0.5, 0.6]);
        let lr = 0.01;
        opt.update(&mut p, &grads(&g1), lr).unwrap();
        opt.update(&mut p, &grads(&g2), lr).unwrap();
        // written out per element without the optimizer's loop
        let mut x = [1.0, -2.0, 0.5];
        for i in 0..3 {
            let m1 = 0.1 * g1[i];
            let v1 = 0.02 * g1[i] * g1[i];
            x[i] -= lr * (m1 / 0.1) / ((v1 / 0.02).sqrt() + 1e-9);
            let m2 = 0.9 * m1 + 0.1 * g2[i];
            let v2 = 0.98 * v1 + 0.02 * g2[i] * g2[i];
            x[i] -= lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.9604)).sqrt() + 1e-9);
        }
        for (a, b) in p.tensor("w").unwrap().data().iter().zip(x) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn gradient_shape_mismatch() {
        let mut p = store(&[1.0, 2.0]);
        let mut opt = Adam::new(AdamConfig::default());
        assert!(opt.update(&mut p, &grads(&[1.0]), 0.1).is_err());
        assert_eq!(opt.step, 0);
    }
}
