use crate::error::{ensure, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adaptive moment estimation with weight decay applied directly to the
/// parameters rather than through the gradient.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros = || params.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` belongs to the `i`-th stored parameter; `None`
    /// means the parameter took no part in the loss and only decays.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        ensure!(grads.len() == self.m.len(), "optimizer holds {} slots, got {} gradients", self.m.len(), grads.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (c1, c2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.eps);
        let decay = T::lit(1.0 - lr * self.weight_decay);
        for (i, grad) in grads.iter().enumerate() {
            let p = params.get_mut(crate::params::ParamId(i));
            p.data_mut().iter_mut().for_each(|w| *w = *w * decay);
            let Some(g) = grad else { continue };
            p.check_same_shape(g)?;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + c1 * gv;
                *vv = b2 * *vv + c2 * gv * gv;
                *w = *w - step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

/// Exponential moving average of parameter values.
#[derive(Clone, Debug)]
pub struct Ema<T> {
    decay: f64,
    shadow: Vec<Tensor<T>>,
}

impl<T: Scalar> Ema<T> {
    pub fn new(params: &ParamStore<T>, decay: f64) -> Self {
        Self {
            decay,
            shadow: params.entries().iter().map(|e| e.value.as_ref().clone()).collect(),
        }
    }

    pub fn update(&mut self, params: &ParamStore<T>) {
        let (d, c) = (T::lit(self.decay), T::lit(1.0 - self.decay));
        for (s, e) in self.shadow.iter_mut().zip(params.entries()) {
            for (sv, &pv) in s.data_mut().iter_mut().zip(e.value.data()) {
                *sv = d * *sv + c * pv;
            }
        }
    }

    /// Copies the averaged values into `params`.
    pub fn copy_to(&self, params: &mut ParamStore<T>) -> Result<()> {
        for (i, s) in self.shadow.iter().enumerate() {
            params.set(crate::params::ParamId(i), s.clone())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        // With zeroed moments the bias-corrected first update is lr·sign(g).
        let mut ps = ParamStore::<f64>::new();
        ps.insert("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let mut opt = AdamW::new(&ps, 0.0);
        let g = Tensor::from_vec(&[3], vec![0.3, -4.0, 0.0]).unwrap();
        opt.step(&mut ps, &[Some(g)], 0.01).unwrap();
        let w = ps.by_name("w").unwrap().data().to_vec();
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] + 1.99).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("w", Tensor::full(&[2], 2.0)).unwrap();
        let mut opt = AdamW::new(&ps, 0.1);
        opt.step(&mut ps, &[None], 0.5).unwrap();
        assert_eq!(ps.by_name("w").unwrap().data(), &[1.9, 1.9]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("w", Tensor::from_vec(&[2], vec![3.0, -1.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(&ps, 0.0);
        for _ in 0..2000 {
            let g = ps.by_name("w").unwrap().map(|v| 2.0 * (v - 0.5));
            opt.step(&mut ps, &[Some(g)], 0.01).unwrap();
        }
        for &v in ps.by_name("w").unwrap().data() {
            assert!((v - 0.5).abs() < 1e-3);
        }
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut grads = vec![
            Some(Tensor::<f64>::from_vec(&[2], vec![3.0, 0.0]).unwrap()),
            None,
            Some(Tensor::from_vec(&[1], vec![4.0]).unwrap()),
        ];
        let before = clip_global_norm(&mut grads, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        let after: f64 = grads.iter().flatten().map(|g| g.sum_sq()).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
        let before = clip_global_norm(&mut grads, 10.0);
        assert!((before - 1.0).abs() < 1e-12);
    }
}
