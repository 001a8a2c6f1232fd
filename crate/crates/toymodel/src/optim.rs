//! Adam with global-norm gradient clipping.

use magattn::{Element, Tensor};

use crate::error::{Result, ToyError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F: Element> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Element> Adam<F> {
    pub fn new<'a>(learning_rate: f64, shapes: impl IntoIterator<Item = &'a [usize]>) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(ToyError::Config(format!("learning rate {learning_rate} must be finite and >= 0")));
        }
        let zeros: Vec<Tensor<F>> = shapes.into_iter().map(|s| Tensor::zeros(s.to_vec())).collect();
        Ok(Self {
            learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Updates `param` (slot `i`) from `grad` in place. Call [`Adam::advance`] once
    /// per optimizer step before the per-slot updates.
    pub fn update(&mut self, i: usize, param: &mut Tensor<F>, grad: &Tensor<F>) {
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = F::of(self.learning_rate / c1);
        let c2 = F::of(c2);
        let eps = F::of(self.eps);
        let m = self.m[i].data_mut();
        let v = self.v[i].data_mut();
        for (((p, &g), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (F::one() - b1) * g;
            *vi = b2 * *vi + (F::one() - b2) * g * g;
            *p -= step * *mi / ((*vi / c2).sqrt() + eps);
        }
    }

    pub fn advance(&mut self) {
        self.t += 1;
    }
}

/// `sqrt(Σ ‖g‖²)` over all gradients.
pub fn global_norm<F: Element>(grads: &[Tensor<F>]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm<F: Element>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = F::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::<f64>::from_f64([2], &[3.0, 0.0]).unwrap(), Tensor::from_f64([1], &[4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        assert_eq!(clip_grad_norm(&mut g, 10.0), global_norm(&g));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // bias correction makes the first update lr * sign(g)
        let mut p = Tensor::<f64>::from_f64([2], &[1.0, -1.0]).unwrap();
        let g = Tensor::from_f64([2], &[0.3, -2.0]).unwrap();
        let mut opt = Adam::new(0.1, [p.shape()]).unwrap();
        opt.advance();
        opt.update(0, &mut p, &g);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
        assert!(Adam::<f64>::new(-1.0, [p.shape()]).is_err());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::<f64>::from_f64([3], &[2.0, -3.0, 0.5]).unwrap();
        let mut opt = Adam::new(0.05, [p.shape()]).unwrap();
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * x);
            opt.advance();
            opt.update(0, &mut p, &g);
        }
        assert!(p.max_abs() < 1e-2);
    }
}
