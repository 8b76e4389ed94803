use crate::error::{shape_err, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Adam with bias correction. No gradient clipping and no weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamStore<F>, lr: f64) -> Self {
        let zeros: Vec<Vec<F>> = params
            .iter()
            .map(|(_, t)| vec![F::zero(); t.len()])
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[Tensor<F>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return shape_err(
                "adam_step",
                format!(
                    "{} grads, {} moments for {} params",
                    grads.len(),
                    self.m.len(),
                    params.len()
                ),
            );
        }
        for (i, (p, g)) in params.tensors_mut().iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].len() != p.len() {
                return shape_err(
                    "adam_step",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                );
            }
        }
        self.t += 1;
        let b1 = F::of(self.beta1);
        let b2 = F::of(self.beta2);
        let one = F::one();
        let c1 = F::of(1.0 - self.beta1.powi(self.t as i32));
        let c2 = F::of(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::of(self.lr);
        let eps = F::of(self.eps);
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &gr), mm), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mm = b1 * *mm + (one - b1) * gr;
                *vv = b2 * *vv + (one - b2) * gr * gr;
                let m_hat = *mm / c1;
                let v_hat = *vv / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
