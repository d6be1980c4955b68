use crate::{NnError, Real, Result, Tensor};

/// Adam optimizer state with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub step_count: u64,
    first_moment: Vec<Vec<F>>,
    second_moment: Vec<Vec<F>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> AdamState<F> {
    /// Zero-initialized state for the given parameter set, with the usual
    /// defaults `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(params: &[Tensor<F>], lr: F) -> Self {
        AdamState {
            lr,
            beta1: F::lit(0.9),
            beta2: F::lit(0.999),
            eps: F::lit(1e-8),
            step_count: 0,
            first_moment: params.iter().map(|p| vec![F::zero(); p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![F::zero(); p.len()]).collect(),
            shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
        }
    }

    pub fn first_moment(&self) -> &[Vec<F>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<F>] {
        &self.second_moment
    }

    /// Applies one update in place and increments `step_count`.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>]) -> Result<()> {
        if params.len() != self.shapes.len() || grads.len() != self.shapes.len() {
            return Err(NnError::shape(
                "adam_step",
                &[self.shapes.len()],
                &[params.len(), grads.len()],
            ));
        }
        for ((p, g), s) in params.iter().zip(grads).zip(&self.shapes) {
            if p.shape() != s.as_slice() {
                return Err(NnError::shape("adam_step", s, p.shape()));
            }
            if g.shape() != s.as_slice() {
                return Err(NnError::shape("adam_step", s, g.shape()));
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = F::lit(1.0 - self.beta1.to_f64_lossy().powi(t));
        let bc2 = F::lit(1.0 - self.beta2.to_f64_lossy().powi(t));
        let (b1, b2) = (self.beta1, self.beta2);
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);

        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
