use super::{AutodiffError, Tensor};

/// Bias-corrected Adam state for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<(), AutodiffError> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "adam_step",
            detail: format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.first.len()),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                detail: format!("tensor {i}: param {:?}, grad {:?}", p.shape(), g.shape()),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut params = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = params.clone();
        let mut state = AdamState::new(&params, 1e-3);
        adam_step(&mut params, &[Tensor::zeros(&[3])], &mut state).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_algebra() {
        for &g in &[0.3, -4.0, 1e-3] {
            let mut params = vec![Tensor::scalar(2.0)];
            let mut state = AdamState::new(&params, 1e-3);
            adam_step(&mut params, &[Tensor::scalar(g)], &mut state).unwrap();
            // m̂ = g, v̂ = g² after bias correction
            let expected = 2.0 - 1e-3 * g / ((g * g).sqrt() + 1e-8);
            assert!((params[0].item() - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let target = [1.5, -0.7, 0.2];
        let mut params = vec![Tensor::zeros(&[3])];
        let mut state = AdamState::new(&params, 0.1);
        for _ in 0..100 {
            let g: Vec<f64> = params[0].data().iter().zip(&target).map(|(w, t)| 2.0 * (w - t)).collect();
            adam_step(&mut params, &[Tensor::new(vec![3], g).unwrap()], &mut state).unwrap();
        }
        for (w, t) in params[0].data().iter().zip(&target) {
            assert!((w - t).abs() < 1e-2, "{w} vs {t}");
        }
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut state = AdamState::new(&params, 1e-3);
        assert!(adam_step(&mut params, &[Tensor::zeros(&[3])], &mut state).is_err());
    }
}
