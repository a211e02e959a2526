use crate::diff::ParamStore;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// First and second moment estimates, one entry per parameter value.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients accumulated in `store`.
/// Gradients are left in place; call `zero_grad` afterwards.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<(), TrainError> {
    for (_, p) in store.iter() {
        if let Some(g) = p.grad_ref() {
            if !g.all_finite() {
                return Err(TrainError::NonFiniteGradient(p.name.clone()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad_ref().map(|g| g.data().to_vec());
        let values = p.value.data_mut();
        for j in 0..values.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[j]);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            values[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{Tape, Tensor};

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::scalar(1.5));
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &mut st, &cfg(0.1)).unwrap();
        assert_eq!(store.get(id).value.item(), 1.5);
        assert_eq!(st.m[0][0], 0.0);
    }

    #[test]
    fn moments_decay_without_gradient() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(1.5));
        let mut st = AdamState::new(&store);
        st.m[0][0] = 1.0;
        st.v[0][0] = 1.0;
        adam_step(&mut store, &mut st, &cfg(0.0)).unwrap();
        assert_eq!(st.m[0][0], 0.9);
        assert_eq!(st.v[0][0], 0.999);
    }

    #[test]
    fn constant_gradient_steps_by_learning_rate() {
        // loss = -2.5 x has constant gradient -2.5, so each step moves x by +lr
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::scalar(0.0));
        let mut st = AdamState::new(&store);
        let mut last = 0.0;
        for _ in 0..100 {
            let mut tape = Tape::new();
            let x = tape.param(&store, id);
            let g = tape.scalar(-2.5);
            let l = tape.mul(x, g).unwrap();
            tape.backward(l, &mut store).unwrap();
            let before = store.get(id).value.item();
            adam_step(&mut store, &mut st, &cfg(0.01)).unwrap();
            store.zero_grad();
            last = store.get(id).value.item() - before;
        }
        assert!((last - 0.01).abs() < 1e-9, "{last}");
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::scalar(0.0));
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let g = tape.scalar(f64::NAN);
        let l = tape.mul(x, g).unwrap();
        tape.backward(l, &mut store).unwrap();
        let mut st = AdamState::new(&store);
        assert_eq!(
            adam_step(&mut store, &mut st, &cfg(0.1)),
            Err(TrainError::NonFiniteGradient("x".into()))
        );
    }

    #[test]
    fn scalar_quadratic_converges() {
        // minimize (x - 3)^2 from x = 0 with lr 0.1
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::scalar(0.0));
        let mut st = AdamState::new(&store);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let x = tape.param(&store, id);
            let three = tape.scalar(3.0);
            let d = tape.sub(x, three).unwrap();
            let l = tape.square(d);
            tape.backward(l, &mut store).unwrap();
            adam_step(&mut store, &mut st, &cfg(0.1)).unwrap();
            store.zero_grad();
        }
        assert!((store.get(id).value.item() - 3.0).abs() < 1e-2);
    }
}
