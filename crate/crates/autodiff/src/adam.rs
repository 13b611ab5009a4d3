use crate::{ParamStore, Scalar, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected adaptive-moment optimizer state, one moment pair per
/// parameter tensor in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update to every parameter that requires gradients.
    ///
    /// Fails without touching anything when a trainable parameter has no
    /// gradient buffer or the moment buffers do not line up with the store.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<(), TensorError> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(TensorError::Contract(format!(
                "adam state holds {} buffers, store has {} parameters",
                self.m.len(),
                store.len()
            )));
        }
        for (id, name, t) in store.iter() {
            if self.m[id.index()].len() != t.len() || self.v[id.index()].len() != t.len() {
                return Err(TensorError::shape(
                    "adam_step",
                    t.shape(),
                    &[self.m[id.index()].len()],
                ));
            }
            if t.requires_grad() && t.grad().is_none() {
                return Err(TensorError::Contract(format!(
                    "parameter {name} has no gradient; zero grads before backward"
                )));
            }
        }

        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let one = T::one();
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        let bc1 = T::of(1.0 - c.beta1.powf(self.step as f64));
        let bc2 = T::of(1.0 - c.beta2.powf(self.step as f64));

        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            if !t.requires_grad() {
                continue;
            }
            let g = t.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let delta = lr * m_hat / (v_hat.sqrt() + eps);
                // A zero delta must not rewrite -0.0 as +0.0.
                if delta != T::zero() {
                    *p = *p - delta;
                }
            }
        }
        Ok(())
    }
}
