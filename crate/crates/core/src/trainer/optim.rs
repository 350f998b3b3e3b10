use crate::diffarray::{Array, ParamStore};

/// Adam with bias correction, operating on the gradients stored in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Array::zeros(p.value().shape()))
                .collect()
        };
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = store.grad(id).clone();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let w = store.value_mut(id).data_mut();
            for (k, &gk) in g.data().iter().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                w[k] -= self.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Global L2 norm of the stored gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .flat_map(|(_, p)| p.grad().data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if norm > max_norm {
        let s = max_norm / norm;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for g in store.grad_mut(id).data_mut() {
                *g *= s;
            }
        }
    }
    norm
}
