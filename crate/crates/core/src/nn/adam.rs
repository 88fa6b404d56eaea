use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, shape-matched to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

impl Adam {
    /// One bias-corrected update of every parameter in `params`.
    pub fn step<T: Real>(
        &self,
        params: &mut ParamStore<T>,
        grads: &ParamStore<T>,
        state: &mut AdamState<T>,
    ) {
        state.t += 1;
        let t = state.t as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        let one = T::one();
        let names: Vec<String> = params.iter().map(|(k, _)| k.to_owned()).collect();
        for name in names {
            let g = grads.get(&name);
            let m = state.m.get_mut(&name);
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (one - b1) * gi;
            }
            let v = state.v.get_mut(&name);
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (one - b2) * gi * gi;
            }
            let (m, v) = (state.m.get(&name).to_vec(), state.v.get(&name));
            let p = params.get_mut(&name);
            for ((pi, &mi), &vi) in p.iter_mut().zip(&m).zip(v) {
                let mhat = mi / c1;
                let vhat = vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
