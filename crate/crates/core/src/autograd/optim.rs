use super::ParamStore;
use crate::error::{contract, Result};
use crate::tensor::{Scalar, Tensor};

/// Poly schedule multiplier `(1 − step/total)^power`, clamped at zero.
pub fn poly_factor(step: u64, total: u64, power: f64) -> f64 {
    if total == 0 {
        return 1.0;
    }
    (1.0 - step as f64 / total as f64).max(0.0).powf(power)
}

/// AdamW with decoupled weight decay and a poly learning-rate schedule.
#[derive(Debug, Clone)]
pub struct AdamWState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Schedule length; `None` keeps the learning rate constant.
    pub total_steps: Option<u64>,
    pub poly_power: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, _, p)| Tensor::zeros(p.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            total_steps: None,
            poly_power: 1.0,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn with_schedule(mut self, total_steps: u64) -> Self {
        self.total_steps = Some(total_steps);
        self
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> f64 {
        match self.total_steps {
            Some(total) => self.lr * poly_factor(self.step, total, self.poly_power),
            None => self.lr,
        }
    }
}

/// One AdamW update of every parameter in `store`. `grads` are in store
/// order, as produced by `Gradients::into_param_grads`.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamWState<T>,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(contract(format!(
            "adamw_step: {} params, {} grads, {} moment slots",
            store.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let lr = state.current_lr();
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 / (1.0 - b1.powi(t));
    let c2 = 1.0 / (1.0 - b2.powi(t));
    let decay = T::of(1.0 - lr * state.weight_decay);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let g = &grads[i];
        if g.shape() != store.get(id).shape() {
            return Err(contract(format!(
                "adamw_step: gradient {:?} for parameter {:?} of shape {:?}",
                g.shape(),
                store.name(id),
                store.get(id).shape()
            )));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = store.get_mut(id);
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let (tc1, tc2, tlr, teps) = (T::of(c1), T::of(c2), T::of(lr), T::of(state.eps));
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = tb1 * *mv + ob1 * gv;
            *vv = tb2 * *vv + ob2 * gv * gv;
            let mhat = *mv * tc1;
            let vhat = *vv * tc2;
            *pv = *pv * decay - tlr * mhat / (vhat.sqrt() + teps);
        }
    }
    Ok(())
}
