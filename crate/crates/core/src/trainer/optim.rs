//! SGD with momentum, L2 weight decay and global-norm gradient clipping.

use crate::net::model::ModelState;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: ModelState<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(model: &ModelState<T>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: model.zeros_like(),
        }
    }

    /// `g ← g + wd·w`, `v ← μ·v + g`, `w ← w − lr·v`.
    pub fn step(&mut self, model: &mut ModelState<T>, grads: &ModelState<T>, lr: f64) {
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        let grads = grads.params();
        for (((_, w), (_, v)), (_, g)) in model
            .params_mut()
            .into_iter()
            .zip(self.velocity.params_mut())
            .zip(grads)
        {
            let (w, v) = (w.data_mut(), v.data_mut());
            for ((wi, vi), &gi) in w.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                let g = gi + wd * *wi;
                *vi = mu * *vi + g;
                *wi = *wi - lr * *vi;
            }
        }
    }

    pub fn velocity(&self) -> &ModelState<T> {
        &self.velocity
    }
}

pub fn global_norm<T: Scalar>(grads: &ModelState<T>) -> f64 {
    grads
        .params()
        .iter()
        .map(|(_, t)| t.sum_sq().as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut ModelState<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for (_, t) in grads.params_mut() {
            t.scale(s);
        }
    }
    norm
}

fn group_norm<T: Scalar>(grads: &ModelState<T>, navigator: bool) -> f64 {
    grads
        .params()
        .iter()
        .filter(|(n, _)| n.starts_with("navigator.") == navigator)
        .map(|(_, t)| t.sum_sq().as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Clips the navigator's gradient and the rest of the model's gradient
/// separately, each to `max_norm`. Returns both norms before clipping.
pub fn clip_by_module<T: Scalar>(grads: &mut ModelState<T>, max_norm: f64) -> (f64, f64) {
    let norms = (group_norm(grads, true), group_norm(grads, false));
    for (name, t) in grads.params_mut() {
        let norm = if name.starts_with("navigator.") { norms.0 } else { norms.1 };
        if norm > max_norm {
            t.scale(T::of(max_norm / norm));
        }
    }
    norms
}
