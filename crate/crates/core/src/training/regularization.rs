//! Dropout, weight noise and the L2 penalty on non-recurrent weights.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{GradientSet, ParamKind, ParamStore};

/// Inverted dropout: kept units are scaled by `1 / (1 - p)`.
#[derive(Debug)]
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> Dropout<'a> {
    pub fn new(p: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self { p, rng }
    }

    /// `None` when `p == 0`, so the forward pass is untouched.
    pub fn mask(&mut self, n: usize) -> Option<Vec<f64>> {
        if self.p <= 0.0 {
            return None;
        }
        let keep = 1.0 - self.p;
        Some(
            (0..n)
                .map(|_| {
                    if self.rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect(),
        )
    }
}

/// Penalised parameters: non-recurrent weight matrices that are trainable.
pub fn is_regularized(kind: ParamKind) -> bool {
    kind == ParamKind::Weight
}

/// Copy of `store` with `N(0, sigma^2)` added to every trainable
/// non-recurrent weight.
pub fn perturb_weights(store: &ParamStore, sigma: f64, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut out = store.clone();
    if sigma <= 0.0 {
        return out;
    }
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    for (_, p) in out.iter_mut() {
        if p.trainable && is_regularized(p.kind) {
            for v in p.value.data_mut() {
                *v += noise.sample(rng);
            }
        }
    }
    out
}

/// `wd * sum ||W||^2` over trainable non-recurrent weights.
pub fn l2_penalty(store: &ParamStore, weight_decay: f64) -> f64 {
    if weight_decay == 0.0 {
        return 0.0;
    }
    weight_decay
        * store
            .iter()
            .filter(|(_, p)| p.trainable && is_regularized(p.kind))
            .map(|(_, p)| p.value.sum_squares())
            .sum::<f64>()
}

/// `grads[W] += 2 * wd * W` for every penalised weight.
pub fn add_l2_gradient(store: &ParamStore, weight_decay: f64, grads: &mut GradientSet) {
    if weight_decay == 0.0 {
        return;
    }
    for (name, p) in store.iter() {
        if !(p.trainable && is_regularized(p.kind)) {
            continue;
        }
        if let Some(g) = grads.get_mut(name) {
            for (gi, wi) in g.data_mut().iter_mut().zip(p.value.data()) {
                *gi += 2.0 * weight_decay * wi;
            }
        }
    }
}
