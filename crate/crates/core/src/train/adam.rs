use crate::diffcore::{Gradients, ParamStore, Real, Tensor};
use crate::{Error, Result};

use super::TrainSchedule;

/// Adam moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new<R: Real>(store: &ParamStore<R>) -> Self {
        let zeros: Vec<_> = store.iter().map(|(_, p)| Tensor::zeros(p.value().shape())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// Rescale gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping and whether clipping fired.
pub fn clip_grad_norm<R: Real>(grads: &mut Gradients<R>, max_norm: f64) -> (f64, bool) {
    let norm = grads.iter().flat_map(|(_, g)| g.data().iter().map(|v| v.as_f64().powi(2))).sum::<f64>().sqrt();
    let clip = max_norm > 0.0 && norm > max_norm;
    if clip {
        grads.scale(R::lit(max_norm / norm));
    }
    (norm, clip)
}

/// One bias-corrected Adam update. Weight decay is decoupled:
/// `value -= lr * weight_decay * value` before the Adam delta. Parameters
/// without a gradient see a zero gradient. A non-finite gradient aborts the
/// step before anything is modified.
pub fn adam_step<R: Real>(
    store: &mut ParamStore<R>,
    grads: &Gradients<R>,
    adam: &mut Adam,
    lr: f64,
    s: &TrainSchedule,
) -> Result<()> {
    if adam.m.len() != store.len() {
        return Err(Error::contract("adam_step", format!("{} moment slots for {} parameters", adam.m.len(), store.len())));
    }
    for (id, g) in grads.iter() {
        if g.shape() != store.get(id).value().shape() {
            return Err(Error::contract("adam_step", format!("gradient shape mismatch for `{}`", store.get(id).name)));
        }
        if !g.is_finite() {
            return Err(Error::numeric("adam_step", format!("non-finite gradient for `{}`", store.get(id).name)));
        }
    }
    adam.t += 1;
    let (b1, b2) = (s.adam_beta1, s.adam_beta2);
    let c1 = 1.0 - b1.powf(adam.t as f64);
    let c2 = 1.0 - b2.powf(adam.t as f64);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let grad = grads.get(id);
        let (m, v) = (&mut adam.m[k], &mut adam.v[k]);
        let value = store.get_mut(id).value_mut();
        for i in 0..value.numel() {
            let g = grad.map_or(0.0, |t| t.data()[i].as_f64());
            let mi = b1 * m.data()[i] as f64 + (1.0 - b1) * g;
            let vi = b2 * v.data()[i] as f64 + (1.0 - b2) * g * g;
            m.data_mut()[i] = mi as f32;
            v.data_mut()[i] = vi as f32;
            let mut x = value.data()[i].as_f64();
            x -= lr * s.weight_decay * x;
            x -= lr * (mi / c1) / ((vi / c2).sqrt() + s.adam_eps);
            value.data_mut()[i] = R::lit(x);
        }
    }
    Ok(())
}
