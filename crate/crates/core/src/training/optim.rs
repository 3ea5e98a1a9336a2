use crate::model::Model;
use crate::tensor::{Float, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// One AdamW update of a single buffer at step `t` (1-based).
///
/// Decay is decoupled: `p <- p (1 - lr wd)` before the moment update, and
/// only when `decay` is set.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<S: Float>(
    p: &mut [S],
    g: &[S],
    m: &mut [S],
    v: &mut [S],
    t: u64,
    lr: f64,
    hp: &AdamHyper,
    decay: bool,
) {
    let (b1, b2) = (S::of(hp.beta1), S::of(hp.beta2));
    let (one, eps) = (S::one(), S::of(hp.eps));
    let c1 = S::of(1.0 - hp.beta1.powi(t as i32));
    let c2 = S::of(1.0 - hp.beta2.powi(t as i32));
    let lr_s = S::of(lr);
    let shrink = S::of(1.0 - lr * hp.weight_decay);
    for i in 0..p.len() {
        if decay {
            p[i] *= shrink;
        }
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        p[i] -= lr_s * mhat / (vhat.sqrt() + eps);
    }
}

/// L2 norm over all buffers, accumulated in `f64`.
pub fn global_norm<S: Float>(grads: &[Vec<S>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm<S: Float>(grads: &mut [Vec<S>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = S::of(max_norm / (norm + 1e-6));
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

/// AdamW state for a list of parameters.
#[derive(Debug, Clone)]
pub struct AdamW<S: Float> {
    pub hp: AdamHyper,
    pub t: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Float> AdamW<S> {
    pub fn new(hp: AdamHyper, sizes: &[usize]) -> Self {
        AdamW {
            hp,
            t: 0,
            m: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    pub fn for_model(hp: AdamHyper, model: &Model<S>) -> Self {
        let sizes: Vec<usize> = model.params().iter().map(|(_, _, t)| t.numel()).collect();
        Self::new(hp, &sizes)
    }

    /// Updates `params` (with their decay flags) in place. All gradients are
    /// checked before anything is modified; a non-finite entry aborts the
    /// step with an error naming the buffer.
    pub fn step(&mut self, params: Vec<(String, bool, &mut Tensor<S>)>, grads: &[Vec<S>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape(format!(
                "{} parameters, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((name, _, p), g) in params.iter().zip(grads) {
            if g.len() != p.numel() {
                return Err(Error::shape(format!("gradient of `{name}` has {} entries", g.len())));
            }
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}` at index {i} is {}", g[i])));
            }
        }
        if !(lr >= 0.0) {
            return Err(Error::config(format!("learning rate must be nonnegative, got {lr}")));
        }
        self.t += 1;
        for (i, (name, decay, p)) in params.into_iter().enumerate() {
            let data = p
                .data_mut()
                .map_err(|e| Error::Autograd(format!("updating `{name}`: {e}")))?;
            adamw_update(data, &grads[i], &mut self.m[i], &mut self.v[i], self.t, lr, &self.hp, decay);
        }
        Ok(())
    }

    /// [`step`](Self::step) over every model parameter, decaying matmul weights only.
    pub fn step_model(&mut self, model: &mut Model<S>, grads: &[Vec<S>], lr: f64) -> Result<()> {
        let params = model
            .params_mut()
            .into_iter()
            .map(|(name, kind, t)| (name, kind.decays(), t))
            .collect();
        self.step(params, grads, lr)
    }
}
