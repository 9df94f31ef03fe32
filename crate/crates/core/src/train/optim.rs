use crate::error::{Error, Result};
use crate::model::{decays, Parameterized};
use crate::numerics::Tensor;
use crate::train::TrainConfig;

/// One zero-initialized momentum buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self {
            velocity: params.into_iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn for_model<M: Parameterized + ?Sized>(model: &M) -> Self {
        Self::new(model.named_params().into_iter().map(|(_, t)| t))
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

/// One SGD step with coupled weight decay and optional Nesterov momentum:
///
/// ```text
/// g' = g + wd·p        (only where decay[i])
/// v  ← μ·v + g'
/// d  = g' + μ·v        (nesterov)   or   v
/// p  ← p − lr·d
/// ```
pub fn sgd_nesterov_step(
    params: &mut [&mut Tensor],
    decay: &[bool],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || decay.len() != n || state.velocity.len() != n {
        return Err(Error::contract(format!(
            "optimizer step over {n} parameters got {} gradients, {} decay flags and {} buffers",
            grads.len(),
            decay.len(),
            state.velocity.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.shape() != grads[i].shape() || p.shape() != state.velocity[i].shape() {
            return Err(Error::dims("sgd_nesterov_step", p.shape(), grads[i].shape()));
        }
    }
    let mu = cfg.momentum;
    for ((p, g), (v, &dec)) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut().zip(decay)) {
        let wd = if dec { cfg.weight_decay } else { 0.0 };
        for ((pj, &gj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let g2 = gj + wd * *pj;
            *vj = mu * *vj + g2;
            let d = if cfg.nesterov { g2 + mu * *vj } else { *vj };
            *pj -= lr * d;
        }
    }
    Ok(())
}

/// [`sgd_nesterov_step`] over a model's parameters, decaying all but biases.
pub fn step_model<M: Parameterized + ?Sized>(
    model: &mut M,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let decay: Vec<bool> = model.named_params().iter().map(|(n, _)| decays(n)).collect();
    let mut params = model.params_mut();
    sgd_nesterov_step(&mut params, &decay, grads, state, lr, cfg)
}
