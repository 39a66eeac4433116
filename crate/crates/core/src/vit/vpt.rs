//! Visual prompt tuning baseline: learnable tokens concatenated once.

use ndarray::Array2;

use super::config::TinyViTConfig;
use super::params::BaseParameters;
use super::train::{distill, Student, TrainBatch};
use crate::error::{Error, Result};

pub const VPT_TOKENS: usize = 50;

pub fn vpt_zeros(config: &TinyViTConfig) -> Array2<f64> {
    Array2::zeros((VPT_TOKENS, config.dim))
}

/// Distillation loss and its gradient with respect to the prompt tokens.
pub fn vpt_loss_grad(
    params: &BaseParameters,
    prompts: &Array2<f64>,
    batch: &TrainBatch,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    let (loss, grads) = distill(params, Student::Prompts(prompts), batch, tau, true)?;
    let g = grads
        .and_then(|g| g.prompts)
        .ok_or_else(|| Error::validation("no prompt gradient produced"))?;
    Ok((loss, g))
}

/// One gradient-descent update of the prompt tokens; returns the loss before it.
pub fn vpt_train_step(
    params: &BaseParameters,
    prompts: &mut Array2<f64>,
    batch: &TrainBatch,
    tau: f64,
    lr: f64,
    step: usize,
) -> Result<f64> {
    let (loss, g) = vpt_loss_grad(params, prompts, batch, tau)?;
    if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step,
            detail: format!("prompt loss = {loss}"),
        });
    }
    prompts.scaled_add(-lr, &g);
    Ok(loss)
}
