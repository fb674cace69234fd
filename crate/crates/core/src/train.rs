//! One optimization step over a batch of samples.

use crate::autograd::Graph;
use crate::losses::LossConfig;
use crate::model::MonoFormer;
use crate::optim::Adam;
use crate::params::{ParamGrads, Session};
use crate::sample::SequenceSample;
use crate::{Error, Result};

/// Batch-mean losses of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub photometric: f64,
    pub smoothness: f64,
    pub grad_norm: f64,
}

/// Loss and parameter gradients averaged over `batch`, without updating.
pub fn batch_gradients(model: &MonoFormer, batch: &[SequenceSample], cfg: &LossConfig) -> Result<(StepStats, ParamGrads)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = ParamGrads::zeros_like(&model.params);
    let mut stats = StepStats {
        loss: 0.0,
        photometric: 0.0,
        smoothness: 0.0,
        grad_norm: 0.0,
    };
    for sample in batch {
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &model.params, true);
        let terms = model.sample_loss(&mut s, sample, cfg)?;
        let loss = s.graph.value(terms.total).data()[0];
        if !loss.is_finite() {
            return Err(Error::NonFinite(alloc::format!("loss {loss}")));
        }
        let sample_grads = s.backward(terms.total);
        grads.add_scaled(&sample_grads, scale);
        stats.loss += scale * loss;
        stats.photometric += scale * terms.photometric;
        stats.smoothness += scale * terms.smoothness;
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    stats.grad_norm = grads.global_norm();
    Ok((stats, grads))
}

/// Forward, backward and one Adam update. Nothing is updated when the loss
/// or a gradient is not finite.
pub fn train_step(model: &mut MonoFormer, opt: &mut Adam, batch: &[SequenceSample], cfg: &LossConfig) -> Result<StepStats> {
    let (stats, grads) = batch_gradients(model, batch, cfg)?;
    opt.step(&mut model.params, &grads);
    if !model.params.all_finite() {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    Ok(stats)
}
