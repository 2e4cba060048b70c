//! Minibatch training and evaluation loops.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::data::{Batch, Dataset};
use crate::nn::layers::{FeatureTap, Layer};
use crate::nn::loss::{approach_loss, approach_loss_grads, correct_count, cross_entropy_with_grad, weight_loss};
use crate::nn::network::{BackwardOptions, Gradients, Network, Route};
use crate::nn::optim::{sgd_step, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

/// Mean cross-entropy and top-1 accuracy over `indices`.
pub fn evaluate(net: &Network, data: &Dataset, indices: &[usize], route: Route<'_>, batch: usize) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty dataset"));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    for chunk in indices.chunks(batch.max(1)) {
        let b = data.batch(chunk)?;
        let pass = net.forward(&b.inputs, route)?;
        let (l, _) = cross_entropy_with_grad(pass.logits(), &b.labels)?;
        loss += l * chunk.len() as f64;
        correct += correct_count(pass.logits(), &b.labels);
    }
    Ok(Evaluation {
        loss: loss / indices.len() as f64,
        accuracy: correct as f64 / indices.len() as f64,
        samples: indices.len(),
    })
}

/// Ids of Tucker and searched layers, in network order.
pub fn decomposed_ids(net: &Network) -> Vec<String> {
    net.layers
        .iter()
        .filter(|l| matches!(l, Layer::Tucker(_) | Layer::Choice(_)))
        .filter_map(|l| l.layer_id().map(str::to_string))
        .collect()
}

/// Taps of decomposed layers only.
pub fn decomposed_taps(net: &Network, taps: Vec<FeatureTap>) -> Vec<FeatureTap> {
    let ids = decomposed_ids(net);
    taps.into_iter().filter(|t| ids.contains(&t.layer_id)).collect()
}

/// Reference taps from `dense` at the layers that are decomposed in `net`.
pub fn reference_taps(dense: &Network, net: &Network, batch: &Batch) -> Result<Vec<FeatureTap>> {
    let pass = dense.forward(&batch.inputs, Route::Expectation)?;
    let want = decomposed_ids(net);
    let taps: Vec<FeatureTap> = dense.taps(&pass).into_iter().filter(|t| want.contains(&t.layer_id)).collect();
    if taps.len() != want.len() {
        return Err(Error::arg("reference network lacks a decomposed layer"));
    }
    Ok(taps)
}

/// Loss terms of one supervised step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub ce: f64,
    pub approach: f64,
    pub total: f64,
}

/// Forward, loss `CE + λ·approach`, and backward for one batch.
pub fn supervised_grads(
    net: &Network,
    route: Route<'_>,
    batch: &Batch,
    reference: Option<&[FeatureTap]>,
    lambda: f64,
) -> Result<(StepLoss, Gradients)> {
    let pass = net.forward(&batch.inputs, route)?;
    let (ce, g) = cross_entropy_with_grad(pass.logits(), &batch.labels)?;
    let (approach, tap_grads) = match reference {
        Some(r) if lambda > 0.0 => {
            let taps = decomposed_taps(net, net.taps(&pass));
            (approach_loss(&taps, r)?, approach_loss_grads(&taps, r, lambda)?)
        }
        Some(r) => {
            let taps = decomposed_taps(net, net.taps(&pass));
            (approach_loss(&taps, r)?, Default::default())
        }
        None => (0.0, Default::default()),
    };
    let grads = net.backward(&pass, &g, &tap_grads, BackwardOptions::default())?;
    Ok((
        StepLoss {
            ce,
            approach,
            total: weight_loss(ce, approach, lambda),
        },
        grads,
    ))
}

/// One epoch of shuffled minibatch SGD. Returns per-step losses.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    net: &mut Network,
    dense: Option<&Network>,
    data: &Dataset,
    indices: &[usize],
    opt: &mut OptimizerState,
    epoch: usize,
    batch_size: usize,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<StepLoss>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    let mut losses = Vec::new();
    for chunk in order.chunks(batch_size.max(1)) {
        let b = data.batch(chunk)?;
        let reference = match dense {
            Some(d) => Some(reference_taps(d, net, &b)?),
            None => None,
        };
        let (loss, grads) = supervised_grads(net, Route::Path(&[]), &b, reference.as_deref(), lambda)?;
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at epoch {epoch}")));
        }
        sgd_step(net, &grads, opt, epoch)?;
        losses.push(loss);
    }
    Ok(losses)
}
