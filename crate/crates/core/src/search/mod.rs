//! Alternating rank search over a supernet of Tucker-2 candidates.
//!
//! Weight steps train one sampled branch per searched layer on training
//! batches; probability steps update the selection logits on validation
//! batches through the probability-weighted mixture of all branches, with
//! the cross-entropy scaled by the expected-cost penalty.

mod state;

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costmodel::{expected_layer_cost, penalty_derivative, penalty_factor, CostModel};
use crate::error::{Error, Result};
use crate::nn::data::Batch;
use crate::nn::layers::{ChoiceConv, Layer, TuckerConv};
use crate::nn::loss::cross_entropy_with_grad;
use crate::nn::network::{BackwardOptions, Network, Route};
use crate::nn::optim::{sgd_step, LrSchedule, OptimizerState, SgdConfig};
use crate::nn::train::{reference_taps, supervised_grads, StepLoss};
use crate::rankspace::RankSpacePlan;
use crate::tucker::{decompose, RankPair};

pub use state::{config_hash, run_search, EpochMetrics, SearchContext, SearchOutcome, SearchState};

mod budget_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Hardware budget ε in cost-table units; `null` in JSON means unbounded.
    #[serde(with = "budget_serde")]
    pub budget: f64,
    pub eta: f64,
    pub theta: f64,
    pub lambda: f64,
    pub epochs: usize,
    /// Optimizer for branch factors and shared layers.
    pub weight: SgdConfig,
    pub prob_lr: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub batch_size: usize,
    /// HOOI sweeps used when initializing branches.
    pub refine_iters: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            budget: f64::INFINITY,
            eta: 1.0,
            theta: 0.6,
            lambda: 0.1,
            epochs: 20,
            weight: SgdConfig {
                schedule: LrSchedule {
                    initial: 0.01,
                    ..LrSchedule::default()
                },
                ..SgdConfig::default()
            },
            prob_lr: 3e-3,
            seed: 0,
            validation_fraction: 0.2,
            batch_size: 64,
            refine_iters: 3,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget > 0.0) {
            return Err(Error::arg(format!("budget must be positive, got {}", self.budget)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::arg(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return Err(Error::arg(format!("theta must be nonnegative, got {}", self.theta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::arg(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.prob_lr > 0.0 && self.prob_lr.is_finite()) {
            return Err(Error::arg(format!("prob_lr must be positive, got {}", self.prob_lr)));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::arg(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be positive"));
        }
        self.weight.validate()
    }
}

/// Builds the supernet: every searched conv of `dense` becomes a choice
/// layer whose branches are decompositions of the dense weight at the
/// planned rank pairs, with uniform selection probabilities.
pub fn build_supernet(dense: &Network, plan: &RankSpacePlan, refine_iters: usize) -> Result<Network> {
    for lp in &plan.layers {
        let rec = dense
            .spec
            .layers
            .iter()
            .find(|l| l.layer_id == lp.layer_id)
            .ok_or_else(|| Error::arg(format!("plan references unknown layer `{}`", lp.layer_id)))?;
        if !rec.searched {
            return Err(Error::arg(format!("plan references unsearched layer `{}`", lp.layer_id)));
        }
        if (rec.out_channels, rec.in_channels) != (lp.out_channels, lp.in_channels) {
            return Err(Error::arg(format!(
                "plan layer `{}` is {}x{}, network layer is {}x{}",
                lp.layer_id, lp.out_channels, lp.in_channels, rec.out_channels, rec.in_channels
            )));
        }
    }
    let mut net = dense.clone();
    for layer in &mut net.layers {
        let Layer::Conv(l) = layer else { continue };
        let searched = dense.spec.layers.iter().any(|r| r.layer_id == l.spec.layer_id && r.searched);
        if !searched {
            continue;
        }
        let lp = plan
            .layer(&l.spec.layer_id)
            .ok_or_else(|| Error::arg(format!("plan has no candidates for layer `{}`", l.spec.layer_id)))?;
        if lp.candidates.is_empty() {
            return Err(Error::arg(format!("layer `{}` has no candidates", lp.layer_id)));
        }
        let branches = lp
            .candidates
            .iter()
            .map(|&r| decompose(&l.weight, &l.spec, r, refine_iters))
            .collect::<Result<Vec<_>>>()?;
        *layer = Layer::Choice(ChoiceConv {
            spec: l.spec.clone(),
            logits: vec![0.0; branches.len()],
            branches,
        });
    }
    Ok(net)
}

/// Per-branch costs of every choice layer, in layer order.
pub fn branch_costs(net: &Network, cost: &CostModel) -> Result<Vec<Vec<f64>>> {
    net.choice_layers()
        .map(|c| {
            c.branches
                .iter()
                .map(|b| cost.cost(&c.spec.layer_id, b.ranks()))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Sum of per-layer expected costs under the current probabilities.
pub fn total_expected_cost(net: &Network, costs: &[Vec<f64>]) -> Result<f64> {
    net.choice_layers()
        .zip(costs)
        .map(|(c, k)| expected_layer_cost(&c.probabilities(), k))
        .sum()
}

/// Draws one branch per choice layer from its selection probabilities.
pub fn sample_path(net: &Network, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    net.choice_layers()
        .map(|c| {
            let p = c.probabilities();
            let dist = WeightedIndex::new(&p)
                .map_err(|e| Error::Numeric(format!("layer `{}`: {e}", c.spec.layer_id)))?;
            Ok(dist.sample(rng))
        })
        .collect()
}

/// One training step on the sampled path with loss `CE + λ·approach`,
/// where the approach term compares against the frozen dense model.
pub fn weight_update_step(
    net: &mut Network,
    batch: &Batch,
    path: &[usize],
    dense: &Network,
    lambda: f64,
    opt: &mut OptimizerState,
    epoch: usize,
) -> Result<StepLoss> {
    let reference = reference_taps(dense, net, batch)?;
    let (loss, grads) = supervised_grads(net, Route::Path(path), batch, Some(&reference), lambda)?;
    if !loss.total.is_finite() {
        return Err(Error::Numeric(format!("weight loss diverged at epoch {epoch}")));
    }
    sgd_step(net, &grads, opt, epoch)?;
    Ok(loss)
}

/// Value of the probability loss on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbLoss {
    pub ce: f64,
    pub expected_cost: f64,
    pub penalty: f64,
    pub loss: f64,
}

/// `CE(expectation forward) · η(S/ε)^θ` and its gradient with respect to
/// every layer's selection logits.
pub fn probability_gradients(
    net: &Network,
    batch: &Batch,
    costs: &[Vec<f64>],
    cfg: &SearchConfig,
) -> Result<(ProbLoss, BTreeMap<String, Vec<f64>>)> {
    if costs.len() != net.num_choice_layers() {
        return Err(Error::arg("one cost vector per searched layer is required"));
    }
    let pass = net.forward(&batch.inputs, Route::Expectation)?;
    let (ce, mut g) = cross_entropy_with_grad(pass.logits(), &batch.labels)?;
    let s = total_expected_cost(net, costs)?;
    let pen = penalty_factor(s, cfg.budget, cfg.eta, cfg.theta)?;
    let dpen = penalty_derivative(s, cfg.budget, cfg.eta, cfg.theta)?;
    g.data_mut().iter_mut().for_each(|v| *v *= pen);
    let mut grads = net
        .backward(
            &pass,
            &g,
            &BTreeMap::new(),
            BackwardOptions {
                params: false,
                logits: true,
            },
        )?
        .logits;
    for (c, k) in net.choice_layers().zip(costs) {
        let p = c.probabilities();
        let e = expected_layer_cost(&p, k)?;
        let d = grads.entry(c.spec.layer_id.clone()).or_insert_with(|| vec![0.0; p.len()]);
        for ((dj, pj), cj) in d.iter_mut().zip(&p).zip(k) {
            *dj += ce * dpen * pj * (cj - e);
        }
    }
    Ok((
        ProbLoss {
            ce,
            expected_cost: s,
            penalty: pen,
            loss: ce * pen,
        },
        grads,
    ))
}

/// One gradient-descent step on the selection logits.
pub fn prob_update_step(net: &mut Network, batch: &Batch, costs: &[Vec<f64>], cfg: &SearchConfig) -> Result<ProbLoss> {
    let (loss, grads) = probability_gradients(net, batch, costs, cfg)?;
    if !loss.loss.is_finite() {
        return Err(Error::Numeric("probability loss is not finite".into()));
    }
    for c in net.choice_layers_mut() {
        if let Some(g) = grads.get(&c.spec.layer_id) {
            c.logits.iter_mut().zip(g).for_each(|(a, d)| *a -= cfg.prob_lr * d);
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub layer_id: String,
    pub r1: usize,
    pub r2: usize,
    pub probability: f64,
    pub cost: f64,
}

impl LayerSelection {
    pub fn ranks(&self) -> RankPair {
        RankPair::new(self.r1, self.r2)
    }
}

/// Chosen ranks per searched layer and the provenance of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub layers: Vec<LayerSelection>,
    /// Sum of the chosen candidates' costs.
    pub expected_cost: f64,
    #[serde(with = "budget_serde")]
    pub budget: f64,
    pub config_hash: String,
    pub seed: u64,
    pub epochs: usize,
}

impl SelectionResult {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("selection serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::data(format!("selection file: {e}")))
    }

    pub fn ranks(&self) -> BTreeMap<String, RankPair> {
        self.layers.iter().map(|l| (l.layer_id.clone(), l.ranks())).collect()
    }
}

/// Index of the most probable branch; ties go to lower cost, then lower
/// `r1 + r2`, then earlier candidates.
pub fn argmax_branch(c: &ChoiceConv, costs: &[f64]) -> usize {
    let p = c.probabilities();
    (0..p.len())
        .min_by(|&a, &b| {
            p[b].total_cmp(&p[a])
                .then(costs[a].total_cmp(&costs[b]))
                .then_with(|| {
                    let (ra, rb) = (c.branches[a].ranks(), c.branches[b].ranks());
                    (ra.r1 + ra.r2).cmp(&(rb.r1 + rb.r2))
                })
                .then(a.cmp(&b))
        })
        .expect("at least one branch")
}

pub fn select(net: &Network, cost: &CostModel, cfg: &SearchConfig, config_hash: &str, epochs: usize) -> Result<SelectionResult> {
    let costs = branch_costs(net, cost)?;
    let layers: Vec<LayerSelection> = net
        .choice_layers()
        .zip(&costs)
        .map(|(c, k)| {
            let j = argmax_branch(c, k);
            let r = c.branches[j].ranks();
            LayerSelection {
                layer_id: c.spec.layer_id.clone(),
                r1: r.r1,
                r2: r.r2,
                probability: c.probabilities()[j],
                cost: k[j],
            }
        })
        .collect();
    Ok(SelectionResult {
        expected_cost: layers.iter().map(|l| l.cost).sum(),
        layers,
        budget: cfg.budget,
        config_hash: config_hash.to_string(),
        seed: cfg.seed,
        epochs,
    })
}

/// Standalone model keeping only the selected branch of each searched layer.
pub fn finalize(net: &Network, result: &SelectionResult) -> Result<Network> {
    let ranks = result.ranks();
    if ranks.len() != net.num_choice_layers() {
        return Err(Error::arg(format!(
            "selection covers {} layers, network has {} searched layers",
            ranks.len(),
            net.num_choice_layers()
        )));
    }
    let mut out = net.clone();
    for layer in &mut out.layers {
        let Layer::Choice(c) = layer else { continue };
        let r = ranks
            .get(&c.spec.layer_id)
            .ok_or_else(|| Error::arg(format!("selection lacks layer `{}`", c.spec.layer_id)))?;
        let f = c
            .branches
            .iter()
            .find(|b| b.ranks() == *r)
            .ok_or_else(|| {
                Error::arg(format!(
                    "layer `{}` has no branch at ranks ({}, {})",
                    c.spec.layer_id, r.r1, r.r2
                ))
            })?
            .clone();
        *layer = Layer::Tucker(TuckerConv {
            spec: c.spec.clone(),
            factors: f,
        });
    }
    Ok(out)
}

/// Fine-tuning settings for a finalized model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub lambda: f64,
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lambda: 0.0,
            sgd: SgdConfig {
                schedule: LrSchedule {
                    initial: 0.01,
                    ..LrSchedule::default()
                },
                ..SgdConfig::default()
            },
            batch_size: 64,
            seed: 0,
        }
    }
}

/// SGD epochs on a finalized model. Returns the mean loss of each epoch.
pub fn fine_tune(
    net: &mut Network,
    dense: &Network,
    data: &crate::nn::Dataset,
    train: &[usize],
    cfg: &FineTuneConfig,
) -> Result<Vec<f64>> {
    use rand::SeedableRng;
    if net.num_choice_layers() > 0 {
        return Err(Error::State("fine-tuning needs a finalized model".into()));
    }
    let mut opt = OptimizerState::new(cfg.sgd)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let reference = (cfg.lambda > 0.0).then_some(dense);
    (0..cfg.epochs)
        .map(|e| {
            let l = crate::nn::train::train_epoch(net, reference, data, train, &mut opt, e, cfg.batch_size, cfg.lambda, &mut rng)?;
            Ok(l.iter().map(|s| s.total).sum::<f64>() / l.len().max(1) as f64)
        })
        .collect()
}

/// Probability entropy `-Σ p ln p`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}
