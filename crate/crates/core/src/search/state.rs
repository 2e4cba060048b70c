use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    branch_costs, build_supernet, entropy, prob_update_step, sample_path, select, total_expected_cost,
    weight_update_step, SearchConfig, SelectionResult,
};
use crate::checkpoint::{hash_text, hex, Checkpoint, NamedTensor};
use crate::costmodel::{penalty_factor, CostModel};
use crate::error::{Error, Result};
use crate::nn::data::Dataset;
use crate::nn::network::Network;
use crate::nn::optim::OptimizerState;
use crate::rankspace::RankSpacePlan;

/// Hash over the search configuration and the rank plan.
pub fn config_hash(cfg: &SearchConfig, plan: &RankSpacePlan) -> [u8; 32] {
    let cfg_json = serde_json::to_string(cfg).expect("config serializes");
    hash_text(&format!("{cfg_json}\n{}", plan.to_json()))
}

/// Read-only inputs of a search run.
pub struct SearchContext<'a> {
    pub dense: &'a Network,
    pub cost: &'a CostModel,
    pub data: &'a Dataset,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl<'a> SearchContext<'a> {
    /// Splits `data` by the configured validation fraction.
    pub fn new(dense: &'a Network, cost: &'a CostModel, data: &'a Dataset, cfg: &SearchConfig) -> Result<Self> {
        let (train, val) = data.split(cfg.validation_fraction)?;
        Ok(Self {
            dense,
            cost,
            data,
            train,
            val,
        })
    }
}

/// One JSON-lines record of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_ce: f64,
    pub approach: f64,
    pub val_ce: f64,
    pub prob_loss: f64,
    pub expected_cost: f64,
    pub penalty: f64,
    pub entropy: BTreeMap<String, f64>,
    pub probabilities: BTreeMap<String, Vec<f64>>,
    /// Training cross-entropy of every weight step in the epoch.
    #[serde(skip)]
    pub step_ce: Vec<f64>,
    /// Training loss `CE + λ·approach` of every weight step.
    #[serde(skip)]
    pub step_loss: Vec<f64>,
}

/// Everything that changes during a search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    pub cfg: SearchConfig,
    pub plan: RankSpacePlan,
    pub supernet: Network,
    pub opt: OptimizerState,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed weight steps.
    pub step: u64,
}

pub struct SearchOutcome {
    pub state: SearchState,
    pub result: SelectionResult,
    pub metrics: Vec<EpochMetrics>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl SearchState {
    pub fn new(dense: &Network, plan: &RankSpacePlan, cfg: &SearchConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            supernet: build_supernet(dense, plan, cfg.refine_iters)?,
            opt: OptimizerState::new(cfg.weight)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg: cfg.clone(),
            plan: plan.clone(),
            epoch: 0,
            step: 0,
        })
    }

    pub fn config_hash(&self) -> [u8; 32] {
        config_hash(&self.cfg, &self.plan)
    }

    /// Weight steps over shuffled training batches, then probability steps
    /// over the validation batches in order.
    pub fn run_epoch(&mut self, ctx: &SearchContext<'_>) -> Result<EpochMetrics> {
        let costs = branch_costs(&self.supernet, ctx.cost)?;
        let bs = self.cfg.batch_size;
        let mut order = ctx.train.clone();
        order.shuffle(&mut self.rng);
        let (mut step_ce, mut step_loss, mut approach) = (Vec::new(), Vec::new(), Vec::new());
        for chunk in order.chunks(bs) {
            let batch = ctx.data.batch(chunk)?;
            let path = sample_path(&self.supernet, &mut self.rng)?;
            let l = weight_update_step(
                &mut self.supernet,
                &batch,
                &path,
                ctx.dense,
                self.cfg.lambda,
                &mut self.opt,
                self.epoch,
            )?;
            step_ce.push(l.ce);
            step_loss.push(l.total);
            approach.push(l.approach);
            self.step += 1;
        }
        let (mut val_ce, mut prob_loss) = (Vec::new(), Vec::new());
        for chunk in ctx.val.chunks(bs) {
            let batch = ctx.data.batch(chunk)?;
            let l = prob_update_step(&mut self.supernet, &batch, &costs, &self.cfg)?;
            val_ce.push(l.ce);
            prob_loss.push(l.loss);
        }
        self.epoch += 1;
        let expected_cost = total_expected_cost(&self.supernet, &costs)?;
        let mut entropies = BTreeMap::new();
        let mut probabilities = BTreeMap::new();
        for c in self.supernet.choice_layers() {
            let p = c.probabilities();
            entropies.insert(c.spec.layer_id.clone(), entropy(&p));
            probabilities.insert(c.spec.layer_id.clone(), p);
        }
        Ok(EpochMetrics {
            epoch: self.epoch,
            train_loss: mean(&step_loss),
            train_ce: mean(&step_ce),
            approach: mean(&approach),
            val_ce: mean(&val_ce),
            prob_loss: mean(&prob_loss),
            expected_cost,
            penalty: penalty_factor(expected_cost, self.cfg.budget, self.cfg.eta, self.cfg.theta)?,
            entropy: entropies,
            probabilities,
            step_ce,
            step_loss,
        })
    }

    /// Runs until `cfg.epochs` epochs are complete, calling `on_epoch` after each.
    pub fn run(
        &mut self,
        ctx: &SearchContext<'_>,
        mut on_epoch: impl FnMut(&SearchState, &EpochMetrics) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::new();
        while self.epoch < self.cfg.epochs {
            let m = self.run_epoch(ctx)?;
            on_epoch(self, &m)?;
            out.push(m);
        }
        Ok(out)
    }

    pub fn selection(&self, cost: &CostModel) -> Result<SelectionResult> {
        select(&self.supernet, cost, &self.cfg, &hex(&self.config_hash()), self.epoch)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.config_hash());
        self.supernet.write_to(&mut c);
        for (name, v) in &self.opt.velocity {
            c.insert(format!("opt/{name}"), NamedTensor::f64(&[v.len()], v.clone()));
        }
        let mut rng = self.rng.get_seed().to_vec();
        rng.extend(self.rng.get_word_pos().to_le_bytes());
        rng.extend(self.rng.get_stream().to_le_bytes());
        c.insert("search/rng", NamedTensor::bytes(rng));
        c.insert("search/progress", NamedTensor::i64(vec![self.epoch as i64, self.step as i64]));
        let cfg = serde_json::to_string(&self.cfg).expect("config serializes");
        c.insert("meta/config", NamedTensor::bytes(cfg.into_bytes()));
        c.insert("meta/plan", NamedTensor::bytes(self.plan.to_json().into_bytes()));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let cfg: SearchConfig = serde_json::from_str(c.text("meta/config")?)
            .map_err(|e| Error::data(format!("checkpoint config: {e}")))?;
        let plan = RankSpacePlan::from_json(c.text("meta/plan")?)?;
        if config_hash(&cfg, &plan) != c.config_hash {
            return Err(Error::data("checkpoint config hash does not match its contents"));
        }
        let supernet = Network::read_from(c)?;
        let mut opt = OptimizerState::new(cfg.weight)?;
        for name in c.tensors.keys().filter(|k| k.starts_with("opt/")) {
            let (_, v) = c.f64s(name)?;
            opt.velocity.insert(name["opt/".len()..].to_string(), v.to_vec());
        }
        let raw = c.bytes("search/rng")?;
        if raw.len() != 56 {
            return Err(Error::data("rng state must be 56 bytes"));
        }
        let mut rng = ChaCha8Rng::from_seed(raw[..32].try_into().expect("32 bytes"));
        rng.set_stream(u64::from_le_bytes(raw[48..56].try_into().expect("8 bytes")));
        rng.set_word_pos(u128::from_le_bytes(raw[32..48].try_into().expect("16 bytes")));
        let progress = c.i64s("search/progress")?;
        let [epoch, step] = progress else {
            return Err(Error::data("search/progress must hold two values"));
        };
        Ok(Self {
            cfg,
            plan,
            supernet,
            opt,
            rng,
            epoch: *epoch as usize,
            step: *step as u64,
        })
    }
}

/// Builds the supernet, runs every epoch and selects the final ranks.
pub fn run_search(
    ctx: &SearchContext<'_>,
    plan: &RankSpacePlan,
    cfg: &SearchConfig,
    on_epoch: impl FnMut(&SearchState, &EpochMetrics) -> Result<()>,
) -> Result<SearchOutcome> {
    let mut state = SearchState::new(ctx.dense, plan, cfg)?;
    let metrics = state.run(ctx, on_epoch)?;
    let result = state.selection(ctx.cost)?;
    Ok(SearchOutcome { state, result, metrics })
}
