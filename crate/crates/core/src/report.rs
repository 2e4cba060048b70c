//! Network-wide compression, parameter/FLOPs accounting and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::costmodel::{count_flops, CostModel};
use crate::error::{Error, Result};
use crate::nn::layers::{Layer, TuckerConv};
use crate::nn::network::Network;
use crate::tucker::{count_params, decompose_with_trace, preservation_ratio, reconstruct, RankPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer_id: String,
    pub kind: String,
    /// `None` for dense layers.
    pub ranks: Option<RankPair>,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub layers: Vec<LayerSummary>,
    pub params: u64,
    pub flops: u64,
}

/// Per-sample FLOPs and parameter counts of every weighted layer. Searched
/// layers still holding every branch count all of them as parameters and
/// are priced at their most probable branch.
pub fn summarize(net: &Network) -> Result<ModelSummary> {
    let geoms: BTreeMap<String, (usize, usize)> = net
        .spec
        .geometries()?
        .into_iter()
        .map(|g| (g.spec.layer_id, g.input_hw))
        .collect();
    let mut layers = Vec::new();
    for layer in &net.layers {
        let s = match layer {
            Layer::Conv(l) => LayerSummary {
                layer_id: l.spec.layer_id.clone(),
                kind: "dense".into(),
                ranks: None,
                params: l.weight.len() as u64,
                flops: count_flops(&l.spec, None, geoms[&l.spec.layer_id]),
            },
            Layer::Tucker(l) => LayerSummary {
                layer_id: l.spec.layer_id.clone(),
                kind: "tucker".into(),
                ranks: Some(l.factors.ranks()),
                params: l.factors.num_params() as u64,
                flops: count_flops(&l.spec, Some(l.factors.ranks()), geoms[&l.spec.layer_id]),
            },
            Layer::Choice(c) => {
                let p = c.probabilities();
                let best = (0..p.len()).fold(0, |b, j| if p[j] > p[b] { j } else { b });
                let r = c.branches[best].ranks();
                LayerSummary {
                    layer_id: c.spec.layer_id.clone(),
                    kind: "searched".into(),
                    ranks: Some(r),
                    params: c.branches.iter().map(|b| b.num_params() as u64).sum(),
                    flops: count_flops(&c.spec, Some(r), geoms[&c.spec.layer_id]),
                }
            }
            Layer::Fc(f) => LayerSummary {
                layer_id: f.layer_id.clone(),
                kind: "fc".into(),
                ranks: None,
                params: (f.weight.data().len() + f.bias.len()) as u64,
                flops: 2 * f.weight.data().len() as u64,
            },
            Layer::Relu | Layer::Pool(_) => continue,
        };
        layers.push(s);
    }
    Ok(ModelSummary {
        params: layers.iter().map(|l| l.params).sum(),
        flops: layers.iter().map(|l| l.flops).sum(),
        layers,
    })
}

/// Sum of costs over the searched conv layers: Tucker layers at their
/// ranks, dense layers at the dense cost. Same scope as the search's
/// expected cost.
pub fn model_cost(net: &Network, cost: &CostModel) -> Result<f64> {
    let searched: Vec<String> = net.spec.searched_specs().into_iter().map(|s| s.layer_id).collect();
    let mut total = 0.0;
    for layer in &net.layers {
        match layer {
            Layer::Tucker(l) if searched.contains(&l.spec.layer_id) => {
                total += cost.cost(&l.spec.layer_id, l.factors.ranks())?
            }
            Layer::Conv(l) if searched.contains(&l.spec.layer_id) => total += cost.dense_cost(&l.spec.layer_id)?,
            Layer::Choice(_) => return Err(Error::State("price a finalized model, not a supernet".into())),
            _ => {}
        }
    }
    Ok(total)
}

/// Percentage reduction from `before` to `after`; negative for growth.
pub fn reduction_pct(before: u64, after: u64) -> f64 {
    if before == 0 {
        0.0
    } else {
        100.0 * (before as f64 - after as f64) / before as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposedLayer {
    pub layer_id: String,
    pub r1: usize,
    pub r2: usize,
    pub n_org: u64,
    pub n_tucker: u64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub rho: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub layers: Vec<DecomposedLayer>,
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub params_reduction_pct: f64,
    pub flops_reduction_pct: f64,
}

impl CompressionReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>9} {:>10} {:>10} {:>12} {:>12} {:>7} {:>10}",
            "layer", "ranks", "n_org", "n_tucker", "flops", "flops_tk", "rho", "rel_err"
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:<16} {:>9} {:>10} {:>10} {:>12} {:>12} {:>7.4} {:>10.3e}",
                l.layer_id,
                format!("({},{})", l.r1, l.r2),
                l.n_org,
                l.n_tucker,
                l.flops_before,
                l.flops_after,
                l.rho,
                l.relative_error
            );
        }
        let _ = writeln!(
            out,
            "params {} -> {} ({:.2}% reduction), FLOPs {} -> {} ({:.2}% reduction)",
            self.params_before,
            self.params_after,
            self.params_reduction_pct,
            self.flops_before,
            self.flops_after,
            self.flops_reduction_pct
        );
        out
    }
}

/// Replaces the listed dense conv layers by Tucker-2 layers at the given
/// ranks. Every searched layer must be listed.
pub fn compress(
    dense: &Network,
    ranks: &BTreeMap<String, RankPair>,
    refine_iters: usize,
) -> Result<(Network, CompressionReport)> {
    for rec in dense.spec.layers.iter().filter(|l| l.searched) {
        if !ranks.contains_key(&rec.layer_id) {
            return Err(Error::arg(format!("ranks file has no entry for layer `{}`", rec.layer_id)));
        }
    }
    let geoms: BTreeMap<String, (usize, usize)> = dense
        .spec
        .geometries()?
        .into_iter()
        .map(|g| (g.spec.layer_id, g.input_hw))
        .collect();
    let mut net = dense.clone();
    let mut layers = Vec::new();
    let mut done = 0;
    for layer in &mut net.layers {
        let Layer::Conv(l) = layer else { continue };
        let Some(&r) = ranks.get(&l.spec.layer_id) else { continue };
        r.check(&l.spec)
            .map_err(|e| Error::arg(format!("layer `{}`: {e}", l.spec.layer_id)))?;
        let (factors, _) = decompose_with_trace(&l.weight, &l.spec, r, refine_iters)?;
        let (n_org, n_tucker) = count_params(&l.spec, r);
        let hw = geoms[&l.spec.layer_id];
        layers.push(DecomposedLayer {
            layer_id: l.spec.layer_id.clone(),
            r1: r.r1,
            r2: r.r2,
            n_org,
            n_tucker,
            flops_before: count_flops(&l.spec, None, hw),
            flops_after: count_flops(&l.spec, Some(r), hw),
            rho: preservation_ratio(&l.weight, r)?.rho,
            relative_error: reconstruct(&factors).relative_error(&l.weight),
        });
        *layer = Layer::Tucker(TuckerConv {
            spec: l.spec.clone(),
            factors,
        });
        done += 1;
    }
    if done != ranks.len() {
        let unknown = ranks
            .keys()
            .find(|k| !layers.iter().any(|l| &&l.layer_id == k))
            .cloned()
            .unwrap_or_default();
        return Err(Error::arg(format!("ranks file names `{unknown}`, which is not a dense conv layer")));
    }
    let before = summarize(dense)?;
    let after = summarize(&net)?;
    let report = CompressionReport {
        layers,
        params_before: before.params,
        params_after: after.params,
        flops_before: before.flops,
        flops_after: after.flops,
        params_reduction_pct: reduction_pct(before.params, after.params),
        flops_reduction_pct: reduction_pct(before.flops, after.flops),
    };
    Ok((net, report))
}

/// Parses a `layer_id,r1,r2` ranks file (a header row is optional).
pub fn parse_ranks(text: &str, origin: &str) -> Result<BTreeMap<String, RankPair>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut out = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        let perr = |m: String| Error::Parse {
            path: origin.to_string(),
            line,
            message: m,
        };
        if i == 0 && &rec[0] == "layer_id" {
            continue;
        }
        if rec.len() != 3 {
            return Err(perr(format!("expected `layer_id,r1,r2`, found {} fields", rec.len())));
        }
        let r1 = rec[1].parse().map_err(|_| perr(format!("bad rank `{}`", &rec[1])))?;
        let r2 = rec[2].parse().map_err(|_| perr(format!("bad rank `{}`", &rec[2])))?;
        if out.insert(rec[0].to_string(), RankPair::new(r1, r2)).is_some() {
            return Err(perr(format!("duplicate layer `{}`", &rec[0])));
        }
    }
    Ok(out)
}

pub fn ranks_to_csv(ranks: &BTreeMap<String, RankPair>) -> String {
    let mut out = String::from("layer_id,r1,r2\n");
    for (id, r) in ranks {
        let _ = writeln!(out, "{id},{},{}", r.r1, r.r2);
    }
    out
}
