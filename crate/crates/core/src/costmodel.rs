//! Layer-wise hardware cost: latency lookup tables, a FLOPs proxy, and the
//! expected-cost penalty applied during probability updates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textfmt::split_preamble;
use crate::tucker::{ConvLayerSpec, RankPair};

/// Header metadata of a latency table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub device: String,
    pub batch: usize,
    pub unit: String,
    pub note: String,
}

/// Measured (or synthesized) cost per `(layer_id, r1, r2)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencyTable {
    pub meta: TableMeta,
    entries: BTreeMap<String, BTreeMap<(usize, usize), f64>>,
}

impl LatencyTable {
    pub fn new(meta: TableMeta) -> Self {
        Self {
            meta,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, layer_id: &str, ranks: RankPair, cost: f64) -> Result<()> {
        if !(cost.is_finite() && cost > 0.0) {
            return Err(Error::data(format!(
                "cost for `{layer_id}` ({}, {}) must be positive, got {cost}",
                ranks.r1, ranks.r2
            )));
        }
        if ranks.r1 == 0 || ranks.r2 == 0 {
            return Err(Error::data(format!("ranks for `{layer_id}` must be positive")));
        }
        let layer = self.entries.entry(layer_id.to_string()).or_default();
        if layer.insert((ranks.r1, ranks.r2), cost).is_some() {
            return Err(Error::data(format!(
                "duplicate entry for `{layer_id}` ({}, {})",
                ranks.r1, ranks.r2
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layers(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Exact entry, else the entry with both ranks ≥ the request that is
    /// closest in L1 distance (ties to the smaller rank pair).
    pub fn lookup(&self, layer_id: &str, ranks: RankPair) -> Result<f64> {
        let miss = || Error::CostResolution {
            layer_id: layer_id.to_string(),
            r1: ranks.r1,
            r2: ranks.r2,
        };
        let layer = self.entries.get(layer_id).ok_or_else(miss)?;
        if let Some(&c) = layer.get(&(ranks.r1, ranks.r2)) {
            return Ok(c);
        }
        layer
            .iter()
            .filter(|(&(a, b), _)| a >= ranks.r1 && b >= ranks.r2)
            .min_by_key(|(&(a, b), _)| (a - ranks.r1 + b - ranks.r2, a, b))
            .map(|(_, &c)| c)
            .ok_or_else(miss)
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let (directives, body, body_line) = split_preamble(text);
        let mut meta = TableMeta::default();
        for d in directives {
            match d.key.as_str() {
                "device" => meta.device = d.value,
                "batch" => {
                    meta.batch = d
                        .value
                        .parse()
                        .map_err(|_| parse_err(d.line, format!("bad batch size `{}`", d.value)))?
                }
                "unit" => meta.unit = d.value,
                "note" => meta.note = d.value,
                other => return Err(parse_err(d.line, format!("unknown header key `{other}`"))),
            }
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(body.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| parse_err(body_line, e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["layer_id", "r1", "r2", "cost"] {
            return Err(parse_err(body_line, "header must be `layer_id,r1,r2,cost`".into()));
        }
        let mut table = LatencyTable::new(meta);
        for (k, record) in reader.records().enumerate() {
            let line = body_line + 1 + k;
            let record = record.map_err(|e| parse_err(line, e.to_string()))?;
            if record.len() != 4 {
                return Err(parse_err(line, format!("expected 4 fields, got {}", record.len())));
            }
            let num = |i: usize| -> Result<usize> {
                record[i]
                    .parse()
                    .map_err(|_| parse_err(line, format!("bad rank `{}`", &record[i])))
            };
            let cost: f64 = record[3]
                .parse()
                .map_err(|_| parse_err(line, format!("bad cost `{}`", &record[3])))?;
            table
                .insert(&record[0], RankPair::new(num(1)?, num(2)?), cost)
                .map_err(|e| parse_err(line, e.to_string()))?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# device={}", self.meta.device);
        let _ = writeln!(out, "# batch={}", self.meta.batch);
        let _ = writeln!(out, "# unit={}", self.meta.unit);
        if !self.meta.note.is_empty() {
            let _ = writeln!(out, "# note={}", self.meta.note);
        }
        out.push_str("layer_id,r1,r2,cost\n");
        for (layer, rows) in &self.entries {
            for (&(a, b), c) in rows {
                let _ = writeln!(out, "{layer},{a},{b},{c}");
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// `Σ_j p_j · cost_j`. The gradient with respect to `probs` is `costs`.
pub fn expected_layer_cost(probs: &[f64], costs: &[f64]) -> Result<f64> {
    if probs.len() != costs.len() || probs.is_empty() {
        return Err(Error::arg(format!(
            "{} probabilities for {} costs",
            probs.len(),
            costs.len()
        )));
    }
    if probs.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::arg("probabilities must be nonnegative"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!("probabilities sum to {total}, expected 1")));
    }
    Ok(probs.iter().zip(costs).map(|(p, c)| p * c).sum())
}

fn check_penalty_args(total: f64, budget: f64, eta: f64, theta: f64) -> Result<()> {
    if !(budget > 0.0) {
        return Err(Error::arg(format!("budget must be positive, got {budget}")));
    }
    if !(total >= 0.0 && total.is_finite()) {
        return Err(Error::arg(format!("expected cost must be finite and nonnegative, got {total}")));
    }
    if !(eta > 0.0 && eta.is_finite()) || !(theta >= 0.0 && theta.is_finite()) {
        return Err(Error::arg(format!("need eta > 0 and theta >= 0, got {eta}, {theta}")));
    }
    Ok(())
}

/// `η · (total / ε)^θ`. An infinite budget disables the hardware term and
/// returns `η`.
pub fn penalty_factor(total_expected: f64, budget: f64, eta: f64, theta: f64) -> Result<f64> {
    check_penalty_args(total_expected, budget, eta, theta)?;
    if budget.is_infinite() {
        return Ok(eta);
    }
    Ok(eta * (total_expected / budget).powf(theta))
}

/// Derivative of [`penalty_factor`] with respect to `total_expected`.
pub fn penalty_derivative(total_expected: f64, budget: f64, eta: f64, theta: f64) -> Result<f64> {
    check_penalty_args(total_expected, budget, eta, theta)?;
    if budget.is_infinite() || theta == 0.0 {
        return Ok(0.0);
    }
    Ok(eta * theta * (total_expected / budget).powf(theta - 1.0) / budget)
}

/// Per-layer expected costs, their total and the resulting penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_layer_expected: Vec<f64>,
    pub total_expected: f64,
    pub budget: f64,
    pub penalty_factor: f64,
}

impl CostReport {
    pub fn new(per_layer_expected: Vec<f64>, budget: f64, eta: f64, theta: f64) -> Result<Self> {
        let total_expected: f64 = per_layer_expected.iter().sum();
        let penalty_factor = penalty_factor(total_expected, budget, eta, theta)?;
        Ok(Self {
            per_layer_expected,
            total_expected,
            budget,
            penalty_factor,
        })
    }
}

/// Floating-point operations of one forward pass of a single sample, with a
/// multiply-accumulate counted as two. `None` ranks means the dense layer.
pub fn count_flops(spec: &ConvLayerSpec, ranks: Option<RankPair>, input_hw: (usize, usize)) -> u64 {
    let (h, w) = input_hw;
    let (oh, ow) = spec.output_hw(h, w).unwrap_or((0, 0));
    let out_area = (oh * ow) as u64;
    let in_area = (h * w) as u64;
    let f = spec.out_channels as u64;
    let c = spec.in_channels as u64;
    let k = spec.kernel_area() as u64;
    match ranks {
        None => 2 * f * c * k * out_area,
        Some(r) => {
            let (r1, r2) = (r.r1 as u64, r.r2 as u64);
            2 * r2 * c * in_area + 2 * r1 * r2 * k * out_area + 2 * f * r1 * out_area
        }
    }
}

/// Spatial context needed to price a layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub spec: ConvLayerSpec,
    /// Input `(H, W)`.
    pub input_hw: (usize, usize),
}

/// Where per-candidate costs come from.
#[derive(Debug, Clone, PartialEq)]
pub enum CostSource {
    Table(LatencyTable),
    /// `cost = FLOPs · scale`.
    FlopsProxy { scale: f64 },
}

/// Resolves the cost of any `(layer, ranks)` of a network.
#[derive(Debug, Clone)]
pub struct CostModel {
    source: CostSource,
    layers: BTreeMap<String, LayerGeometry>,
}

impl CostModel {
    pub fn new(source: CostSource, layers: impl IntoIterator<Item = LayerGeometry>) -> Self {
        Self {
            source,
            layers: layers.into_iter().map(|g| (g.spec.layer_id.clone(), g)).collect(),
        }
    }

    pub fn source(&self) -> &CostSource {
        &self.source
    }

    pub fn geometry(&self, layer_id: &str) -> Result<&LayerGeometry> {
        self.layers
            .get(layer_id)
            .ok_or_else(|| Error::arg(format!("cost model has no layer `{layer_id}`")))
    }

    pub fn cost(&self, layer_id: &str, ranks: RankPair) -> Result<f64> {
        match &self.source {
            CostSource::Table(t) => t.lookup(layer_id, ranks),
            CostSource::FlopsProxy { scale } => {
                let g = self.geometry(layer_id)?;
                Ok(count_flops(&g.spec, Some(ranks), g.input_hw) as f64 * scale)
            }
        }
    }

    /// Cost of the uncompressed layer. Tables carry factorized entries only,
    /// so the full-rank entry stands in for the dense layer there.
    pub fn dense_cost(&self, layer_id: &str) -> Result<f64> {
        let g = self.geometry(layer_id)?;
        match &self.source {
            CostSource::Table(t) => t.lookup(layer_id, g.spec.full_ranks()),
            CostSource::FlopsProxy { scale } => Ok(count_flops(&g.spec, None, g.input_hw) as f64 * scale),
        }
    }
}

/// Synthetic latency with plateaus: ranks are padded up to a tile
/// granularity before pricing the three factorized stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauModel {
    pub granularity: usize,
    /// Fixed per-layer launch overhead.
    pub base: f64,
    /// Cost per FLOP.
    pub per_flop: f64,
}

impl PlateauModel {
    fn pad(&self, r: usize) -> usize {
        r.div_ceil(self.granularity) * self.granularity
    }

    pub fn cost(&self, g: &LayerGeometry, ranks: RankPair) -> f64 {
        let padded = RankPair::new(self.pad(ranks.r1), self.pad(ranks.r2));
        self.base + self.per_flop * count_flops(&g.spec, Some(padded), g.input_hw) as f64
    }

    pub fn dense_cost(&self, g: &LayerGeometry) -> f64 {
        self.base + self.per_flop * count_flops(&g.spec, None, g.input_hw) as f64
    }

    /// Table with entries at every multiple of `grid` plus the full ranks.
    pub fn table(&self, layers: &[LayerGeometry], grid: usize, meta: TableMeta) -> Result<LatencyTable> {
        if grid == 0 || self.granularity == 0 {
            return Err(Error::arg("grid and granularity must be positive"));
        }
        let mut table = LatencyTable::new(meta);
        for g in layers {
            let axis = |n: usize| -> Vec<usize> {
                let mut v: Vec<usize> = (1..=n / grid).map(|k| k * grid).collect();
                if v.last() != Some(&n) {
                    v.push(n);
                }
                v
            };
            for &a in &axis(g.spec.out_channels) {
                for &b in &axis(g.spec.in_channels) {
                    table.insert(&g.spec.layer_id, RankPair::new(a, b), self.cost(g, RankPair::new(a, b)))?;
                }
            }
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_table() -> LatencyTable {
        let mut t = LatencyTable::new(TableMeta {
            device: "test".into(),
            batch: 1,
            unit: "ms".into(),
            note: String::new(),
        });
        for a in [32, 64] {
            for b in [32, 64] {
                t.insert("L3", RankPair::new(a, b), (a + 2 * b) as f64).unwrap();
            }
        }
        t
    }

    #[test]
    fn lookup_exact_and_ceiling() {
        let t = grid_table();
        assert_eq!(t.lookup("L3", RankPair::new(32, 32)).unwrap(), 96.0);
        assert_eq!(t.lookup("L3", RankPair::new(30, 30)).unwrap(), 96.0);
        assert_eq!(t.lookup("L3", RankPair::new(33, 10)).unwrap(), 128.0);
        assert!(matches!(
            t.lookup("L3", RankPair::new(65, 1)),
            Err(Error::CostResolution { .. })
        ));
        assert!(t.lookup("nope", RankPair::new(1, 1)).is_err());
    }

    #[test]
    fn duplicate_and_nonpositive_rejected() {
        let mut t = grid_table();
        assert!(t.insert("L3", RankPair::new(32, 32), 1.0).is_err());
        assert!(t.insert("L3", RankPair::new(1, 1), 0.0).is_err());
        let text = "# unit=ms\nlayer_id,r1,r2,cost\na,1,1,2\na,1,1,3\n";
        let err = LatencyTable::parse(text, "t.csv").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
    }

    #[test]
    fn csv_roundtrip_bytes() {
        let text = "# device=rtx\n# batch=128\n# unit=ms\nlayer_id,r1,r2,cost\nb,2,2,0.5\na,1,1,1.25\n";
        let t = LatencyTable::parse(text, "t").unwrap();
        assert_eq!(t.meta.device, "rtx");
        assert_eq!(t.meta.batch, 128);
        let once = t.to_csv();
        assert_eq!(LatencyTable::parse(&once, "t").unwrap().to_csv(), once);
    }

    #[test]
    fn bad_header_rejected() {
        assert!(LatencyTable::parse("layer,r1,r2,cost\n", "t").is_err());
        assert!(LatencyTable::parse("# colour=red\nlayer_id,r1,r2,cost\n", "t").is_err());
    }

    #[test]
    fn expected_cost_basics() {
        assert_eq!(expected_layer_cost(&[0.5, 0.5], &[10.0, 20.0]).unwrap(), 15.0);
        assert_eq!(expected_layer_cost(&[0.0, 1.0, 0.0], &[1.0, 7.0, 3.0]).unwrap(), 7.0);
        assert!(expected_layer_cost(&[0.5], &[1.0, 2.0]).is_err());
        assert!(expected_layer_cost(&[0.5, 0.6], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn penalty_basics() {
        assert_eq!(penalty_factor(3.0, 3.0, 1.7, 0.6).unwrap(), 1.7);
        assert_eq!(penalty_factor(2.0, 1.0, 1.0, 1.0).unwrap(), 2.0);
        assert_eq!(penalty_factor(5.0, 2.0, 1.3, 0.0).unwrap(), 1.3);
        assert_eq!(penalty_factor(5.0, f64::INFINITY, 1.3, 0.6).unwrap(), 1.3);
        assert!(penalty_factor(1.0, 0.0, 1.0, 1.0).is_err());
        assert!(penalty_factor(1.0, -1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn penalty_derivative_matches_difference() {
        let (s, e, eta, th) = (1.7, 1.0, 1.2, 0.6);
        let h = 1e-6;
        let fd = (penalty_factor(s + h, e, eta, th).unwrap() - penalty_factor(s - h, e, eta, th).unwrap()) / (2.0 * h);
        assert!((penalty_derivative(s, e, eta, th).unwrap() - fd).abs() < 1e-8);
    }

    #[test]
    fn flops_counts() {
        let s = ConvLayerSpec::new("a", 1, 1, (1, 1), 1, 0).unwrap();
        assert_eq!(count_flops(&s, None, (1, 1)), 2);
        assert_eq!(count_flops(&s, Some(RankPair::new(1, 1)), (1, 1)), 6);
    }

    #[test]
    fn plateau_table_has_plateaus() {
        let g = LayerGeometry {
            spec: ConvLayerSpec::new("c", 16, 16, (3, 3), 1, 1).unwrap(),
            input_hw: (8, 8),
        };
        let m = PlateauModel {
            granularity: 8,
            base: 0.01,
            per_flop: 1e-6,
        };
        let t = m.table(std::slice::from_ref(&g), 4, TableMeta::default()).unwrap();
        assert_eq!(t.len(), 16);
        assert_eq!(
            t.lookup("c", RankPair::new(4, 4)).unwrap(),
            t.lookup("c", RankPair::new(8, 8)).unwrap()
        );
        assert!(t.lookup("c", RankPair::new(12, 12)).unwrap() > t.lookup("c", RankPair::new(8, 8)).unwrap());
        let model = CostModel::new(CostSource::Table(t), [g.clone()]);
        assert_eq!(model.dense_cost("c").unwrap(), m.cost(&g, RankPair::new(16, 16)));
    }
}
