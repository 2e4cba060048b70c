//! Candidate rank space construction from a target compression ratio.
//!
//! Ranks are restricted to multiples of a per-layer step size (latency only
//! changes at coarse rank granularity) and each layer gets the equal-rank
//! pairs plus pairs whose ratio follows the channel ratio.

use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tucker::{count_params, ConvLayerSpec, RankPair};

/// Step sizes for channel buckets 16, 32, 64, 128, 256, 512.
const STEP_TABLE: [usize; 6] = [4, 8, 16, 16, 32, 32];
const SMALL_NETWORK_STEP: usize = 4;
const SMALL_NETWORK_LIMIT: usize = 128;
const ENDPOINT_TOL: f64 = 1e-9;

/// Overall target compression ratio α > 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionTarget {
    alpha: f64,
}

impl CompressionTarget {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 1.0) {
            return Err(Error::arg(format!("compression ratio must be > 1, got {alpha}")));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Per-layer rank scaling such that `r1 = F/α_rank`, `r2 = C/α_rank` gives
/// `n_tucker = n_org / alpha`.
pub fn alpha_rank(spec: &ConvLayerSpec, alpha: f64) -> Result<f64> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::arg(format!("alpha must be positive, got {alpha}")));
    }
    let f = spec.out_channels as f64;
    let c = spec.in_channels as f64;
    let n_org = f * c * spec.kernel_area() as f64;
    let a = c * c + f * f;
    let b = 4.0 * n_org * n_org / alpha;
    // 2·n_org / (√(a² + b) − a), rationalized to avoid cancellation
    Ok(alpha * ((a * a + b).sqrt() + a) / (2.0 * n_org))
}

/// Step size for a layer with `t = min(C, F)` in a network whose widest
/// layer has `max_channels` channels.
pub fn step_size_for(t: usize, max_channels: usize) -> Result<usize> {
    if t == 0 {
        return Err(Error::arg("channel count must be at least 1"));
    }
    if max_channels < SMALL_NETWORK_LIMIT {
        return Ok(SMALL_NETWORK_STEP);
    }
    // bucket index = floor(log2(t / 16)), clamped to the table
    let idx = if t < 32 {
        0
    } else {
        ((t / 16).ilog2() as usize).min(STEP_TABLE.len() - 1)
    };
    Ok(STEP_TABLE[idx])
}

/// Candidate ranks of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer_id: String,
    pub out_channels: usize,
    pub in_channels: usize,
    pub alpha_rank: f64,
    pub step_size: usize,
    /// Relaxed rank interval before clamping and rounding.
    pub interval: (f64, f64),
    pub candidates: Vec<RankPair>,
}

/// Candidate rank pairs for every searched layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSpacePlan {
    pub alpha: f64,
    pub layers: Vec<LayerPlan>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl RankSpacePlan {
    pub fn layer(&self, layer_id: &str) -> Option<&LayerPlan> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }

    /// Number of rank combinations across all layers.
    pub fn search_space_size(&self) -> f64 {
        self.layers.iter().map(|l| l.candidates.len() as f64).product()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text).map_err(|e| Error::data(format!("plan file: {e}")))?;
        for l in &plan.layers {
            if l.candidates.is_empty() {
                return Err(Error::data(format!("plan: layer `{}` has no candidates", l.layer_id)));
            }
        }
        Ok(plan)
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "alpha = {}", self.alpha);
        let _ = writeln!(
            out,
            "{:<16} {:>5} {:>5} {:>9} {:>5} {:>6}  candidates",
            "layer", "F", "C", "a_rank", "step", "count"
        );
        for l in &self.layers {
            let cands: Vec<String> = l.candidates.iter().map(|r| format!("({},{})", r.r1, r.r2)).collect();
            let _ = writeln!(
                out,
                "{:<16} {:>5} {:>5} {:>9.4} {:>5} {:>6}  {}",
                l.layer_id,
                l.out_channels,
                l.in_channels,
                l.alpha_rank,
                l.step_size,
                l.candidates.len(),
                cands.join(" ")
            );
        }
        let _ = writeln!(out, "search space size = {:.4e}", self.search_space_size());
        out
    }
}

/// Rank values along the shared mode for one layer, plus a warning when
/// the fallback was needed.
fn rank_values(t: usize, step: usize, lo: f64, hi: f64) -> (Vec<usize>, Option<String>) {
    let lo_c = lo.max(step as f64);
    let hi_c = hi.min(t as f64);
    if lo_c > hi_c {
        // nearest in-bound multiples of the step, or the boundary itself
        let mut vals: Vec<usize> = (1..=t / step).map(|k| k * step).collect();
        let centre = 0.5 * (lo + hi);
        vals.sort_by(|a, b| {
            (*a as f64 - centre)
                .abs()
                .total_cmp(&(*b as f64 - centre).abs())
                .then(a.cmp(b))
        });
        vals.truncate(2);
        if vals.is_empty() {
            vals.push(t);
        }
        vals.sort_unstable();
        let msg = format!(
            "rank interval [{lo:.3}, {hi:.3}] is empty after clamping to [{step}, {t}]; using {vals:?}"
        );
        return (vals, Some(msg));
    }
    // multiples inside the interval; endpoints within rounding noise of a
    // multiple count as on it
    let s = step as f64;
    let mut lo_k = ((lo_c / s - ENDPOINT_TOL).ceil() as usize).max(1);
    let mut hi_k = (hi_c / s + ENDPOINT_TOL).floor() as usize;
    if lo_k > hi_k {
        // no multiple inside: widen outward to the neighbours
        lo_k = ((lo_c / s + ENDPOINT_TOL).floor() as usize).max(1);
        hi_k = (hi_c / s - ENDPOINT_TOL).ceil() as usize;
    }
    let mut vals: Vec<usize> = (lo_k..=hi_k).map(|k| (k * step).min(t)).collect();
    vals.dedup();
    (vals, None)
}

/// `x` rounded up, then to the nearest multiple of `step`, floored at `step`
/// and capped at `bound`.
fn snap(x: f64, step: usize, bound: usize) -> usize {
    let up = x.ceil();
    let snapped = ((up / step as f64).round() as usize * step).max(step);
    snapped.min(bound)
}

/// Builds the candidate rank pairs for each layer in `specs`.
pub fn build_rank_space(specs: &[ConvLayerSpec], target: CompressionTarget) -> Result<RankSpacePlan> {
    if specs.is_empty() {
        return Err(Error::arg("rank space needs at least one layer"));
    }
    for s in specs {
        s.validate()?;
    }
    let max_channels = specs
        .iter()
        .map(|s| s.in_channels.max(s.out_channels))
        .max()
        .unwrap_or(0);
    let mut layers = Vec::with_capacity(specs.len());
    let mut warnings = Vec::new();

    for spec in specs {
        let (f, c) = (spec.out_channels, spec.in_channels);
        let t = f.min(c);
        let a_rank = alpha_rank(spec, target.alpha())?;
        let step = step_size_for(t, max_channels)?;
        let lo = t as f64 / (a_rank + 2.0);
        let hi = if a_rank > 2.0 {
            t as f64 / (a_rank - 2.0)
        } else {
            t as f64
        };
        let (values, warning) = rank_values(t, step, lo, hi);
        if let Some(w) = warning {
            let w = format!("layer `{}`: {w}", spec.layer_id);
            warn!("{w}");
            warnings.push(w);
        }

        let mut candidates = Vec::with_capacity(values.len() * 2);
        for &r in &values {
            if c >= f {
                let m = c as f64 / f as f64;
                candidates.push(RankPair::new(r, snap(r as f64 / m, step, c)));
            } else {
                let m = f as f64 / c as f64;
                candidates.push(RankPair::new(snap(r as f64 / m, step, f), r));
            }
            candidates.push(RankPair::new(r, r));
        }
        candidates.sort_unstable();
        candidates.dedup();

        // drop pairs that would not shrink the layer, except full rank
        let full = spec.full_ranks();
        let kept: Vec<RankPair> = candidates
            .iter()
            .copied()
            .filter(|&r| {
                let (n_org, n_tucker) = count_params(spec, r);
                r == full || n_tucker < n_org
            })
            .collect();
        let candidates = if kept.is_empty() {
            let w = format!(
                "layer `{}`: no candidate compresses the layer; keeping the smallest pair",
                spec.layer_id
            );
            warn!("{w}");
            warnings.push(w);
            vec![candidates[0]]
        } else {
            kept
        };

        layers.push(LayerPlan {
            layer_id: spec.layer_id.clone(),
            out_channels: f,
            in_channels: c,
            alpha_rank: a_rank,
            step_size: step,
            interval: (lo, hi),
            candidates,
        });
    }
    Ok(RankSpacePlan {
        alpha: target.alpha(),
        layers,
        warnings,
    })
}
