//! TOML run configuration. Every key can be overridden by the flag of the
//! same name (underscores become dashes).

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub network: Option<String>,
    pub data: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub latency_table: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub dense: Option<PathBuf>,
    pub plan: Option<PathBuf>,
    pub ranks: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub budget: Option<f64>,
    pub eta: Option<f64>,
    pub theta: Option<f64>,
    pub lambda: Option<f64>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub prob_lr: Option<f64>,
    pub weight_lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub validation_fraction: Option<f64>,
    pub refine_iters: Option<usize>,
    pub flops_proxy: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: Option<usize>,
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsSection,
    pub plan: PlanSection,
    pub search: SearchSection,
    pub train: TrainSection,
    pub finetune: FinetuneSection,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::Parse {
                path: origin.to_string(),
                line,
                message: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_parse() {
        let c = RunConfig::parse(
            "[paths]\nnetwork = \"desk\"\n[search]\nbudget = 0.5\nflops_proxy = true\n[plan]\nalpha = 4.0\n",
            "mem",
        )
        .unwrap();
        assert_eq!(c.search.budget, Some(0.5));
        assert_eq!(c.plan.alpha, Some(4.0));
        assert_eq!(c.paths.network.as_deref(), Some("desk"));
    }

    #[test]
    fn unknown_key_reports_line() {
        let e = RunConfig::parse("[search]\nbudget = 1.0\nbudgte = 2.0\n", "run.toml").unwrap_err();
        match e {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
