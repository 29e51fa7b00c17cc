//! Reuse strategies against a step-reduced sampler of matching latency.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{full_latency, latency_estimate, psnr, PSNR_CAP_DB};
use crate::model::{ModelWeights, PromptSpec};
use crate::reuse::{ReuseConfig, StrategyVector};
use crate::sampler::{sample_reference, SamplerConfig};
use crate::search::{hurry, phast_search, ModelUtility, SearchConfig, SearchReport, Utility};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub name: String,
    pub steps: usize,
    pub strategy: Option<StrategyVector>,
    pub latency_ms: f64,
    /// Mean PSNR against the full reference sampler.
    pub psnr_db: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub search: SearchReport,
}

impl CompareReport {
    pub fn row(&self, name: &str) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Step count whose no-reuse latency is closest to `target_ms`.
pub fn matched_steps(target_ms: f64, config: &SamplerConfig) -> usize {
    let per_step = full_latency(1, &config.cost_model);
    ((target_ms / per_step).round() as usize).max(1)
}

/// Reference, HURRY, PHAST and a reduced-step sampler, each scored by mean
/// PSNR against the `config.steps` reference over `cases`. The reduced
/// sampler starts from the same initial noise.
pub fn compare(
    weights: &ModelWeights,
    config: &SamplerConfig,
    reuse: ReuseConfig,
    cases: &[(PromptSpec, u64)],
    search: &SearchConfig,
    reduced_steps: Option<usize>,
) -> Result<CompareReport> {
    if search.steps != config.steps {
        return Err(Error::Config("search and sampler step counts differ".into()));
    }
    let model = &config.cost_model;
    let mut utility = ModelUtility::new(weights, config, reuse, cases.to_vec())?;
    let h = hurry(config.steps, search.reuse_steps)?;
    let hurry_db = utility.evaluate(&h)?;
    let report = phast_search(search, &mut utility)?;

    let hurry_ms = latency_estimate(&h, model);
    let reduced = reduced_steps.unwrap_or_else(|| matched_steps(hurry_ms, config));
    let reduced_cfg = SamplerConfig { steps: reduced, record_observations: false, ..config.clone() };
    let full_cfg = SamplerConfig { record_observations: false, ..config.clone() };
    let reduced_scores: Vec<f64> = cases
        .par_iter()
        .map(|(p, seed)| {
            let reference = sample_reference(weights, &SamplerConfig { seed: *seed, ..full_cfg.clone() }, p)?;
            let short = sample_reference(weights, &SamplerConfig { seed: *seed, ..reduced_cfg.clone() }, p)?;
            psnr(&short.image, &reference.image)
        })
        .collect::<Result<_>>()?;
    let reduced_db = reduced_scores.iter().sum::<f64>() / reduced_scores.len() as f64;

    let rows = vec![
        CompareRow {
            name: "reference".into(),
            steps: config.steps,
            strategy: Some(StrategyVector::all_compute(config.steps)?),
            latency_ms: full_latency(config.steps, model),
            psnr_db: PSNR_CAP_DB,
        },
        CompareRow { name: "hurry".into(), steps: config.steps, strategy: Some(h), latency_ms: hurry_ms, psnr_db: hurry_db },
        CompareRow {
            name: "phast".into(),
            steps: config.steps,
            strategy: Some(report.best.clone()),
            latency_ms: latency_estimate(&report.best, model),
            psnr_db: report.best_utility,
        },
        CompareRow {
            name: "reduced".into(),
            steps: reduced,
            strategy: None,
            latency_ms: full_latency(reduced, model),
            psnr_db: reduced_db,
        },
    ];
    Ok(CompareReport { rows, search: report })
}
