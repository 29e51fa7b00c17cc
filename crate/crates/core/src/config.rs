//! Flat `key=value` run configuration. `#` starts a comment; unknown keys
//! are rejected.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::CostModel;
use crate::model::{PromptSpec, TrainConfig};
use crate::reuse::{Precision, ReuseConfig, ReuseTarget, StrategyVector};
use crate::sampler::{SamplerConfig, Solver};
use crate::search::{SearchConfig, DEFAULT_BUDGET};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub reuse_steps: usize,
    pub solver: Solver,
    pub guidance: f32,
    pub seeds: Vec<u64>,
    pub prompts: Vec<PromptSpec>,
    pub strategy: Option<StrategyVector>,
    pub eta: f32,
    pub epsilon: f64,
    pub precision: Precision,
    pub target: ReuseTarget,
    pub cost: CostModel,
    pub max_rounds: usize,
    pub budget: u64,
    pub train: TrainConfig,
    /// Step count of the reduced sampler in `compare`; matched to the
    /// reuse latency when unset.
    pub reduced_steps: Option<usize>,
    pub window: Option<(usize, usize)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sampler = SamplerConfig::default();
        Self {
            checkpoint: PathBuf::from("model.rlab"),
            steps: sampler.steps,
            reuse_steps: 10,
            solver: sampler.solver,
            guidance: sampler.guidance_scale,
            seeds: vec![0],
            prompts: PromptSpec::all(),
            strategy: None,
            eta: 0.1,
            epsilon: 0.05,
            precision: Precision::F32,
            target: ReuseTarget::AttentionMaps,
            cost: CostModel::default(),
            max_rounds: 100,
            budget: DEFAULT_BUDGET,
            train: TrainConfig::default(),
            reduced_steps: None,
            window: None,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    let items: Vec<T> = v.split(',').map(|s| num(key, s.trim())).collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key}: empty list")));
    }
    Ok(items)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "steps" => self.steps = num(key, v)?,
            "reuse_steps" => self.reuse_steps = num(key, v)?,
            "solver" => self.solver = v.parse()?,
            "guidance" => self.guidance = num(key, v)?,
            "seeds" => self.seeds = list(key, v)?,
            "prompts" => {
                self.prompts = if v == "all" { PromptSpec::all() } else { list(key, v)? };
            }
            "strategy" => self.strategy = Some(v.parse()?),
            "eta" => self.eta = num(key, v)?,
            "epsilon" => self.epsilon = num(key, v)?,
            "precision" => self.precision = v.parse()?,
            "target" => self.target = v.parse()?,
            "full_call_ms" => self.cost.full_call_ms = num(key, v)?,
            "reuse_call_ms" => self.cost.reuse_call_ms = num(key, v)?,
            "passes_per_step" => self.cost.passes_per_step = num(key, v)?,
            "max_rounds" => self.max_rounds = num(key, v)?,
            "budget" => self.budget = num(key, v)?,
            "train_steps" => self.train.steps = num(key, v)?,
            "batch" => self.train.batch = num(key, v)?,
            "lr" => self.train.lr = num(key, v)?,
            "dataset_size" => self.train.dataset_size = num(key, v)?,
            "reduced_steps" => self.reduced_steps = if v == "auto" { None } else { Some(num(key, v)?) },
            "window" => {
                self.window = if v == "auto" {
                    None
                } else {
                    let w: Vec<usize> = list(key, v)?;
                    match w.as_slice() {
                        [lo, hi] => Some((*lo, *hi)),
                        _ => return Err(Error::Config("window: expected lo,hi".into())),
                    }
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.reuse_steps >= self.steps {
            return Err(Error::Config(format!("reuse_steps {} must be < steps {}", self.reuse_steps, self.steps)));
        }
        if let Some(s) = &self.strategy {
            if s.len() != self.steps {
                return Err(Error::InvalidStrategy(format!("strategy length {} != steps {}", s.len(), self.steps)));
            }
        }
        if !(self.guidance >= 0.0) {
            return Err(Error::Config("guidance must be ≥ 0".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("epsilon must be ≥ 0".into()));
        }
        self.cost.validate()
    }

    /// Every key with its effective value, one per line.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        kv("checkpoint", self.checkpoint.display().to_string());
        kv("steps", self.steps.to_string());
        kv("reuse_steps", self.reuse_steps.to_string());
        kv("solver", match self.solver {
            Solver::Ddim => "ddim",
            Solver::Multistep2 => "multistep2",
        }
        .into());
        kv("guidance", self.guidance.to_string());
        kv("seeds", join(&self.seeds));
        kv("prompts", join(&self.prompts));
        if let Some(st) = &self.strategy {
            kv("strategy", st.to_string());
        }
        kv("eta", self.eta.to_string());
        kv("epsilon", self.epsilon.to_string());
        kv("precision", match self.precision {
            Precision::F32 => "f32",
            Precision::F16 => "f16",
            Precision::I8 => "i8",
        }
        .into());
        kv("target", match self.target {
            ReuseTarget::AttentionMaps => "attention_maps",
            ReuseTarget::Features => "features",
        }
        .into());
        kv("full_call_ms", self.cost.full_call_ms.to_string());
        kv("reuse_call_ms", self.cost.reuse_call_ms.to_string());
        kv("passes_per_step", self.cost.passes_per_step.to_string());
        kv("max_rounds", self.max_rounds.to_string());
        kv("budget", self.budget.to_string());
        kv("train_steps", self.train.steps.to_string());
        kv("batch", self.train.batch.to_string());
        kv("lr", self.train.lr.to_string());
        kv("dataset_size", self.train.dataset_size.to_string());
        kv("reduced_steps", self.reduced_steps.map_or("auto".into(), |n| n.to_string()));
        kv("window", self.window.map_or("auto".into(), |(a, b)| format!("{a},{b}")));
        s
    }

    pub fn sampler_config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            solver: self.solver,
            steps: self.steps,
            guidance_scale: self.guidance,
            seed,
            cost_model: self.cost,
            record_observations: true,
        }
    }

    pub fn reuse_config(&self) -> ReuseConfig {
        ReuseConfig { target: self.target, precision: self.precision }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig { steps: self.steps, reuse_steps: self.reuse_steps, epsilon: self.epsilon, max_rounds: self.max_rounds }
    }

    /// Every `(prompt, seed)` pair, prompt-major.
    pub fn cases(&self) -> Vec<(PromptSpec, u64)> {
        self.prompts.iter().flat_map(|&p| self.seeds.iter().map(move |&s| (p, s))).collect()
    }
}
