//! Deterministic reverse-diffusion samplers driven by a reuse strategy.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{CostModel, CostTally};
use crate::model::{
    cfg_predict, AttentionDirective, AttentionObservation, AttentionSite, Layer, ModelWeights, Origin, Pass,
    PromptSpec, SiteMode, IMAGE_DIMS, T_TRAIN,
};
use crate::reuse::{cache_memory_bytes, AttentionCache, ReuseConfig, ReuseTarget, StrategyVector};
use crate::tensor::{gaussian, DenseArray, SeededRng};

/// Bound applied to the predicted clean image before each update.
pub const X0_CLIP: f32 = 1.5;

/// Linear β schedule from 1e-4 to 0.02 over 1000 training timesteps.
/// `alpha_bar(0) = 1`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new()
    }
}

impl NoiseSchedule {
    pub const BETA_START: f64 = 1e-4;
    pub const BETA_END: f64 = 0.02;

    pub fn new() -> Self {
        let mut betas = vec![0.0; T_TRAIN + 1];
        let mut alpha_bars = vec![1.0; T_TRAIN + 1];
        for t in 1..=T_TRAIN {
            betas[t] = Self::BETA_START + (Self::BETA_END - Self::BETA_START) * (t - 1) as f64 / (T_TRAIN - 1) as f64;
            alpha_bars[t] = alpha_bars[t - 1] * (1.0 - betas[t]);
        }
        Self { betas, alpha_bars }
    }

    pub fn t_train(&self) -> usize {
        T_TRAIN
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
    pub fn add_noise(&self, x0: &DenseArray, noise: &DenseArray, t: usize) -> Result<DenseArray> {
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.zip_with(noise, |x, n| (a * x as f64 + b * n as f64) as f32)
    }
}

/// The `n` sampling timesteps: uniform stride from `T_TRAIN` down to 1.
pub fn timesteps(n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > T_TRAIN {
        return Err(Error::Config(format!("step count {n} outside 1..={T_TRAIN}")));
    }
    if n == 1 {
        return Ok(vec![T_TRAIN]);
    }
    Ok((1..=n)
        .map(|s| 1 + ((T_TRAIN - 1) as f64 * (n - s) as f64 / (n - 1) as f64).round() as usize)
        .collect())
}

/// Deterministic DDIM update from `t_now` to `t_next`. With `clip`, the
/// predicted clean image is clamped to `[-clip, clip]` and the noise
/// direction is re-derived from the clamped estimate, so a pixel the model
/// overshoots cannot feed back into the next step.
pub fn ddim_step(
    x_t: &DenseArray,
    eps: &DenseArray,
    t_now: usize,
    t_next: usize,
    schedule: &NoiseSchedule,
    clip: Option<f32>,
) -> Result<DenseArray> {
    if t_next > t_now {
        return Err(Error::Domain(format!("DDIM step must go backwards: {t_now} → {t_next}")));
    }
    let ab_now = schedule.alpha_bar(t_now);
    let ab_next = schedule.alpha_bar(t_next);
    let (sa_now, sb_now) = (ab_now.sqrt(), (1.0 - ab_now).sqrt());
    let (sa_next, sb_next) = (ab_next.sqrt(), (1.0 - ab_next).sqrt());
    x_t.zip_with(eps, |x, e| {
        let (x, mut e) = (x as f64, e as f64);
        let mut x0 = (x - sb_now * e) / sa_now;
        if let Some(c) = clip {
            let c = c as f64;
            if x0.abs() > c {
                x0 = x0.clamp(-c, c);
                e = (x - sa_now * x0) / sb_now;
            }
        }
        (sa_next * x0 + sb_next * e) as f32
    })
}

/// Previous noise prediction kept by the multistep solver.
#[derive(Debug, Clone)]
pub struct EpsHistory {
    pub eps: DenseArray,
    pub t: usize,
}

/// Second-order linear multistep: the noise prediction is linearly
/// extrapolated in `t` from `(t_prev, eps_prev)` and `(t_now, eps)` to the
/// midpoint of `[t_next, t_now]`, then used for a DDIM update. Without
/// history this is exactly [`ddim_step`].
pub fn multistep2_step(
    x_t: &DenseArray,
    eps: &DenseArray,
    history: Option<&EpsHistory>,
    t_now: usize,
    t_next: usize,
    schedule: &NoiseSchedule,
    clip: Option<f32>,
) -> Result<DenseArray> {
    let Some(prev) = history else {
        return ddim_step(x_t, eps, t_now, t_next, schedule, clip);
    };
    if prev.t <= t_now {
        return Err(Error::Domain(format!("history timestep {} must exceed {t_now}", prev.t)));
    }
    let t_mid = 0.5 * (t_now as f64 + t_next as f64);
    let k = (t_now as f64 - t_mid) / (prev.t - t_now) as f64;
    let eps_mid = eps.zip_with(&prev.eps, |e, p| (e as f64 + k * (e as f64 - p as f64)) as f32)?;
    ddim_step(x_t, &eps_mid, t_now, t_next, schedule, clip)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Ddim,
    Multistep2,
}

impl FromStr for Solver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(Self::Ddim),
            "multistep2" => Ok(Self::Multistep2),
            _ => Err(Error::Config(format!("unknown solver {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub solver: Solver,
    pub steps: usize,
    pub guidance_scale: f32,
    pub seed: u64,
    pub cost_model: CostModel,
    /// Keep every attention observation in the result.
    pub record_observations: bool,
}

impl SamplerConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        Self { steps, seed, ..Self::default() }
    }

    pub fn timesteps(&self) -> Result<Vec<usize>> {
        timesteps(self.steps)
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            solver: Solver::Ddim,
            steps: 20,
            guidance_scale: 3.0,
            seed: 0,
            cost_model: CostModel::default(),
            record_observations: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleResult {
    /// Final sample mapped to `[0,1]`.
    pub image: DenseArray,
    /// `x` before step 1 (pure noise) through the final `x`, `N+1` entries;
    /// a resumed run starts at the state it resumed from.
    pub trajectory: Vec<DenseArray>,
    pub observations: Vec<AttentionObservation>,
    pub cost: CostTally,
}

impl SampleResult {
    /// Observations of one 1-based step, in [`AttentionSite::ALL`] order.
    pub fn observations_at(&self, step: usize) -> impl Iterator<Item = &AttentionObservation> {
        self.observations.iter().filter(move |o| o.step == step)
    }
}

/// Initial noise for a seed; shared by every step count.
pub fn initial_noise(seed: u64) -> Result<DenseArray> {
    gaussian(&mut SeededRng::new(seed).derive(&[0x0a15e]), &IMAGE_DIMS)
}

/// Seed for the logit perturbation noise at one step.
pub fn perturbation_seed(seed: u64, step: usize) -> u64 {
    SeededRng::new(seed).derive(&[0x9e27, step as u64]).next_u64()
}

/// Perturb all four attention sites of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub step: usize,
    pub eta: f32,
}

enum Plan<'a> {
    Reference,
    Strategy { strategy: &'a StrategyVector, reuse: ReuseConfig },
}

/// Sample with every map computed and no cache.
pub fn sample_reference(weights: &ModelWeights, config: &SamplerConfig, prompt: &PromptSpec) -> Result<SampleResult> {
    run(weights, config, prompt, Plan::Reference, None, None, None)
}

/// Sample under a reuse strategy.
pub fn sample(
    weights: &ModelWeights,
    config: &SamplerConfig,
    prompt: &PromptSpec,
    strategy: &StrategyVector,
    reuse: ReuseConfig,
) -> Result<SampleResult> {
    run(weights, config, prompt, Plan::Strategy { strategy, reuse }, None, None, None)
}

/// Reference sampling with the pre-softmax logits of one step perturbed.
pub fn sample_perturbed(
    weights: &ModelWeights,
    config: &SamplerConfig,
    prompt: &PromptSpec,
    perturbation: Perturbation,
) -> Result<SampleResult> {
    if perturbation.step == 0 || perturbation.step > config.steps {
        return Err(Error::Domain(format!("perturbation step {} outside 1..={}", perturbation.step, config.steps)));
    }
    run(weights, config, prompt, Plan::Reference, Some(perturbation), None, None)
}

/// Everything a strategy run carries between steps, after `done` steps.
#[derive(Debug, Clone)]
pub(crate) struct StepState {
    done: usize,
    x: DenseArray,
    cache: Option<AttentionCache>,
    history: Option<EpsHistory>,
    full_steps: usize,
}

impl StepState {
    pub(crate) fn done(&self) -> usize {
        self.done
    }
}

/// Strategy run that starts from `resume` and appends the state after each
/// further step to `states`. `resume` must come from a run with the same
/// config, prompt and reuse settings whose strategy agrees on the first
/// `resume.done()` steps; the result is then identical to a fresh run.
pub(crate) fn sample_resumable(
    weights: &ModelWeights,
    config: &SamplerConfig,
    prompt: &PromptSpec,
    strategy: &StrategyVector,
    reuse: ReuseConfig,
    resume: Option<&StepState>,
    states: &mut Vec<StepState>,
) -> Result<SampleResult> {
    run(weights, config, prompt, Plan::Strategy { strategy, reuse }, None, resume, Some(states))
}

fn site(layer: Layer, pass: Pass) -> AttentionSite {
    AttentionSite { layer, pass }
}

fn run(
    weights: &ModelWeights,
    config: &SamplerConfig,
    prompt: &PromptSpec,
    plan: Plan<'_>,
    perturbation: Option<Perturbation>,
    resume: Option<&StepState>,
    mut states: Option<&mut Vec<StepState>>,
) -> Result<SampleResult> {
    let ts = config.timesteps()?;
    let n = ts.len();
    let (strategy, mut cache) = match &plan {
        Plan::Reference => (None, None),
        Plan::Strategy { strategy, reuse } => {
            if strategy.len() != n {
                return Err(Error::InvalidStrategy(format!(
                    "strategy has {} steps, sampler has {n}",
                    strategy.len()
                )));
            }
            (Some(*strategy), Some(AttentionCache::new(*reuse)))
        }
    };
    let schedule = NoiseSchedule::new();
    let mut x = initial_noise(config.seed)?;
    let mut history: Option<EpsHistory> = None;
    let mut full_steps = 0;
    let mut start = 1;
    if let Some(r) = resume {
        x = r.x.clone();
        cache = r.cache.clone();
        history = r.history.clone();
        full_steps = r.full_steps;
        start = r.done + 1;
    }
    let mut trajectory = Vec::with_capacity(n + 2 - start);
    trajectory.push(x.clone());
    let mut observations = Vec::new();

    for s in start..=n {
        let t_now = ts[s - 1];
        let t_next = if s < n { ts[s] } else { 0 };
        let computes = strategy.is_none_or(|st| st.computes(s));
        if computes {
            full_steps += 1;
        }
        let mut directives = [AttentionDirective::compute(), AttentionDirective::compute()];
        let mut provenance = [s; 4];
        if let (Some(cache), false) = (cache.as_ref(), computes) {
            for (p, pass) in [Pass::Conditional, Pass::Unconditional].into_iter().enumerate() {
                for layer in [Layer::SelfAttn, Layer::CrossAttn] {
                    let st = site(layer, pass);
                    let (payload, prov) = cache.fetch(st)?;
                    provenance[st.index()] = prov;
                    let mode = match cache.config().target {
                        ReuseTarget::AttentionMaps => SiteMode::ReuseMap(payload),
                        ReuseTarget::Features => SiteMode::ReuseFeature(payload),
                    };
                    match layer {
                        Layer::SelfAttn => directives[p].self_attn = mode,
                        Layer::CrossAttn => directives[p].cross_attn = mode,
                    }
                }
            }
        }
        if let Some(pert) = perturbation.filter(|p| p.step == s) {
            let mode = SiteMode::PerturbLogits { eta: pert.eta, noise_seed: perturbation_seed(config.seed, s) };
            directives = [AttentionDirective::both(mode.clone()), AttentionDirective::both(mode)];
        }

        let (eps, mut obs) =
            cfg_predict(weights, &x, t_now, prompt, config.guidance_scale, &directives[0], &directives[1])?;

        for o in obs.iter_mut() {
            o.step = s;
            o.provenance = provenance[o.site.index()];
        }
        if let (Some(cache), true) = (cache.as_mut(), computes) {
            for o in &obs {
                debug_assert_ne!(o.origin, Origin::Reused);
                let payload = match cache.config().target {
                    ReuseTarget::AttentionMaps => o.map.as_ref().expect("computed sites carry a map"),
                    ReuseTarget::Features => &o.feature,
                };
                cache.store(o.site, payload, s)?;
            }
        }
        if config.record_observations {
            observations.extend(obs);
        }

        let clip = Some(X0_CLIP);
        x = match config.solver {
            Solver::Ddim => ddim_step(&x, &eps, t_now, t_next, &schedule, clip)?,
            Solver::Multistep2 => multistep2_step(&x, &eps, history.as_ref(), t_now, t_next, &schedule, clip)?,
        };
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite sample at step {s}")));
        }
        history = Some(EpsHistory { eps, t: t_now });
        trajectory.push(x.clone());
        if let Some(states) = states.as_deref_mut() {
            states.push(StepState { done: s, x: x.clone(), cache: cache.clone(), history: history.clone(), full_steps });
        }
    }

    let image = x.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0));
    let cache_bytes = match (&plan, full_steps < n) {
        (Plan::Strategy { reuse, .. }, true) => cache_memory_bytes(*reuse),
        _ => 0,
    };
    let cost = CostTally::new(full_steps, n - full_steps, &config.cost_model, cache_bytes);
    Ok(SampleResult { image, trajectory, observations, cost })
}
