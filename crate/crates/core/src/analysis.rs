//! Probes of attention-map redundancy across steps and of how a logit
//! perturbation at one step propagates to the final sample.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::l1_image_distance;
use crate::model::{Layer, ModelWeights, Pass, PromptSpec};
use crate::sampler::{sample_perturbed, sample_reference, Perturbation, SampleResult, SamplerConfig};
use crate::tensor::DenseArray;

/// Mean over rows of the per-row total variation `½·Σ|a−b|`. In `[0,1]`
/// for row-stochastic inputs.
pub fn attention_distance(a: &DenseArray, b: &DenseArray) -> Result<f64> {
    if a.dims() != b.dims() || a.dims().len() != 2 {
        return Err(Error::Dimension(format!("attention maps {:?} vs {:?}", a.dims(), b.dims())));
    }
    let rows = a.rows();
    let total: f64 = (0..rows)
        .map(|i| 0.5 * a.row(i).iter().zip(b.row(i)).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>())
        .sum();
    Ok(total / rows as f64)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPoint {
    pub step: usize,
    pub self_mean: f64,
    pub self_std: f64,
    pub cross_mean: f64,
    pub cross_std: f64,
}

/// Distance between maps of consecutive steps, `N−1` points from step 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurve {
    pub points: Vec<SimilarityPoint>,
}

/// Per-step distance `d(A(s), A(s−1))` for each layer, pooled over cases
/// and both guidance passes.
pub fn similarity_curve(
    weights: &ModelWeights,
    config: &SamplerConfig,
    cases: &[(PromptSpec, u64)],
) -> Result<SimilarityCurve> {
    if config.steps < 2 {
        return Err(Error::Domain("similarity needs at least 2 steps".into()));
    }
    let config = SamplerConfig { record_observations: true, ..config.clone() };
    let runs: Vec<SampleResult> = cases
        .par_iter()
        .map(|(p, seed)| sample_reference(weights, &SamplerConfig { seed: *seed, ..config.clone() }, p))
        .collect::<Result<_>>()?;
    let mut points = Vec::with_capacity(config.steps - 1);
    for s in 2..=config.steps {
        let mut by_layer = [Vec::new(), Vec::new()];
        for run in &runs {
            for (li, layer) in [Layer::SelfAttn, Layer::CrossAttn].into_iter().enumerate() {
                for pass in [Pass::Conditional, Pass::Unconditional] {
                    let find = |step| {
                        run.observations
                            .iter()
                            .find(|o| o.step == step && o.site.layer == layer && o.site.pass == pass)
                            .and_then(|o| o.map.as_ref())
                            .ok_or_else(|| Error::Domain(format!("missing map at step {step}")))
                    };
                    by_layer[li].push(attention_distance(find(s)?, find(s - 1)?)?);
                }
            }
        }
        let (self_mean, self_std) = mean_std(&by_layer[0]);
        let (cross_mean, cross_std) = mean_std(&by_layer[1]);
        points.push(SimilarityPoint { step: s, self_mean, self_std, cross_mean, cross_std });
    }
    Ok(SimilarityCurve { points })
}

/// `y ≈ k1·e^(−k2·s)` over an inclusive step window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialFit {
    pub k1: f64,
    pub k2: f64,
    pub pearson_r: f64,
    pub window: (usize, usize),
}

impl ExponentialFit {
    pub fn eval(&self, s: f64) -> f64 {
        self.k1 * (-self.k2 * s).exp()
    }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, sx) = mean_std(x);
    let (my, sy) = mean_std(y);
    if sx == 0.0 || sy == 0.0 {
        let identical = x.iter().zip(y).all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0));
        return if identical { 1.0 } else { 0.0 };
    }
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.len() as f64;
    (cov / (sx * sy)).clamp(-1.0, 1.0)
}

/// Least squares on `(s, ln y)` over points with `s` in `window`
/// (inclusive). `pearson_r` compares `y` with the fitted curve in linear
/// space.
pub fn fit_exponential(points: &[(f64, f64)], window: (usize, usize)) -> Result<ExponentialFit> {
    let (lo, hi) = (window.0 as f64, window.1 as f64);
    let sel: Vec<(f64, f64)> = points.iter().copied().filter(|(s, _)| *s >= lo && *s <= hi).collect();
    if sel.len() < 3 {
        return Err(Error::Domain(format!("exponential fit needs ≥ 3 points in window, got {}", sel.len())));
    }
    if let Some((s, y)) = sel.iter().find(|(_, y)| !(*y > 0.0)) {
        return Err(Error::Domain(format!("non-positive value {y} at step {s}")));
    }
    let n = sel.len() as f64;
    let xs: Vec<f64> = sel.iter().map(|p| p.0).collect();
    let ls: Vec<f64> = sel.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let ml = ls.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxl: f64 = xs.iter().zip(&ls).map(|(x, l)| (x - mx) * (l - ml)).sum();
    let slope = sxl / sxx;
    let intercept = ml - slope * mx;
    let fit = ExponentialFit { k1: intercept.exp(), k2: -slope, pearson_r: 0.0, window };
    let ys: Vec<f64> = sel.iter().map(|p| p.1).collect();
    let fitted: Vec<f64> = xs.iter().map(|&x| fit.eval(x)).collect();
    Ok(ExponentialFit { pearson_r: pearson(&ys, &fitted), ..fit })
}

/// Default fit window `[1, N−2]`.
pub fn default_window(steps: usize) -> (usize, usize) {
    (1, steps.saturating_sub(2).max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationPoint {
    pub step: usize,
    pub mean_dev: f64,
    pub std_dev: f64,
    /// Fitted curve at this step, when the fit succeeded.
    pub fitted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub eta: f32,
    /// Scaled deviations, one point per step.
    pub points: Vec<DeviationPoint>,
    /// Unscaled L1 deviation, `raw[case][step-1]`.
    pub raw: Vec<Vec<f64>>,
    pub fit: Option<ExponentialFit>,
    /// Why the fit could not be produced.
    pub fit_error: Option<String>,
}

impl PerturbationReport {
    /// Decay over the window, i.e. a positive exponent estimate.
    pub fn decays(&self) -> bool {
        self.fit.is_some_and(|f| f.k2 > 0.0)
    }
}

/// Min-max scale into `[0,1]`; a flat series maps to zeros.
fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// One perturbed run per `(case, step)`; final-image L1 to the reference,
/// min-max scaled per case, averaged, then fitted over `window`.
pub fn perturbation_sweep(
    weights: &ModelWeights,
    config: &SamplerConfig,
    cases: &[(PromptSpec, u64)],
    eta: f32,
    window: (usize, usize),
) -> Result<PerturbationReport> {
    if !(eta > 0.0) {
        return Err(Error::Domain(format!("perturbation scale {eta} must be > 0")));
    }
    let n = config.steps;
    let config = SamplerConfig { record_observations: false, ..config.clone() };
    let refs: Vec<DenseArray> = cases
        .par_iter()
        .map(|(p, seed)| sample_reference(weights, &SamplerConfig { seed: *seed, ..config.clone() }, p).map(|r| r.image))
        .collect::<Result<_>>()?;
    let tasks: Vec<(usize, usize)> = (0..cases.len()).flat_map(|c| (1..=n).map(move |s| (c, s))).collect();
    let devs: Vec<f64> = tasks
        .par_iter()
        .map(|&(c, s)| {
            let (p, seed) = &cases[c];
            let cfg = SamplerConfig { seed: *seed, ..config.clone() };
            let out = sample_perturbed(weights, &cfg, p, Perturbation { step: s, eta })?;
            l1_image_distance(&out.image, &refs[c])
        })
        .collect::<Result<_>>()?;
    let raw: Vec<Vec<f64>> = devs.chunks(n).map(|c| c.to_vec()).collect();
    let scaled: Vec<Vec<f64>> = raw.iter().map(|r| min_max(r)).collect();

    let mut points: Vec<DeviationPoint> = (1..=n)
        .map(|s| {
            let col: Vec<f64> = scaled.iter().map(|r| r[s - 1]).collect();
            let (mean_dev, std_dev) = mean_std(&col);
            DeviationPoint { step: s, mean_dev, std_dev, fitted: None }
        })
        .collect();
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.step as f64, p.mean_dev)).collect();
    let (fit, fit_error) = match fit_exponential(&xy, window) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    if let Some(f) = fit {
        for p in points.iter_mut() {
            p.fitted = Some(f.eval(p.step as f64));
        }
    }
    Ok(PerturbationReport { eta, points, raw, fit, fit_error })
}
