//! ε-prediction training with a hand-written Adam.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{backward, forward, generate_dataset, AttentionDirective, ModelWeights, PromptSpec, T_TRAIN};
use crate::sampler::NoiseSchedule;
use crate::tensor::{gaussian, DenseArray, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub dataset_size: usize,
    /// Probability of replacing the prompt with the null prompt.
    pub null_prob: f64,
    pub validation_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 5000, batch: 32, lr: 2e-3, dataset_size: 2048, null_prob: 0.1, validation_size: 128 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_val_loss: f32,
    pub final_val_loss: f32,
    /// Mean minibatch loss per step.
    pub losses: Vec<f32>,
}

/// One noised training example.
struct Example {
    x_t: DenseArray,
    t: usize,
    noise: DenseArray,
    prompt: PromptSpec,
}

fn draw_example(
    rng: &mut SeededRng,
    data: &[(DenseArray, PromptSpec)],
    schedule: &NoiseSchedule,
    null_prob: f64,
) -> Result<Example> {
    let (img, prompt) = &data[rng.below(data.len() as u64) as usize];
    let t = 1 + rng.below(T_TRAIN as u64) as usize;
    let noise = gaussian(rng, img.dims())?;
    let prompt = if rng.uniform() < null_prob { PromptSpec::null() } else { *prompt };
    let x0 = img.map(|v| 2.0 * v - 1.0);
    let x_t = schedule.add_noise(&x0, &noise, t)?;
    Ok(Example { x_t, t, noise, prompt })
}

fn example_loss(w: &ModelWeights, ex: &Example) -> Result<f32> {
    let tr = forward(w, ex.x_t.data(), ex.t, &ex.prompt, &AttentionDirective::compute())?;
    let n = tr.eps.len() as f32;
    Ok(tr.eps.iter().zip(ex.noise.data()).map(|(p, e)| (p - e) * (p - e)).sum::<f32>() / n)
}

fn validation_set(seed: u64, cfg: &TrainConfig, schedule: &NoiseSchedule) -> Result<Vec<Example>> {
    let data = generate_dataset(cfg.validation_size.max(9), seed ^ 0x5_eed0_f7a1)?;
    let root = SeededRng::new(seed).derive(&[0x7a1]);
    (0..cfg.validation_size)
        .map(|i| draw_example(&mut root.derive(&[i as u64]), &data, schedule, 0.0))
        .collect()
}

/// Mean ε-MSE on the held-out set that [`train_toy`] reports against.
pub fn validation_loss(w: &ModelWeights, cfg: &TrainConfig, seed: u64) -> Result<f32> {
    let schedule = NoiseSchedule::new();
    let set = validation_set(seed, cfg, &schedule)?;
    let losses: Vec<f32> = set.par_iter().map(|ex| example_loss(w, ex)).collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f32>() / losses.len().max(1) as f32)
}

/// Mean squared ε error of one example and its gradient with respect to
/// every parameter.
pub fn denoising_gradient(
    w: &ModelWeights,
    x_t: &DenseArray,
    t_index: usize,
    prompt: &PromptSpec,
    noise: &DenseArray,
) -> Result<(f32, ModelWeights)> {
    if noise.dims() != x_t.dims() {
        return Err(Error::Dimension(format!("noise {:?} vs input {:?}", noise.dims(), x_t.dims())));
    }
    let tr = forward(w, x_t.data(), t_index, prompt, &AttentionDirective::compute())?;
    let n = tr.eps.len() as f32;
    let loss = tr.eps.iter().zip(noise.data()).map(|(p, e)| (p - e) * (p - e)).sum::<f32>() / n;
    let d_eps: Vec<f32> = tr.eps.iter().zip(noise.data()).map(|(p, e)| 2.0 * (p - e) / n).collect();
    Ok((loss, backward(w, &tr, &d_eps)))
}

struct Adam {
    m: ModelWeights,
    v: ModelWeights,
    t: i32,
    lr: f32,
}

impl Adam {
    const BETA1: f32 = 0.9;
    const BETA2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(lr: f32) -> Self {
        Self { m: ModelWeights::zeros(), v: ModelWeights::zeros(), t: 0, lr }
    }

    fn step(&mut self, w: &mut ModelWeights, g: &ModelWeights) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t);
        let bc2 = 1.0 - Self::BETA2.powi(self.t);
        let params = w.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(g.tensors()) {
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= self.lr * mh / (vh.sqrt() + Self::EPS);
            }
        }
    }
}

/// Train from `ModelWeights::init(seed)`. Per-example gradients may be
/// computed in parallel; they are summed in example order.
pub fn train_toy(cfg: &TrainConfig, seed: u64) -> Result<(ModelWeights, TrainReport)> {
    train_from(ModelWeights::init(seed), cfg, seed)
}

pub(crate) fn train_from(mut w: ModelWeights, cfg: &TrainConfig, seed: u64) -> Result<(ModelWeights, TrainReport)> {
    if cfg.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let schedule = NoiseSchedule::new();
    let data = generate_dataset(cfg.dataset_size, seed)?;
    let initial_val_loss = validation_loss(&w, cfg, seed)?;
    let mut adam = Adam::new(cfg.lr);
    let root = SeededRng::new(seed).derive(&[0x7a17]);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let per_example: Vec<(f32, ModelWeights)> = (0..cfg.batch)
            .into_par_iter()
            .map(|i| {
                let mut rng = root.derive(&[step as u64, i as u64]);
                let ex = draw_example(&mut rng, &data, &schedule, cfg.null_prob)?;
                let tr = forward(&w, ex.x_t.data(), ex.t, &ex.prompt, &AttentionDirective::compute())?;
                let n = tr.eps.len() as f32;
                let mut loss = 0.0f32;
                let d_eps: Vec<f32> = tr
                    .eps
                    .iter()
                    .zip(ex.noise.data())
                    .map(|(p, e)| {
                        loss += (p - e) * (p - e);
                        2.0 * (p - e) / (n * cfg.batch as f32)
                    })
                    .collect();
                Ok((loss / n, backward(&w, &tr, &d_eps)))
            })
            .collect::<Result<_>>()?;
        let mut grad = ModelWeights::zeros();
        let mut loss = 0.0f32;
        for (l, g) in &per_example {
            loss += l;
            grad.accumulate(g);
        }
        loss /= cfg.batch as f32;
        if !loss.is_finite() {
            return Err(Error::Training { step, loss });
        }
        adam.step(&mut w, &grad);
        if !w.is_finite() {
            return Err(Error::Training { step, loss: f32::NAN });
        }
        losses.push(loss);
    }
    let final_val_loss = validation_loss(&w, cfg, seed)?;
    Ok((w, TrainReport { initial_val_loss, final_val_loss, losses }))
}
