//! Image metrics and the per-call latency model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reuse::StrategyVector;
use crate::tensor::DenseArray;

/// PSNR reported when two images are (numerically) identical.
pub const PSNR_CAP_DB: f64 = 100.0;

fn check_same(a: &DenseArray, b: &DenseArray) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("image dims {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// PSNR in dB for images in `[0,1]`, capped at [`PSNR_CAP_DB`] once the
/// MSE drops below 1e-10.
pub fn psnr(a: &DenseArray, b: &DenseArray) -> Result<f64> {
    check_same(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>()
        / a.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Mean absolute pixel difference.
pub fn l1_image_distance(a: &DenseArray, b: &DenseArray) -> Result<f64> {
    check_same(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.len() as f64)
}

/// Latency of one denoiser call with and without attention reuse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub full_call_ms: f64,
    pub reuse_call_ms: f64,
    /// Denoiser calls per sampling step (conditional + unconditional).
    pub passes_per_step: u32,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { full_call_ms: 152.0, reuse_call_ms: 47.0, passes_per_step: 2 }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.full_call_ms > self.reuse_call_ms && self.reuse_call_ms > 0.0) {
            return Err(Error::Config(format!(
                "cost model needs full_call_ms > reuse_call_ms > 0, got {} and {}",
                self.full_call_ms, self.reuse_call_ms
            )));
        }
        if self.passes_per_step == 0 {
            return Err(Error::Config("passes_per_step must be positive".into()));
        }
        Ok(())
    }

    pub fn estimate_ms(&self, full_steps: usize, reuse_steps: usize) -> f64 {
        self.passes_per_step as f64
            * (full_steps as f64 * self.full_call_ms + reuse_steps as f64 * self.reuse_call_ms)
    }
}

/// `passes × (computed·full + reused·reuse)` milliseconds.
pub fn latency_estimate(strategy: &StrategyVector, model: &CostModel) -> f64 {
    model.estimate_ms(strategy.compute_count(), strategy.reuse_count())
}

/// Latency of a sampler with no reuse at all.
pub fn full_latency(steps: usize, model: &CostModel) -> f64 {
    model.estimate_ms(steps, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostTally {
    pub full_steps: usize,
    pub reuse_steps: usize,
    pub estimated_ms: f64,
    pub cache_bytes: usize,
}

impl CostTally {
    pub fn new(full_steps: usize, reuse_steps: usize, model: &CostModel, cache_bytes: usize) -> Self {
        Self { full_steps, reuse_steps, estimated_ms: model.estimate_ms(full_steps, reuse_steps), cache_bytes }
    }

    pub fn steps(&self) -> usize {
        self.full_steps + self.reuse_steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::hurry;
    use crate::tensor::{gaussian, SeededRng};

    fn img(seed: u64) -> DenseArray {
        gaussian(&mut SeededRng::new(seed), &[3, 16, 16]).unwrap().map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0))
    }

    #[test]
    fn psnr_cases() {
        let a = img(1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        let b = img(2);
        let mse: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum::<f64>() / 768.0;
        let oracle = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&a, &b).unwrap() - oracle).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let c = DenseArray::zeros(&[3, 8, 8]).unwrap();
        assert!(psnr(&a, &c).is_err());
    }

    #[test]
    fn l1_cases() {
        let a = img(3);
        assert_eq!(l1_image_distance(&a, &a).unwrap(), 0.0);
        let z = DenseArray::zeros(&[2, 2]).unwrap();
        let o = DenseArray::filled(&[2, 2], 0.1).unwrap();
        assert!((l1_image_distance(&z, &o).unwrap() - 0.1).abs() < 1e-7);
        let b = img(4);
        let oracle: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / 768.0;
        assert!((l1_image_distance(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn latency_arithmetic() {
        let m = CostModel::default();
        assert_eq!(latency_estimate(&hurry(20, 10).unwrap(), &m), 3980.0);
        assert_eq!(latency_estimate(&StrategyVector::all_compute(13).unwrap(), &m), 3952.0);
        let costs: Vec<f64> = (0..20).map(|r| latency_estimate(&hurry(20, r).unwrap(), &m)).collect();
        assert!(costs.windows(2).all(|w| w[1] < w[0]));
        // affine in the number of computed steps
        let slope = m.passes_per_step as f64 * (m.full_call_ms - m.reuse_call_ms);
        for r in 0..20 {
            let expect = costs[0] - slope * r as f64;
            assert!((costs[r] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn cost_model_validation() {
        assert!(CostModel::default().validate().is_ok());
        assert!(CostModel { reuse_call_ms: 200.0, ..Default::default() }.validate().is_err());
        assert!(CostModel { reuse_call_ms: 0.0, ..Default::default() }.validate().is_err());
        assert!(CostModel { passes_per_step: 0, ..Default::default() }.validate().is_err());
    }
}
