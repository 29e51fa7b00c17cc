//! Reuse strategies and the per-site memory cells that back them.

use std::fmt;
use std::str::FromStr;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionSite, Layer, DIM, PROMPT_TOKENS, TOKENS};
use crate::tensor::DenseArray;

/// Binary per-step schedule. `true` computes the attention maps from
/// queries and keys, `false` substitutes the cached ones. Step 1 always
/// computes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StrategyVector {
    bits: Vec<bool>,
}

impl StrategyVector {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        match bits.first() {
            None => Err(Error::InvalidStrategy("empty strategy".into())),
            Some(false) => Err(Error::InvalidStrategy(
                "first step must compute: nothing is cached yet".into(),
            )),
            Some(true) => Ok(Self { bits }),
        }
    }

    pub fn all_compute(n: usize) -> Result<Self> {
        Self::new(vec![true; n])
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Number of reuse steps.
    pub fn reuse_count(&self) -> usize {
        self.bits.iter().filter(|b| !**b).count()
    }

    pub fn compute_count(&self) -> usize {
        self.len() - self.reuse_count()
    }

    /// Whether 1-based step `s` computes its maps.
    pub fn computes(&self, step: usize) -> bool {
        self.bits[step - 1]
    }

    /// Positions (1-based) that differ from `other`.
    pub fn differing_steps(&self, other: &Self) -> Vec<usize> {
        self.bits
            .iter()
            .zip(&other.bits)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i + 1)
            .collect()
    }
}

impl fmt::Display for StrategyVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Accepts a plain bitstring (`"110010"`) or the bracketed list form
/// (`"[1, 1, 0, 0, 1, 0]"`).
impl FromStr for StrategyVector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let body = match (t.strip_prefix('['), t.ends_with(']')) {
            (Some(rest), true) => &rest[..rest.len() - 1],
            (None, false) => t,
            _ => return Err(Error::InvalidStrategy(format!("unbalanced brackets in {s:?}"))),
        };
        let mut bits = Vec::new();
        for c in body.chars() {
            match c {
                '1' => bits.push(true),
                '0' => bits.push(false),
                ',' | ' ' | '\t' if t.starts_with('[') => {}
                _ => return Err(Error::InvalidStrategy(format!("unexpected {c:?} in {s:?}"))),
            }
        }
        Self::new(bits)
    }
}

impl Serialize for StrategyVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StrategyVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReuseTarget {
    /// Post-softmax attention maps.
    AttentionMaps,
    /// Attention-block outputs.
    Features,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F16,
    I8,
}

impl Precision {
    pub fn bytes_per_element(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F16 => 2,
            Precision::I8 => 1,
        }
    }

    /// Per-tensor side data: the i8 scale is stored as one f32.
    pub fn overhead_bytes(self) -> usize {
        match self {
            Precision::I8 => 4,
            _ => 0,
        }
    }
}

impl FromStr for ReuseTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention_maps" | "maps" => Ok(Self::AttentionMaps),
            "features" => Ok(Self::Features),
            _ => Err(Error::Config(format!("unknown reuse target {s:?}"))),
        }
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f16" => Ok(Self::F16),
            "i8" => Ok(Self::I8),
            _ => Err(Error::Config(format!("unknown precision {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReuseConfig {
    pub target: ReuseTarget,
    pub precision: Precision,
}

impl Default for ReuseConfig {
    fn default() -> Self {
        Self { target: ReuseTarget::AttentionMaps, precision: Precision::F32 }
    }
}

/// Dims of the payload cached for `site` under `target`.
pub fn payload_dims(site: AttentionSite, target: ReuseTarget) -> [usize; 2] {
    match (target, site.layer) {
        (ReuseTarget::AttentionMaps, Layer::SelfAttn) => [TOKENS, TOKENS],
        (ReuseTarget::AttentionMaps, Layer::CrossAttn) => [TOKENS, PROMPT_TOKENS],
        (ReuseTarget::Features, _) => [TOKENS, DIM],
    }
}

#[derive(Debug, Clone)]
enum Encoded {
    F32(Vec<f32>),
    F16(Vec<f16>),
    I8 { scale: f32, data: Vec<i8> },
}

/// Symmetric per-tensor absmax quantization, ties rounded to even.
fn quantize_i8(values: &[f32]) -> (f32, Vec<i8>) {
    let absmax = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if absmax == 0.0 {
        return (0.0, vec![0; values.len()]);
    }
    let scale = absmax / 127.0;
    let data = values
        .iter()
        .map(|v| (v / scale).round_ties_even().clamp(-127.0, 127.0) as i8)
        .collect();
    (scale, data)
}

#[derive(Debug, Clone)]
struct Cell {
    payload: Encoded,
    provenance: usize,
}

/// One memory cell per attention site.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    config: ReuseConfig,
    cells: [Option<Cell>; 4],
}

impl AttentionCache {
    pub fn new(config: ReuseConfig) -> Self {
        Self { config, cells: Default::default() }
    }

    pub fn config(&self) -> ReuseConfig {
        self.config
    }

    /// Encode `payload` at the configured precision into `site`'s cell.
    pub fn store(&mut self, site: AttentionSite, payload: &DenseArray, step: usize) -> Result<()> {
        let want = payload_dims(site, self.config.target);
        if payload.dims() != want {
            return Err(Error::Dimension(format!(
                "{site} payload {:?}, expected {want:?}",
                payload.dims()
            )));
        }
        let slot = &mut self.cells[site.index()];
        if let Some(cell) = slot {
            if step <= cell.provenance {
                return Err(Error::ReuseViolation(format!(
                    "{site}: write at step {step} after step {}",
                    cell.provenance
                )));
            }
        }
        let payload = match self.config.precision {
            Precision::F32 => Encoded::F32(payload.data().to_vec()),
            Precision::F16 => Encoded::F16(payload.data().iter().map(|&v| f16::from_f32(v)).collect()),
            Precision::I8 => {
                let (scale, data) = quantize_i8(payload.data());
                Encoded::I8 { scale, data }
            }
        };
        *slot = Some(Cell { payload, provenance: step });
        Ok(())
    }

    /// Decoded payload and the step that wrote it. Dequantized attention
    /// maps are row-renormalized; the f32 path is returned untouched.
    pub fn fetch(&self, site: AttentionSite) -> Result<(DenseArray, usize)> {
        let cell = self.cells[site.index()]
            .as_ref()
            .ok_or_else(|| Error::ReuseViolation(format!("{site}: cache cell is empty")))?;
        let dims = payload_dims(site, self.config.target);
        let mut data: Vec<f32> = match &cell.payload {
            Encoded::F32(v) => v.clone(),
            Encoded::F16(v) => v.iter().map(|h| h.to_f32()).collect(),
            Encoded::I8 { scale, data } => data.iter().map(|&q| q as f32 * scale).collect(),
        };
        let lossy = !matches!(cell.payload, Encoded::F32(_));
        if lossy && self.config.target == ReuseTarget::AttentionMaps {
            renormalize_rows(&mut data, dims[1]);
        }
        Ok((DenseArray::from_vec(&dims, data)?, cell.provenance))
    }

    pub fn provenance(&self, site: AttentionSite) -> Option<usize> {
        self.cells[site.index()].as_ref().map(|c| c.provenance)
    }
}

fn renormalize_rows(data: &mut [f32], cols: usize) {
    for row in data.chunks_mut(cols) {
        for v in row.iter_mut() {
            *v = v.max(0.0);
        }
        let sum: f32 = row.iter().sum();
        if sum > 0.0 {
            row.iter_mut().for_each(|v| *v /= sum);
        } else {
            row.fill(1.0 / cols as f32);
        }
    }
}

/// Bytes held by a fully populated cache: payload elements at the cache
/// precision over all four sites, plus 4 bytes of scale per i8 tensor.
pub fn cache_memory_bytes(config: ReuseConfig) -> usize {
    AttentionSite::ALL
        .iter()
        .map(|&site| {
            let [r, c] = payload_dims(site, config.target);
            r * c * config.precision.bytes_per_element() + config.precision.overhead_bytes()
        })
        .sum()
}
