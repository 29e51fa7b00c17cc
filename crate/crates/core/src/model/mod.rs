//! Toy conditional ε-prediction denoiser.
//!
//! A 3×16×16 image is cut into 2×2 patches (an 8×8 grid of 32-dim tokens),
//! passed through one block of self-attention, cross-attention over two
//! prompt tokens and a pointwise feed-forward layer, then unembedded back to
//! patches. Both attention layers are single-head and expose their
//! post-softmax maps and block outputs as tap points.

mod checkpoint;
mod dataset;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gaussian, matmul_into, softmax_rows_in_place, DenseArray, SeededRng};

pub use checkpoint::{architecture_hash, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use dataset::generate_dataset;
pub use train::{denoising_gradient, train_toy, validation_loss, TrainConfig, TrainReport};

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIZE: usize = 16;
pub const PATCH: usize = 2;
pub const GRID: usize = IMAGE_SIZE / PATCH;
/// Latent positions (queries per map).
pub const TOKENS: usize = GRID * GRID;
pub const PATCH_DIM: usize = IMAGE_CHANNELS * PATCH * PATCH;
pub const DIM: usize = 32;
pub const FF_DIM: usize = 64;
pub const PROMPT_TOKENS: usize = 2;
pub const TIME_FEATURES: usize = 32;
pub const T_TRAIN: usize = 1000;
/// 3 shape rows, 3 color rows, 2 null rows.
pub const TOKEN_ROWS: usize = 8;
pub const IMAGE_DIMS: [usize; 3] = [IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeToken {
    Circle,
    Square,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorToken {
    Red,
    Green,
    Blue,
}

impl ShapeToken {
    pub const ALL: [ShapeToken; 3] = [ShapeToken::Circle, ShapeToken::Square, ShapeToken::Cross];
}

impl ColorToken {
    pub const ALL: [ColorToken; 3] = [ColorToken::Red, ColorToken::Green, ColorToken::Blue];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            ColorToken::Red => [1.0, 0.0, 0.0],
            ColorToken::Green => [0.0, 1.0, 0.0],
            ColorToken::Blue => [0.0, 0.0, 1.0],
        }
    }
}

/// A prompt for the denoiser. A null prompt ignores its tokens and drives
/// the unconditional pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub shape: ShapeToken,
    pub color: ColorToken,
    pub is_null: bool,
}

impl PromptSpec {
    pub fn new(shape: ShapeToken, color: ColorToken) -> Self {
        Self { shape, color, is_null: false }
    }

    pub fn null() -> Self {
        Self { shape: ShapeToken::Circle, color: ColorToken::Red, is_null: true }
    }

    /// The nine conditioned prompts, shape-major.
    pub fn all() -> Vec<PromptSpec> {
        ShapeToken::ALL
            .iter()
            .flat_map(|&s| ColorToken::ALL.iter().map(move |&c| PromptSpec::new(s, c)))
            .collect()
    }

    /// Class index in `0..9`; `None` for the null prompt.
    pub fn class_index(&self) -> Option<usize> {
        if self.is_null {
            return None;
        }
        let s = ShapeToken::ALL.iter().position(|&x| x == self.shape).unwrap();
        let c = ColorToken::ALL.iter().position(|&x| x == self.color).unwrap();
        Some(s * 3 + c)
    }

    fn token_rows(&self) -> [usize; PROMPT_TOKENS] {
        if self.is_null {
            [6, 7]
        } else {
            let s = ShapeToken::ALL.iter().position(|&x| x == self.shape).unwrap();
            let c = ColorToken::ALL.iter().position(|&x| x == self.color).unwrap();
            [s, 3 + c]
        }
    }

    pub fn pass(&self) -> Pass {
        if self.is_null {
            Pass::Unconditional
        } else {
            Pass::Conditional
        }
    }
}

impl fmt::Display for PromptSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_null {
            return f.write_str("null");
        }
        let c = match self.color {
            ColorToken::Red => "red",
            ColorToken::Green => "green",
            ColorToken::Blue => "blue",
        };
        let s = match self.shape {
            ShapeToken::Circle => "circle",
            ShapeToken::Square => "square",
            ShapeToken::Cross => "cross",
        };
        write!(f, "{c}-{s}")
    }
}

/// `"red-circle"`, `"blue-cross"`, ... or `"null"`.
impl FromStr for PromptSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "null" {
            return Ok(Self::null());
        }
        let bad = || Error::Config(format!("unknown prompt {s:?}"));
        let (c, sh) = s.split_once('-').ok_or_else(bad)?;
        let color = match c {
            "red" => ColorToken::Red,
            "green" => ColorToken::Green,
            "blue" => ColorToken::Blue,
            _ => return Err(bad()),
        };
        let shape = match sh {
            "circle" => ShapeToken::Circle,
            "square" => ShapeToken::Square,
            "cross" => ShapeToken::Cross,
            _ => return Err(bad()),
        };
        Ok(Self::new(shape, color))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    SelfAttn,
    CrossAttn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Conditional,
    Unconditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionSite {
    pub layer: Layer,
    pub pass: Pass,
}

impl AttentionSite {
    pub const ALL: [AttentionSite; 4] = [
        AttentionSite { layer: Layer::SelfAttn, pass: Pass::Conditional },
        AttentionSite { layer: Layer::CrossAttn, pass: Pass::Conditional },
        AttentionSite { layer: Layer::SelfAttn, pass: Pass::Unconditional },
        AttentionSite { layer: Layer::CrossAttn, pass: Pass::Unconditional },
    ];

    pub fn index(&self) -> usize {
        let l = match self.layer {
            Layer::SelfAttn => 0,
            Layer::CrossAttn => 1,
        };
        let p = match self.pass {
            Pass::Conditional => 0,
            Pass::Unconditional => 2,
        };
        l + p
    }
}

impl fmt::Display for AttentionSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = match self.layer {
            Layer::SelfAttn => "self",
            Layer::CrossAttn => "cross",
        };
        let p = match self.pass {
            Pass::Conditional => "cond",
            Pass::Unconditional => "uncond",
        };
        write!(f, "{l}/{p}")
    }
}

/// How one attention site is evaluated.
#[derive(Debug, Clone, Default)]
pub enum SiteMode {
    #[default]
    Compute,
    /// Substitute this post-softmax map for softmax(QKᵀ/√d).
    ReuseMap(DenseArray),
    /// Substitute this block output for the whole attention layer.
    ReuseFeature(DenseArray),
    /// Z ← Z + η·(‖Z‖/‖G‖)·G on the pre-softmax logits, G standard normal
    /// drawn from `noise_seed`.
    PerturbLogits { eta: f32, noise_seed: u64 },
}

/// Per-layer modes for one denoiser pass.
#[derive(Debug, Clone, Default)]
pub struct AttentionDirective {
    pub self_attn: SiteMode,
    pub cross_attn: SiteMode,
}

impl AttentionDirective {
    pub fn compute() -> Self {
        Self::default()
    }

    pub fn both(mode: SiteMode) -> Self {
        Self { self_attn: mode.clone(), cross_attn: mode }
    }

    fn mode(&self, layer: Layer) -> &SiteMode {
        match layer {
            Layer::SelfAttn => &self.self_attn,
            Layer::CrossAttn => &self.cross_attn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Computed,
    Reused,
    Perturbed,
}

/// What one attention site actually used during a call.
#[derive(Debug, Clone)]
pub struct AttentionObservation {
    pub site: AttentionSite,
    /// 1-based sampling step; 0 outside a sampler.
    pub step: usize,
    /// Post-softmax map; absent when the whole block output was reused.
    pub map: Option<DenseArray>,
    /// Attention-block output.
    pub feature: DenseArray,
    pub origin: Origin,
    /// Step whose computation produced the map or feature in use.
    pub provenance: usize,
}

/// Parameters of the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub patch_in_w: DenseArray,
    pub patch_in_b: DenseArray,
    pub pos: DenseArray,
    pub time_w: DenseArray,
    pub time_b: DenseArray,
    pub tokens: DenseArray,
    pub self_q: DenseArray,
    pub self_k: DenseArray,
    pub self_v: DenseArray,
    pub self_o: DenseArray,
    pub cross_q: DenseArray,
    pub cross_k: DenseArray,
    pub cross_v: DenseArray,
    pub cross_o: DenseArray,
    pub ff_w1: DenseArray,
    pub ff_b1: DenseArray,
    pub ff_w2: DenseArray,
    pub ff_b2: DenseArray,
    pub patch_out_w: DenseArray,
    pub patch_out_b: DenseArray,
}

/// Tensor names and dims in checkpoint order.
pub(crate) const LAYOUT: [(&str, &[usize]); 20] = [
    ("patch_in.w", &[PATCH_DIM, DIM]),
    ("patch_in.b", &[DIM]),
    ("pos", &[TOKENS, DIM]),
    ("time.w", &[TIME_FEATURES, DIM]),
    ("time.b", &[DIM]),
    ("tokens", &[TOKEN_ROWS, DIM]),
    ("self.q", &[DIM, DIM]),
    ("self.k", &[DIM, DIM]),
    ("self.v", &[DIM, DIM]),
    ("self.o", &[DIM, DIM]),
    ("cross.q", &[DIM, DIM]),
    ("cross.k", &[DIM, DIM]),
    ("cross.v", &[DIM, DIM]),
    ("cross.o", &[DIM, DIM]),
    ("ff.w1", &[DIM, FF_DIM]),
    ("ff.b1", &[FF_DIM]),
    ("ff.w2", &[FF_DIM, DIM]),
    ("ff.b2", &[DIM]),
    ("patch_out.w", &[DIM, PATCH_DIM]),
    ("patch_out.b", &[PATCH_DIM]),
];

impl ModelWeights {
    pub fn zeros() -> Self {
        let tensors = LAYOUT.iter().map(|(_, d)| DenseArray::zeros(d).unwrap()).collect();
        Self::from_tensors(tensors).unwrap()
    }

    /// Seeded initialization: matrices N(0, 1/fan_in), biases zero, position
    /// and token tables N(0, 0.1²) and N(0, 1) respectively.
    pub fn init(seed: u64) -> Self {
        let root = SeededRng::new(seed).derive(&[0x1a17]);
        let tensors = LAYOUT
            .iter()
            .enumerate()
            .map(|(i, (name, dims))| {
                let mut rng = root.derive(&[i as u64]);
                let g = gaussian(&mut rng, dims).unwrap();
                match (*name, dims.len()) {
                    ("pos", _) => g.scale(0.1),
                    ("tokens", _) => g,
                    (_, 1) => DenseArray::zeros(dims).unwrap(),
                    _ => g.scale(1.0 / (dims[0] as f32).sqrt()),
                }
            })
            .collect();
        Self::from_tensors(tensors).unwrap()
    }

    pub(crate) fn from_tensors(t: Vec<DenseArray>) -> Result<Self> {
        if t.len() != LAYOUT.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, got {}", LAYOUT.len(), t.len())));
        }
        for (a, (name, dims)) in t.iter().zip(LAYOUT.iter()) {
            if a.dims() != *dims {
                return Err(Error::Checkpoint(format!("{name}: dims {:?}, expected {dims:?}", a.dims())));
            }
        }
        let mut it = t.into_iter();
        let mut next = || it.next().unwrap();
        Ok(Self {
            patch_in_w: next(),
            patch_in_b: next(),
            pos: next(),
            time_w: next(),
            time_b: next(),
            tokens: next(),
            self_q: next(),
            self_k: next(),
            self_v: next(),
            self_o: next(),
            cross_q: next(),
            cross_k: next(),
            cross_v: next(),
            cross_o: next(),
            ff_w1: next(),
            ff_b1: next(),
            ff_w2: next(),
            ff_b2: next(),
            patch_out_w: next(),
            patch_out_b: next(),
        })
    }

    pub fn tensors(&self) -> [&DenseArray; 20] {
        [
            &self.patch_in_w,
            &self.patch_in_b,
            &self.pos,
            &self.time_w,
            &self.time_b,
            &self.tokens,
            &self.self_q,
            &self.self_k,
            &self.self_v,
            &self.self_o,
            &self.cross_q,
            &self.cross_k,
            &self.cross_v,
            &self.cross_o,
            &self.ff_w1,
            &self.ff_b1,
            &self.ff_w2,
            &self.ff_b2,
            &self.patch_out_w,
            &self.patch_out_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut DenseArray; 20] {
        [
            &mut self.patch_in_w,
            &mut self.patch_in_b,
            &mut self.pos,
            &mut self.time_w,
            &mut self.time_b,
            &mut self.tokens,
            &mut self.self_q,
            &mut self.self_k,
            &mut self.self_v,
            &mut self.self_o,
            &mut self.cross_q,
            &mut self.cross_k,
            &mut self.cross_v,
            &mut self.cross_o,
            &mut self.ff_w1,
            &mut self.ff_b1,
            &mut self.ff_w2,
            &mut self.ff_b2,
            &mut self.patch_out_w,
            &mut self.patch_out_b,
        ]
    }

    pub fn names() -> impl Iterator<Item = &'static str> {
        LAYOUT.iter().map(|(n, _)| *n)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// In-place `self += other`.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }
}

/// Fixed sinusoidal features of a timestep; a learned projection turns them
/// into the timestep embedding.
pub(crate) fn time_features(t: usize) -> [f32; TIME_FEATURES] {
    let half = TIME_FEATURES / 2;
    let mut out = [0.0f32; TIME_FEATURES];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    out
}

/// `[3,16,16]` image → `[64, 12]` patch rows, channel-major within a patch.
pub(crate) fn patchify(x: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; TOKENS * PATCH_DIM];
    for gy in 0..GRID {
        for gx in 0..GRID {
            let tok = gy * GRID + gx;
            for c in 0..IMAGE_CHANNELS {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        let y = gy * PATCH + dy;
                        let xx = gx * PATCH + dx;
                        out[tok * PATCH_DIM + c * PATCH * PATCH + dy * PATCH + dx] =
                            x[c * IMAGE_SIZE * IMAGE_SIZE + y * IMAGE_SIZE + xx];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn unpatchify(p: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE];
    for gy in 0..GRID {
        for gx in 0..GRID {
            let tok = gy * GRID + gx;
            for c in 0..IMAGE_CHANNELS {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        let y = gy * PATCH + dy;
                        let xx = gx * PATCH + dx;
                        out[c * IMAGE_SIZE * IMAGE_SIZE + y * IMAGE_SIZE + xx] =
                            p[tok * PATCH_DIM + c * PATCH * PATCH + dy * PATCH + dx];
                    }
                }
            }
        }
    }
    out
}

fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    matmul_into(a, b, &mut out, m, k, n);
    out
}

/// `a [m×k] · bᵀ` where `b` is `[n×k]`.
fn mm_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    mm(a, &transpose(b, n, k), m, k, n)
}

/// `aᵀ · b` where `a` is `[m×k]`, `b` is `[m×n]`.
fn mm_at(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    mm(&transpose(a, m, k), b, k, m, n)
}

fn transpose(a: &[f32], m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn add_row_bias(x: &mut [f32], b: &[f32]) {
    for row in x.chunks_mut(b.len()) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn add_in_place(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn col_sum(x: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; cols];
    for row in x.chunks(cols) {
        add_in_place(&mut out, row);
    }
    out
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Intermediates of one attention layer.
#[derive(Debug, Clone)]
struct AttnTrace {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    map: Option<Vec<f32>>,
    o: Vec<f32>,
    feature: Vec<f32>,
    origin: Origin,
}

/// Intermediates of one denoiser pass, enough for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ForwardTrace {
    patches: Vec<f32>,
    tfeat: [f32; TIME_FEATURES],
    prompt_rows: [usize; PROMPT_TOKENS],
    ctx: Vec<f32>,
    h0: Vec<f32>,
    self_attn: AttnTrace,
    h1: Vec<f32>,
    cross_attn: AttnTrace,
    h2: Vec<f32>,
    u: Vec<f32>,
    s: Vec<f32>,
    h3: Vec<f32>,
    pub(crate) eps: Vec<f32>,
}

#[allow(clippy::too_many_arguments)]
fn attention(
    query_in: &[f32],
    kv_in: &[f32],
    keys: usize,
    wq: &DenseArray,
    wk: &DenseArray,
    wv: &DenseArray,
    wo: &DenseArray,
    mode: &SiteMode,
    site: AttentionSite,
) -> Result<AttnTrace> {
    let check = |a: &DenseArray, dims: [usize; 2], what: &str| {
        if a.dims() != dims {
            return Err(Error::Dimension(format!("{site}: {what} dims {:?}, expected {dims:?}", a.dims())));
        }
        Ok(())
    };
    if let SiteMode::ReuseFeature(f) = mode {
        check(f, [TOKENS, DIM], "reused feature")?;
        return Ok(AttnTrace {
            q: Vec::new(),
            k: Vec::new(),
            v: Vec::new(),
            map: None,
            o: Vec::new(),
            feature: f.data().to_vec(),
            origin: Origin::Reused,
        });
    }
    let v = mm(kv_in, wv.data(), keys, DIM, DIM);
    let (q, k, map, origin) = match mode {
        SiteMode::ReuseMap(a) => {
            check(a, [TOKENS, keys], "reused map")?;
            (Vec::new(), Vec::new(), a.data().to_vec(), Origin::Reused)
        }
        SiteMode::Compute | SiteMode::PerturbLogits { .. } => {
            let q = mm(query_in, wq.data(), TOKENS, DIM, DIM);
            let k = mm(kv_in, wk.data(), keys, DIM, DIM);
            let mut z = mm_bt(&q, &k, TOKENS, DIM, keys);
            let scale = 1.0 / (DIM as f32).sqrt();
            z.iter_mut().for_each(|x| *x *= scale);
            let origin = if let SiteMode::PerturbLogits { eta, noise_seed } = mode {
                perturb_logits(&mut z, *eta, *noise_seed, site)?;
                Origin::Perturbed
            } else {
                Origin::Computed
            };
            softmax_rows_in_place(&mut z, TOKENS, keys);
            (q, k, z, origin)
        }
        SiteMode::ReuseFeature(_) => unreachable!(),
    };
    let o = mm(&map, &v, TOKENS, keys, DIM);
    let feature = mm(&o, wo.data(), TOKENS, DIM, DIM);
    Ok(AttnTrace { q, k, v, map: Some(map), o, feature, origin })
}

fn perturb_logits(z: &mut [f32], eta: f32, noise_seed: u64, site: AttentionSite) -> Result<()> {
    if eta == 0.0 {
        return Ok(());
    }
    let mut rng = SeededRng::new(noise_seed).derive(&[site.index() as u64]);
    let g = gaussian(&mut rng, &[z.len()])?;
    let zn = z.iter().map(|v| v * v).sum::<f32>().sqrt();
    let gn = g.frobenius_norm();
    let k = eta * zn / gn;
    for (v, n) in z.iter_mut().zip(g.data()) {
        *v += k * n;
    }
    Ok(())
}

pub(crate) fn forward(
    w: &ModelWeights,
    x: &[f32],
    t_index: usize,
    prompt: &PromptSpec,
    directive: &AttentionDirective,
) -> Result<ForwardTrace> {
    let patches = patchify(x);
    let tfeat = time_features(t_index);
    let mut temb = mm(&tfeat, w.time_w.data(), 1, TIME_FEATURES, DIM);
    add_in_place(&mut temb, w.time_b.data());

    let mut h0 = mm(&patches, w.patch_in_w.data(), TOKENS, PATCH_DIM, DIM);
    add_row_bias(&mut h0, w.patch_in_b.data());
    add_in_place(&mut h0, w.pos.data());
    add_row_bias(&mut h0, &temb);

    let prompt_rows = prompt.token_rows();
    let ctx: Vec<f32> = prompt_rows.iter().flat_map(|&r| w.tokens.row(r).iter().copied()).collect();

    let pass = prompt.pass();
    let site = |layer| AttentionSite { layer, pass };
    let self_attn = attention(
        &h0,
        &h0,
        TOKENS,
        &w.self_q,
        &w.self_k,
        &w.self_v,
        &w.self_o,
        directive.mode(Layer::SelfAttn),
        site(Layer::SelfAttn),
    )?;
    let mut h1 = h0.clone();
    add_in_place(&mut h1, &self_attn.feature);

    let cross_attn = attention(
        &h1,
        &ctx,
        PROMPT_TOKENS,
        &w.cross_q,
        &w.cross_k,
        &w.cross_v,
        &w.cross_o,
        directive.mode(Layer::CrossAttn),
        site(Layer::CrossAttn),
    )?;
    let mut h2 = h1.clone();
    add_in_place(&mut h2, &cross_attn.feature);

    let mut u = mm(&h2, w.ff_w1.data(), TOKENS, DIM, FF_DIM);
    add_row_bias(&mut u, w.ff_b1.data());
    let s: Vec<f32> = u.iter().map(|&v| silu(v)).collect();
    let mut ff = mm(&s, w.ff_w2.data(), TOKENS, FF_DIM, DIM);
    add_row_bias(&mut ff, w.ff_b2.data());
    let mut h3 = h2.clone();
    add_in_place(&mut h3, &ff);

    let mut out = mm(&h3, w.patch_out_w.data(), TOKENS, DIM, PATCH_DIM);
    add_row_bias(&mut out, w.patch_out_b.data());
    let eps = unpatchify(&out);
    if !eps.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite noise prediction at t={t_index}")));
    }
    Ok(ForwardTrace {
        patches,
        tfeat,
        prompt_rows,
        ctx,
        h0,
        self_attn,
        h1,
        cross_attn,
        h2,
        u,
        s,
        h3,
        eps,
    })
}

fn observation(trace: &AttnTrace, site: AttentionSite, keys: usize) -> AttentionObservation {
    AttentionObservation {
        site,
        step: 0,
        map: trace.map.as_ref().map(|m| DenseArray::from_vec(&[TOKENS, keys], m.clone()).unwrap()),
        feature: DenseArray::from_vec(&[TOKENS, DIM], trace.feature.clone()).unwrap(),
        origin: trace.origin,
        provenance: 0,
    }
}

fn check_input(x: &DenseArray, t_index: usize) -> Result<()> {
    if x.dims() != IMAGE_DIMS {
        return Err(Error::Dimension(format!("input dims {:?}, expected {IMAGE_DIMS:?}", x.dims())));
    }
    if !(1..=T_TRAIN).contains(&t_index) {
        return Err(Error::Domain(format!("timestep {t_index} outside 1..={T_TRAIN}")));
    }
    Ok(())
}

/// ε-prediction for one pass, plus what each of its two attention sites
/// actually used.
pub fn predict_noise(
    weights: &ModelWeights,
    x: &DenseArray,
    t_index: usize,
    prompt: &PromptSpec,
    directive: &AttentionDirective,
) -> Result<(DenseArray, Vec<AttentionObservation>)> {
    check_input(x, t_index)?;
    let trace = forward(weights, x.data(), t_index, prompt, directive)?;
    let pass = prompt.pass();
    let obs = vec![
        observation(&trace.self_attn, AttentionSite { layer: Layer::SelfAttn, pass }, TOKENS),
        observation(&trace.cross_attn, AttentionSite { layer: Layer::CrossAttn, pass }, PROMPT_TOKENS),
    ];
    Ok((DenseArray::from_vec(&IMAGE_DIMS, trace.eps)?, obs))
}

/// Classifier-free guidance: `eps_u + w·(eps_c − eps_u)`.
pub fn guide(eps_cond: &DenseArray, eps_uncond: &DenseArray, guidance_scale: f32) -> Result<DenseArray> {
    eps_uncond.zip_with(eps_cond, |u, c| u + guidance_scale * (c - u))
}

/// Both passes and their guided combination. Observations come back in
/// [`AttentionSite::ALL`] order.
pub fn cfg_predict(
    weights: &ModelWeights,
    x: &DenseArray,
    t_index: usize,
    prompt: &PromptSpec,
    guidance_scale: f32,
    cond: &AttentionDirective,
    uncond: &AttentionDirective,
) -> Result<(DenseArray, Vec<AttentionObservation>)> {
    if !(guidance_scale >= 0.0) {
        return Err(Error::Domain(format!("guidance scale {guidance_scale} must be ≥ 0")));
    }
    let cond_prompt = PromptSpec { is_null: false, ..*prompt };
    let (ec, mut obs) = predict_noise(weights, x, t_index, &cond_prompt, cond)?;
    let (eu, obs_u) = predict_noise(weights, x, t_index, &PromptSpec::null(), uncond)?;
    obs.extend(obs_u);
    Ok((guide(&ec, &eu, guidance_scale)?, obs))
}

fn softmax_backward(map: &[f32], dmap: &[f32], cols: usize) -> Vec<f32> {
    let mut dz = vec![0.0; map.len()];
    for ((a, da), out) in map.chunks(cols).zip(dmap.chunks(cols)).zip(dz.chunks_mut(cols)) {
        let dot: f32 = a.iter().zip(da).map(|(x, y)| x * y).sum();
        for ((o, &x), &y) in out.iter_mut().zip(a).zip(da) {
            *o = x * (y - dot);
        }
    }
    dz
}

struct AttnGrads {
    dq_in: Vec<f32>,
    dkv_in: Vec<f32>,
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    tr: &AttnTrace,
    q_in: &[f32],
    kv_in: &[f32],
    keys: usize,
    wq: &DenseArray,
    wk: &DenseArray,
    wv: &DenseArray,
    wo: &DenseArray,
    dfeature: &[f32],
) -> AttnGrads {
    let map = tr.map.as_ref().expect("backward needs a computed map");
    let scale = 1.0 / (DIM as f32).sqrt();
    let g_wo = mm_at(&tr.o, dfeature, TOKENS, DIM, DIM);
    let d_o = mm_bt(dfeature, wo.data(), TOKENS, DIM, DIM);
    let d_map = mm_bt(&d_o, &tr.v, TOKENS, DIM, keys);
    let d_v = mm_at(map, &d_o, TOKENS, keys, DIM);
    let mut d_z = softmax_backward(map, &d_map, keys);
    d_z.iter_mut().for_each(|x| *x *= scale);
    let d_q = mm(&d_z, &tr.k, TOKENS, keys, DIM);
    let d_k = mm_at(&d_z, &tr.q, TOKENS, keys, DIM);
    let g_wq = mm_at(q_in, &d_q, TOKENS, DIM, DIM);
    let g_wk = mm_at(kv_in, &d_k, keys, DIM, DIM);
    let g_wv = mm_at(kv_in, &d_v, keys, DIM, DIM);
    let dq_in = mm_bt(&d_q, wq.data(), TOKENS, DIM, DIM);
    let mut dkv_in = mm_bt(&d_k, wk.data(), keys, DIM, DIM);
    add_in_place(&mut dkv_in, &mm_bt(&d_v, wv.data(), keys, DIM, DIM));
    AttnGrads { dq_in, dkv_in, wq: g_wq, wk: g_wk, wv: g_wv, wo: g_wo }
}

/// Parameter gradients of `Σ d_eps · eps` for a compute-mode trace.
pub(crate) fn backward(w: &ModelWeights, tr: &ForwardTrace, d_eps: &[f32]) -> ModelWeights {
    let mut g = ModelWeights::zeros();
    let d_out = patchify(d_eps);

    g.patch_out_w = arr(&[DIM, PATCH_DIM], mm_at(&tr.h3, &d_out, TOKENS, DIM, PATCH_DIM));
    g.patch_out_b = arr(&[PATCH_DIM], col_sum(&d_out, PATCH_DIM));
    let d_h3 = mm_bt(&d_out, w.patch_out_w.data(), TOKENS, PATCH_DIM, DIM);

    g.ff_w2 = arr(&[FF_DIM, DIM], mm_at(&tr.s, &d_h3, TOKENS, FF_DIM, DIM));
    g.ff_b2 = arr(&[DIM], col_sum(&d_h3, DIM));
    let d_s = mm_bt(&d_h3, w.ff_w2.data(), TOKENS, DIM, FF_DIM);
    let d_u: Vec<f32> = d_s.iter().zip(&tr.u).map(|(d, &u)| d * silu_grad(u)).collect();
    g.ff_w1 = arr(&[DIM, FF_DIM], mm_at(&tr.h2, &d_u, TOKENS, DIM, FF_DIM));
    g.ff_b1 = arr(&[FF_DIM], col_sum(&d_u, FF_DIM));
    let mut d_h2 = d_h3;
    add_in_place(&mut d_h2, &mm_bt(&d_u, w.ff_w1.data(), TOKENS, FF_DIM, DIM));

    let cg = attention_backward(
        &tr.cross_attn,
        &tr.h1,
        &tr.ctx,
        PROMPT_TOKENS,
        &w.cross_q,
        &w.cross_k,
        &w.cross_v,
        &w.cross_o,
        &d_h2,
    );
    g.cross_q = arr(&[DIM, DIM], cg.wq);
    g.cross_k = arr(&[DIM, DIM], cg.wk);
    g.cross_v = arr(&[DIM, DIM], cg.wv);
    g.cross_o = arr(&[DIM, DIM], cg.wo);
    for (i, &row) in tr.prompt_rows.iter().enumerate() {
        let dst = &mut g.tokens.data_mut()[row * DIM..(row + 1) * DIM];
        add_in_place(dst, &cg.dkv_in[i * DIM..(i + 1) * DIM]);
    }
    let mut d_h1 = d_h2;
    add_in_place(&mut d_h1, &cg.dq_in);

    let sg = attention_backward(
        &tr.self_attn,
        &tr.h0,
        &tr.h0,
        TOKENS,
        &w.self_q,
        &w.self_k,
        &w.self_v,
        &w.self_o,
        &d_h1,
    );
    g.self_q = arr(&[DIM, DIM], sg.wq);
    g.self_k = arr(&[DIM, DIM], sg.wk);
    g.self_v = arr(&[DIM, DIM], sg.wv);
    g.self_o = arr(&[DIM, DIM], sg.wo);
    let mut d_h0 = d_h1;
    add_in_place(&mut d_h0, &sg.dq_in);
    add_in_place(&mut d_h0, &sg.dkv_in);

    g.patch_in_w = arr(&[PATCH_DIM, DIM], mm_at(&tr.patches, &d_h0, TOKENS, PATCH_DIM, DIM));
    g.patch_in_b = arr(&[DIM], col_sum(&d_h0, DIM));
    g.pos = arr(&[TOKENS, DIM], d_h0.clone());
    let d_temb = col_sum(&d_h0, DIM);
    g.time_w = arr(&[TIME_FEATURES, DIM], mm(&tr.tfeat, &d_temb, TIME_FEATURES, 1, DIM));
    g.time_b = arr(&[DIM], d_temb);
    g
}

fn arr(dims: &[usize], data: Vec<f32>) -> DenseArray {
    DenseArray::from_vec(dims, data).expect("gradient dims are fixed by the architecture")
}
