//! Toy diffusion transformer with split forward passes.
//!
//! The model is a stack of `M` pre-norm transformer blocks over an `N x d`
//! token grid. Time and condition information is injected once at the input,
//! so the forward pass can be cut after any block `m`: `forward_probe` runs
//! blocks `1..=m`, `forward_resume` runs `m+1..=M` plus the output head, and
//! their composition is bit-identical to `forward_full` because all three
//! walk the same per-block code path.
//!
//! Weights are a pure function of `(ModelConfig, weight_seed)`; nothing is
//! ever serialized, a config is enough to rebuild the exact parameters.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{PrngStream, Tensor2D};
use crate::parallel::for_each_row;
use crate::sampler::CostMeter;

#[allow(clippy::excessive_precision)] // pinned decimal constant
const GELU_SQRT_2_OVER_PI: f32 = 0.797_884_560_8;
const GELU_CUBIC: f32 = 0.044_715;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of transformer blocks M.
    pub num_blocks: usize,
    /// Channel width d; hidden width equals input width at every block.
    pub d_model: usize,
    pub n_heads: usize,
    /// Token count N.
    pub n_tokens: usize,
    pub mlp_ratio: usize,
    pub ln_epsilon: f64,
    pub weight_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 12,
            d_model: 64,
            n_heads: 4,
            n_tokens: 64,
            mlp_ratio: 4,
            ln_epsilon: 1e-5,
            weight_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 2 {
            return Err(Error::InvalidConfig("num_blocks must be >= 2".into()));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return Err(Error::InvalidConfig("d_model must be even and > 0".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig("n_heads must divide d_model".into()));
        }
        if self.n_tokens == 0 {
            return Err(Error::InvalidConfig("n_tokens must be >= 1".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::InvalidConfig("mlp_ratio must be >= 1".into()));
        }
        if self.ln_epsilon.is_nan() || self.ln_epsilon <= 0.0 {
            return Err(Error::InvalidConfig("ln_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Single condition vector of length `d_model`, injected at the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    values: Vec<f32>,
}

impl Conditioning {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "conditioning",
            });
        }
        Ok(Self { values })
    }

    /// Standard-normal condition vector drawn from `seed`.
    pub fn from_seed(seed: u64, d_model: usize) -> Self {
        let mut stream = PrngStream::new(seed);
        Self {
            values: (0..d_model).map(|_| stream.gaussian() as f32).collect(),
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

#[derive(Clone, Debug)]
pub struct BlockWeights {
    /// d x 3d fused query/key/value projection.
    pub qkv: Tensor2D,
    /// d x d attention output projection.
    pub attn_out: Tensor2D,
    /// d x (mlp_ratio * d).
    pub mlp_in: Tensor2D,
    /// (mlp_ratio * d) x d.
    pub mlp_out: Tensor2D,
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct ModelWeights {
    pub blocks: Vec<BlockWeights>,
    /// d x d map applied to the sinusoidal time embedding.
    pub time_proj: Tensor2D,
    /// d x d map applied to the condition vector.
    pub cond_proj: Tensor2D,
    pub final_ln_gain: Vec<f32>,
    pub final_ln_bias: Vec<f32>,
    /// d x d output projection producing the velocity.
    pub out_proj: Tensor2D,
}

fn xavier(rows: usize, cols: usize, stream: &mut PrngStream) -> Tensor2D {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(stream.uniform(-bound, bound).expect("valid range") as f32);
    }
    Tensor2D::from_vec(rows, cols, data).expect("exact length")
}

impl ModelWeights {
    /// Draw all parameters from a single stream seeded by `weight_seed`.
    ///
    /// Traversal order is fixed: blocks ascending, within a block QKV,
    /// attention-out, MLP-in, MLP-out (layer norms start at gain 1, bias 0),
    /// then the time and condition projections, then the output head.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let hidden = cfg.mlp_ratio * d;
        let mut stream = PrngStream::new(cfg.weight_seed);
        let blocks = (0..cfg.num_blocks)
            .map(|_| BlockWeights {
                qkv: xavier(d, 3 * d, &mut stream),
                attn_out: xavier(d, d, &mut stream),
                mlp_in: xavier(d, hidden, &mut stream),
                mlp_out: xavier(hidden, d, &mut stream),
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
            })
            .collect();
        let time_proj = xavier(d, d, &mut stream);
        let cond_proj = xavier(d, d, &mut stream);
        let out_proj = xavier(d, d, &mut stream);
        Ok(Self {
            blocks,
            time_proj,
            cond_proj,
            final_ln_gain: vec![1.0; d],
            final_ln_bias: vec![0.0; d],
            out_proj,
        })
    }
}

/// Sinusoidal embedding of a timestep in `[0, 1]`:
/// `emb[2j] = sin(1000 t w_j)`, `emb[2j+1] = cos(1000 t w_j)` with
/// `w_j = 10000^(-2j/d)`.
pub fn time_embedding(t: f64, d: usize) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRangeTime { t });
    }
    let mut emb = vec![0.0f32; d];
    for j in 0..d / 2 {
        let omega = 10_000.0f64.powf(-2.0 * j as f64 / d as f64);
        let phase = 1000.0 * t * omega;
        emb[2 * j] = phase.sin() as f32;
        emb[2 * j + 1] = phase.cos() as f32;
    }
    Ok(emb)
}

/// Elementwise `y - x`, the cached quantity at every depth.
pub fn residual(y: &Tensor2D, x: &Tensor2D) -> Result<Tensor2D> {
    y.sub(x)
}

/// Full forward result: the velocity plus any intermediate features that
/// were asked for.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub final_output: Tensor2D,
    /// Block outputs keyed by layer id; layer M maps to the velocity itself.
    pub recorded: BTreeMap<usize, Tensor2D>,
}

pub struct Model {
    cfg: ModelConfig,
    weights: ModelWeights,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let weights = ModelWeights::init(&cfg)?;
        Ok(Self { cfg, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn num_blocks(&self) -> usize {
        self.cfg.num_blocks
    }

    fn check_input(&self, x: &Tensor2D) -> Result<()> {
        if x.rows() != self.cfg.n_tokens || x.cols() != self.cfg.d_model {
            return Err(Error::ShapeMismatch {
                left_rows: x.rows(),
                left_cols: x.cols(),
                right_rows: self.cfg.n_tokens,
                right_cols: self.cfg.d_model,
                context: "model input",
            });
        }
        Ok(())
    }

    fn check_probe_depth(&self, m: usize) -> Result<()> {
        if m == 0 || m >= self.cfg.num_blocks {
            return Err(Error::BadProbeDepth {
                m,
                max: self.cfg.num_blocks - 1,
            });
        }
        Ok(())
    }

    /// `h0 = x + broadcast(W_t * emb(t) + W_c * c)`.
    fn input_embed(&self, x: &Tensor2D, t: f64, cond: &Conditioning) -> Result<Tensor2D> {
        self.check_input(x)?;
        let d = self.cfg.d_model;
        if cond.values().len() != d {
            return Err(Error::ShapeMismatch {
                left_rows: 1,
                left_cols: cond.values().len(),
                right_rows: 1,
                right_cols: d,
                context: "conditioning",
            });
        }
        let emb = time_embedding(t, d)?;
        let t_shift = vec_mat(&emb, &self.weights.time_proj);
        let c_shift = vec_mat(cond.values(), &self.weights.cond_proj);
        let mut h = x.clone();
        for_each_row(h.data_mut(), d, |_, row| {
            for ((v, &ts), &cs) in row.iter_mut().zip(&t_shift).zip(&c_shift) {
                *v += ts + cs;
            }
        });
        Ok(h)
    }

    /// One pre-norm block: attention with residual add, then MLP with
    /// residual add. Charges a single block evaluation.
    fn apply_block(&self, index: usize, h: &Tensor2D, meter: &mut CostMeter) -> Tensor2D {
        let w = &self.weights.blocks[index];
        let normed = layer_norm(h, &w.ln1_gain, &w.ln1_bias, self.cfg.ln_epsilon as f32);
        let attn = self.self_attention(&normed, w);
        let h = h.add(&attn).expect("shape preserved");
        let normed = layer_norm(&h, &w.ln2_gain, &w.ln2_bias, self.cfg.ln_epsilon as f32);
        let mlp = mlp_forward(&normed, &w.mlp_in, &w.mlp_out);
        let out = h.add(&mlp).expect("shape preserved");
        meter.add_block_evals(1);
        out
    }

    fn self_attention(&self, h: &Tensor2D, w: &BlockWeights) -> Tensor2D {
        let d = self.cfg.d_model;
        let n = h.rows();
        let heads = self.cfg.n_heads;
        let head_dim = d / heads;
        let scale = 1.0 / (head_dim as f32).sqrt();
        let qkv = h.matmul(&w.qkv).expect("checked dims");
        let qkv_data = qkv.data();
        let stride = 3 * d;

        let mut context = Tensor2D::zeros(n, d);
        for_each_row(context.data_mut(), d, |i, out_row| {
            let q_row = &qkv_data[i * stride..i * stride + d];
            let mut scores = vec![0.0f32; n];
            for head in 0..heads {
                let q = &q_row[head * head_dim..(head + 1) * head_dim];
                for (j, score) in scores.iter_mut().enumerate() {
                    let k = &qkv_data
                        [j * stride + d + head * head_dim..j * stride + d + (head + 1) * head_dim];
                    let mut dot = 0.0f32;
                    for (a, b) in q.iter().zip(k) {
                        dot += a * b;
                    }
                    *score = dot * scale;
                }
                softmax_in_place(&mut scores);
                let out = &mut out_row[head * head_dim..(head + 1) * head_dim];
                for (j, &weight) in scores.iter().enumerate() {
                    let v = &qkv_data[j * stride + 2 * d + head * head_dim
                        ..j * stride + 2 * d + (head + 1) * head_dim];
                    for (o, &value) in out.iter_mut().zip(v) {
                        *o += weight * value;
                    }
                }
            }
        });
        context.matmul(&w.attn_out).expect("checked dims")
    }

    /// Blocks `1..=m` after input conditioning; returns the probe feature.
    pub fn forward_probe(
        &self,
        x: &Tensor2D,
        t: f64,
        cond: &Conditioning,
        m: usize,
        meter: &mut CostMeter,
    ) -> Result<Tensor2D> {
        self.check_probe_depth(m)?;
        let mut h = self.input_embed(x, t, cond)?;
        for i in 0..m {
            h = self.apply_block(i, &h, meter);
        }
        h.validate_finite("forward_probe output")?;
        Ok(h)
    }

    /// Blocks `m+1..=M` plus the output head, continuing from a probe
    /// feature; returns the velocity prediction.
    pub fn forward_resume(
        &self,
        probe: &Tensor2D,
        m: usize,
        meter: &mut CostMeter,
    ) -> Result<Tensor2D> {
        self.check_probe_depth(m)?;
        self.check_input(probe)?;
        let mut h = probe.clone();
        for i in m..self.cfg.num_blocks {
            h = self.apply_block(i, &h, meter);
        }
        let out = self.head(&h);
        out.validate_finite("forward_resume output")?;
        Ok(out)
    }

    /// All blocks plus the head, optionally recording intermediate block
    /// outputs. `record_layers` entries must lie in `[1, M]`; layer `M`
    /// records the velocity itself.
    pub fn forward_full(
        &self,
        x: &Tensor2D,
        t: f64,
        cond: &Conditioning,
        record_layers: &[usize],
        meter: &mut CostMeter,
    ) -> Result<ForwardOutputs> {
        let m_total = self.cfg.num_blocks;
        let record: BTreeSet<usize> = record_layers.iter().copied().collect();
        if let Some(&bad) = record.iter().find(|&&l| l == 0 || l > m_total) {
            return Err(Error::InvalidLayers(format!(
                "layer {bad} outside [1, {m_total}]"
            )));
        }
        let mut recorded = BTreeMap::new();
        let mut h = self.input_embed(x, t, cond)?;
        for i in 0..m_total {
            h = self.apply_block(i, &h, meter);
            let layer = i + 1;
            if layer < m_total && record.contains(&layer) {
                recorded.insert(layer, h.clone());
            }
        }
        let out = self.head(&h);
        out.validate_finite("forward_full output")?;
        if record.contains(&m_total) {
            recorded.insert(m_total, out.clone());
        }
        Ok(ForwardOutputs {
            final_output: out,
            recorded,
        })
    }

    /// Final layer norm and output projection; costed as part of block M.
    fn head(&self, h: &Tensor2D) -> Tensor2D {
        let normed = layer_norm(
            h,
            &self.weights.final_ln_gain,
            &self.weights.final_ln_bias,
            self.cfg.ln_epsilon as f32,
        );
        normed.matmul(&self.weights.out_proj).expect("checked dims")
    }
}

/// `v (len k) * w (k x m)` as a row vector.
fn vec_mat(v: &[f32], w: &Tensor2D) -> Vec<f32> {
    debug_assert_eq!(v.len(), w.rows());
    let m = w.cols();
    let mut out = vec![0.0f32; m];
    for (p, &a) in v.iter().enumerate() {
        let w_row = w.row(p);
        for (o, &b) in out.iter_mut().zip(w_row) {
            *o += a * b;
        }
    }
    out
}

/// Per-token layer norm with population variance.
pub(crate) fn layer_norm(h: &Tensor2D, gain: &[f32], bias: &[f32], epsilon: f32) -> Tensor2D {
    let d = h.cols();
    debug_assert_eq!(gain.len(), d);
    let mut out = h.clone();
    for_each_row(out.data_mut(), d, |_, row| {
        let mut mean = 0.0f32;
        for &v in row.iter() {
            mean += v;
        }
        mean /= d as f32;
        let mut var = 0.0f32;
        for &v in row.iter() {
            var += (v - mean) * (v - mean);
        }
        var /= d as f32;
        let inv = 1.0 / (var + epsilon).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(gain).zip(bias) {
            *v = (*v - mean) * inv * g + b;
        }
    });
    out
}

fn mlp_forward(h: &Tensor2D, w_in: &Tensor2D, w_out: &Tensor2D) -> Tensor2D {
    let mut hidden = h.matmul(w_in).expect("checked dims");
    let cols = hidden.cols();
    for_each_row(hidden.data_mut(), cols, |_, row| {
        for v in row.iter_mut() {
            *v = gelu(*v);
        }
    });
    hidden.matmul(w_out).expect("checked dims")
}

/// tanh-approximated GELU with pinned constants.
#[inline]
fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn softmax_in_place(scores: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &s in scores.iter() {
        max = max.max(s);
    }
    let mut sum = 0.0f32;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}
