//! Bit-exact feature traces and offline analyses.
//!
//! A trace records, for every sampling step of a plain (recompute-every-step)
//! run, the input latent and the outputs of a chosen set of layers. The
//! binary format is fixed little-endian with no compression so files can be
//! diffed byte for byte across tools and re-recordings.
//!
//! Analyses are open-loop: they evaluate caching schedules against the
//! recorded trajectory without feeding decisions back into the latent path.
//! Closed-loop effects are measured only by live sampler runs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::cachepolicy::Action;
use crate::error::{Error, Result};
use crate::numerics::{l1_rel, pearson, spearman, Tensor2D};
use crate::sampler::{euler_step, init_noise, CostMeter, SamplerConfig};
use crate::toydit::{residual, Conditioning, Model};

const DTRC_MAGIC: &[u8; 4] = b"DTRC";
const DTRC_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceHeader {
    pub num_steps: u32,
    pub num_blocks: u32,
    pub n_tokens: u32,
    pub d_model: u32,
    /// Strictly ascending layer ids in `[1, M]`, always containing `M`.
    pub recorded_layers: Vec<u32>,
    /// Opaque provenance blob (seeds and dims) supplied by the caller.
    pub config_json: String,
}

#[derive(Clone, Debug)]
pub struct TraceStep {
    pub step_index: u32,
    pub t: f32,
    pub input: Tensor2D,
    /// One tensor per recorded layer, in header order; the entry for layer M
    /// is the model output itself.
    pub layers: Vec<Tensor2D>,
}

#[derive(Clone, Debug)]
pub struct Trace {
    pub header: TraceHeader,
    pub steps: Vec<TraceStep>,
}

impl Trace {
    fn layer_pos(&self, layer: usize) -> Result<usize> {
        self.header
            .recorded_layers
            .iter()
            .position(|&l| l as usize == layer)
            .ok_or(Error::LayerNotRecorded { layer })
    }

    /// Feature of `layer` at step position `pos` (0 = first sampled step).
    fn feature(&self, pos: usize, layer_pos: usize) -> &Tensor2D {
        &self.steps[pos].layers[layer_pos]
    }
}

fn validate_layers(layers: &[usize], num_blocks: usize) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::InvalidLayers("no layers requested".into()));
    }
    if !layers.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidLayers(
            "layers must be strictly ascending".into(),
        ));
    }
    if layers[0] == 0 || *layers.last().unwrap() > num_blocks {
        return Err(Error::InvalidLayers(format!(
            "layers must lie in [1, {num_blocks}]"
        )));
    }
    if *layers.last().unwrap() != num_blocks {
        return Err(Error::InvalidLayers(format!(
            "layer set must include the final layer {num_blocks}"
        )));
    }
    Ok(())
}

/// Run the plain provider and dump one record per step.
///
/// Identical inputs produce byte-identical files.
pub fn record_trace(
    model: &Model,
    sampler_cfg: &SamplerConfig,
    cond: &Conditioning,
    recorded_layers: &[usize],
    config_json: &str,
    out_path: impl AsRef<Path>,
) -> Result<TraceHeader> {
    validate_layers(recorded_layers, model.num_blocks())?;
    if sampler_cfg.n_tokens != model.config().n_tokens
        || sampler_cfg.d_model != model.config().d_model
    {
        return Err(Error::InvalidConfig(
            "sampler dims do not match model dims".into(),
        ));
    }
    let path = out_path.as_ref();
    let ctx = || format!("writing {}", path.display());
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(ctx(), e))?);

    let header = TraceHeader {
        num_steps: sampler_cfg.num_steps as u32,
        num_blocks: model.num_blocks() as u32,
        n_tokens: sampler_cfg.n_tokens as u32,
        d_model: sampler_cfg.d_model as u32,
        recorded_layers: recorded_layers.iter().map(|&l| l as u32).collect(),
        config_json: config_json.to_owned(),
    };
    w.write_all(DTRC_MAGIC).map_err(|e| Error::io(ctx(), e))?;
    for word in [
        DTRC_VERSION,
        header.num_steps,
        header.num_blocks,
        header.n_tokens,
        header.d_model,
        header.recorded_layers.len() as u32,
    ] {
        w.write_all(&word.to_le_bytes()).map_err(|e| Error::io(ctx(), e))?;
    }
    for &layer in &header.recorded_layers {
        w.write_all(&layer.to_le_bytes()).map_err(|e| Error::io(ctx(), e))?;
    }
    let blob = header.config_json.as_bytes();
    w.write_all(&(blob.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(ctx(), e))?;
    w.write_all(blob).map_err(|e| Error::io(ctx(), e))?;

    let mut state = init_noise(sampler_cfg)?;
    let mut meter = CostMeter::default();
    for k in (1..=sampler_cfg.num_steps).rev() {
        let outs = model
            .forward_full(&state.x, state.t, cond, recorded_layers, &mut meter)
            .map_err(|e| Error::at_step(k, e))?;
        w.write_all(&(k as u32).to_le_bytes()).map_err(|e| Error::io(ctx(), e))?;
        w.write_all(&(state.t as f32).to_le_bytes())
            .map_err(|e| Error::io(ctx(), e))?;
        write_tensor(&mut w, &state.x).map_err(|e| Error::io(ctx(), e))?;
        for &layer in recorded_layers {
            write_tensor(&mut w, &outs.recorded[&layer]).map_err(|e| Error::io(ctx(), e))?;
        }
        state = euler_step(&state, &outs.final_output, sampler_cfg.num_steps)
            .map_err(|e| Error::at_step(k, e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))?;
    Ok(header)
}

fn write_tensor(w: &mut impl Write, t: &Tensor2D) -> std::io::Result<()> {
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Load a trace, validating structure and step ordering.
pub fn load_trace(path: impl AsRef<Path>) -> Result<Trace> {
    let path = path.as_ref();
    let ctx = || format!("reading {}", path.display());
    let bad = |reason: String| Error::MalformedFile {
        path: path.display().to_string(),
        reason,
    };
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(ctx(), e))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(ctx(), e))?;
    if &magic != DTRC_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = read_u32(&mut r).map_err(|e| Error::io(ctx(), e))?;
    if version != DTRC_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let num_steps = read_u32(&mut r).map_err(|e| Error::io(ctx(), e))?;
    let num_blocks = read_u32(&mut r).map_err(|e| Error::io(ctx(), e))?;
    let n_tokens = read_u32(&mut r).map_err(|e| Error::io(ctx(), e))?;
    let d_model = read_u32(&mut r).map_err(|e| Error::io(ctx(), e))?;
    let layer_count = read_u32(&mut r).map_err(|e| Error::io(ctx(), e))? as usize;
    let mut recorded_layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        recorded_layers.push(read_u32(&mut r).map_err(|e| Error::io(ctx(), e))?);
    }
    let layers_usize: Vec<usize> = recorded_layers.iter().map(|&l| l as usize).collect();
    validate_layers(&layers_usize, num_blocks as usize)
        .map_err(|e| bad(format!("invalid layer set: {e}")))?;
    let blob_len = read_u32(&mut r).map_err(|e| Error::io(ctx(), e))? as usize;
    let mut blob = vec![0u8; blob_len];
    r.read_exact(&mut blob).map_err(|e| Error::io(ctx(), e))?;
    let config_json =
        String::from_utf8(blob).map_err(|_| bad("config echo is not UTF-8".into()))?;

    let elems = (n_tokens * d_model) as usize;
    let mut steps = Vec::with_capacity(num_steps as usize);
    for expected_k in (1..=num_steps).rev() {
        let k = read_u32(&mut r).map_err(|e| Error::io(ctx(), e))?;
        if k != expected_k {
            return Err(bad(format!("expected step {expected_k}, found {k}")));
        }
        let mut tbuf = [0u8; 4];
        r.read_exact(&mut tbuf).map_err(|e| Error::io(ctx(), e))?;
        let t = f32::from_le_bytes(tbuf);
        let input = read_tensor(&mut r, n_tokens as usize, d_model as usize, elems)
            .map_err(|e| Error::io(ctx(), e))?;
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            layers.push(
                read_tensor(&mut r, n_tokens as usize, d_model as usize, elems)
                    .map_err(|e| Error::io(ctx(), e))?,
            );
        }
        steps.push(TraceStep {
            step_index: k,
            t,
            input,
            layers,
        });
    }
    Ok(Trace {
        header: TraceHeader {
            num_steps,
            num_blocks,
            n_tokens,
            d_model,
            recorded_layers,
            config_json,
        },
        steps,
    })
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_tensor(r: &mut impl Read, rows: usize, cols: usize, elems: usize) -> std::io::Result<Tensor2D> {
    let mut bytes = vec![0u8; elems * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor2D::from_vec(rows, cols, data).expect("exact length"))
}

/// Per-layer correlation between the consecutive-step difference series of
/// that layer and the final layer's series.
#[derive(Clone, Debug, Serialize)]
pub struct CorrelationReport {
    pub layers: Vec<u32>,
    /// Spearman rho of each layer's difference series against layer M's.
    pub spearman_vs_final: Vec<f64>,
    /// The raw difference series, one per layer, ordered from the first
    /// sampled transition to the last.
    pub difference_series: Vec<Vec<f64>>,
}

/// Build `l1_rel(y_t, y_{t+1})` difference series for every recorded layer
/// and correlate them against the final layer's series.
pub fn layer_correlation(trace: &Trace) -> Result<CorrelationReport> {
    let steps = trace.steps.len();
    if steps < 3 {
        return Err(Error::InvalidConfig(
            "trace needs at least 3 steps for correlation".into(),
        ));
    }
    let layer_count = trace.header.recorded_layers.len();
    let mut series = Vec::with_capacity(layer_count);
    for li in 0..layer_count {
        let mut diffs = Vec::with_capacity(steps - 1);
        for pos in 1..steps {
            diffs.push(l1_rel(
                trace.feature(pos, li),
                trace.feature(pos - 1, li),
            )?);
        }
        series.push(diffs);
    }
    let final_pos = layer_count - 1;
    let mut rho = Vec::with_capacity(layer_count);
    for s in &series {
        rho.push(spearman(s, &series[final_pos])?);
    }
    Ok(CorrelationReport {
        layers: trace.header.recorded_layers.clone(),
        spearman_vs_final: rho,
        difference_series: series,
    })
}

/// One evaluated step of a trajectory-consistency analysis.
#[derive(Clone, Debug, Serialize)]
pub struct GammaStepRow {
    pub step_index: u32,
    /// The more recent scheduled recompute bounding this step.
    pub newer: u32,
    /// The older scheduled recompute bounding this step.
    pub older: u32,
    /// Coefficient solved from full-model residuals.
    pub gamma: f64,
    /// Coefficient solved from each recorded layer's residuals.
    pub gamma_hat: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GammaConsistencyReport {
    pub schedule: Vec<u32>,
    pub layers: Vec<u32>,
    pub rows: Vec<GammaStepRow>,
    /// Per-layer rank correlation between the layer's coefficient series and
    /// the full-residual series.
    pub per_layer_spearman: Vec<f64>,
    pub per_layer_pearson: Vec<f64>,
}

/// Treat `schedule` (ascending step indices) as recompute steps and solve
/// the trajectory coefficient for every step between each adjacent pair,
/// both from full residuals and from each recorded layer's residuals.
pub fn gamma_consistency(trace: &Trace, schedule: &[usize]) -> Result<GammaConsistencyReport> {
    if schedule.len() < 2 {
        return Err(Error::BadSchedule("need at least two entries".into()));
    }
    if !schedule.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::BadSchedule("entries must be strictly ascending".into()));
    }
    let num_steps = trace.header.num_steps as usize;
    if schedule[0] == 0 || *schedule.last().unwrap() > num_steps {
        return Err(Error::BadSchedule(format!(
            "entries must lie in [1, {num_steps}]"
        )));
    }
    let layer_count = trace.header.recorded_layers.len();
    let final_pos = layer_count - 1;
    let pos_of_step = |step: usize| num_steps - step;

    // Residual of a layer feature relative to the step input.
    let layer_residual = |pos: usize, li: usize| -> Result<Tensor2D> {
        residual(trace.feature(pos, li), &trace.steps[pos].input)
    };

    let mut rows = Vec::new();
    // Walk segments oldest-first so rows come out in sampling order.
    for pair in schedule.windows(2).rev() {
        let (newer, older) = (pair[0], pair[1]);
        let newer_pos = pos_of_step(newer);
        let older_pos = pos_of_step(older);
        // Per-layer denominators are fixed within a segment.
        let mut denominators = Vec::with_capacity(layer_count);
        let mut older_res = Vec::with_capacity(layer_count);
        let mut newer_res = Vec::with_capacity(layer_count);
        for li in 0..layer_count {
            let o = layer_residual(older_pos, li)?;
            let n = layer_residual(newer_pos, li)?;
            denominators.push(l1_rel(&n, &o)?);
            older_res.push(o);
            newer_res.push(n);
        }
        for step in (newer..=older).rev() {
            let pos = pos_of_step(step);
            let mut coeffs = Vec::with_capacity(layer_count);
            for li in 0..layer_count {
                let now = layer_residual(pos, li)?;
                let numerator = l1_rel(&now, &older_res[li])?;
                coeffs.push(if denominators[li] == 0.0 {
                    1.0
                } else {
                    numerator / denominators[li]
                });
            }
            rows.push(GammaStepRow {
                step_index: step as u32,
                newer: newer as u32,
                older: older as u32,
                gamma: coeffs[final_pos],
                gamma_hat: coeffs,
            });
        }
    }

    let gamma_series: Vec<f64> = rows.iter().map(|r| r.gamma).collect();
    let mut per_layer_spearman = Vec::with_capacity(layer_count);
    let mut per_layer_pearson = Vec::with_capacity(layer_count);
    for li in 0..layer_count {
        let series: Vec<f64> = rows.iter().map(|r| r.gamma_hat[li]).collect();
        per_layer_spearman.push(spearman(&series, &gamma_series)?);
        per_layer_pearson.push(pearson(&series, &gamma_series)?);
    }
    Ok(GammaConsistencyReport {
        schedule: schedule.iter().map(|&s| s as u32).collect(),
        layers: trace.header.recorded_layers.clone(),
        rows,
        per_layer_spearman,
        per_layer_pearson,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ReplayStep {
    pub step_index: u32,
    pub action: Action,
    pub estimated_error: f64,
    pub accumulated_error: f64,
}

/// Open-loop decision schedule for one threshold.
#[derive(Clone, Debug, Serialize)]
pub struct ReplayReport {
    pub probe_layer: u32,
    pub reuse_threshold: f64,
    pub steps: Vec<ReplayStep>,
    /// Steps that computed the full model, the initial step included.
    pub recompute_steps: Vec<u32>,
}

impl ReplayReport {
    pub fn recompute_count(&self) -> usize {
        self.recompute_steps.len()
    }
}

/// Simulate the error accumulator over the trace's fixed feature series.
///
/// The probe reference is always the previous step's recorded feature; no
/// decision feeds back into the features, which is what makes threshold
/// sweeps on a single trace meaningful.
pub fn replay_schedule(trace: &Trace, reuse_threshold: f64, probe_layer: usize) -> Result<ReplayReport> {
    if reuse_threshold.is_nan() || reuse_threshold < 0.0 {
        return Err(Error::InvalidConfig("reuse threshold must be >= 0".into()));
    }
    let li = trace.layer_pos(probe_layer)?;
    let mut steps = Vec::with_capacity(trace.steps.len());
    let mut recompute_steps = Vec::new();
    let first = trace.steps[0].step_index;
    steps.push(ReplayStep {
        step_index: first,
        action: Action::ComputeFirst,
        estimated_error: 0.0,
        accumulated_error: 0.0,
    });
    recompute_steps.push(first);
    let mut accumulated = 0.0f64;
    for pos in 1..trace.steps.len() {
        let estimated = l1_rel(trace.feature(pos, li), trace.feature(pos - 1, li))?;
        accumulated += estimated;
        let step_index = trace.steps[pos].step_index;
        if accumulated <= reuse_threshold {
            steps.push(ReplayStep {
                step_index,
                action: Action::Reuse,
                estimated_error: estimated,
                accumulated_error: accumulated,
            });
        } else {
            steps.push(ReplayStep {
                step_index,
                action: Action::Recompute,
                estimated_error: estimated,
                accumulated_error: accumulated,
            });
            recompute_steps.push(step_index);
            accumulated = 0.0;
        }
    }
    Ok(ReplayReport {
        probe_layer: probe_layer as u32,
        reuse_threshold,
        steps,
        recompute_steps,
    })
}
