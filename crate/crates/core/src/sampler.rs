//! Flow-matching Euler sampler over a pluggable velocity provider.
//!
//! The sampler walks `k = T, T-1, ..., 1` on the uniform grid `t = k/T`,
//! asks the provider for a velocity once per step, and integrates
//! `x' = x - v/T`. The model output is treated as `dx/dt` and stepped with
//! `dt = -1/T`, i.e. toward the data end of the trajectory. All cost
//! accounting flows through [`CostMeter`], which the provider and the model
//! forwards update; the sampler itself never charges anything.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cachepolicy::Decision;
use crate::error::{Error, Result};
use crate::numerics::{PrngStream, Tensor2D};
use crate::toydit::Conditioning;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Sampling steps T.
    pub num_steps: usize,
    pub noise_seed: u64,
    pub n_tokens: usize,
    pub d_model: usize,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::InvalidConfig("num_steps must be >= 1".into()));
        }
        if self.n_tokens == 0 || self.d_model == 0 {
            return Err(Error::InvalidConfig("latent dims must be >= 1".into()));
        }
        Ok(())
    }
}

/// Current latent plus its position on the time grid (`t == k/T`).
#[derive(Clone, Debug)]
pub struct LatentState {
    pub x: Tensor2D,
    pub t: f64,
    pub step_index: usize,
}

/// Block-evaluation accounting: the desk-scale stand-in for latency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CostMeter {
    block_evals: u64,
    recompute_steps: u64,
    reuse_steps: u64,
}

impl CostMeter {
    pub fn block_evals(&self) -> u64 {
        self.block_evals
    }

    pub fn recompute_steps(&self) -> u64 {
        self.recompute_steps
    }

    pub fn reuse_steps(&self) -> u64 {
        self.reuse_steps
    }

    pub fn add_block_evals(&mut self, count: u64) {
        self.block_evals += count;
    }

    pub fn count_recompute(&mut self) {
        self.recompute_steps += 1;
    }

    pub fn count_reuse(&mut self) {
        self.reuse_steps += 1;
    }
}

/// Per-step velocity source; implementations are the caching policies.
pub trait VelocityProvider {
    /// Produce the velocity for the current state, charging all compute to
    /// `meter` and describing what happened in the returned [`Decision`].
    fn velocity(
        &mut self,
        state: &LatentState,
        cond: &Conditioning,
        meter: &mut CostMeter,
    ) -> Result<(Tensor2D, Decision)>;
}

/// Draw `x_T` as i.i.d. standard normals; `t = 1`, `k = T`.
pub fn init_noise(cfg: &SamplerConfig) -> Result<LatentState> {
    cfg.validate()?;
    let mut stream = PrngStream::new(cfg.noise_seed);
    let x = Tensor2D::from_fn(cfg.n_tokens, cfg.d_model, |_, _| stream.gaussian() as f32);
    Ok(LatentState {
        x,
        t: 1.0,
        step_index: cfg.num_steps,
    })
}

/// One Euler update: `x' = x - v/T`, `t' = (k-1)/T`.
pub fn euler_step(state: &LatentState, velocity: &Tensor2D, total_steps: usize) -> Result<LatentState> {
    state.x.check_shape(velocity, "euler_step")?;
    debug_assert!(state.step_index >= 1);
    let dt = -(1.0 / total_steps as f64) as f32;
    let mut x = state.x.clone();
    for (o, &v) in x.data_mut().iter_mut().zip(velocity.data()) {
        *o += dt * v;
    }
    let k = state.step_index - 1;
    Ok(LatentState {
        x,
        t: k as f64 / total_steps as f64,
        step_index: k,
    })
}

/// One line of the run log: what the provider decided and where the meter
/// stood afterwards.
#[derive(Clone, Debug, Serialize)]
pub struct StepLogEntry {
    pub step_index: usize,
    pub t: f64,
    #[serde(flatten)]
    pub decision: Decision,
    pub block_evals_total: u64,
}

/// Result of a full sampling run.
#[derive(Clone, Debug)]
pub struct SampleRun {
    pub final_latent: Tensor2D,
    pub steps: Vec<StepLogEntry>,
    pub meter: CostMeter,
}

/// Integrate from noise to data, querying the provider exactly T times.
pub fn run(
    cfg: &SamplerConfig,
    provider: &mut dyn VelocityProvider,
    cond: &Conditioning,
) -> Result<SampleRun> {
    cfg.validate()?;
    let mut state = init_noise(cfg)?;
    let mut meter = CostMeter::default();
    let mut steps = Vec::with_capacity(cfg.num_steps);
    for k in (1..=cfg.num_steps).rev() {
        let (velocity, decision) = provider
            .velocity(&state, cond, &mut meter)
            .map_err(|e| Error::at_step(k, e))?;
        state
            .x
            .check_shape(&velocity, "provider velocity")
            .and_then(|_| velocity.validate_finite("provider velocity"))
            .map_err(|e| Error::at_step(k, e))?;
        steps.push(StepLogEntry {
            step_index: k,
            t: state.t,
            decision,
            block_evals_total: meter.block_evals(),
        });
        state = euler_step(&state, &velocity, cfg.num_steps).map_err(|e| Error::at_step(k, e))?;
    }
    state.x.validate_finite("final latent")?;
    Ok(SampleRun {
        final_latent: state.x,
        steps,
        meter,
    })
}

const DLAT_MAGIC: &[u8; 4] = b"DLAT";
const DLAT_VERSION: u32 = 1;

/// Write a latent as a DLAT file: magic, version, N, d (all u32 LE), then
/// N*d little-endian f32 values row-major.
pub fn write_dlat(path: impl AsRef<Path>, tensor: &Tensor2D) -> Result<()> {
    let path = path.as_ref();
    let ctx = || format!("writing {}", path.display());
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(ctx(), e))?);
    w.write_all(DLAT_MAGIC).map_err(|e| Error::io(ctx(), e))?;
    w.write_all(&DLAT_VERSION.to_le_bytes())
        .map_err(|e| Error::io(ctx(), e))?;
    w.write_all(&(tensor.rows() as u32).to_le_bytes())
        .map_err(|e| Error::io(ctx(), e))?;
    w.write_all(&(tensor.cols() as u32).to_le_bytes())
        .map_err(|e| Error::io(ctx(), e))?;
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

/// Read a DLAT file back into a tensor.
pub fn read_dlat(path: impl AsRef<Path>) -> Result<Tensor2D> {
    let path = path.as_ref();
    let ctx = || format!("reading {}", path.display());
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(ctx(), e))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(ctx(), e))?;
    if &magic != DLAT_MAGIC {
        return Err(Error::MalformedFile {
            path: path.display().to_string(),
            reason: "bad magic".into(),
        });
    }
    let version = read_u32(&mut r, path)?;
    if version != DLAT_VERSION {
        return Err(Error::MalformedFile {
            path: path.display().to_string(),
            reason: format!("unsupported version {version}"),
        });
    }
    let rows = read_u32(&mut r, path)? as usize;
    let cols = read_u32(&mut r, path)? as usize;
    let mut data = vec![0.0f32; rows * cols];
    let mut buf = [0u8; 4];
    for v in data.iter_mut() {
        r.read_exact(&mut buf)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        *v = f32::from_le_bytes(buf);
    }
    Tensor2D::from_vec(rows, cols, data)
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(u32::from_le_bytes(buf))
}
