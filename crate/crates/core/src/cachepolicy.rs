//! Caching policies implementing the sampler's velocity contract.
//!
//! The adaptive policy probes the first `m` blocks every step, accumulates a
//! probe-estimated caching error, and reuses the cached full-model residual
//! until the accumulator crosses the reuse threshold; a recompute then
//! resumes from the probe feature so a refresh costs exactly the same M
//! block evaluations as a plain forward pass. When trajectory alignment is
//! enabled and two cache entries exist, reused residuals are interpolated
//! between the two most recent recomputes with a coefficient solved from the
//! probe residual trajectory.
//!
//! Baselines: recompute-every-step, uniform-interval caching, and step
//! reduction (a plain run with fewer steps).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l1_rel, Tensor2D};
use crate::sampler::{CostMeter, LatentState, VelocityProvider};
use crate::toydit::{residual, Conditioning, Model};

/// What a policy did at one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Unconditional full forward on the very first step.
    ComputeFirst,
    /// Velocity reconstructed from cached residuals.
    Reuse,
    /// Accumulator crossed the threshold; probe resumed to a full output.
    Recompute,
}

/// Per-step policy record carried into the run log.
///
/// `accumulated_error` is the post-accumulation value: on a reuse step it is
/// the running total that passed the threshold test, on a recompute step the
/// value that failed it (the accumulator itself resets to zero afterwards).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Decision {
    pub action: Action,
    pub estimated_error: f64,
    pub accumulated_error: f64,
    pub gamma_hat: Option<f64>,
}

impl Decision {
    pub fn compute_first() -> Self {
        Self {
            action: Action::ComputeFirst,
            estimated_error: 0.0,
            accumulated_error: 0.0,
            gamma_hat: None,
        }
    }

    pub fn reuse(estimated_error: f64, accumulated_error: f64, gamma_hat: Option<f64>) -> Self {
        Self {
            action: Action::Reuse,
            estimated_error,
            accumulated_error,
            gamma_hat,
        }
    }

    pub fn recompute(estimated_error: f64, accumulated_error: f64) -> Self {
        Self {
            action: Action::Recompute,
            estimated_error,
            accumulated_error,
            gamma_hat: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiCacheConfig {
    /// Reuse threshold on the accumulated estimated error.
    pub reuse_threshold: f64,
    /// Probe depth m: blocks evaluated every step.
    pub probe_depth: usize,
    /// Enable trajectory-aligned combination of the two cached residuals.
    pub dcta_enabled: bool,
    /// Optional safety clamp on the trajectory coefficient; none by default.
    #[serde(default)]
    pub gamma_clamp: Option<f64>,
}

impl Default for DiCacheConfig {
    fn default() -> Self {
        Self {
            reuse_threshold: 0.1,
            probe_depth: 1,
            dcta_enabled: true,
            gamma_clamp: None,
        }
    }
}

impl DiCacheConfig {
    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        if self.reuse_threshold.is_nan() || self.reuse_threshold < 0.0 {
            return Err(Error::InvalidConfig(
                "reuse_threshold must be >= 0".into(),
            ));
        }
        if self.probe_depth == 0 || self.probe_depth >= num_blocks {
            return Err(Error::BadProbeDepth {
                m: self.probe_depth,
                max: num_blocks - 1,
            });
        }
        if let Some(clamp) = self.gamma_clamp {
            if clamp.is_nan() || clamp <= 0.0 {
                return Err(Error::InvalidConfig("gamma_clamp must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Residuals cached at one recompute step.
#[derive(Clone, Debug)]
pub struct CacheEntry {
    pub step_index: usize,
    /// Full-model residual `y^M - x` at the recompute step.
    pub full_residual: Tensor2D,
    /// Probe residual `y^m - x` at the same step.
    pub probe_residual: Tensor2D,
}

/// Mutable per-run policy state: the error accumulator, the previous probe
/// feature, and the two most recent cache entries (`newest` is the more
/// recent recompute, i.e. the smaller step index).
#[derive(Debug, Default)]
pub struct CacheState {
    pub accumulated_error: f64,
    pub prev_probe_feature: Option<Tensor2D>,
    pub newest: Option<CacheEntry>,
    pub previous: Option<CacheEntry>,
}

/// Probe-estimated caching error between consecutive steps: the relative L1
/// distance from the current probe feature to the previous one.
pub fn estimate_error(probe_now: &Tensor2D, probe_prev: &Tensor2D) -> Result<f64> {
    l1_rel(probe_now, probe_prev)
}

/// Threshold test: reuse while the accumulator, including the current
/// estimate, stays within the budget.
pub fn should_reuse(accumulated_error: f64, estimated_error: f64, threshold: f64) -> bool {
    accumulated_error + estimated_error <= threshold
}

/// Trajectory coefficient solved from probe residuals:
/// `l1_rel(r_now, r_prev) / l1_rel(r_newest, r_prev)`.
///
/// Identical cached probe residuals leave the trajectory undefined; the
/// fallback of exactly 1 degrades to plain newest-cache reuse and is not
/// subject to the clamp.
pub fn gamma_hat(
    probe_residual_now: &Tensor2D,
    newest: &CacheEntry,
    previous: &CacheEntry,
    clamp: Option<f64>,
) -> Result<f64> {
    let numerator = l1_rel(probe_residual_now, &previous.probe_residual)?;
    let denominator = l1_rel(&newest.probe_residual, &previous.probe_residual)?;
    if denominator == 0.0 {
        return Ok(1.0);
    }
    let gamma = numerator / denominator;
    Ok(match clamp {
        Some(c) => gamma.clamp(0.0, c),
        None => gamma,
    })
}

/// Interpolate between the two cached full residuals:
/// `r_prev + gamma * (r_newest - r_prev)`.
///
/// The endpoints short-circuit so that gamma of exactly 0 or 1 reproduces
/// the corresponding cache entry bit for bit.
pub fn combine_residuals(
    newest: &CacheEntry,
    previous: &CacheEntry,
    gamma: f64,
) -> Result<Tensor2D> {
    newest
        .full_residual
        .check_shape(&previous.full_residual, "combine_residuals")?;
    if gamma == 0.0 {
        return Ok(previous.full_residual.clone());
    }
    if gamma == 1.0 {
        return Ok(newest.full_residual.clone());
    }
    let g = gamma as f32;
    let mut out = previous.full_residual.clone();
    for (o, &a) in out.data_mut().iter_mut().zip(newest.full_residual.data()) {
        *o += g * (a - *o);
    }
    Ok(out)
}

/// The adaptive probe-driven caching policy.
pub struct DiCacheProvider<'m> {
    model: &'m Model,
    cfg: DiCacheConfig,
    state: CacheState,
}

impl<'m> DiCacheProvider<'m> {
    pub fn new(model: &'m Model, cfg: DiCacheConfig) -> Result<Self> {
        cfg.validate(model.num_blocks())?;
        Ok(Self {
            model,
            cfg,
            state: CacheState::default(),
        })
    }

    pub fn state(&self) -> &CacheState {
        &self.state
    }
}

impl VelocityProvider for DiCacheProvider<'_> {
    fn velocity(
        &mut self,
        state: &LatentState,
        cond: &Conditioning,
        meter: &mut CostMeter,
    ) -> Result<(Tensor2D, Decision)> {
        let m = self.cfg.probe_depth;

        // First step: one full pass that also captures the probe feature, so
        // the next step has a comparison target without extra cost.
        if self.state.newest.is_none() {
            let outs = self.model.forward_full(&state.x, state.t, cond, &[m], meter)?;
            let probe = outs.recorded.get(&m).expect("probe layer recorded").clone();
            self.state.newest = Some(CacheEntry {
                step_index: state.step_index,
                full_residual: residual(&outs.final_output, &state.x)?,
                probe_residual: residual(&probe, &state.x)?,
            });
            self.state.prev_probe_feature = Some(probe);
            self.state.accumulated_error = 0.0;
            meter.count_recompute();
            return Ok((outs.final_output, Decision::compute_first()));
        }

        let probe = self.model.forward_probe(&state.x, state.t, cond, m, meter)?;
        let prev_probe = self
            .state
            .prev_probe_feature
            .as_ref()
            .expect("set on every step");
        let estimated = estimate_error(&probe, prev_probe)?;
        let reuse = should_reuse(
            self.state.accumulated_error,
            estimated,
            self.cfg.reuse_threshold,
        );
        self.state.accumulated_error += estimated;
        let accumulated = self.state.accumulated_error;

        let result = if reuse {
            let newest = self.state.newest.as_ref().expect("cache populated");
            let (reused, gamma) = match (self.cfg.dcta_enabled, self.state.previous.as_ref()) {
                (true, Some(previous)) => {
                    let probe_residual = residual(&probe, &state.x)?;
                    let gamma =
                        gamma_hat(&probe_residual, newest, previous, self.cfg.gamma_clamp)?;
                    (combine_residuals(newest, previous, gamma)?, Some(gamma))
                }
                _ => (newest.full_residual.clone(), None),
            };
            let velocity = state.x.add(&reused)?;
            meter.count_reuse();
            (velocity, Decision::reuse(estimated, accumulated, gamma))
        } else {
            let output = self.model.forward_resume(&probe, m, meter)?;
            self.state.previous = self.state.newest.take();
            self.state.newest = Some(CacheEntry {
                step_index: state.step_index,
                full_residual: residual(&output, &state.x)?,
                probe_residual: residual(&probe, &state.x)?,
            });
            self.state.accumulated_error = 0.0;
            meter.count_recompute();
            (output, Decision::recompute(estimated, accumulated))
        };

        self.state.prev_probe_feature = Some(probe);
        Ok(result)
    }
}

/// Full forward pass every step.
pub struct VanillaProvider<'m> {
    model: &'m Model,
    calls: usize,
}

impl<'m> VanillaProvider<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self { model, calls: 0 }
    }
}

impl VelocityProvider for VanillaProvider<'_> {
    fn velocity(
        &mut self,
        state: &LatentState,
        cond: &Conditioning,
        meter: &mut CostMeter,
    ) -> Result<(Tensor2D, Decision)> {
        let outs = self.model.forward_full(&state.x, state.t, cond, &[], meter)?;
        meter.count_recompute();
        let decision = if self.calls == 0 {
            Decision::compute_first()
        } else {
            Decision::recompute(0.0, 0.0)
        };
        self.calls += 1;
        Ok((outs.final_output, decision))
    }
}

/// Recompute on a fixed interval, reuse the latest residual in between.
pub struct UniformCacheProvider<'m> {
    model: &'m Model,
    interval: usize,
    calls: usize,
    cached_residual: Option<Tensor2D>,
}

impl<'m> UniformCacheProvider<'m> {
    pub fn new(model: &'m Model, interval: usize) -> Result<Self> {
        if interval == 0 {
            return Err(Error::InvalidInterval);
        }
        Ok(Self {
            model,
            interval,
            calls: 0,
            cached_residual: None,
        })
    }
}

impl VelocityProvider for UniformCacheProvider<'_> {
    fn velocity(
        &mut self,
        state: &LatentState,
        cond: &Conditioning,
        meter: &mut CostMeter,
    ) -> Result<(Tensor2D, Decision)> {
        let call = self.calls;
        self.calls += 1;
        if call.is_multiple_of(self.interval) {
            let outs = self.model.forward_full(&state.x, state.t, cond, &[], meter)?;
            self.cached_residual = Some(residual(&outs.final_output, &state.x)?);
            meter.count_recompute();
            let decision = if call == 0 {
                Decision::compute_first()
            } else {
                Decision::recompute(0.0, 0.0)
            };
            Ok((outs.final_output, decision))
        } else {
            let cached = self.cached_residual.as_ref().expect("first call recomputes");
            meter.count_reuse();
            Ok((state.x.add(cached)?, Decision::reuse(0.0, 0.0, None)))
        }
    }
}

/// Step count for a reduced-step run: `round(fraction * total)`.
///
/// Step reduction is a run-configuration change, not a per-step policy: the
/// reduced run uses the plain provider with this smaller step count.
pub fn reduced_steps(total_steps: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidFraction { fraction });
    }
    let steps = (fraction * total_steps as f64).round() as usize;
    if steps == 0 {
        return Err(Error::InvalidFraction { fraction });
    }
    Ok(steps)
}

/// The block-evaluation identity for an adaptive-cache run: one full pass,
/// a probe on every later step, and a resume for every non-first recompute.
pub fn expected_dicache_block_evals(
    num_blocks: usize,
    num_steps: usize,
    probe_depth: usize,
    non_first_recomputes: usize,
) -> u64 {
    (num_blocks
        + (num_steps - 1) * probe_depth
        + non_first_recomputes * (num_blocks - probe_depth)) as u64
}
