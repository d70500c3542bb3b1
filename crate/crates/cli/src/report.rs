//! Run reports: decision logs, accounting totals, and quality metrics.

use serde::{Serialize, Serializer};

use dicache_core::cachepolicy::Action;
use dicache_core::numerics::{l1_rel, psnr, ssim, Tensor2D};
use dicache_core::sampler::{SampleRun, StepLogEntry};
use dicache_core::Result;

use crate::config::{PolicySpec, RunConfig};

/// Serialize a possibly-infinite dB value; JSON has no infinity, so the
/// exact-match sentinel becomes the string `"inf"`.
pub fn ser_db<S: Serializer>(value: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if value.is_finite() {
        s.serialize_f64(*value)
    } else {
        s.serialize_str("inf")
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Totals {
    pub executed_steps: usize,
    pub block_evals: u64,
    pub recompute_steps: u64,
    pub reuse_steps: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct QualityBlock {
    pub reference: String,
    pub grid_h: usize,
    pub grid_w: usize,
    pub l1_rel: f64,
    #[serde(serialize_with = "ser_db")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub totals: Totals,
    /// Nominal cost divided by metered cost, `T*M / block_evals`.
    pub speedup_blockevals: f64,
    pub quality: Option<QualityBlock>,
    pub steps: Vec<StepLogEntry>,
}

/// Recompute the meter total from the decision log and the policy's
/// per-action costs.
fn block_evals_from_log(config: &RunConfig, steps: &[StepLogEntry]) -> u64 {
    let m_total = config.model.num_blocks as u64;
    match &config.policy {
        PolicySpec::Vanilla | PolicySpec::StepReduction { .. } => steps.len() as u64 * m_total,
        PolicySpec::Uniform { .. } => {
            steps
                .iter()
                .filter(|s| s.decision.action != Action::Reuse)
                .count() as u64
                * m_total
        }
        PolicySpec::Dicache(dc) => {
            let probe = dc.probe_depth as u64;
            let resumes = steps
                .iter()
                .filter(|s| s.decision.action == Action::Recompute)
                .count() as u64;
            m_total + (steps.len() as u64 - 1) * probe + resumes * (m_total - probe)
        }
    }
}

/// Assemble the report, cross-checking the meter against the decision log.
pub fn build_report(
    config: &RunConfig,
    run: SampleRun,
    quality: Option<QualityBlock>,
) -> RunReport {
    let from_log = block_evals_from_log(config, &run.steps);
    assert_eq!(
        from_log,
        run.meter.block_evals(),
        "decision log disagrees with the cost meter"
    );
    let nominal = (config.sampler.num_steps * config.model.num_blocks) as f64;
    RunReport {
        config: config.clone(),
        totals: Totals {
            executed_steps: run.steps.len(),
            block_evals: run.meter.block_evals(),
            recompute_steps: run.meter.recompute_steps(),
            reuse_steps: run.meter.reuse_steps(),
        },
        speedup_blockevals: nominal / run.meter.block_evals() as f64,
        quality,
        steps: run.steps,
    }
}

/// Quality of a latent against a reference latent on a token grid.
pub fn quality_against(
    latent: &Tensor2D,
    reference: &Tensor2D,
    reference_name: &str,
    grid: (usize, usize),
) -> Result<QualityBlock> {
    Ok(QualityBlock {
        reference: reference_name.to_owned(),
        grid_h: grid.0,
        grid_w: grid.1,
        l1_rel: l1_rel(latent, reference)?,
        psnr: psnr(latent, reference)?,
        ssim: ssim(latent, reference, grid.0, grid.1, 3)?,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub l1_rel: f64,
    #[serde(serialize_with = "ser_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub speedup_blockevals: f64,
    pub block_evals: u64,
    pub recompute_steps: u64,
}

#[derive(Debug, Serialize)]
pub struct SweepReport {
    pub axis: String,
    pub config: RunConfig,
    pub rows: Vec<SweepRow>,
}
