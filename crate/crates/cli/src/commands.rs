//! Subcommand implementations.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use dicache_core::cachepolicy::{
    reduced_steps, DiCacheConfig, DiCacheProvider, UniformCacheProvider, VanillaProvider,
};
use dicache_core::sampler::{read_dlat, run, write_dlat, SampleRun, SamplerConfig};
use dicache_core::toydit::{Conditioning, Model};
use dicache_core::trace::{
    gamma_consistency, layer_correlation, load_trace, record_trace, replay_schedule,
    CorrelationReport, GammaConsistencyReport, ReplayReport,
};
use dicache_core::{Error, Result};

use crate::config::{resolve_grid, PolicySpec, RunConfig};
use crate::report::{build_report, quality_against, ser_db, SweepReport, SweepRow};
use crate::{log_debug, log_info};

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidConfig(format!("cannot serialize report: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidConfig(format!("cannot serialize report: {e}")))?;
    println!("{text}");
    Ok(())
}

pub fn gen_config(out: &Path) -> Result<()> {
    let cfg = RunConfig::default_config();
    cfg.save(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Execute the configured policy (step reduction shrinks the step count).
fn execute_policy(model: &Model, config: &RunConfig) -> Result<SampleRun> {
    let cond = Conditioning::from_seed(config.condition_seed, config.model.d_model);
    let mut sampler_cfg = config.sampler_config();
    match &config.policy {
        PolicySpec::Vanilla => {
            let mut provider = VanillaProvider::new(model);
            run(&sampler_cfg, &mut provider, &cond)
        }
        PolicySpec::StepReduction { fraction } => {
            sampler_cfg.num_steps = reduced_steps(sampler_cfg.num_steps, *fraction)?;
            let mut provider = VanillaProvider::new(model);
            run(&sampler_cfg, &mut provider, &cond)
        }
        PolicySpec::Uniform { interval } => {
            let mut provider = UniformCacheProvider::new(model, *interval)?;
            run(&sampler_cfg, &mut provider, &cond)
        }
        PolicySpec::Dicache(dc) => {
            let mut provider = DiCacheProvider::new(model, dc.clone())?;
            run(&sampler_cfg, &mut provider, &cond)
        }
    }
}

pub fn sample(
    config_path: &Path,
    out_dir: &Path,
    reference: Option<&Path>,
    grid: Option<(usize, usize)>,
    seed_override: Option<u64>,
) -> Result<()> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(seed) = seed_override {
        log_debug(&format!("overriding noise seed with {seed}"));
        config.sampler.noise_seed = seed;
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;

    let model = Model::new(config.model.clone())?;
    let started = Instant::now();
    let sample_run = execute_policy(&model, &config)?;
    log_info(&format!(
        "run finished in {:.3}s ({} block evals)",
        started.elapsed().as_secs_f64(),
        sample_run.meter.block_evals()
    ));
    let quality = match reference {
        Some(ref_path) => {
            let reference_latent = read_dlat(ref_path)?;
            let grid = resolve_grid(grid, config.model.n_tokens)?;
            Some(quality_against(
                &sample_run.final_latent,
                &reference_latent,
                &ref_path.display().to_string(),
                grid,
            )?)
        }
        None => None,
    };

    let latent = sample_run.final_latent.clone();
    let report = build_report(&config, sample_run, quality);
    let latent_path = out_dir.join("latent.dlat");
    write_dlat(&latent_path, &latent)?;
    write_json(&out_dir.join("report.json"), &report)?;
    println!(
        "wrote {} (block_evals {}, speedup {:.3})",
        out_dir.display(),
        report.totals.block_evals,
        report.speedup_blockevals
    );
    Ok(())
}

pub fn compare(
    a_path: &Path,
    b_path: &Path,
    grid: Option<(usize, usize)>,
    out: Option<&Path>,
) -> Result<()> {
    let a = read_dlat(a_path)?;
    let b = read_dlat(b_path)?;
    a.check_shape(&b, "compare")?;
    let grid = resolve_grid(grid, a.rows())?;

    #[derive(Serialize)]
    struct CompareReport {
        a: String,
        b: String,
        grid_h: usize,
        grid_w: usize,
        l1_rel: f64,
        #[serde(serialize_with = "ser_db")]
        psnr: f64,
        /// SSIM of `a` scored against `b` as the reference.
        ssim: f64,
        /// SSIM with the roles swapped; the stabilizers depend on which
        /// tensor supplies the dynamic range, so the two differ in general.
        ssim_reversed: f64,
    }

    let report = CompareReport {
        a: a_path.display().to_string(),
        b: b_path.display().to_string(),
        grid_h: grid.0,
        grid_w: grid.1,
        l1_rel: dicache_core::numerics::l1_rel(&a, &b)?,
        psnr: dicache_core::numerics::psnr(&a, &b)?,
        ssim: dicache_core::numerics::ssim(&a, &b, grid.0, grid.1, 3)?,
        ssim_reversed: dicache_core::numerics::ssim(&b, &a, grid.0, grid.1, 3)?,
    };
    print_json(&report)?;
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(())
}

pub fn trace_cmd(config_path: &Path, layers: Option<Vec<usize>>, out: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let model = Model::new(config.model.clone())?;
    let mut layers = layers.unwrap_or_else(|| (1..=model.num_blocks()).collect());
    layers.sort_unstable();
    layers.dedup();
    let echo = serde_json::to_string(&config)
        .map_err(|e| Error::InvalidConfig(format!("cannot serialize config echo: {e}")))?;
    let cond = Conditioning::from_seed(config.condition_seed, config.model.d_model);
    let started = Instant::now();
    let header = record_trace(&model, &config.sampler_config(), &cond, &layers, &echo, out)?;
    log_info(&format!(
        "recorded {} steps x {} layers in {:.3}s",
        header.num_steps,
        header.recorded_layers.len(),
        started.elapsed().as_secs_f64()
    ));
    println!("wrote {}", out.display());
    Ok(())
}

pub fn replay_cmd(
    trace_path: &Path,
    probe_layer: usize,
    values: &[f64],
    out: Option<&Path>,
) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("no threshold values given".into()));
    }
    let trace = load_trace(trace_path)?;
    let num_steps = trace.header.num_steps as usize;
    let num_blocks = trace.header.num_blocks as usize;

    #[derive(Serialize)]
    struct ReplaySummaryRow {
        reuse_threshold: f64,
        recompute_count: usize,
        block_evals: u64,
        speedup_blockevals: f64,
    }
    #[derive(Serialize)]
    struct ReplayOutput {
        trace: String,
        probe_layer: usize,
        summary: Vec<ReplaySummaryRow>,
        reports: Vec<ReplayReport>,
    }

    let mut reports = Vec::with_capacity(values.len());
    let mut summary = Vec::with_capacity(values.len());
    for &delta in values {
        let report = replay_schedule(&trace, delta, probe_layer)?;
        let non_first = report.recompute_count() - 1;
        let block_evals = dicache_core::cachepolicy::expected_dicache_block_evals(
            num_blocks,
            num_steps,
            probe_layer,
            non_first,
        );
        summary.push(ReplaySummaryRow {
            reuse_threshold: delta,
            recompute_count: report.recompute_count(),
            block_evals,
            speedup_blockevals: (num_steps * num_blocks) as f64 / block_evals as f64,
        });
        reports.push(report);
    }
    let output = ReplayOutput {
        trace: trace_path.display().to_string(),
        probe_layer,
        summary,
        reports,
    };
    print_json(&output)?;
    if let Some(path) = out {
        write_json(path, &output)?;
    }
    Ok(())
}

pub fn analyze(trace_path: &Path, schedule: Option<Vec<usize>>, out: Option<&Path>) -> Result<()> {
    let trace = load_trace(trace_path)?;

    #[derive(Serialize)]
    struct AnalysisOutput {
        trace: String,
        correlation: CorrelationReport,
        gamma_consistency: Option<GammaConsistencyReport>,
    }

    let correlation = layer_correlation(&trace)?;
    let gamma = match schedule {
        Some(schedule) => Some(gamma_consistency(&trace, &schedule)?),
        None => None,
    };
    let output = AnalysisOutput {
        trace: trace_path.display().to_string(),
        correlation,
        gamma_consistency: gamma,
    };
    print_json(&output)?;
    if let Some(path) = out {
        write_json(path, &output)?;
    }
    Ok(())
}

/// Values swept over one ablation axis.
pub enum SweepAxis {
    Delta(Vec<f64>),
    ProbeDepth(Vec<usize>),
    Dcta(Vec<bool>),
}

impl SweepAxis {
    pub fn parse(axis: &str, values: &str) -> Result<Self> {
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if items.is_empty() {
            return Err(Error::InvalidConfig("no sweep values given".into()));
        }
        match axis {
            "delta" => Ok(Self::Delta(
                items
                    .iter()
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|_| Error::InvalidConfig(format!("bad delta value {s}")))
                    })
                    .collect::<Result<_>>()?,
            )),
            "m" => Ok(Self::ProbeDepth(
                items
                    .iter()
                    .map(|s| {
                        s.parse::<usize>()
                            .map_err(|_| Error::InvalidConfig(format!("bad probe depth {s}")))
                    })
                    .collect::<Result<_>>()?,
            )),
            "dcta" => Ok(Self::Dcta(
                items
                    .iter()
                    .map(|s| match *s {
                        "on" | "true" => Ok(true),
                        "off" | "false" => Ok(false),
                        other => Err(Error::InvalidConfig(format!("bad dcta value {other}"))),
                    })
                    .collect::<Result<_>>()?,
            )),
            other => Err(Error::InvalidConfig(format!(
                "unknown sweep axis {other}; expected delta, m, or dcta"
            ))),
        }
    }

    fn label(&self, index: usize) -> String {
        match self {
            Self::Delta(v) => format!("{}", v[index]),
            Self::ProbeDepth(v) => format!("{}", v[index]),
            Self::Dcta(v) => if v[index] { "on" } else { "off" }.to_string(),
        }
    }

    fn len(&self) -> usize {
        match self {
            Self::Delta(v) => v.len(),
            Self::ProbeDepth(v) => v.len(),
            Self::Dcta(v) => v.len(),
        }
    }

    fn apply(&self, index: usize, base: &DiCacheConfig) -> DiCacheConfig {
        let mut cfg = base.clone();
        match self {
            Self::Delta(v) => cfg.reuse_threshold = v[index],
            Self::ProbeDepth(v) => cfg.probe_depth = v[index],
            Self::Dcta(v) => cfg.dcta_enabled = v[index],
        }
        cfg
    }
}

/// Closed-loop ablation sweep: every point re-runs the sampler with one knob
/// changed and is scored against a shared plain-run reference latent.
pub fn sweep(
    config_path: &Path,
    axis_name: &str,
    values: &str,
    out_dir: &Path,
    workers: Option<usize>,
    grid: Option<(usize, usize)>,
) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let base = match &config.policy {
        PolicySpec::Dicache(dc) => dc.clone(),
        other => {
            return Err(Error::InvalidConfig(format!(
                "sweep needs an adaptive-cache policy in the config, found {other:?}"
            )))
        }
    };
    let axis = SweepAxis::parse(axis_name, values)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;

    let model = Model::new(config.model.clone())?;
    let sampler_cfg: SamplerConfig = config.sampler_config();
    let cond = Conditioning::from_seed(config.condition_seed, config.model.d_model);
    let grid = resolve_grid(grid, config.model.n_tokens)?;

    log_info("running reference");
    let reference = {
        let mut provider = VanillaProvider::new(&model);
        run(&sampler_cfg, &mut provider, &cond)?.final_latent
    };
    write_dlat(out_dir.join("reference.dlat"), &reference)?;

    let run_point = |index: usize| -> Result<SweepRow> {
        let point_cfg = axis.apply(index, &base);
        let mut provider = DiCacheProvider::new(&model, point_cfg)?;
        let out = run(&sampler_cfg, &mut provider, &cond)?;
        let nominal = (sampler_cfg.num_steps * config.model.num_blocks) as f64;
        Ok(SweepRow {
            value: axis.label(index),
            l1_rel: dicache_core::numerics::l1_rel(&out.final_latent, &reference)?,
            psnr: dicache_core::numerics::psnr(&out.final_latent, &reference)?,
            ssim: dicache_core::numerics::ssim(&out.final_latent, &reference, grid.0, grid.1, 3)?,
            speedup_blockevals: nominal / out.meter.block_evals() as f64,
            block_evals: out.meter.block_evals(),
            recompute_steps: out.meter.recompute_steps(),
        })
    };

    let started = Instant::now();
    let indices: Vec<usize> = (0..axis.len()).collect();
    let rows: Vec<SweepRow> = match workers {
        Some(workers) if workers > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("cannot build worker pool: {e}")))?;
            pool.install(|| indices.par_iter().map(|&i| run_point(i)).collect::<Result<_>>())?
        }
        _ => indices
            .par_iter()
            .map(|&i| run_point(i))
            .collect::<Result<_>>()?,
    };
    log_info(&format!(
        "swept {} points in {:.3}s",
        rows.len(),
        started.elapsed().as_secs_f64()
    ));

    let report = SweepReport {
        axis: axis_name.to_string(),
        config: config.clone(),
        rows,
    };
    write_json(&out_dir.join("sweep.json"), &report)?;
    print_json(&report)?;
    Ok(())
}
