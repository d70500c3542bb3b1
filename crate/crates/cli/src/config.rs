//! Run configuration: the single JSON document that pins an experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use dicache_core::cachepolicy::{reduced_steps, DiCacheConfig};
use dicache_core::sampler::SamplerConfig;
use dicache_core::toydit::ModelConfig;
use dicache_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub num_steps: usize,
    pub noise_seed: u64,
}

/// Which velocity policy drives the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Vanilla,
    StepReduction { fraction: f64 },
    Uniform { interval: usize },
    Dicache(DiCacheConfig),
}

/// Everything needed to reproduce a run byte for byte. Latent dims live on
/// the model section; the sampler section only adds steps and the noise seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerSettings,
    pub condition_seed: u64,
    pub policy: PolicySpec,
}

impl RunConfig {
    /// Documented defaults: 12 blocks of width 64 over an 8x8 token grid,
    /// 50 steps, adaptive caching with probe depth 1 and threshold 0.1.
    pub fn default_config() -> Self {
        Self {
            model: ModelConfig {
                weight_seed: 42,
                ..ModelConfig::default()
            },
            sampler: SamplerSettings {
                num_steps: 50,
                noise_seed: 100,
            },
            condition_seed: 7,
            policy: PolicySpec::Dicache(DiCacheConfig::default()),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            Error::InvalidConfig(format!("cannot parse {}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(format!("cannot serialize config: {e}")))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.sampler.num_steps == 0 {
            return Err(Error::InvalidConfig("num_steps must be >= 1".into()));
        }
        match &self.policy {
            PolicySpec::Vanilla => {}
            PolicySpec::StepReduction { fraction } => {
                reduced_steps(self.sampler.num_steps, *fraction)?;
            }
            PolicySpec::Uniform { interval } => {
                if *interval == 0 {
                    return Err(Error::InvalidInterval);
                }
            }
            PolicySpec::Dicache(cfg) => cfg.validate(self.model.num_blocks)?,
        }
        Ok(())
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            num_steps: self.sampler.num_steps,
            noise_seed: self.sampler.noise_seed,
            n_tokens: self.model.n_tokens,
            d_model: self.model.d_model,
        }
    }
}

/// Parse an `HxW` grid argument.
pub fn parse_grid(arg: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = arg.split(['x', 'X']).collect();
    if parts.len() == 2 {
        if let (Ok(h), Ok(w)) = (parts[0].parse::<usize>(), parts[1].parse::<usize>()) {
            if h > 0 && w > 0 {
                return Ok((h, w));
            }
        }
    }
    Err(Error::InvalidConfig(format!(
        "grid must look like 8x8, got {arg}"
    )))
}

/// Pick the SSIM grid: an explicit request must tile the token count, and
/// without one a square token count picks its own side length.
pub fn resolve_grid(requested: Option<(usize, usize)>, n_tokens: usize) -> Result<(usize, usize)> {
    if let Some((h, w)) = requested {
        if h * w != n_tokens {
            return Err(Error::BadGrid {
                grid_h: h,
                grid_w: w,
                tokens: n_tokens,
            });
        }
        return Ok((h, w));
    }
    let side = (n_tokens as f64).sqrt().round() as usize;
    if side * side == n_tokens {
        Ok((side, side))
    } else {
        Err(Error::InvalidConfig(format!(
            "token count {n_tokens} is not square; pass --grid HxW"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_json() {
        let cfg = RunConfig::default_config();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn default_policy_is_adaptive_with_probe_depth_one() {
        match RunConfig::default_config().policy {
            PolicySpec::Dicache(dc) => {
                assert_eq!(dc.probe_depth, 1);
                assert_eq!(dc.reuse_threshold, 0.1);
                assert!(dc.dcta_enabled);
            }
            other => panic!("unexpected default policy {other:?}"),
        }
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("8x8").unwrap(), (8, 8));
        assert_eq!(parse_grid("2X16").unwrap(), (2, 16));
        assert!(parse_grid("8").is_err());
        assert!(parse_grid("0x8").is_err());
    }

    #[test]
    fn grid_resolution() {
        assert_eq!(resolve_grid(None, 64).unwrap(), (8, 8));
        assert_eq!(resolve_grid(Some((2, 32)), 64).unwrap(), (2, 32));
        assert!(matches!(
            resolve_grid(Some((3, 3)), 64),
            Err(Error::BadGrid { .. })
        ));
        assert!(resolve_grid(None, 48).is_err());
    }

    #[test]
    fn policy_tags_roundtrip() {
        for policy in [
            PolicySpec::Vanilla,
            PolicySpec::StepReduction { fraction: 0.5 },
            PolicySpec::Uniform { interval: 2 },
            PolicySpec::Dicache(DiCacheConfig::default()),
        ] {
            let text = serde_json::to_string(&policy).unwrap();
            let back: PolicySpec = serde_json::from_str(&text).unwrap();
            assert_eq!(policy, back);
        }
    }
}
