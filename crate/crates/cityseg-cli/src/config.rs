//! Run configuration: line-based `key = value` text with one `[section]`
//! per module. `#` starts a comment. Every pipeline default can be
//! overridden here; the `CITYSEG_SEED` environment variable overrides the
//! configured seed.

use std::path::{Path, PathBuf};

use cityseg_core::network::{AttnScaling, EncoderConfig};
use cityseg_core::sampling::{Curve, SamplerConfig};
use cityseg_core::training::TrainConfig;
use cityseg_core::{Error, Result};

/// How label-text embeddings are produced.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingSpec {
    /// Seeded hash of the label text. The seed is independent of the run
    /// seed so a model trained in one run scores identically in another.
    Hashed { seed: u64 },
    /// CSEM table lookup.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub embeddings: EmbeddingSpec,
    pub fixture: String,
    pub scenes_scale: f64,
    pub preprocess_cell: f64,
    pub preprocess_serialize: Option<Curve>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            sampler: SamplerConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            embeddings: EmbeddingSpec::Hashed { seed: 0 },
            fixture: "toy".into(),
            scenes_scale: 1.0,
            preprocess_cell: 0.2,
            preprocess_serialize: Some(Curve::Morton),
        }
    }
}

impl RunConfig {
    /// Parse a config file and apply the `CITYSEG_SEED` override.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, 0, e))?;
        let mut cfg = RunConfig::parse(&text, path)?;
        if let Ok(seed) = std::env::var("CITYSEG_SEED") {
            let seed: u64 = seed
                .parse()
                .map_err(|_| Error::Config(format!("CITYSEG_SEED {seed:?} is not a u64")))?;
            cfg.apply_seed(seed);
        }
        Ok(cfg)
    }

    fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sampler.seed = seed;
        self.train.seed = seed;
    }

    pub fn parse(text: &str, path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        let mut explicit_seed = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                match section.as_str() {
                    "sampling" | "network" | "training" | "embeddings" | "generate"
                    | "preprocess" => {}
                    other => {
                        return Err(Error::Config(format!(
                            "{}:{}: unknown section [{other}]",
                            path.display(),
                            lineno + 1
                        )))
                    }
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected `key = value`",
                    path.display(),
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let ctx = |what: &str| {
                Error::Config(format!(
                    "{}:{}: bad {what} value {value:?} for key {key:?}",
                    path.display(),
                    lineno + 1
                ))
            };
            match (section.as_str(), key) {
                ("", "seed") => explicit_seed = Some(value.parse().map_err(|_| ctx("u64"))?),
                ("sampling", "local_grid") => {
                    cfg.sampler.local_grid = value.parse().map_err(|_| ctx("f64"))?
                }
                ("sampling", "global_grid") => {
                    cfg.sampler.global_grid = value.parse().map_err(|_| ctx("f64"))?
                }
                ("sampling", "local_count") => {
                    cfg.sampler.local_count = value.parse().map_err(|_| ctx("usize"))?
                }
                ("sampling", "global_multiplier") => {
                    cfg.sampler.global_multiplier = value.parse().map_err(|_| ctx("usize"))?
                }
                ("sampling", "curve") => {
                    cfg.sampler.curve = parse_curve(value).ok_or_else(|| ctx("curve"))?
                }
                ("network", "feature_dim") => {
                    cfg.encoder.feature_dim = value.parse().map_err(|_| ctx("usize"))?
                }
                ("network", "hidden_dim") => {
                    cfg.encoder.hidden_dim = value.parse().map_err(|_| ctx("usize"))?
                }
                ("network", "embed_dim") => {
                    cfg.encoder.embed_dim = value.parse().map_err(|_| ctx("usize"))?
                }
                ("network", "n_heads") => {
                    cfg.encoder.n_heads = value.parse().map_err(|_| ctx("usize"))?
                }
                ("network", "n_blocks") => {
                    cfg.encoder.n_blocks = value.parse().map_err(|_| ctx("usize"))?
                }
                ("network", "window") => {
                    cfg.encoder.window = value.parse().map_err(|_| ctx("usize"))?
                }
                ("network", "attn_scaling") => {
                    cfg.encoder.attn_scaling = match value {
                        "none" => AttnScaling::None,
                        "inv_sqrt_d" => AttnScaling::InvSqrtD,
                        _ => return Err(ctx("attn_scaling")),
                    }
                }
                ("network", "cross_attention") => {
                    cfg.encoder.cross_attention = value.parse().map_err(|_| ctx("bool"))?
                }
                ("training", "tau") => cfg.train.tau = value.parse().map_err(|_| ctx("f64"))?,
                ("training", "margin") => {
                    cfg.train.margin = value.parse().map_err(|_| ctx("f64"))?
                }
                ("training", "alpha") => cfg.train.alpha = value.parse().map_err(|_| ctx("f64"))?,
                ("training", "lr") => cfg.train.lr = value.parse().map_err(|_| ctx("f64"))?,
                ("training", "momentum") => {
                    cfg.train.momentum = value.parse().map_err(|_| ctx("f64"))?
                }
                ("training", "epochs_stage1") => {
                    cfg.train.epochs_stage1 = value.parse().map_err(|_| ctx("usize"))?
                }
                ("training", "epochs_stage2") => {
                    cfg.train.epochs_stage2 = value.parse().map_err(|_| ctx("usize"))?
                }
                ("training", "epochs_finetune") => {
                    cfg.train.epochs_finetune = value.parse().map_err(|_| ctx("usize"))?
                }
                ("training", "batches_per_scene") => {
                    cfg.train.batches_per_scene = value.parse().map_err(|_| ctx("usize"))?
                }
                ("training", "eval_batches") => {
                    cfg.train.eval_batches = value.parse().map_err(|_| ctx("usize"))?
                }
                ("training", "replay_budget") => {
                    cfg.train.replay_budget = value.parse().map_err(|_| ctx("usize"))?
                }
                ("training", "warmup_frac") => {
                    cfg.train.warmup_frac = value.parse().map_err(|_| ctx("f64"))?
                }
                ("training", "snapshot_every") => {
                    cfg.train.snapshot_every = value.parse().map_err(|_| ctx("usize"))?
                }
                ("embeddings", "mode") => match value {
                    "hashed" => {
                        if !matches!(cfg.embeddings, EmbeddingSpec::Hashed { .. }) {
                            cfg.embeddings = EmbeddingSpec::Hashed { seed: 0 };
                        }
                    }
                    "file" => {
                        if !matches!(cfg.embeddings, EmbeddingSpec::File { .. }) {
                            cfg.embeddings = EmbeddingSpec::File {
                                path: PathBuf::new(),
                            };
                        }
                    }
                    _ => return Err(ctx("mode")),
                },
                ("embeddings", "seed") => {
                    cfg.embeddings = EmbeddingSpec::Hashed {
                        seed: value.parse().map_err(|_| ctx("u64"))?,
                    }
                }
                ("embeddings", "path") => {
                    cfg.embeddings = EmbeddingSpec::File {
                        path: PathBuf::from(value),
                    }
                }
                ("generate", "fixture") => cfg.fixture = value.to_string(),
                ("generate", "scale") => {
                    cfg.scenes_scale = value.parse().map_err(|_| ctx("f64"))?
                }
                ("preprocess", "cell") => {
                    cfg.preprocess_cell = value.parse().map_err(|_| ctx("f64"))?
                }
                ("preprocess", "serialize") => {
                    cfg.preprocess_serialize = match value {
                        "none" => None,
                        other => Some(parse_curve(other).ok_or_else(|| ctx("curve"))?),
                    }
                }
                (sec, key) => {
                    return Err(Error::Config(format!(
                        "{}:{}: unknown key {key:?} in section [{sec}]",
                        path.display(),
                        lineno + 1
                    )))
                }
            }
        }
        if let Some(seed) = explicit_seed {
            cfg.apply_seed(seed);
        }
        cfg.sampler.validate()?;
        cfg.encoder.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Build the configured embedding provider at the network width.
    pub fn provider(&self) -> Result<cityseg_core::hierarchy::EmbeddingProvider> {
        match &self.embeddings {
            EmbeddingSpec::Hashed { seed } => Ok(cityseg_core::hierarchy::EmbeddingProvider::Hashed {
                seed: *seed,
                width: self.encoder.embed_dim,
            }),
            EmbeddingSpec::File { path } => {
                let provider = cityseg_core::hierarchy::EmbeddingProvider::from_csem(path)?;
                if provider.width() != self.encoder.embed_dim {
                    return Err(Error::Config(format!(
                        "embedding table width {} does not match network embed_dim {}",
                        provider.width(),
                        self.encoder.embed_dim
                    )));
                }
                Ok(provider)
            }
        }
    }
}

fn parse_curve(value: &str) -> Option<Curve> {
    match value {
        "morton" => Some(Curve::Morton),
        "hilbert" => Some(Curve::Hilbert),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_overrides() {
        let text = "\
seed = 9
[sampling]
local_count = 128
curve = hilbert
[network]
hidden_dim = 16
n_heads = 2
[training]
alpha = 0.5
";
        let cfg = RunConfig::parse(text, Path::new("test.cfg")).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.sampler.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.sampler.local_count, 128);
        assert_eq!(cfg.sampler.curve, Curve::Hilbert);
        assert_eq!(cfg.encoder.hidden_dim, 16);
        assert_eq!(cfg.train.alpha, 0.5);
        // untouched defaults survive
        assert_eq!(cfg.train.tau, 0.07);
        assert_eq!(cfg.sampler.local_grid, 0.2);
    }

    #[test]
    fn rejects_unknown_keys_and_sections() {
        assert!(RunConfig::parse("[bogus]\n", Path::new("t")).is_err());
        assert!(RunConfig::parse("[training]\ntypo = 1\n", Path::new("t")).is_err());
        assert!(RunConfig::parse("[training]\nno equals sign\n", Path::new("t")).is_err());
    }

    #[test]
    fn validates_parsed_values() {
        let err = RunConfig::parse("[training]\ntau = -1\n", Path::new("t")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
