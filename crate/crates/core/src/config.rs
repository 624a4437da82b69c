//! Experiment configuration in TOML.
//!
//! ```toml
//! method = "uic"            # or "deepcluster"; required
//! seed = 0
//! out_dir = "run"
//!
//! [data.synthetic]          # exactly one of data.synthetic / data.idx / data.text
//! classes = 10
//!
//! [encoder]                 # arch, embedding_dim, hidden_dim, sobel
//! [train]                   # k, epochs, batch_size, lr, momentum, weight_decay,
//!                           # label_aug_enabled, label_reuse, fft_epochs, kmeans_iters
//! [augment.label]           # crop_scale, crop_aspect, flip_prob, strong,
//! [augment.train]           # jitter_strength, blur_sigma_range
//! [eval]                    # probe, probe_*, fewshot, n_way, k_shot, n_query, episodes
//! ```
//!
//! Omitted keys take defaults, each of which is logged. Unknown keys and
//! type mismatches are errors carrying the line number. `emit_config`
//! writes every key, and parsing its output reproduces it byte for byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentPolicy, ImageShape};
use crate::dataset::SynthSpec;
use crate::deepcluster::{DeepClusterConfig, DEFAULT_KMEANS_ITERS};
use crate::encoder::{Arch, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::optim::SgdConfig;
use crate::uic::UicConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Uic,
    Deepcluster,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Uic => "uic",
            Method::Deepcluster => "deepcluster",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub images: PathBuf,
    pub labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

/// One image per line: `C·H·W` comma-separated values in `[0, 1]`,
/// optionally followed by an integer label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextSource {
    pub path: PathBuf,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub has_label: bool,
    pub test_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SynthSpec>,
    pub idx: Option<IdxSource>,
    pub text: Option<TextSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub arch: Arch,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub sobel: bool,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            arch: Arch::ConvSmall,
            embedding_dim: 64,
            hidden_dim: 128,
            sobel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_aug_enabled: bool,
    pub label_reuse: bool,
    pub fft_epochs: usize,
    pub kmeans_iters: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let uic = UicConfig::default();
        TrainSection {
            k: uic.k,
            epochs: uic.epochs,
            batch_size: uic.batch_size,
            lr: uic.sgd.lr,
            momentum: uic.sgd.momentum,
            weight_decay: uic.sgd.weight_decay,
            label_aug_enabled: uic.label_aug_enabled,
            label_reuse: uic.label_reuse,
            fft_epochs: uic.fft_epochs,
            kmeans_iters: DEFAULT_KMEANS_ITERS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub label: AugmentPolicy,
    pub train: AugmentPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub probe: bool,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_batch_size: usize,
    pub fewshot: bool,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub episodes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let probe = ProbeConfig::default();
        EvalSection {
            probe: true,
            probe_epochs: probe.epochs,
            probe_lr: probe.lr,
            probe_batch_size: probe.batch_size,
            fewshot: true,
            n_way: 5,
            k_shot: 5,
            n_query: 15,
            episodes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub eval: EvalSection,
    /// Directory relative data paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("run")
}

impl ExperimentConfig {
    /// Defaults everywhere, training on the default synthetic benchmark.
    pub fn synthetic(method: Method) -> Self {
        ExperimentConfig {
            method,
            seed: 0,
            out_dir: default_out_dir(),
            data: DataConfig {
                synthetic: Some(SynthSpec::default()),
                idx: None,
                text: None,
            },
            encoder: EncoderSection::default(),
            train: TrainSection::default(),
            augment: AugmentSection::default(),
            eval: EvalSection::default(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sources = [
            self.data.synthetic.is_some(),
            self.data.idx.is_some(),
            self.data.text.is_some(),
        ];
        if sources.iter().filter(|&&s| s).count() != 1 {
            return Err(Error::Config(
                "exactly one of data.synthetic, data.idx, data.text is required".into(),
            ));
        }
        if let Some(spec) = &self.data.synthetic {
            spec.validate()?;
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!(
                "seed {} exceeds {}",
                self.seed,
                i64::MAX
            )));
        }
        if self.train.kmeans_iters == 0 {
            return Err(Error::Config("kmeans_iters >= 1 required".into()));
        }
        self.uic_config().validate()?;
        if self.eval.probe {
            self.probe_config().validate()?;
        }
        if self.eval.fewshot
            && (self.eval.n_way < 2
                || self.eval.k_shot == 0
                || self.eval.n_query == 0
                || self.eval.episodes == 0)
        {
            return Err(Error::Config(
                "few-shot needs n_way >= 2 and positive k_shot, n_query, episodes".into(),
            ));
        }
        Ok(())
    }

    pub fn uic_config(&self) -> UicConfig {
        let t = &self.train;
        UicConfig {
            k: t.k,
            epochs: t.epochs,
            batch_size: t.batch_size,
            sgd: SgdConfig {
                lr: t.lr,
                momentum: t.momentum,
                weight_decay: t.weight_decay,
            },
            policy_label: self.augment.label,
            policy_train: self.augment.train,
            label_aug_enabled: t.label_aug_enabled,
            label_reuse: t.label_reuse,
            fft_epochs: t.fft_epochs,
            seed: self.seed,
        }
    }

    pub fn deepcluster_config(&self) -> DeepClusterConfig {
        DeepClusterConfig {
            uic: self.uic_config(),
            kmeans_iters: self.train.kmeans_iters,
        }
    }

    pub fn encoder_config(&self, input_shape: ImageShape) -> EncoderConfig {
        EncoderConfig {
            sobel: self.encoder.sobel,
            seed: self.seed,
            hidden_dim: self.encoder.hidden_dim,
            ..EncoderConfig::new(
                input_shape,
                self.encoder.arch,
                self.encoder.embedding_dim,
                self.train.k,
            )
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.eval.probe_epochs,
            lr: self.eval.probe_lr,
            batch_size: self.eval.probe_batch_size,
            weight_decay: 0.0,
            seed: self.seed,
        }
    }

    /// `path` as written in the config, resolved against [`Self::base_dir`].
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }
}

/// Parse and validate a config file; relative data paths resolve against
/// the file's directory.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg =
        parse_config_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(cfg)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for line in applied_defaults(text, &cfg)? {
        log::info!("default applied: {line}");
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `key = value` for every key of the full config that `text` leaves out.
pub fn applied_defaults(text: &str, cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let user: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let full: toml::Table = emit_config(cfg)?
        .parse()
        .map_err(|e: toml::de::Error| Error::Internal(e.to_string()))?;
    let mut out = Vec::new();
    collect_missing(&full, Some(&user), "", &mut out);
    Ok(out)
}

fn collect_missing(
    full: &toml::Table,
    user: Option<&toml::Table>,
    prefix: &str,
    out: &mut Vec<String>,
) {
    for (key, value) in full {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        let given = user.and_then(|u| u.get(key));
        match value {
            toml::Value::Table(t) => {
                collect_missing(t, given.and_then(toml::Value::as_table), &path, out)
            }
            v if given.is_none() => out.push(format!("{path} = {v}")),
            _ => {}
        }
    }
}

/// Every key of `cfg` as TOML.
pub fn emit_config(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}
