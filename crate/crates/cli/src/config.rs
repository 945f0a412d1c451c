//! Run configuration: built-in defaults, then a JSON file, then flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use refi_core::encoder::{BlockVariant, Hyper, DEFAULT_SNR_EPS};
use refi_core::fingerprint::{active_dims, Dim, FingerprintOptions};
use refi_core::metrics::EvalConfig;
use refi_core::optim::AdamConfig;
use refi_core::trainer::TrainConfig;

use crate::CliError;

/// Fully resolved settings, echoed into every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub variant: BlockVariant,
    pub snr_gate: bool,
    pub k: usize,
    pub n_b: usize,
    pub ratio: f64,
    pub epochs: usize,
    pub episodes_per_graph: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// 0 disables clipping.
    pub clip_norm: f64,
    /// 0 disables early stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub folds: usize,
    pub batch_size: usize,
    pub full_context: bool,
    pub drop: Vec<Dim>,
    pub allow_multi_drop: bool,
    pub normalize_similarity: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            d_model: 64,
            layers: 4,
            heads: 1,
            variant: BlockVariant::Standard,
            snr_gate: true,
            k: 50,
            n_b: 512,
            ratio: 10.0,
            epochs: 100,
            episodes_per_graph: 4,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            clip_norm: 5.0,
            patience: 20,
            val_fraction: 0.1,
            seed: 42,
            folds: 5,
            batch_size: 512,
            full_context: false,
            drop: Vec::new(),
            allow_multi_drop: false,
            normalize_similarity: false,
        }
    }
}

/// Any subset of [`RunConfig`]; used for the config file and for flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub d_model: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub variant: Option<BlockVariant>,
    pub snr_gate: Option<bool>,
    pub k: Option<usize>,
    pub n_b: Option<usize>,
    pub ratio: Option<f64>,
    pub epochs: Option<usize>,
    pub episodes_per_graph: Option<usize>,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub clip_norm: Option<f64>,
    pub patience: Option<usize>,
    pub val_fraction: Option<f64>,
    pub seed: Option<u64>,
    pub folds: Option<usize>,
    pub batch_size: Option<usize>,
    pub full_context: Option<bool>,
    pub drop: Option<Vec<Dim>>,
    pub allow_multi_drop: Option<bool>,
    pub normalize_similarity: Option<bool>,
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($field:ident),+ $(,)?) => {
        $( if let Some(v) = $src.$field.clone() { $dst.$field = Some(v); } )+
    };
}

macro_rules! resolve {
    ($base:expr, $src:expr, $($field:ident),+ $(,)?) => {
        $( if let Some(v) = $src.$field.clone() { $base.$field = v; } )+
    };
}

impl PartialConfig {
    /// Fields set in `over` replace those in `self`.
    pub fn overlay(mut self, over: &PartialConfig) -> Self {
        overlay!(
            self, over, d_model, layers, heads, variant, snr_gate, k, n_b, ratio, epochs, episodes_per_graph, lr, beta1,
            beta2, adam_eps, clip_norm, patience, val_fraction, seed, folds, batch_size, full_context, drop,
            allow_multi_drop, normalize_similarity,
        );
        self
    }

    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = RunConfig::default();
        resolve!(
            c, self, d_model, layers, heads, variant, snr_gate, k, n_b, ratio, epochs, episodes_per_graph, lr, beta1,
            beta2, adam_eps, clip_norm, patience, val_fraction, seed, folds, batch_size, full_context, drop,
            allow_multi_drop, normalize_similarity,
        );
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.hyper()?.validate()?;
        self.train()?.validate()?;
        if self.folds == 0 || self.batch_size == 0 {
            return Err(CliError::Usage("folds and batch_size must be at least 1".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(CliError::Usage(format!("clip_norm must be >= 0, got {}", self.clip_norm)));
        }
        Ok(())
    }

    pub fn fingerprint_options(&self) -> FingerprintOptions {
        FingerprintOptions { normalize_similarity: self.normalize_similarity, allow_multi_drop: self.allow_multi_drop }
    }

    pub fn dims(&self) -> Result<Vec<Dim>, CliError> {
        Ok(active_dims(&self.drop, self.allow_multi_drop)?)
    }

    pub fn hyper(&self) -> Result<Hyper, CliError> {
        Ok(Hyper {
            dims: self.dims()?,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            variant: self.variant,
            snr_gate: self.snr_gate,
            snr_eps: DEFAULT_SNR_EPS,
        })
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            k: self.k,
            n_b: self.n_b,
            ratio: self.ratio,
            epochs: self.epochs,
            episodes_per_graph: self.episodes_per_graph,
            adam: AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps },
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            seed: self.seed,
            val_fraction: self.val_fraction,
            patience: (self.patience > 0).then_some(self.patience),
        })
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            k: self.k,
            folds: self.folds,
            seed: self.seed,
            batch_size: self.batch_size,
            full_context: self.full_context,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Flags shared by every command that consumes a [`RunConfig`].
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON config file; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Literal transformer blocks without residuals or layer norm.
    #[arg(long)]
    pub literal_eq14: bool,
    /// Bypass the SNR gate (m = 1).
    #[arg(long)]
    pub no_snr_gate: bool,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n_b: Option<usize>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub episodes_per_graph: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Gate statistics over all scored nodes instead of each batch.
    #[arg(long)]
    pub full_context: bool,
    /// Fingerprint dimensions to drop (np, nd, gd, deg, lc).
    #[arg(long, value_delimiter = ',')]
    pub drop: Vec<Dim>,
    #[arg(long)]
    pub allow_multi_drop: bool,
    #[arg(long)]
    pub normalize_similarity: bool,
}

impl ConfigArgs {
    pub fn flags(&self) -> PartialConfig {
        PartialConfig {
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            variant: self.literal_eq14.then_some(BlockVariant::Literal),
            snr_gate: self.no_snr_gate.then_some(false),
            k: self.k,
            n_b: self.n_b,
            ratio: self.ratio,
            epochs: self.epochs,
            episodes_per_graph: self.episodes_per_graph,
            lr: self.lr,
            clip_norm: self.clip_norm,
            patience: self.patience,
            val_fraction: self.val_fraction,
            seed: self.seed,
            folds: self.folds,
            batch_size: self.batch_size,
            full_context: self.full_context.then_some(true),
            drop: (!self.drop.is_empty()).then(|| self.drop.clone()),
            allow_multi_drop: self.allow_multi_drop.then_some(true),
            normalize_similarity: self.normalize_similarity.then_some(true),
            ..PartialConfig::default()
        }
    }

    /// File values overlaid by flags, before defaults are applied.
    pub fn explicit(&self) -> Result<PartialConfig, CliError> {
        let file = match &self.config {
            Some(path) => PartialConfig::from_file(path)?,
            None => PartialConfig::default(),
        };
        Ok(file.overlay(&self.flags()))
    }

    pub fn resolve(&self) -> Result<(PartialConfig, RunConfig), CliError> {
        let explicit = self.explicit()?;
        let resolved = explicit.resolve()?;
        Ok((explicit, resolved))
    }
}
