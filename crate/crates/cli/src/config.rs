//! Flat TOML settings files. Every key is optional; flags override file
//! values and the resolved settings are echoed next to the outputs.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use segdiff_core::ablation::Variant;
use segdiff_core::network::{ModelConfig, TimeEmbeddingKind};
use segdiff_core::sampler::{FusionMethod, SamplerConfig};
use segdiff_core::schedule::ScheduleKind;
use segdiff_core::trainer::{LrSchedule, TrainConfig};

use crate::CliError;

pub fn read<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

pub fn render<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("settings serialize to TOML")
}

/// Model and training keys shared by `train` and `ablate`. Unset model keys
/// fall back to `preset`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub preset: String,
    pub image_size: Option<usize>,
    pub base_channels: Option<usize>,
    pub stage_block_counts: Option<Vec<usize>>,
    pub channel_multipliers: Option<Vec<usize>>,
    pub time_embed_dim: Option<usize>,
    pub time_embedding: Option<TimeEmbeddingKind>,
    pub fusion_stages: Option<Vec<usize>>,
    pub use_dycond: Option<bool>,
    pub use_ffparser: Option<bool>,
    pub bottleneck_blocks: Option<usize>,
    pub norm_groups: Option<usize>,
    pub diffusion_steps: Option<usize>,
    pub schedule: ScheduleKind,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub lr_schedule: LrSchedule,
    pub ema_decay: Option<f64>,
    pub augment: bool,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub eval_steps: usize,
    pub eval_ensemble: usize,
    pub eval_fusion: FusionMethod,
    pub eval_chain_batch: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = SamplerConfig::default();
        Self {
            preset: "s-toy".into(),
            image_size: None,
            base_channels: None,
            stage_block_counts: None,
            channel_multipliers: None,
            time_embed_dim: None,
            time_embedding: None,
            fusion_stages: None,
            use_dycond: None,
            use_ffparser: None,
            bottleneck_blocks: None,
            norm_groups: None,
            diffusion_steps: None,
            schedule: t.schedule,
            epochs: t.epochs,
            max_steps: t.max_steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            lr_schedule: t.lr_schedule,
            ema_decay: t.ema_decay,
            augment: t.augment,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            eval_every: t.eval_every,
            eval_steps: s.steps,
            eval_ensemble: 1,
            eval_fusion: s.fusion,
            eval_chain_batch: s.chain_batch,
        }
    }
}

impl TrainSettings {
    pub fn model(&self, image_channels: usize) -> Result<ModelConfig, CliError> {
        let mut m = ModelConfig::preset(&self.preset)
            .ok_or_else(|| CliError::Usage(format!("unknown preset {:?}; use s-toy, b-toy or default", self.preset)))?;
        macro_rules! take {
            ($($f:ident),*) => { $(if let Some(v) = &self.$f { m.$f = v.clone(); })* };
        }
        take!(
            image_size,
            base_channels,
            stage_block_counts,
            channel_multipliers,
            time_embed_dim,
            time_embedding,
            fusion_stages,
            use_dycond,
            use_ffparser,
            bottleneck_blocks,
            norm_groups,
            diffusion_steps
        );
        m.in_channels_image = image_channels;
        Ok(m)
    }

    pub fn eval_sampler(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.eval_steps,
            ensemble_size: self.eval_ensemble,
            fusion: self.eval_fusion,
            chain_batch: self.eval_chain_batch,
            ..SamplerConfig::default()
        }
    }

    pub fn train_config(&self, image_channels: usize) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            epochs: self.epochs,
            max_steps: self.max_steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            lr_schedule: self.lr_schedule,
            ema_decay: self.ema_decay,
            augment: self.augment,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            eval_every: self.eval_every,
            validation: self.eval_sampler(),
            schedule: self.schedule,
            model: self.model(image_channels)?,
        })
    }

    /// Copy with every model key filled in from `model`.
    pub fn resolved(&self, model: &ModelConfig) -> Self {
        Self {
            image_size: Some(model.image_size),
            base_channels: Some(model.base_channels),
            stage_block_counts: Some(model.stage_block_counts.clone()),
            channel_multipliers: Some(model.channel_multipliers.clone()),
            time_embed_dim: Some(model.time_embed_dim),
            time_embedding: Some(model.time_embedding),
            fusion_stages: Some(model.fusion_stages.clone()),
            use_dycond: Some(model.use_dycond),
            use_ffparser: Some(model.use_ffparser),
            bottleneck_blocks: Some(model.bottleneck_blocks),
            norm_groups: Some(model.norm_groups),
            diffusion_steps: Some(model.diffusion_steps),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblateSettings {
    /// Names from `vanilla`, `dycond`, `ffparser` and `full`.
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(flatten)]
    pub train: TrainSettings,
}

impl Default for AblateSettings {
    fn default() -> Self {
        Self {
            variants: Variant::defaults().into_iter().map(|v| v.name).collect(),
            seeds: vec![0, 1, 2],
            train: TrainSettings::default(),
        }
    }
}

/// Training keys plus `variants` and `seeds` in one flat file.
pub fn read_ablate(path: Option<&Path>) -> Result<AblateSettings, CliError> {
    let mut out = AblateSettings::default();
    let Some(path) = path else { return Ok(out) };
    let bad = |e: String| CliError::Usage(format!("config {}: {e}", path.display()));
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| bad(e.to_string()))?;
    if let Some(v) = table.remove("variants") {
        out.variants = v.try_into().map_err(|e: toml::de::Error| bad(format!("variants: {e}")))?;
    }
    if let Some(v) = table.remove("seeds") {
        out.seeds = v.try_into().map_err(|e: toml::de::Error| bad(format!("seeds: {e}")))?;
    }
    out.train = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| bad(e.to_string()))?;
    Ok(out)
}

pub fn variant(name: &str) -> Result<Variant, CliError> {
    match name {
        "vanilla" => Ok(Variant::new(name, false, false)),
        "dycond" => Ok(Variant::new(name, true, false)),
        "ffparser" => Ok(Variant::new(name, false, true)),
        "full" => Ok(Variant::new(name, true, true)),
        other => Err(CliError::Usage(format!(
            "unknown variant {other:?}; use vanilla, dycond, ffparser or full"
        ))),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseSettings {
    pub method: FusionMethod,
    /// Foreground prior; the mean foreground fraction of the inputs when unset.
    pub prior: Option<f64>,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for FuseSettings {
    fn default() -> Self {
        Self {
            method: FusionMethod::Staple,
            prior: None,
            tol: segdiff_core::staple::DEFAULT_TOL,
            max_iters: segdiff_core::staple::DEFAULT_MAX_ITERS,
        }
    }
}
