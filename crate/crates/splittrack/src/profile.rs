//! TOML run profiles bundling model dimensions, the training curriculum,
//! corpus tokenization and evaluation settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use splittrack_core::model::ModelConfig;
use splittrack_core::sample::ModalityRegistry;
use splittrack_core::scheduler::Stage;
use splittrack_core::training::TrainConfig;

pub const PAPER_PROFILE: &str = include_str!("../profiles/paper.profile");
pub const DESK_PROFILE: &str = include_str!("../profiles/desk.profile");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub width: usize,
    pub n_heads: usize,
    pub encoder_budget: usize,
    pub decoder_budget: usize,
    pub register_count: usize,
    pub rope_fraction: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_ffn_mult() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub warmup_epochs: f64,
    pub cooldown_epochs: f64,
    pub n_buckets: usize,
    pub dropout_max: f64,
    #[serde(default)]
    pub fixed_dropout: Option<f64>,
    pub weight_decay: f64,
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub continuous_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub mask_width: usize,
    pub splice_flank: usize,
    pub vep_window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub name: String,
    pub model: ModelSection,
    pub train: TrainSection,
    pub corpus: CorpusSection,
    pub eval: EvalSection,
}

impl Profile {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let p: Profile = toml::from_str(text)?;
        p.model_config_for(&splittrack_core::synth::default_registry(p.corpus.continuous_bins)).validate()?;
        splittrack_core::scheduler::validate_stages(&p.train.stages)?;
        Ok(p)
    }

    /// `paper`, `desk`, or a path to a profile file.
    pub fn resolve(spec: &str) -> anyhow::Result<Self> {
        match spec {
            "paper" => Self::parse(PAPER_PROFILE),
            "desk" => Self::parse(DESK_PROFILE),
            path => {
                let text = std::fs::read_to_string(Path::new(path)).map_err(|e| anyhow::anyhow!("{path}: {e}"))?;
                Self::parse(&text).map_err(|e| anyhow::anyhow!("{path}: {e}"))
            }
        }
    }

    /// Model configuration without modality vocabularies.
    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let mut c = ModelConfig::with_dims(
            m.encoder_depth,
            m.decoder_depth,
            m.width,
            m.n_heads,
            m.encoder_budget,
            m.decoder_budget,
            m.register_count,
            m.rope_fraction,
        );
        c.rope_base = m.rope_base;
        c.ffn_mult = m.ffn_mult;
        c
    }

    pub fn model_config_for(&self, registry: &ModalityRegistry) -> ModelConfig {
        self.model_config().for_registry(registry)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            stages: t.stages.clone(),
            warmup_epochs: t.warmup_epochs,
            cooldown_epochs: t.cooldown_epochs,
            n_buckets: t.n_buckets,
            dropout_max: t.dropout_max,
            fixed_dropout: t.fixed_dropout,
            weight_decay: t.weight_decay,
            seed,
        }
    }

    /// Canonical serialization used for run digests.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("profiles serialize")
    }
}

/// Stage selection: `all`, a 1-based index `k`, a range `a-b`, or explicit
/// `budget:lr:batch:epochs` entries separated by commas.
pub fn select_stages(stages: &[Stage], spec: &str) -> anyhow::Result<Vec<Stage>> {
    let spec = spec.trim();
    if spec == "all" {
        return Ok(stages.to_vec());
    }
    if spec.contains(':') {
        return spec
            .split(',')
            .map(|item| {
                let f: Vec<&str> = item.split(':').collect();
                anyhow::ensure!(f.len() == 4, "stage {item:?} must be budget:lr:batch:epochs");
                Ok(Stage {
                    context_budget: f[0].parse()?,
                    max_lr: f[1].parse()?,
                    batch_target: f[2].parse()?,
                    epochs: f[3].parse()?,
                })
            })
            .collect();
    }
    let (a, b) = match spec.split_once('-') {
        Some((a, b)) => (a.parse::<usize>()?, b.parse::<usize>()?),
        None => {
            let k = spec.parse::<usize>()?;
            (k, k)
        }
    };
    anyhow::ensure!(a >= 1 && a <= b && b <= stages.len(), "stage range {spec:?} outside 1..={}", stages.len());
    Ok(stages[a - 1..b].to_vec())
}
