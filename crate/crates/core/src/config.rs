//! Experiment configuration: one TOML file, unknown keys rejected.

use serde::{Deserialize, Serialize};

use crate::datagen::{default_palette, DomainShift, DomainSpec, PRESETS};
use crate::error::{Error, Result};
use crate::gamma_train::{ConsistencyView, TaskConfig, UncertTrainConfig};
use crate::masking::ColorJitter;
use crate::nnet::ModelConfig;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub name: String,
    pub hue: f64,
    pub brightness: f64,
    pub noise_sigma: f64,
    pub ood_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub source_train: usize,
    /// Labelled images per domain for the multi-domain pretraining task.
    pub pretrain_per_domain: usize,
    pub target_train: usize,
    pub test: usize,
    pub source_domain: String,
    pub target_domain: String,
    pub domains: Vec<DomainEntry>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_classes: 6,
            height: 64,
            width: 64,
            source_train: 200,
            pretrain_per_domain: 150,
            target_train: 200,
            test: 40,
            source_domain: "source".into(),
            target_domain: "far".into(),
            domains: PRESETS
                .iter()
                .map(|(name, shift, ood_rate)| DomainEntry {
                    name: name.to_string(),
                    hue: shift.hue,
                    brightness: shift.brightness,
                    noise_sigma: shift.noise_sigma,
                    ood_rate: *ood_rate,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub patch_size: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub dropout_rate: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            patch_size: m.patch_size,
            dim: m.dim,
            blocks: m.blocks,
            heads: m.heads,
            ffn_hidden: m.ffn_hidden,
            dropout_rate: m.dropout_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub dropout: bool,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            steps: 1000,
            batch_size: 8,
            learning_rate: 0.05,
            momentum: 0.9,
            dropout: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Mask,
    Candr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UncertaintySection {
    pub view: ViewKind,
    pub p_mask: f64,
    pub temperature: f64,
    pub consistency_weight: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub dropout: bool,
    pub candr_preset: String,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    /// Method name; the checkpoint is written as `phi_<name>`.
    pub name: String,
    /// Encoder (and matching task network) the run starts from.
    pub init: InitKind,
}

impl Default for UncertaintySection {
    fn default() -> Self {
        let u = UncertTrainConfig::default();
        UncertaintySection {
            view: ViewKind::Mask,
            p_mask: u.p_mask,
            temperature: u.temperature,
            consistency_weight: u.consistency_weight,
            steps: u.steps,
            batch_size: u.batch_size,
            learning_rate: u.learning_rate,
            momentum: u.momentum,
            dropout: u.dropout,
            candr_preset: "full".into(),
            crop_scale_min: 0.5,
            crop_scale_max: 1.0,
            name: "mask".into(),
            init: InitKind::General,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub ensemble_size: usize,
    pub mcd_samples: usize,
}

/// Which labelled data the shared encoder is pretrained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    /// Every configured domain.
    General,
    /// The source domain only, with the same number of images.
    Narrow,
}

impl InitKind {
    pub fn name(self) -> &'static str {
        match self {
            InitKind::General => "general",
            InitKind::Narrow => "narrow",
        }
    }
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            ensemble_size: 3,
            mcd_samples: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    /// Domains evaluated by `evaluate` and `compare`.
    pub eval_domains: Vec<String>,
    /// Methods evaluated by `evaluate` and tabulated by `compare`.
    pub methods: Vec<String>,
    pub data: DataConfig,
    pub model: ModelSection,
    pub pretrain: OptimSection,
    pub task: OptimSection,
    pub uncertainty: UncertaintySection,
    pub baselines: BaselineSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: "runs/default".into(),
            eval_domains: vec!["source".into(), "near".into(), "far".into()],
            methods: ["maxs", "ensemble", "mcd", "gmm", "mask"].map(String::from).to_vec(),
            data: DataConfig::default(),
            model: ModelSection::default(),
            pretrain: OptimSection::default(),
            task: OptimSection::default(),
            uncertainty: UncertaintySection::default(),
            baselines: BaselineSection::default(),
        }
    }
}

/// Which labelled split of a domain to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Pretrain,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Pretrain => "pretrain",
            Split::Test => "test",
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        for name in [&self.data.source_domain, &self.data.target_domain]
            .into_iter()
            .chain(&self.eval_domains)
        {
            self.domain_spec(name, Split::Test)?.validate()?;
        }
        for d in &self.data.domains {
            self.domain_spec(&d.name, Split::Test)?.validate()?;
        }
        let mut names: Vec<&str> = self.data.domains.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("data.domains", "duplicate domain name"));
        }
        for (field, n) in [
            ("data.source_train", self.data.source_train),
            ("data.pretrain_per_domain", self.data.pretrain_per_domain),
            ("data.target_train", self.data.target_train),
            ("data.test", self.data.test),
            ("baselines.ensemble_size", self.baselines.ensemble_size),
            ("baselines.mcd_samples", self.baselines.mcd_samples),
        ] {
            if n == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        self.uncert_config()?.validate()?;
        if self.methods.is_empty() {
            return Err(Error::config("methods", "list at least one method"));
        }
        let name = &self.uncertainty.name;
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(Error::config("uncertainty.name", "use letters, digits, `-`, `_` or `.`"));
        }
        for (field, o) in [("pretrain", &self.pretrain), ("task", &self.task)] {
            if o.batch_size == 0 {
                return Err(Error::config(format!("{field}.batch_size"), "must be positive"));
            }
            if !(o.learning_rate > 0.0) {
                return Err(Error::config(format!("{field}.learning_rate"), "must be positive"));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            image_height: self.data.height,
            image_width: self.data.width,
            patch_size: m.patch_size,
            dim: m.dim,
            blocks: m.blocks,
            heads: m.heads,
            ffn_hidden: m.ffn_hidden,
            num_classes: self.data.num_classes,
            dropout_rate: m.dropout_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Domain spec for one split; each `(domain, split)` pair has its own
    /// data seed.
    pub fn domain_spec(&self, name: &str, split: Split) -> Result<DomainSpec> {
        let entry = self
            .data
            .domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::config("data.domains", format!("no domain named `{name}`")))?;
        Ok(DomainSpec {
            domain_id: name.to_string(),
            num_classes: self.data.num_classes,
            palette: default_palette(self.data.num_classes),
            shift: DomainShift {
                hue: entry.hue,
                brightness: entry.brightness,
                noise_sigma: entry.noise_sigma,
            },
            ood_rate: entry.ood_rate,
            seed: seed::derive(self.seed, &format!("data/{name}/{}", split.name())),
            height: self.data.height,
            width: self.data.width,
            patch_size: self.model.patch_size,
        })
    }

    /// Task-learning settings for one run; `label` separates the order and
    /// dropout streams of different runs.
    pub fn task_config(&self, section: &OptimSection, label: &str) -> TaskConfig {
        TaskConfig {
            steps: section.steps,
            batch_size: section.batch_size,
            learning_rate: section.learning_rate,
            momentum: section.momentum,
            seed: seed::derive(self.seed, label),
            dropout: section.dropout,
            freeze_encoder: false,
        }
    }

    pub fn uncert_config(&self) -> Result<UncertTrainConfig> {
        let u = &self.uncertainty;
        let view = match u.view {
            ViewKind::Mask => ConsistencyView::Mask,
            ViewKind::Candr => ConsistencyView::CropResize {
                scale_min: u.crop_scale_min,
                scale_max: u.crop_scale_max,
                jitter: ColorJitter::preset(&u.candr_preset)?,
            },
        };
        Ok(UncertTrainConfig {
            p_mask: u.p_mask,
            temperature: u.temperature,
            consistency_weight: u.consistency_weight,
            steps: u.steps,
            batch_size: u.batch_size,
            learning_rate: u.learning_rate,
            momentum: u.momentum,
            seed: seed::derive(self.seed, "uncertainty"),
            view,
            dropout: u.dropout,
            freeze_encoder: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::parse("seed = 1\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        let err = ExperimentConfig::parse("[model]\ndims = 3\n").unwrap_err();
        assert!(err.to_string().contains("dims"), "{err}");
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = ExperimentConfig::parse("seed = 7\n[uncertainty]\nview = \"candr\"\ncandr_preset = \"light\"\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model, ModelSection::default());
        match cfg.uncert_config().unwrap().view {
            ConsistencyView::CropResize { jitter, .. } => assert_eq!(jitter, ColorJitter::LIGHT),
            v => panic!("unexpected view {v:?}"),
        }
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = ExperimentConfig::parse("[uncertainty]\ntemperature = 0.0\n").unwrap_err();
        assert!(err.to_string().contains("temperature"), "{err}");
        let err = ExperimentConfig::parse("[data]\ntarget_domain = \"moon\"\n").unwrap_err();
        assert!(err.to_string().contains("moon"), "{err}");
    }

    #[test]
    fn splits_get_distinct_seeds() {
        let cfg = ExperimentConfig::default();
        let a = cfg.domain_spec("far", Split::Train).unwrap();
        let b = cfg.domain_spec("far", Split::Test).unwrap();
        let c = cfg.domain_spec("near", Split::Test).unwrap();
        assert_ne!(a.seed, b.seed);
        assert_ne!(b.seed, c.seed);
    }
}
