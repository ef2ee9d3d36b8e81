//! The three-step pipeline (pretraining, task learning, uncertainty
//! training) over in-memory datasets.

use crate::config::{ExperimentConfig, InitKind, Split};
use crate::datagen::{generate_domain, Image, LabeledSample};
use crate::error::Result;
use crate::gamma_train::{self, TaskRun, UncertTrainConfig, UncertaintyRun};
use crate::nnet::ModelParams;
use crate::seed;

pub fn source_train(cfg: &ExperimentConfig) -> Result<Vec<LabeledSample>> {
    generate_domain(&cfg.domain_spec(&cfg.data.source_domain, Split::Train)?, cfg.data.source_train)
}

/// Unlabelled target images used by uncertainty training.
pub fn target_train(cfg: &ExperimentConfig) -> Result<Vec<Image>> {
    let spec = cfg.domain_spec(&cfg.data.target_domain, Split::Train)?;
    Ok(generate_domain(&spec, cfg.data.target_train)?
        .into_iter()
        .map(|s| s.image)
        .collect())
}

pub fn test_set(cfg: &ExperimentConfig, domain: &str) -> Result<Vec<LabeledSample>> {
    generate_domain(&cfg.domain_spec(domain, Split::Test)?, cfg.data.test)
}

pub fn pretrain_data(cfg: &ExperimentConfig, kind: InitKind) -> Result<Vec<LabeledSample>> {
    let per = cfg.data.pretrain_per_domain;
    match kind {
        InitKind::General => {
            let mut all = Vec::with_capacity(per * cfg.data.domains.len());
            for d in &cfg.data.domains {
                all.extend(generate_domain(&cfg.domain_spec(&d.name, Split::Pretrain)?, per)?);
            }
            Ok(all)
        }
        InitKind::Narrow => generate_domain(
            &cfg.domain_spec(&cfg.data.source_domain, Split::Pretrain)?,
            per * cfg.data.domains.len(),
        ),
    }
}

/// Step 1: supervised pretraining; callers keep the encoder and replace the
/// decoder.
pub fn pretrain(cfg: &ExperimentConfig, kind: InitKind, data: &[LabeledSample]) -> Result<TaskRun> {
    let init = ModelParams::init(cfg.model_config()?, seed::derive(cfg.seed, "pretrain-init"))?;
    let task = cfg.task_config(&cfg.pretrain, &format!("pretrain/{}", kind.name()));
    gamma_train::train_task(data, init, &task)
}

/// Step 2: the task network, fully fine-tuned on the source domain from a
/// pretrained encoder and a fresh decoder.
pub fn train_f_theta(cfg: &ExperimentConfig, encoder: &ModelParams, source: &[LabeledSample], label: &str) -> Result<TaskRun> {
    let init = encoder.with_fresh_decoder(seed::derive(cfg.seed, &format!("decoder/theta/{label}")))?;
    let task = cfg.task_config(&cfg.task, &format!("task/{label}"));
    gamma_train::train_task(source, init, &task)
}

/// Ensemble members: same encoder, decoders and batch orders from distinct
/// seeds.
pub fn train_ensemble(cfg: &ExperimentConfig, encoder: &ModelParams, source: &[LabeledSample]) -> Result<Vec<ModelParams>> {
    (0..cfg.baselines.ensemble_size)
        .map(|m| train_f_theta(cfg, encoder, source, &format!("ensemble{m}")).map(|r| r.params))
        .collect()
}

/// Step 3: the uncertainty network, from the pretrained encoder and a fresh
/// decoder, against the frozen task network.
pub fn train_f_phi(
    cfg: &ExperimentConfig,
    ucfg: &UncertTrainConfig,
    f_theta: &ModelParams,
    encoder: &ModelParams,
    source: &[LabeledSample],
    target: &[Image],
    label: &str,
) -> Result<UncertaintyRun> {
    let init = encoder.with_fresh_decoder(seed::derive(cfg.seed, &format!("decoder/phi/{label}")))?;
    gamma_train::run_uncertainty_training(source, target, f_theta, init, ucfg)
}
