//! Task learning and masked-consistency uncertainty training loops.

use rand::seq::SliceRandom;

use super::losses::{self, GammaResult};
use crate::datagen::{Image, LabeledSample, IGNORE};
use crate::error::{Error, Result};
use crate::masking::{self, ColorJitter, CropSpec};
use crate::nnet::{Dropout, ForwardPass, ModelParams, SegOutput};
use crate::par;
use crate::seed;

/// SGD with heavy-ball momentum: `v = mu v + g; p -= lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: ModelParams,
}

impl Sgd {
    pub fn new(params: &ModelParams, learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: params.zeros_like(),
        }
    }

    /// Applies one update. With `freeze_encoder` only decoder tensors move.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, freeze_encoder: bool) {
        let (lr, mu) = (self.learning_rate, self.momentum);
        for (((name, p), (_, v)), (_, g)) in params
            .tensors_mut()
            .into_iter()
            .zip(self.velocity.tensors_mut())
            .zip(grads.tensors())
        {
            if freeze_encoder && !ModelParams::is_decoder_tensor(&name) {
                continue;
            }
            for ((pv, vv), gv) in p.data.iter_mut().zip(v.data.iter_mut()).zip(&g.data) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
}

/// Endless stream of shuffled mini-batches; every epoch is a fresh permutation.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: seed::Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Usage("cannot sample batches from an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        let mut s = BatchSampler {
            order: (0..len).collect(),
            cursor: 0,
            batch_size,
            rng: seed::rng(seed),
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Train with feed-forward dropout active.
    pub dropout: bool,
    pub freeze_encoder: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            steps: 1000,
            batch_size: 8,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
            dropout: true,
            freeze_encoder: false,
        }
    }
}

impl TaskConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskLogRow {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TaskRun {
    pub params: ModelParams,
    pub log: Vec<TaskLogRow>,
}

fn at_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numerical { stage, block } => Error::Training {
            step,
            reason: match block {
                Some(b) => format!("non-finite values in {stage} {b}"),
                None => format!("non-finite values in {stage}"),
            },
        },
        other => other,
    }
}

fn dropout_for(enabled: bool, seed: u64, step: usize, slot: usize) -> Dropout {
    if enabled {
        Dropout::On {
            seed: seed::derive_indexed(seed, "dropout", &[step as u64, slot as u64]),
        }
    } else {
        Dropout::Off
    }
}

fn backward_sum(params: &ModelParams, passes: &[ForwardPass], dlogits: &[Vec<f64>], scale: f64) -> Result<ModelParams> {
    let per_image = par::try_map(passes.len(), |j| {
        let mut g = params.zeros_like();
        params.backward(&passes[j], &dlogits[j], &mut g)?;
        Ok::<_, Error>(g)
    })?;
    let mut total = params.zeros_like();
    for g in &per_image {
        total.add_scaled(g, scale);
    }
    Ok(total)
}

fn pixel_accuracy(outputs: &[&SegOutput], labels: &[&[u8]]) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (o, l) in outputs.iter().zip(labels) {
        for (&p, &y) in o.pred.iter().zip(l.iter()) {
            if y != IGNORE {
                n += 1;
                hit += usize::from(p == y);
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

struct SupervisedStep {
    loss: f64,
    accuracy: f64,
    passes: Vec<ForwardPass>,
    dlogits: Vec<Vec<f64>>,
}

fn supervised_forward(
    params: &ModelParams,
    batch: &[&LabeledSample],
    dropout: bool,
    seed: u64,
    step: usize,
) -> Result<SupervisedStep> {
    let passes = par::try_map(batch.len(), |j| {
        params.forward_image(&batch[j].image, None, dropout_for(dropout, seed, step, j), true)
    })?;
    let outputs: Vec<&SegOutput> = passes.iter().map(|p| &p.output).collect();
    let labels: Vec<&[u8]> = batch.iter().map(|s| s.labels.as_slice()).collect();
    let lg = losses::supervised_loss_batch(&outputs, &labels)?;
    let accuracy = pixel_accuracy(&outputs, &labels);
    Ok(SupervisedStep {
        loss: lg.value,
        accuracy,
        passes,
        dlogits: lg.dlogits,
    })
}

fn source_order_seed(seed: u64) -> u64 {
    seed::derive(seed, "source-order")
}

/// Supervised cross-entropy training on labelled source samples.
pub fn train_task(data: &[LabeledSample], init: ModelParams, cfg: &TaskConfig) -> Result<TaskRun> {
    cfg.validate()?;
    let mut params = init;
    let mut log = Vec::with_capacity(cfg.steps);
    if cfg.steps == 0 {
        return Ok(TaskRun { params, log });
    }
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, source_order_seed(cfg.seed))?;
    let mut opt = Sgd::new(&params, cfg.learning_rate, cfg.momentum);
    for step in 0..cfg.steps {
        let batch: Vec<&LabeledSample> = sampler.next_batch().into_iter().map(|i| &data[i]).collect();
        let sup = supervised_forward(&params, &batch, cfg.dropout, cfg.seed, step).map_err(at_step(step))?;
        if !sup.loss.is_finite() {
            return Err(Error::Training {
                step,
                reason: "supervised loss is not finite".into(),
            });
        }
        let grads = backward_sum(&params, &sup.passes, &sup.dlogits, 1.0)?;
        opt.step(&mut params, &grads, cfg.freeze_encoder);
        if !params.is_finite() {
            return Err(Error::Training {
                step,
                reason: "parameters became non-finite".into(),
            });
        }
        log.push(TaskLogRow {
            step,
            loss: sup.loss,
            accuracy: sup.accuracy,
        });
        if step % 100 == 0 {
            log::debug!("task step {step}: loss {:.4} acc {:.3}", sup.loss, sup.accuracy);
        }
    }
    Ok(TaskRun { params, log })
}

/// How the second view of a target image is produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConsistencyView {
    /// Bernoulli patch masking at the configured `p_mask`.
    Mask,
    /// Crop-and-resize plus colour jitter.
    CropResize {
        scale_min: f64,
        scale_max: f64,
        jitter: ColorJitter,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertTrainConfig {
    pub p_mask: f64,
    pub temperature: f64,
    pub consistency_weight: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub view: ConsistencyView,
    /// Feed-forward dropout on the supervised source passes.
    pub dropout: bool,
    pub freeze_encoder: bool,
}

impl Default for UncertTrainConfig {
    fn default() -> Self {
        UncertTrainConfig {
            p_mask: masking::DEFAULT_P_MASK,
            temperature: 0.5,
            consistency_weight: 1.0,
            steps: 1000,
            batch_size: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            view: ConsistencyView::Mask,
            dropout: true,
            freeze_encoder: false,
        }
    }
}

impl UncertTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_mask) {
            return Err(Error::config("p_mask", "must lie in [0, 1]"));
        }
        if !(self.consistency_weight >= 0.0) {
            return Err(Error::config("consistency_weight", "must be non-negative"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }

    /// The task-learning configuration whose source batches, dropout draws
    /// and optimizer this uncertainty run shares.
    pub fn as_task_config(&self) -> TaskConfig {
        TaskConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            seed: self.seed,
            dropout: self.dropout,
            freeze_encoder: self.freeze_encoder,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertLogRow {
    pub step: usize,
    pub l_sup: f64,
    pub l_c: f64,
    pub gamma: f64,
    pub mean_mc: f64,
    pub mean_mgamma: f64,
    pub conf_min: f64,
    pub conf_max: f64,
    pub pixels: usize,
}

/// Everything computed for one uncertainty step.
pub struct StepOutcome {
    pub l_sup: f64,
    pub l_c: f64,
    pub gamma: GammaResult,
    pub conf_min: f64,
    pub conf_max: f64,
    /// `d(L_sup + w L_c)/d phi`, when requested.
    pub grads: Option<ModelParams>,
}

impl StepOutcome {
    pub fn total(&self, consistency_weight: f64) -> f64 {
        self.l_sup + consistency_weight * self.l_c
    }
}

/// Re-indexes an output onto an augmented view's pixel grid.
fn gather_output(s: &SegOutput, source: &[usize]) -> SegOutput {
    let hw = s.pixels();
    let k = s.num_classes;
    let mut logits = vec![0.0; k * source.len()];
    let mut probs = vec![0.0; k * source.len()];
    let n = source.len();
    for c in 0..k {
        for (j, &i) in source.iter().enumerate() {
            logits[c * n + j] = s.logits[c * hw + i];
            probs[c * n + j] = s.probs[c * hw + i];
        }
    }
    SegOutput {
        num_classes: k,
        height: s.height,
        width: s.width,
        logits,
        probs,
        pred: source.iter().map(|&i| s.pred[i]).collect(),
        conf: source.iter().map(|&i| s.conf[i]).collect(),
    }
}

struct TargetView {
    /// Frozen-network segmentation aligned to the second view.
    s_theta: SegOutput,
    /// Confidence of the trainable network on the unmasked image, aligned
    /// to the second view.
    conf_phi: Vec<f64>,
    /// Trainable network on the second view (recorded when gradients are
    /// needed).
    masked: ForwardPass,
}

fn target_view(
    f_theta: &ModelParams,
    f_phi: &ModelParams,
    image: &Image,
    cfg: &UncertTrainConfig,
    step: usize,
    slot: usize,
    record: bool,
) -> Result<TargetView> {
    let s_theta = f_theta.forward_image(image, None, Dropout::Off, false)?.output;
    let s_phi = f_phi.forward_image(image, None, Dropout::Off, false)?.output;
    let c = &f_phi.config;
    let view_seed = seed::derive_indexed(cfg.seed, "view", &[step as u64, slot as u64]);
    match cfg.view {
        ConsistencyView::Mask => {
            let mask = masking::sample_mask(c.grid_height(), c.grid_width(), cfg.p_mask, view_seed)?;
            let masked = f_phi.forward_image(image, Some(&mask), Dropout::Off, record)?;
            Ok(TargetView {
                s_theta,
                conf_phi: s_phi.conf,
                masked,
            })
        }
        ConsistencyView::CropResize {
            scale_min,
            scale_max,
            jitter,
        } => {
            let mut rng = seed::rng(view_seed);
            let spec = CropSpec::sample(&mut rng, scale_min, scale_max, image.height, image.width, c.patch_size)?;
            let (cropped, corr) = masking::crop_resize_pair(image, &spec)?;
            let aug = jitter.apply(&cropped, &mut rng);
            let masked = f_phi.forward_image(&aug, None, Dropout::Off, record)?;
            Ok(TargetView {
                s_theta: gather_output(&s_theta, &corr.source),
                conf_phi: corr.source.iter().map(|&i| s_phi.conf[i]).collect(),
                masked,
            })
        }
    }
}

/// Evaluates the uncertainty objective for one batch and, optionally, its
/// gradient with respect to `f_phi`.
///
/// `f_theta` only runs inference; the consistency mask, the threshold and the
/// confidence mask are constants of the objective.
pub fn uncertainty_objective(
    f_theta: &ModelParams,
    f_phi: &ModelParams,
    target: &[&Image],
    source: &[&LabeledSample],
    cfg: &UncertTrainConfig,
    step: usize,
    with_grad: bool,
) -> Result<StepOutcome> {
    if f_theta.config != f_phi.config {
        return Err(Error::Usage("frozen and trainable networks differ in architecture".into()));
    }
    if target.is_empty() {
        return Err(Error::Usage("uncertainty step without target images".into()));
    }
    let views = par::try_map(target.len(), |j| target_view(f_theta, f_phi, target[j], cfg, step, j, with_grad))?;

    let mut m_c = Vec::new();
    let mut conf = Vec::new();
    for v in &views {
        m_c.extend(losses::hard_consistency_mask(&v.s_theta, &v.masked.output)?);
        conf.extend_from_slice(&v.conf_phi);
    }
    let gamma = losses::gamma_match(&conf, m_c)?;
    let conf_min = conf.iter().copied().fold(f64::INFINITY, f64::min);
    let conf_max = conf.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let thetas: Vec<&SegOutput> = views.iter().map(|v| &v.s_theta).collect();
    let preds: Vec<&SegOutput> = views.iter().map(|v| &v.masked.output).collect();
    let hw = f_phi.config.pixels();
    let masks: Vec<&[bool]> = gamma.m_gamma.chunks(hw).collect();
    let lc = losses::masked_consistency_loss_batch(&thetas, &preds, &masks, cfg.temperature)?;

    let sup = supervised_forward(f_phi, source, cfg.dropout, cfg.seed, step)?;

    let grads = if with_grad {
        let mut g = backward_sum(f_phi, &sup.passes, &sup.dlogits, 1.0)?;
        if cfg.consistency_weight != 0.0 {
            let passes: Vec<ForwardPass> = views.into_iter().map(|v| v.masked).collect();
            let gc = backward_sum(f_phi, &passes, &lc.dlogits, 1.0)?;
            g.add_scaled(&gc, cfg.consistency_weight);
        }
        Some(g)
    } else {
        None
    };
    Ok(StepOutcome {
        l_sup: sup.loss,
        l_c: lc.value,
        gamma,
        conf_min,
        conf_max,
        grads,
    })
}

/// One optimizer update of `f_phi` on `L_sup + w * L_c`.
#[allow(clippy::too_many_arguments)]
pub fn uncertainty_train_step(
    f_theta: &ModelParams,
    f_phi: &mut ModelParams,
    opt: &mut Sgd,
    target: &[&Image],
    source: &[&LabeledSample],
    cfg: &UncertTrainConfig,
    step: usize,
) -> Result<UncertLogRow> {
    let out = uncertainty_objective(f_theta, f_phi, target, source, cfg, step, true).map_err(at_step(step))?;
    let total = out.total(cfg.consistency_weight);
    if !total.is_finite() {
        return Err(Error::Training {
            step,
            reason: "uncertainty loss is not finite".into(),
        });
    }
    let grads = out.grads.as_ref().expect("requested gradients");
    opt.step(f_phi, grads, cfg.freeze_encoder);
    if !f_phi.is_finite() {
        return Err(Error::Training {
            step,
            reason: "parameters became non-finite".into(),
        });
    }
    Ok(UncertLogRow {
        step,
        l_sup: out.l_sup,
        l_c: out.l_c,
        gamma: out.gamma.gamma,
        mean_mc: out.gamma.target_mean,
        mean_mgamma: out.gamma.mean_m_gamma(),
        conf_min: out.conf_min,
        conf_max: out.conf_max,
        pixels: out.gamma.m_gamma.len(),
    })
}

#[derive(Debug, Clone)]
pub struct UncertaintyRun {
    pub params: ModelParams,
    pub log: Vec<UncertLogRow>,
}

/// Trains `f_phi` for `cfg.steps` steps against the frozen `f_theta`.
pub fn run_uncertainty_training(
    source: &[LabeledSample],
    target: &[Image],
    f_theta: &ModelParams,
    f_phi_init: ModelParams,
    cfg: &UncertTrainConfig,
) -> Result<UncertaintyRun> {
    cfg.validate()?;
    let mut params = f_phi_init;
    let mut log = Vec::with_capacity(cfg.steps);
    if cfg.steps == 0 {
        return Ok(UncertaintyRun { params, log });
    }
    let mut source_batches = BatchSampler::new(source.len(), cfg.batch_size, source_order_seed(cfg.seed))?;
    let mut target_batches = BatchSampler::new(target.len(), cfg.batch_size, seed::derive(cfg.seed, "target-order"))?;
    let mut opt = Sgd::new(&params, cfg.learning_rate, cfg.momentum);
    for step in 0..cfg.steps {
        let src: Vec<&LabeledSample> = source_batches.next_batch().into_iter().map(|i| &source[i]).collect();
        let tgt: Vec<&Image> = target_batches.next_batch().into_iter().map(|i| &target[i]).collect();
        let row = uncertainty_train_step(f_theta, &mut params, &mut opt, &tgt, &src, cfg, step)?;
        if step % 100 == 0 {
            log::debug!(
                "uncertainty step {step}: L_sup {:.4} L_c {:.4} gamma {:.4} mean(M_c) {:.3}",
                row.l_sup,
                row.l_c,
                row.gamma,
                row.mean_mc
            );
        }
        log.push(row);
    }
    Ok(UncertaintyRun { params, log })
}
