//! Reference uncertainty scorers: max-softmax, tied-covariance Mahalanobis,
//! deep ensembles and Monte-Carlo dropout.

use nalgebra::{DMatrix, DVector};

use crate::datagen::{Image, LabeledSample, IGNORE};
use crate::error::{Error, Result};
use crate::nnet::{Dropout, ModelParams, SegOutput};
use crate::par;
use crate::seed;

/// Per-pixel certainty and the prediction it refers to.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub score: Vec<f64>,
    pub pred: Vec<u8>,
}

impl From<SegOutput> for Scored {
    fn from(s: SegOutput) -> Self {
        Scored {
            score: s.conf,
            pred: s.pred,
        }
    }
}

/// Anything that turns an image into per-pixel `(score, pred)`.
///
/// `index` is the image's position in the evaluated set; stochastic scorers
/// derive their randomness from it so results do not depend on scheduling.
pub trait Scorer: Sync {
    fn name(&self) -> &str;
    fn score(&self, image: &Image, index: u64) -> Result<Scored>;
}

pub fn max_softmax_score(s: &SegOutput) -> Vec<f64> {
    s.conf.clone()
}

pub struct MaxSoftmax<'a> {
    pub model: &'a ModelParams,
    pub label: String,
}

impl Scorer for MaxSoftmax<'_> {
    fn name(&self) -> &str {
        &self.label
    }

    fn score(&self, image: &Image, _index: u64) -> Result<Scored> {
        let out = self.model.forward_image(image, None, Dropout::Off, false)?.output;
        Ok(Scored {
            score: max_softmax_score(&out),
            pred: out.pred,
        })
    }
}

/// Class means with one shared, regularised covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGaussians {
    pub dim: usize,
    /// `num_classes x dim`, row-major.
    pub means: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub precision: DMatrix<f64>,
}

impl ClassGaussians {
    pub fn num_classes(&self) -> usize {
        self.means.len() / self.dim
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.means[class * self.dim..(class + 1) * self.dim]
    }

    /// Rebuilds the precision matrix from stored means and covariance.
    pub fn from_parts(dim: usize, means: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != dim || covariance.ncols() != dim || !means.len().is_multiple_of(dim.max(1)) {
            return Err(Error::Shape(format!(
                "gaussians with dim {dim}, {} mean values and a {}x{} covariance",
                means.len(),
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        let precision = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical {
                stage: "covariance factorisation".into(),
                block: None,
            })?
            .inverse();
        Ok(ClassGaussians {
            dim,
            means,
            covariance,
            precision,
        })
    }
}

/// Fits class means and a pooled covariance `S / N + eps I`, with
/// `eps = 1e-3 * trace(S / N) / d`.
///
/// `features` holds one `dim`-vector per row; `labels[i]` is the class of row `i`.
pub fn fit_gaussians(features: &[f64], dim: usize, labels: &[usize], num_classes: usize) -> Result<ClassGaussians> {
    if dim == 0 || features.len() != labels.len() * dim {
        return Err(Error::Shape(format!(
            "{} feature values for {} labels of dimension {dim}",
            features.len(),
            labels.len()
        )));
    }
    let mut sums = vec![0.0; num_classes * dim];
    let mut counts = vec![0usize; num_classes];
    for (row, &y) in features.chunks(dim).zip(labels) {
        if y >= num_classes {
            return Err(Error::Data(format!("label {y} outside {num_classes} classes")));
        }
        counts[y] += 1;
        for (s, v) in sums[y * dim..(y + 1) * dim].iter_mut().zip(row) {
            *s += v;
        }
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Fit { class });
    }
    let means: Vec<f64> = sums
        .chunks(dim)
        .zip(&counts)
        .flat_map(|(s, &c)| s.iter().map(move |v| v / c as f64))
        .collect();

    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut centred = DVector::<f64>::zeros(dim);
    for (row, &y) in features.chunks(dim).zip(labels) {
        for j in 0..dim {
            centred[j] = row[j] - means[y * dim + j];
        }
        cov.ger(1.0, &centred, &centred, 1.0);
    }
    cov /= labels.len() as f64;
    let eps = 1e-3 * cov.trace() / dim as f64;
    let eps = if eps > 0.0 { eps } else { 1e-12 };
    for j in 0..dim {
        cov[(j, j)] += eps;
    }
    ClassGaussians::from_parts(dim, means, cov)
}

/// `-min_k (x - mu_k)^T P (x - mu_k)`; higher means more confident.
pub fn mahalanobis_confidence(feature: &[f64], g: &ClassGaussians) -> f64 {
    let d = g.dim;
    let mut diff = DVector::<f64>::zeros(d);
    let mut best = f64::INFINITY;
    for k in 0..g.num_classes() {
        for (j, (x, m)) in feature.iter().zip(g.mean(k)).enumerate() {
            diff[j] = x - m;
        }
        let dist = (&g.precision * &diff).dot(&diff);
        best = best.min(dist);
    }
    -best
}

/// Final encoder tokens of labelled images, each tagged with the majority
/// label of its patch. Patches made only of ignored pixels are skipped.
pub fn patch_features(model: &ModelParams, samples: &[LabeledSample]) -> Result<(Vec<f64>, Vec<usize>)> {
    let c = &model.config;
    let per_image = par::try_map(samples.len(), |i| {
        let s = &samples[i];
        let pass = model.forward_image(&s.image, None, Dropout::Off, false)?;
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for gr in 0..c.grid_height() {
            for gc in 0..c.grid_width() {
                let mut votes = vec![0usize; c.num_classes];
                for y in gr * c.patch_size..(gr + 1) * c.patch_size {
                    for x in gc * c.patch_size..(gc + 1) * c.patch_size {
                        let l = s.labels[y * c.image_width + x];
                        if l != IGNORE {
                            votes[l as usize] += 1;
                        }
                    }
                }
                let (best, &n) = votes.iter().enumerate().max_by_key(|(k, &v)| (v, usize::MAX - k)).unwrap();
                if n == 0 {
                    continue;
                }
                let t = gr * c.grid_width() + gc;
                feats.extend_from_slice(&pass.features[t * c.dim..(t + 1) * c.dim]);
                labels.push(best);
            }
        }
        Ok::<_, Error>((feats, labels))
    })?;
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (f, l) in per_image {
        feats.extend(f);
        labels.extend(l);
    }
    Ok((feats, labels))
}

pub struct Mahalanobis<'a> {
    pub model: &'a ModelParams,
    pub gaussians: &'a ClassGaussians,
    pub label: String,
}

impl Scorer for Mahalanobis<'_> {
    fn name(&self) -> &str {
        &self.label
    }

    fn score(&self, image: &Image, _index: u64) -> Result<Scored> {
        let c = &self.model.config;
        let pass = self.model.forward_image(image, None, Dropout::Off, false)?;
        let per_patch: Vec<f64> = pass
            .features
            .chunks(c.dim)
            .map(|f| mahalanobis_confidence(f, self.gaussians))
            .collect();
        let mut score = vec![0.0; c.pixels()];
        for (y, row) in score.chunks_mut(c.image_width).enumerate() {
            for (x, v) in row.iter_mut().enumerate() {
                *v = per_patch[(y / c.patch_size) * c.grid_width() + x / c.patch_size];
            }
        }
        Ok(Scored {
            score,
            pred: pass.output.pred,
        })
    }
}

fn average_outputs(outputs: &[SegOutput]) -> SegOutput {
    let first = &outputs[0];
    let mut probs = vec![0.0; first.probs.len()];
    for o in outputs {
        for (a, b) in probs.iter_mut().zip(&o.probs) {
            *a += b;
        }
    }
    let m = outputs.len() as f64;
    probs.iter_mut().for_each(|p| *p /= m);
    SegOutput::from_probs(first.num_classes, first.height, first.width, probs)
}

/// Mean of the member distributions; `pred` and `conf` come from the mean.
pub fn ensemble_confidence(models: &[ModelParams], image: &Image) -> Result<SegOutput> {
    let Some(first) = models.first() else {
        return Err(Error::Usage("ensemble without members".into()));
    };
    if models.iter().any(|m| m.config != first.config) {
        return Err(Error::Usage("ensemble members differ in architecture".into()));
    }
    if models.len() == 1 {
        return Ok(first.forward_image(image, None, Dropout::Off, false)?.output);
    }
    let outputs = par::try_map(models.len(), |i| {
        models[i]
            .forward_image(image, None, Dropout::Off, false)
            .map(|p| p.output)
    })?;
    Ok(average_outputs(&outputs))
}

/// Averages `samples` stochastic passes with feed-forward dropout active.
pub fn mc_dropout_confidence(model: &ModelParams, image: &Image, samples: usize, seed: u64) -> Result<SegOutput> {
    if samples == 0 {
        return Err(Error::config("samples", "must be at least 1"));
    }
    if model.config.dropout_rate == 0.0 {
        if samples > 1 {
            log::warn!("dropout rate is 0: all {samples} dropout samples are identical");
        }
        return Ok(model.forward_image(image, None, Dropout::Off, false)?.output);
    }
    let outputs = par::try_map(samples, |s| {
        let seed = seed::derive_indexed(seed, "mc-dropout", &[s as u64]);
        model
            .forward_image(image, None, Dropout::On { seed }, false)
            .map(|p| p.output)
    })?;
    Ok(average_outputs(&outputs))
}

pub struct Ensemble<'a> {
    pub models: &'a [ModelParams],
    pub label: String,
}

impl Scorer for Ensemble<'_> {
    fn name(&self) -> &str {
        &self.label
    }

    fn score(&self, image: &Image, _index: u64) -> Result<Scored> {
        ensemble_confidence(self.models, image).map(Scored::from)
    }
}

pub struct McDropout<'a> {
    pub model: &'a ModelParams,
    pub samples: usize,
    pub seed: u64,
    pub label: String,
}

impl Scorer for McDropout<'_> {
    fn name(&self) -> &str {
        &self.label
    }

    fn score(&self, image: &Image, index: u64) -> Result<Scored> {
        let seed = seed::derive_indexed(self.seed, "mc-image", &[index]);
        mc_dropout_confidence(self.model, image, self.samples, seed).map(Scored::from)
    }
}
