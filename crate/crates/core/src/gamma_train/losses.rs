//! Threshold matching and the losses of the uncertainty objective.
//!
//! Loss functions return the scalar together with `dL/dlogits` for every
//! image of the batch, laid out like [`SegOutput::logits`]. Nothing flows
//! back into the masks, the threshold or the frozen targets.

use crate::datagen::IGNORE;
use crate::error::{Error, Result};
use crate::nnet::SegOutput;

/// Lower clamp for log arguments in every cross-entropy.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub dlogits: Vec<Vec<f64>>,
}

/// Threshold, confidence mask and the consistency mask it was matched to.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaResult {
    pub gamma: f64,
    pub m_gamma: Vec<bool>,
    pub m_c: Vec<bool>,
    pub target_mean: f64,
}

impl GammaResult {
    pub fn mean_m_gamma(&self) -> f64 {
        mean_of(&self.m_gamma)
    }
}

pub(crate) fn mean_of(mask: &[bool]) -> f64 {
    if mask.is_empty() {
        0.0
    } else {
        mask.iter().filter(|m| **m).count() as f64 / mask.len() as f64
    }
}

/// `conf > gamma`, elementwise.
pub fn confidence_mask(conf: &[f64], gamma: f64) -> Vec<bool> {
    conf.iter().map(|&u| u > gamma).collect()
}

/// Pixels where the two segmentations agree on the argmax class.
pub fn hard_consistency_mask(s_theta: &SegOutput, s_phi_masked: &SegOutput) -> Result<Vec<bool>> {
    if s_theta.height != s_phi_masked.height || s_theta.width != s_phi_masked.width {
        return Err(Error::Shape(format!(
            "consistency between {}x{} and {}x{} outputs",
            s_theta.height, s_theta.width, s_phi_masked.height, s_phi_masked.width
        )));
    }
    Ok(s_theta
        .pred
        .iter()
        .zip(&s_phi_masked.pred)
        .map(|(a, b)| a == b)
        .collect())
}

/// Picks `gamma` so that the fraction of confidences strictly above it is
/// `round(target_mean * n) / n`.
///
/// With `k = round(target_mean * n)` and confidences sorted descending:
/// `k = 0` gives the maximum, `k = n` gives `min - 1`, otherwise the midpoint
/// between the `k`-th and `(k+1)`-th largest values.
pub fn compute_gamma(conf: &[f64], target_mean: f64) -> Result<f64> {
    if conf.is_empty() {
        return Err(Error::Usage("threshold matching over zero pixels".into()));
    }
    if !(0.0..=1.0).contains(&target_mean) {
        return Err(Error::Usage(format!("target mean {target_mean} outside [0, 1]")));
    }
    if conf.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numerical {
            stage: "threshold matching".into(),
            block: None,
        });
    }
    let n = conf.len();
    let k = (target_mean * n as f64).round() as usize;
    let mut sorted = conf.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    Ok(if k == 0 {
        sorted[0]
    } else if k >= n {
        sorted[n - 1] - 1.0
    } else {
        0.5 * (sorted[k - 1] + sorted[k])
    })
}

/// Matches the threshold over `conf` to the mean of `m_c`.
pub fn gamma_match(conf: &[f64], m_c: Vec<bool>) -> Result<GammaResult> {
    if conf.len() != m_c.len() {
        return Err(Error::Shape(format!(
            "{} confidences vs {} consistency entries",
            conf.len(),
            m_c.len()
        )));
    }
    let target_mean = mean_of(&m_c);
    let gamma = compute_gamma(conf, target_mean)?;
    Ok(GammaResult {
        gamma,
        m_gamma: confidence_mask(conf, gamma),
        m_c,
        target_mean,
    })
}

/// Power sharpening `p_i^(1/T) / sum_j p_j^(1/T)` of one distribution.
pub fn sharpen(probs: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config("temperature", "must be positive"));
    }
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::Data("sharpening input is not a probability vector".into()));
    }
    let max = probs.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::Numerical {
            stage: "sharpening an all-zero distribution".into(),
            block: None,
        });
    }
    let ln_max = max.ln();
    let mut out: Vec<f64> = probs
        .iter()
        .map(|&p| if p > 0.0 { ((p.ln() - ln_max) / temperature).exp() } else { 0.0 })
        .collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    Ok(out)
}

/// Sharpens every pixel of a class-major probability map.
pub fn sharpen_map(probs: &[f64], num_classes: usize, temperature: f64) -> Result<Vec<f64>> {
    let hw = probs.len() / num_classes;
    let mut out = vec![0.0; probs.len()];
    let mut buf = vec![0.0; num_classes];
    for i in 0..hw {
        for (k, b) in buf.iter_mut().enumerate() {
            *b = probs[k * hw + i];
        }
        for (k, v) in sharpen(&buf, temperature)?.into_iter().enumerate() {
            out[k * hw + i] = v;
        }
    }
    Ok(out)
}

/// Cross-entropy `-sum_k t_k ln max(q_k, LOG_CLAMP)` at one pixel, adding
/// `scale * dH/dlogits` into `grad`.
fn soft_cross_entropy(
    target: impl Fn(usize) -> f64,
    pred: &SegOutput,
    pixel: usize,
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let hw = pred.pixels();
    let k = pred.num_classes;
    let mut h = 0.0;
    let mut active_mass = 0.0;
    for c in 0..k {
        let q = pred.probs[c * hw + pixel];
        let t = target(c);
        h -= t * q.max(LOG_CLAMP).ln();
        if q >= LOG_CLAMP {
            active_mass += t;
            grad[c * hw + pixel] -= scale * t;
        }
    }
    if active_mass != 0.0 {
        for c in 0..k {
            grad[c * hw + pixel] += scale * active_mass * pred.probs[c * hw + pixel];
        }
    }
    h
}

/// Consistency loss over a batch, normalised by the number of selected
/// pixels in the whole batch. An empty selection gives zero loss and zero
/// gradient.
pub fn masked_consistency_loss_batch(
    s_theta: &[&SegOutput],
    s_phi_masked: &[&SegOutput],
    m_gamma: &[&[bool]],
    temperature: f64,
) -> Result<LossGrad> {
    if s_theta.len() != s_phi_masked.len() || s_theta.len() != m_gamma.len() {
        return Err(Error::Shape("batch sizes of consistency inputs differ".into()));
    }
    for ((t, p), m) in s_theta.iter().zip(s_phi_masked).zip(m_gamma) {
        if t.height != p.height || t.width != p.width || t.num_classes != p.num_classes || m.len() != p.pixels() {
            return Err(Error::Shape("consistency inputs have mismatched shapes".into()));
        }
    }
    let selected: usize = m_gamma.iter().map(|m| m.iter().filter(|v| **v).count()).sum();
    let mut dlogits: Vec<Vec<f64>> = s_phi_masked.iter().map(|p| vec![0.0; p.logits.len()]).collect();
    if selected == 0 {
        return Ok(LossGrad { value: 0.0, dlogits });
    }
    let scale = 1.0 / selected as f64;
    let mut total = 0.0;
    for (((t, p), m), g) in s_theta.iter().zip(s_phi_masked).zip(m_gamma).zip(dlogits.iter_mut()) {
        let sharp = sharpen_map(&t.probs, t.num_classes, temperature)?;
        let hw = p.pixels();
        for i in (0..hw).filter(|&i| m[i]) {
            total += soft_cross_entropy(|c| sharp[c * hw + i], p, i, scale, g);
        }
    }
    Ok(LossGrad {
        value: total * scale,
        dlogits,
    })
}

pub fn masked_consistency_loss(
    s_theta: &SegOutput,
    s_phi_masked: &SegOutput,
    m_gamma: &[bool],
    temperature: f64,
) -> Result<LossGrad> {
    masked_consistency_loss_batch(&[s_theta], &[s_phi_masked], &[m_gamma], temperature)
}

/// Mean per-pixel cross-entropy over non-[`IGNORE`] pixels of the batch.
pub fn supervised_loss_batch(outputs: &[&SegOutput], labels: &[&[u8]]) -> Result<LossGrad> {
    if outputs.len() != labels.len() {
        return Err(Error::Shape("batch sizes of outputs and labels differ".into()));
    }
    let mut counted = 0usize;
    for (o, l) in outputs.iter().zip(labels) {
        if l.len() != o.pixels() {
            return Err(Error::Shape(format!("{} labels for {} pixels", l.len(), o.pixels())));
        }
        for &y in l.iter() {
            if y == IGNORE {
                continue;
            }
            if y as usize >= o.num_classes {
                return Err(Error::Data(format!("label {y} with {} classes", o.num_classes)));
            }
            counted += 1;
        }
    }
    let mut dlogits: Vec<Vec<f64>> = outputs.iter().map(|o| vec![0.0; o.logits.len()]).collect();
    if counted == 0 {
        return Ok(LossGrad { value: 0.0, dlogits });
    }
    let scale = 1.0 / counted as f64;
    let mut total = 0.0;
    for ((o, l), g) in outputs.iter().zip(labels).zip(dlogits.iter_mut()) {
        for (i, &y) in l.iter().enumerate().filter(|(_, y)| **y != IGNORE) {
            total += soft_cross_entropy(|c| if c == y as usize { 1.0 } else { 0.0 }, o, i, scale, g);
        }
    }
    Ok(LossGrad {
        value: total * scale,
        dlogits,
    })
}

pub fn supervised_loss(output: &SegOutput, labels: &[u8]) -> Result<LossGrad> {
    supervised_loss_batch(&[output], &[labels])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class_output(pixels: &[[f64; 2]]) -> SegOutput {
        let n = pixels.len();
        let mut probs = vec![0.0; 2 * n];
        for (i, p) in pixels.iter().enumerate() {
            probs[i] = p[0];
            probs[n + i] = p[1];
        }
        SegOutput::from_probs(2, 1, n, probs)
    }

    #[test]
    fn confidence_mask_is_strict() {
        assert_eq!(confidence_mask(&[0.9, 0.5, 0.2], 0.5), vec![true, false, false]);
        assert!(confidence_mask(&[0.9, 0.5, 0.2], -1.0).iter().all(|&m| m));
        assert!(confidence_mask(&[0.9, 0.5, 1.0], 1.0).iter().all(|&m| !m));
    }

    #[test]
    fn consistency_mask_compares_argmax() {
        let a = SegOutput::from_logits(3, 1, 2, vec![0.0, 0.0, 5.0, 5.0, 0.0, 0.0]);
        let b = SegOutput::from_logits(3, 1, 2, vec![5.0, 0.0, 0.0, 5.0, 0.0, 0.0]);
        assert_eq!(a.pred, vec![1, 1]);
        assert_eq!(b.pred, vec![0, 1]);
        assert_eq!(hard_consistency_mask(&a, &b).unwrap(), vec![false, true]);
        assert!(hard_consistency_mask(&a, &a).unwrap().iter().all(|&m| m));
        let c = SegOutput::from_logits(3, 2, 1, vec![0.0; 6]);
        assert!(hard_consistency_mask(&a, &c).is_err());
    }

    #[test]
    fn gamma_examples() {
        let g = compute_gamma(&[0.2, 0.4, 0.6, 0.8], 1.0).unwrap();
        assert!((g + 0.8).abs() < 1e-15);
        assert!(confidence_mask(&[0.2, 0.4, 0.6, 0.8], g).iter().all(|&m| m));
        let conf = [0.9, 0.7, 0.5, 0.3];
        let g = compute_gamma(&conf, 0.5).unwrap();
        assert!((g - 0.6).abs() < 1e-15);
        assert_eq!(confidence_mask(&conf, g), vec![true, true, false, false]);
        assert_eq!(compute_gamma(&conf, 0.0).unwrap(), 0.9);
        assert!(matches!(compute_gamma(&[], 0.5), Err(Error::Usage(_))));
    }

    #[test]
    fn sharpen_examples() {
        let s = sharpen(&[0.8, 0.2], 0.5).unwrap();
        assert!((s[0] - 0.64 / 0.68).abs() < 1e-12);
        assert!((s[1] - 0.04 / 0.68).abs() < 1e-12);
        assert_eq!(sharpen(&[0.0, 1.0, 0.0], 0.3).unwrap(), vec![0.0, 1.0, 0.0]);
        let u = sharpen(&[0.25; 4], 0.5).unwrap();
        assert!(u.iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!(matches!(sharpen(&[0.0, 0.0], 0.5), Err(Error::Numerical { .. })));
        assert!(sharpen(&[0.5, 0.5], 0.0).is_err());
    }

    #[test]
    fn consistency_loss_examples() {
        let t = two_class_output(&[[0.8, 0.2]]);
        let p = two_class_output(&[[0.6, 0.4]]);
        let l = masked_consistency_loss(&t, &p, &[false], 0.5).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.dlogits[0].iter().all(|&g| g == 0.0));
        let l = masked_consistency_loss(&t, &p, &[true], 0.5).unwrap();
        let want = -(0.64 / 0.68 * 0.6f64.ln() + 0.04 / 0.68 * 0.4f64.ln());
        assert!((l.value - want).abs() < 1e-12);
        assert!((l.value - 0.5347).abs() < 1e-3);

        let one_hot = two_class_output(&[[1.0, 0.0]]);
        let l = masked_consistency_loss(&one_hot, &one_hot, &[true], 0.5).unwrap();
        assert!(l.value.abs() < 1e-15);
    }

    #[test]
    fn supervised_loss_examples() {
        let uniform = SegOutput::from_logits(6, 2, 2, vec![0.0; 24]);
        let l = supervised_loss(&uniform, &[0, 1, 2, 5]).unwrap();
        assert!((l.value - 6f64.ln()).abs() < 1e-6);
        let l = supervised_loss(&uniform, &[IGNORE; 4]).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(matches!(supervised_loss(&uniform, &[0, 1, 6, 0]), Err(Error::Data(_))));
        let perfect = two_class_output(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!(supervised_loss(&perfect, &[0, 1]).unwrap().value.abs() < 1e-15);
    }

    #[test]
    fn loss_gradients_match_differences_in_logits() {
        let logits = vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.4, 1.1, 0.0, -2.0];
        let target = SegOutput::from_logits(3, 1, 3, vec![1.0, 0.0, 2.0, 0.0, 1.5, 0.3, -1.0, 0.2, 0.1]);
        let mask = [true, false, true];
        let labels = [2u8, IGNORE, 0];
        let f = |z: &[f64]| {
            let out = SegOutput::from_logits(3, 1, 3, z.to_vec());
            let lc = masked_consistency_loss(&target, &out, &mask, 0.5).unwrap().value;
            let ls = supervised_loss(&out, &labels).unwrap().value;
            (lc, ls)
        };
        let out = SegOutput::from_logits(3, 1, 3, logits.clone());
        let gc = masked_consistency_loss(&target, &out, &mask, 0.5).unwrap().dlogits.remove(0);
        let gs = supervised_loss(&out, &labels).unwrap().dlogits.remove(0);
        for j in 0..logits.len() {
            let mut plus = logits.clone();
            plus[j] += 1e-6;
            let mut minus = logits.clone();
            minus[j] -= 1e-6;
            let (cp, sp) = f(&plus);
            let (cm, sm) = f(&minus);
            assert!(((cp - cm) / 2e-6 - gc[j]).abs() < 1e-8);
            assert!(((sp - sm) / 2e-6 - gs[j]).abs() < 1e-8);
        }
    }
}
