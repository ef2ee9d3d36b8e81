//! Misclassification-detection metrics over pooled pixels.
//!
//! Positives are accurate pixels; a pixel counts as certain at threshold `t`
//! when its score is strictly greater than `t`.

use crate::baselines::Scorer;
use crate::datagen::{LabeledSample, IGNORE};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalRecord {
    pub score: Vec<f64>,
    pub accurate: Vec<bool>,
    pub valid: Vec<bool>,
}

impl EvalRecord {
    /// Ignored (out-of-distribution) pixels are kept and count as inaccurate.
    pub fn from_prediction(score: Vec<f64>, pred: &[u8], labels: &[u8]) -> Result<Self> {
        if score.len() != pred.len() || pred.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} scores, {} predictions, {} labels",
                score.len(),
                pred.len(),
                labels.len()
            )));
        }
        Ok(EvalRecord {
            accurate: pred.iter().zip(labels).map(|(&p, &y)| y != IGNORE && p == y).collect(),
            valid: vec![true; score.len()],
            score,
        })
    }

    pub fn extend(&mut self, other: EvalRecord) {
        self.score.extend(other.score);
        self.accurate.extend(other.accurate);
        self.valid.extend(other.valid);
    }

    fn check(&self) -> Result<()> {
        if self.score.len() != self.accurate.len() || self.score.len() != self.valid.len() {
            return Err(Error::Shape("evaluation record fields differ in length".into()));
        }
        if self.score.iter().zip(&self.valid).any(|(s, &v)| v && s.is_nan()) {
            return Err(Error::Metric("NaN score".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
    /// Accurate and certain pixels over all valid pixels.
    pub pac: f64,
}

/// PR curve with decreasing thresholds: one point per distinct score below
/// the maximum, then the all-certain endpoint at `min - 1`.
pub fn pr_curve(record: &EvalRecord) -> Result<Vec<CurvePoint>> {
    record.check()?;
    let mut pixels: Vec<(f64, bool)> = record
        .score
        .iter()
        .zip(&record.accurate)
        .zip(&record.valid)
        .filter(|(_, &v)| v)
        .map(|((&s, &a), _)| (s, a))
        .collect();
    let positives = pixels.iter().filter(|p| p.1).count();
    if positives == 0 {
        return Err(Error::Metric("no accurate pixels to rank".into()));
    }
    let n = pixels.len() as f64;
    let p = positives as f64;
    pixels.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));

    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pixels.len() {
        let s = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == s {
            if pixels[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let threshold = if i < pixels.len() { pixels[i].0 } else { s - 1.0 };
        curve.push(CurvePoint {
            threshold,
            recall: tp as f64 / p,
            precision: tp as f64 / (tp + fp) as f64,
            pac: tp as f64 / n,
        });
    }
    Ok(curve)
}

/// Step integration `sum (R_i - R_{i-1}) P_i` with `R_0 = 0`.
pub fn aupr(curve: &[CurvePoint]) -> f64 {
    let mut prev = 0.0;
    let mut area = 0.0;
    for pt in curve {
        area += (pt.recall - prev) * pt.precision;
        prev = pt.recall;
    }
    area
}

pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

/// Maximum F-beta over the curve; ties go to the lowest threshold.
pub fn max_f_beta_with_pac(curve: &[CurvePoint], beta: f64) -> Result<(f64, f64, f64)> {
    let mut best: Option<(f64, f64, f64)> = None;
    for pt in curve {
        let f = f_beta(pt.precision, pt.recall, beta);
        if best.is_none_or(|(bf, _, _)| f >= bf) {
            best = Some((f, pt.pac, pt.threshold));
        }
    }
    best.ok_or_else(|| Error::Metric("empty precision-recall curve".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub domain: String,
    pub aupr: f64,
    pub max_f_half: f64,
    pub pac_at_max: f64,
    pub threshold_at_max: f64,
    pub accuracy: f64,
    pub curve: Vec<CurvePoint>,
}

impl MetricsReport {
    pub fn from_record(method: &str, domain: &str, record: &EvalRecord) -> Result<Self> {
        let curve = pr_curve(record)?;
        let (max_f_half, pac_at_max, threshold_at_max) = max_f_beta_with_pac(&curve, 0.5)?;
        let valid = record.valid.iter().filter(|v| **v).count();
        let accurate = record.accurate.iter().zip(&record.valid).filter(|(a, v)| **a && **v).count();
        Ok(MetricsReport {
            method: method.to_string(),
            domain: domain.to_string(),
            aupr: aupr(&curve),
            max_f_half,
            pac_at_max,
            threshold_at_max,
            accuracy: accurate as f64 / valid as f64,
            curve,
        })
    }

    pub const CSV_HEADER: &'static str = "method,domain,aupr,max_f_half,pac,threshold";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            self.method, self.domain, self.aupr, self.max_f_half, self.pac_at_max, self.threshold_at_max
        )
    }

    /// `threshold,recall,precision,f_half,pac` for each curve point.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("threshold,recall,precision,f_half,pac\n");
        for pt in &self.curve {
            out.push_str(&format!(
                "{:.9},{:.9},{:.9},{:.9},{:.9}\n",
                pt.threshold,
                pt.recall,
                pt.precision,
                f_beta(pt.precision, pt.recall, 0.5),
                pt.pac
            ));
        }
        out
    }
}

/// Scores every image, pools the pixels and computes the report.
pub fn evaluate_model(scorer: &dyn Scorer, test: &[LabeledSample], domain: &str) -> Result<MetricsReport> {
    let records = par::try_map(test.len(), |i| {
        let s = scorer.score(&test[i].image, i as u64)?;
        EvalRecord::from_prediction(s.score, &s.pred, &test[i].labels)
    })?;
    let mut pooled = EvalRecord::default();
    for r in records {
        pooled.extend(r);
    }
    MetricsReport::from_record(scorer.name(), domain, &pooled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(score: &[f64], acc: &[bool]) -> EvalRecord {
        EvalRecord {
            score: score.to_vec(),
            accurate: acc.to_vec(),
            valid: vec![true; score.len()],
        }
    }

    #[test]
    fn three_pixel_example() {
        let c = pr_curve(&rec(&[0.9, 0.8, 0.4], &[true, false, true])).unwrap();
        let pts: Vec<(f64, f64)> = c.iter().map(|p| (p.recall, p.precision)).collect();
        assert_eq!(pts, vec![(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)]);
        assert!((aupr(&c) - 0.833_333_333_333).abs() < 1e-9);
        // F0.5 at (R, P) = (0.5, 1) is 0.8333, above the endpoint's 0.7143.
        let (f, pac, t) = max_f_beta_with_pac(&c, 0.5).unwrap();
        assert!((f - 1.25 * 0.5 / 0.75).abs() < 1e-12);
        assert!((pac - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(t, 0.8);
    }

    #[test]
    fn f_beta_examples() {
        assert!((f_beta(0.3, 0.3, 0.5) - 0.3).abs() < 1e-15);
        assert!((f_beta(2.0 / 3.0, 1.0, 0.5) - 0.7143).abs() < 1e-4);
        assert_eq!(f_beta(1.0, 0.0, 0.5), 0.0);
        assert_eq!(f_beta(0.0, 0.0, 0.5), 0.0);
    }

    #[test]
    fn closed_forms() {
        let perfect = pr_curve(&rec(&[0.9, 0.8, 0.1, 0.0], &[true, true, false, false])).unwrap();
        assert_eq!(aupr(&perfect), 1.0);
        assert!(perfect.iter().any(|p| p.precision == 1.0 && p.recall == 1.0));

        let m = 7;
        let mut score: Vec<f64> = (0..m).map(|i| 1.0 - i as f64 / 10.0).collect();
        let mut acc = vec![false; m];
        acc[m - 1] = true;
        assert!((aupr(&pr_curve(&rec(&score, &acc)).unwrap()) - 1.0 / m as f64).abs() < 1e-12);

        score.iter_mut().for_each(|s| *s = 0.5);
        acc[0] = true;
        let c = pr_curve(&rec(&score, &acc)).unwrap();
        assert!((aupr(&c) - 2.0 / 7.0).abs() < 1e-12);

        let all = pr_curve(&rec(&[0.3, 0.2, 0.1], &[true; 3])).unwrap();
        assert!(all.iter().all(|p| p.precision == 1.0));

        assert!(matches!(pr_curve(&rec(&[0.3, 0.2], &[false; 2])), Err(Error::Metric(_))));
    }

    #[test]
    fn invalid_pixels_are_excluded() {
        let mut r = rec(&[0.9, 0.8, 0.4, 0.95], &[true, false, true, false]);
        r.valid[3] = false;
        let with = pr_curve(&r).unwrap();
        let without = pr_curve(&rec(&[0.9, 0.8, 0.4], &[true, false, true])).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn ignored_labels_count_as_inaccurate() {
        let r = EvalRecord::from_prediction(vec![0.5; 3], &[1, 2, 2], &[1, IGNORE, 0]).unwrap();
        assert_eq!(r.accurate, vec![true, false, false]);
        assert_eq!(r.valid, vec![true; 3]);
    }

    #[test]
    fn ties_pick_the_lowest_threshold() {
        // Both the threshold above the inaccurate block and the endpoint give
        // precision 1 and recall 1.
        let c = pr_curve(&rec(&[0.9, 0.9, 0.5], &[true, true, true])).unwrap();
        let (f, _, t) = max_f_beta_with_pac(&c, 0.5).unwrap();
        assert_eq!(f, 1.0);
        assert_eq!(t, c.last().unwrap().threshold);
    }
}
