//! Biometric evaluation metrics: confusion counts, ACC, HTER, ROC, AUC and EER.
//!
//! Scores are oriented so that a higher value means "more bonafide". Labels are
//! `1` for bonafide and `0` for attack.

use std::cmp::Ordering;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("score and label lists differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("label {0} is neither 0 nor 1")]
    BadLabel(u8),
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
    #[error("metric needs both classes present")]
    OneClassOnly,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const BONAFIDE: u8 = 1;
pub const ATTACK: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(MetricsError::LengthMismatch {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l > 1) {
            return Err(MetricsError::BadLabel(l));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(MetricsError::NonFiniteScore(i));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_bonafide(&self) -> usize {
        self.labels.iter().filter(|&&l| l == BONAFIDE).count()
    }

    pub fn n_attack(&self) -> usize {
        self.len() - self.n_bonafide()
    }

    fn require_both(&self) -> Result<(usize, usize)> {
        let (p, n) = (self.n_bonafide(), self.n_attack());
        if p == 0 || n == 0 {
            return Err(MetricsError::OneClassOnly);
        }
        Ok((p, n))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Counts of the predictor that always answers the opposite.
    pub fn complement(&self) -> Self {
        Self {
            tp: self.fn_,
            tn: self.fp,
            fp: self.tn,
            fn_: self.tp,
        }
    }
}

/// Predicts bonafide iff `score >= threshold`.
pub fn confusion_at(s: &ScoreSet, threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&score, &label) in s.scores.iter().zip(&s.labels) {
        match (score >= threshold, label == BONAFIDE) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Fraction of correctly classified samples; 0 for an empty set.
pub fn acc(c: &ConfusionCounts) -> f64 {
    let n = c.total();
    if n == 0 {
        return 0.0;
    }
    (c.tp + c.tn) as f64 / n as f64
}

/// Mean of the false acceptance and false rejection rates.
pub fn hter(c: &ConfusionCounts) -> Result<f64> {
    let negatives = c.tn + c.fp;
    let positives = c.tp + c.fn_;
    if negatives == 0 || positives == 0 {
        return Err(MetricsError::OneClassOnly);
    }
    let far = c.fp as f64 / negatives as f64;
    let frr = c.fn_ as f64 / positives as f64;
    Ok(0.5 * (far + frr))
}

/// ROC points ordered by decreasing threshold, starting at (0, 0) and ending at (1, 1).
///
/// `thresholds[i]` is the score at which point `i` is reached; the first entry is
/// `+inf`. Equal scores form one step, so a tie group produces a diagonal segment.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

impl RocCurve {
    pub fn len(&self) -> usize {
        self.fpr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fpr.is_empty()
    }

    pub fn fnr(&self, i: usize) -> f64 {
        1.0 - self.tpr[i]
    }
}

pub fn roc_curve(s: &ScoreSet) -> Result<RocCurve> {
    let (p, n) = s.require_both()?;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| {
        s.scores[b]
            .partial_cmp(&s.scores[a])
            .unwrap_or(Ordering::Equal)
    });

    let mut roc = RocCurve {
        thresholds: vec![f64::INFINITY],
        fpr: vec![0.0],
        tpr: vec![0.0],
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let score = s.scores[order[i]];
        while i < order.len() && s.scores[order[i]] == score {
            if s.labels[order[i]] == BONAFIDE {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.thresholds.push(score);
        roc.fpr.push(fp as f64 / n as f64);
        roc.tpr.push(tp as f64 / p as f64);
    }
    Ok(roc)
}

/// Trapezoidal area under the ROC curve.
pub fn auc(s: &ScoreSet) -> Result<f64> {
    let roc = roc_curve(s)?;
    let area = roc
        .fpr
        .windows(2)
        .zip(roc.tpr.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum();
    Ok(area)
}

/// Operating point where the false positive and false negative rates meet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerPoint {
    pub eer: f64,
    /// Score of the ROC vertex closest to the crossing, usable as a decision threshold.
    pub threshold: f64,
}

/// Equal error rate, interpolated linearly along the ROC segment that crosses FPR = FNR.
pub fn eer(s: &ScoreSet) -> Result<f64> {
    eer_point(s).map(|p| p.eer)
}

pub fn eer_point(s: &ScoreSet) -> Result<EerPoint> {
    let roc = roc_curve(s)?;
    let gap = |i: usize| roc.fpr[i] - roc.fnr(i);
    // gap(0) = -1 and gap(last) = 1, and gap never decreases along the curve.
    for i in 0..roc.len() - 1 {
        let (g0, g1) = (gap(i), gap(i + 1));
        if g0 <= 0.0 && g1 >= 0.0 {
            let t = if g1 > g0 { -g0 / (g1 - g0) } else { 0.0 };
            let eer = roc.fpr[i] + t * (roc.fpr[i + 1] - roc.fpr[i]);
            let nearest = if t <= 0.5 { i } else { i + 1 };
            let threshold = if nearest == 0 {
                roc.thresholds[1]
            } else {
                roc.thresholds[nearest]
            };
            return Ok(EerPoint { eer, threshold });
        }
    }
    unreachable!("ROC curve always crosses FPR = FNR")
}

/// Summary of one head on one score set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadMetrics {
    pub auc: f64,
    pub eer: f64,
    pub hter: f64,
    pub acc: f64,
}

pub fn summarize(s: &ScoreSet, threshold: f64) -> Result<HeadMetrics> {
    let c = confusion_at(s, threshold);
    Ok(HeadMetrics {
        auc: auc(s)?,
        eer: eer(s)?,
        hter: hter(&c)?,
        acc: acc(&c),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(scores: &[f64], labels: &[u8]) -> ScoreSet {
        ScoreSet::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            ScoreSet::new(vec![0.1], vec![]),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert_eq!(
            ScoreSet::new(vec![0.1], vec![2]),
            Err(MetricsError::BadLabel(2))
        );
        assert_eq!(
            auc(&set(&[0.1, 0.2], &[1, 1])),
            Err(MetricsError::OneClassOnly)
        );
    }

    #[test]
    fn thresholds_at_extremes() {
        let s = set(&[0.1, 0.4, 0.6, 0.9], &[0, 1, 0, 1]);
        let low = confusion_at(&s, -1.0);
        assert_eq!((low.fp, low.fn_), (2, 0));
        let high = confusion_at(&s, 2.0);
        assert_eq!((high.fp, high.fn_), (0, 2));
    }

    #[test]
    fn interpolated_eer_has_equal_rates() {
        let s = set(
            &[0.1, 0.2, 0.3, 0.35, 0.5, 0.8, 0.9],
            &[0, 1, 0, 0, 1, 0, 1],
        );
        let e = eer(&s).unwrap();
        assert!((0.0..=1.0).contains(&e));
    }
}
