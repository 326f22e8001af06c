//! Ranking metrics: AUC, ROC curves, operating-point selection, and
//! sensitivity/specificity at a threshold.
//!
//! `auc` uses the rank-based Mann-Whitney statistic with average ranks
//! for ties; `pair_count_auc` is the quadratic reference definition.
//! Both accumulate dyadic rationals, so they agree bit-for-bit, not
//! just approximately.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scored set arity mismatch: {ids} ids, {scores} scores, {labels} labels")]
    ArityMismatch {
        ids: usize,
        scores: usize,
        labels: usize,
    },
    #[error("empty scored set")]
    Empty,
    #[error("non-finite score for '{id}'")]
    NonFiniteScore { id: String },
    #[error("AUC undefined: scored set contains no {0} examples")]
    SingleClass(&'static str),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

// ── Scored sets ──────────────────────────────────────────────────────

/// Scores with ground-truth labels for a set of acquisitions.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    ids: Vec<String>,
    scores: Vec<f32>,
    labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(ids: Vec<String>, scores: Vec<f32>, labels: Vec<bool>) -> Result<Self> {
        if ids.len() != scores.len() || ids.len() != labels.len() {
            return Err(EvalError::ArityMismatch {
                ids: ids.len(),
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        if ids.is_empty() {
            return Err(EvalError::Empty);
        }
        for (id, s) in ids.iter().zip(&scores) {
            if !s.is_finite() {
                return Err(EvalError::NonFiniteScore { id: id.clone() });
            }
        }
        Ok(ScoredSet { ids, scores, labels })
    }

    /// Convenience constructor with synthesized ids.
    pub fn from_scores(scores: Vec<f32>, labels: Vec<bool>) -> Result<Self> {
        let ids = (0..scores.len()).map(|i| format!("s{i}")).collect();
        ScoredSet::new(ids, scores, labels)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_neg(&self) -> usize {
        self.len() - self.n_pos()
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let (p, n) = (self.n_pos(), self.n_neg());
        if p == 0 {
            return Err(EvalError::SingleClass("positive"));
        }
        if n == 0 {
            return Err(EvalError::SingleClass("negative"));
        }
        Ok((p, n))
    }
}

// ── AUC ──────────────────────────────────────────────────────────────

/// Mann-Whitney AUC from average ranks (ties get half credit).
pub fn auc(set: &ScoredSet) -> Result<f64> {
    let (n_pos, n_neg) = set.require_both_classes()?;
    let n = set.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));

    // Sum of 1-based average ranks over positives. Ranks are integers
    // or exact halves, so the f64 accumulation is exact for any
    // realistic set size.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            if set.labels[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let numer = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(numer / (n_pos * n_neg) as f64)
}

/// Reference AUC: explicit positive/negative pair counting, half
/// credit for tied pairs. Quadratic; used as an oracle for `auc`.
pub fn pair_count_auc(set: &ScoredSet) -> Result<f64> {
    let (n_pos, n_neg) = set.require_both_classes()?;
    let mut numer = 0.0f64;
    for (i, &li) in set.labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in set.labels.iter().enumerate() {
            if lj {
                continue;
            }
            if set.scores[i] > set.scores[j] {
                numer += 1.0;
            } else if set.scores[i] == set.scores[j] {
                numer += 0.5;
            }
        }
    }
    Ok(numer / (n_pos * n_neg) as f64)
}

// ── ROC ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Decision threshold realizing this point (predict positive iff
    /// score >= threshold). The first point carries `+inf`.
    pub threshold: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Area under the curve by trapezoidal integration.
    pub fn trapezoid_area(&self) -> f64 {
        let mut area = 0.0;
        for w in self.points.windows(2) {
            area += (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0;
        }
        area
    }
}

/// ROC curve over the distinct observed scores, descending, preceded
/// by a `+inf` sentinel so the curve starts at (0, 0). Ends at (1, 1).
pub fn roc_curve(set: &ScoredSet) -> Result<RocCurve> {
    let (n_pos, n_neg) = set.require_both_classes()?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f32::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = set.scores[order[i]];
        let mut j = i;
        while j < order.len() && set.scores[order[j]] == threshold {
            if set.labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            threshold,
        });
        i = j;
    }
    Ok(RocCurve { points })
}

// ── Operating points ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f32,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Youden's J = sensitivity + specificity - 1 at the threshold.
    pub j: f64,
}

/// Choose the threshold maximizing Youden's J on `val`. Ties resolve
/// to the higher threshold (more conservative classifier); with no
/// informative threshold this is the `+inf` sentinel.
pub fn operating_point(val: &ScoredSet) -> Result<OperatingPoint> {
    let curve = roc_curve(val)?;
    let mut best: Option<OperatingPoint> = None;
    // Points arrive in descending-threshold order; strict improvement
    // keeps the earlier (higher) threshold on ties.
    for p in &curve.points {
        let j = p.tpr + (1.0 - p.fpr) - 1.0;
        if best.map_or(true, |b| j > b.j) {
            best = Some(OperatingPoint {
                threshold: p.threshold,
                sensitivity: p.tpr,
                specificity: 1.0 - p.fpr,
                j,
            });
        }
    }
    Ok(best.expect("roc curve always has the sentinel point"))
}

/// Sensitivity and specificity of "predict positive iff score >=
/// threshold" on a scored set.
pub fn sens_spec(set: &ScoredSet, threshold: f32) -> Result<(f64, f64)> {
    let (n_pos, n_neg) = set.require_both_classes()?;
    let (mut tp, mut tn) = (0usize, 0usize);
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        let predicted = s >= threshold;
        if l && predicted {
            tp += 1;
        }
        if !l && !predicted {
            tn += 1;
        }
    }
    Ok((tp as f64 / n_pos as f64, tn as f64 / n_neg as f64))
}

// ── Tests ────────────────────────────────────────────────────────────
