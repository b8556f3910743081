//! Average-precision metrics for multi-label frame scoring.
//!
//! Per-class AP uses the precision-at-each-positive formulation over frames,
//! with a deterministic descending-score, ascending-index tie-break. Class
//! means skip classes without positives and report them. Association scores
//! for (instrument, verb) and (instrument, target) pairs come from
//! max-projection of triplet scores; pairs no valid triplet covers are
//! excluded from averaging.

use serde::{Deserialize, Serialize};

use crate::synth::LabelSpace;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Per-class AP values (`None` where a class has no positives) plus their mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApResult {
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with at least one positive; `None` if none qualify.
    pub mean: Option<f64>,
    /// Indices of classes excluded for having no positive labels.
    pub excluded: Vec<usize>,
}

/// Frame order for one class: descending score, ties by ascending index.
fn ranked_frames(scores: &Tensor, class: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.rows()).collect();
    order.sort_by(|&a, &b| {
        scores
            .at(b, class)
            .partial_cmp(&scores.at(a, class))
            .expect("scores must be finite")
            .then(a.cmp(&b))
    });
    order
}

/// Mean average precision over classes, frames pooled across videos.
pub fn average_precision(scores: &Tensor, labels: &Tensor) -> Result<ApResult> {
    if scores.shape() != labels.shape() {
        return Err(Error::Shape(format!(
            "scores {:?} vs labels {:?}",
            scores.shape(),
            labels.shape()
        )));
    }
    if labels.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Config("labels must be binary 0/1".into()));
    }
    let (f, g) = (scores.rows(), scores.cols());
    let mut per_class = Vec::with_capacity(g);
    let mut excluded = Vec::new();
    for class in 0..g {
        let positives = (0..f).filter(|&i| labels.at(i, class) == 1.0).count();
        if positives == 0 {
            per_class.push(None);
            excluded.push(class);
            continue;
        }
        let order = ranked_frames(scores, class);
        let mut hits = 0usize;
        let mut total = 0.0;
        for (rank, &frame) in order.iter().enumerate() {
            if labels.at(frame, class) == 1.0 {
                hits += 1;
                total += hits as f64 / (rank + 1) as f64;
            }
        }
        per_class.push(Some(total / positives as f64));
    }
    let valid: Vec<f64> = per_class.iter().filter_map(|v| *v).collect();
    let mean = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
    Ok(ApResult {
        per_class,
        mean,
        excluded,
    })
}

/// Restrict scores and labels to one class subset, as `(scores, labels)`
/// column pairs. Used for head/tail splits of a report.
pub fn column_subset(matrix: &Tensor, keep: &[usize]) -> Tensor {
    let rows = matrix.rows();
    let mut out = Tensor::zeros(&[rows, keep.len()]);
    for r in 0..rows {
        for (j, &c) in keep.iter().enumerate() {
            out.set(r, j, matrix.at(r, c));
        }
    }
    out
}

/// Component and association scores derived from triplet scores by
/// max-projection over the valid triplets containing each component/pair.
#[derive(Debug, Clone)]
pub struct ProjectedScores {
    pub instrument: Tensor,
    pub verb: Tensor,
    pub target: Tensor,
    /// `F x (n_instruments * n_verbs)`, only valid pairs are meaningful.
    pub iv: Tensor,
    /// `F x (n_instruments * n_targets)`, only valid pairs are meaningful.
    pub it: Tensor,
    pub iv_valid: Vec<bool>,
    pub it_valid: Vec<bool>,
}

/// Max-project triplet scores onto components and pairs.
pub fn project_predictions(triplet_scores: &Tensor, space: &LabelSpace) -> Result<ProjectedScores> {
    if triplet_scores.cols() != space.len() {
        return Err(Error::Shape(format!(
            "scores have {} classes, label space has {}",
            triplet_scores.cols(),
            space.len()
        )));
    }
    let f = triplet_scores.rows();
    let (ni, nv, nt) = (space.n_instruments, space.n_verbs, space.n_targets);
    let mut instrument = Tensor::zeros(&[f, ni]);
    let mut verb = Tensor::zeros(&[f, nv]);
    let mut target = Tensor::zeros(&[f, nt]);
    let mut iv = Tensor::zeros(&[f, ni * nv]);
    let mut it = Tensor::zeros(&[f, ni * nt]);
    let mut iv_valid = vec![false; ni * nv];
    let mut it_valid = vec![false; ni * nt];
    for (g, &(i, v, t)) in space.triplets.iter().enumerate() {
        iv_valid[i * nv + v] = true;
        it_valid[i * nt + t] = true;
        for row in 0..f {
            let s = triplet_scores.at(row, g);
            if s > instrument.at(row, i) {
                instrument.set(row, i, s);
            }
            if s > verb.at(row, v) {
                verb.set(row, v, s);
            }
            if s > target.at(row, t) {
                target.set(row, t, s);
            }
            if s > iv.at(row, i * nv + v) {
                iv.set(row, i * nv + v, s);
            }
            if s > it.at(row, i * nt + t) {
                it.set(row, i * nt + t, s);
            }
        }
    }
    Ok(ProjectedScores {
        instrument,
        verb,
        target,
        iv,
        it,
        iv_valid,
        it_valid,
    })
}

/// OR-project triplet labels onto `(instrument, verb)` and
/// `(instrument, target)` pair label matrices.
pub fn project_pair_labels(labels_ivt: &Tensor, space: &LabelSpace) -> Result<(Tensor, Tensor)> {
    if labels_ivt.cols() != space.len() {
        return Err(Error::Shape(format!(
            "labels have {} classes, label space has {}",
            labels_ivt.cols(),
            space.len()
        )));
    }
    let f = labels_ivt.rows();
    let (ni, nv, nt) = (space.n_instruments, space.n_verbs, space.n_targets);
    let mut iv = Tensor::zeros(&[f, ni * nv]);
    let mut it = Tensor::zeros(&[f, ni * nt]);
    for (g, &(i, v, t)) in space.triplets.iter().enumerate() {
        for row in 0..f {
            if labels_ivt.at(row, g) == 1.0 {
                iv.set(row, i * nv + v, 1.0);
                it.set(row, i * nt + t, 1.0);
            }
        }
    }
    Ok((iv, it))
}

/// AP restricted to the valid pair columns.
pub fn pair_average_precision(
    scores: &Tensor,
    labels: &Tensor,
    valid: &[bool],
) -> Result<ApResult> {
    let keep: Vec<usize> = valid
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| v.then_some(i))
        .collect();
    average_precision(&column_subset(scores, &keep), &column_subset(labels, &keep))
}

/// The full metric family of one evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApReport {
    #[serde(rename = "AP_I")]
    pub ap_i: Option<f64>,
    #[serde(rename = "AP_V")]
    pub ap_v: Option<f64>,
    #[serde(rename = "AP_T")]
    pub ap_t: Option<f64>,
    #[serde(rename = "AP_IV")]
    pub ap_iv: Option<f64>,
    #[serde(rename = "AP_IT")]
    pub ap_it: Option<f64>,
    #[serde(rename = "AP_IVT")]
    pub ap_ivt: Option<f64>,
    pub per_class_ivt: Vec<Option<f64>>,
    pub excluded_ivt: Vec<usize>,
}
