//! Multi-label classification losses and the gradient-coordination machinery.
//!
//! Binary cross-entropy is kept in its decomposed positive/negative form so
//! the per-term gradients can be masked selectively: positive terms of head
//! categories and negative terms that head-class instances contribute to tail
//! categories are each dropped with probability `gamma`. All values use the
//! stable softplus identities, and every gradient here is exact.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{sigmoid_scalar, softplus, Tensor};
use crate::{Error, Result};

/// Frequency group of a category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Head,
    Medium,
    Tail,
}

/// Per-category head/medium/tail assignment derived from training counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Taxonomy {
    groups: Vec<Group>,
    counts: Vec<u64>,
    head_min: u64,
    tail_max: u64,
}

impl Taxonomy {
    /// Partition categories: head iff `count > head_min`, tail iff
    /// `count < tail_max`, medium otherwise.
    pub fn build(counts: &[u64], head_min: u64, tail_max: u64) -> Result<Self> {
        if head_min <= tail_max {
            return Err(Error::Config(format!(
                "taxonomy thresholds overlap: head_min {head_min} <= tail_max {tail_max}"
            )));
        }
        let groups = counts
            .iter()
            .map(|&c| {
                if c > head_min {
                    Group::Head
                } else if c < tail_max {
                    Group::Tail
                } else {
                    Group::Medium
                }
            })
            .collect();
        Ok(Self {
            groups,
            counts: counts.to_vec(),
            head_min,
            tail_max,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, g: usize) -> Group {
        self.groups[g]
    }

    pub fn is_head(&self, g: usize) -> bool {
        self.groups[g] == Group::Head
    }

    pub fn is_tail(&self, g: usize) -> bool {
        self.groups[g] == Group::Tail
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// `(head, medium, tail)` category counts.
    pub fn group_sizes(&self) -> (usize, usize, usize) {
        let mut sizes = (0, 0, 0);
        for g in &self.groups {
            match g {
                Group::Head => sizes.0 += 1,
                Group::Medium => sizes.1 += 1,
                Group::Tail => sizes.2 += 1,
            }
        }
        sizes
    }
}

/// How a multi-label instance is classified as head-class for masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadRule {
    /// Any positive head label makes the instance head-class.
    #[default]
    Any,
    /// Strictly more positive head labels than positive non-head labels.
    Majority,
}

/// True iff the instance counts as head-class under `rule`.
pub fn instance_head_membership(labels_row: &[f64], tax: &Taxonomy, rule: HeadRule) -> bool {
    let mut head = 0usize;
    let mut other = 0usize;
    for (g, &y) in labels_row.iter().enumerate() {
        if y == 1.0 {
            if tax.is_head(g) {
                head += 1;
            } else {
                other += 1;
            }
        }
    }
    match rule {
        HeadRule::Any => head > 0,
        HeadRule::Majority => head > other,
    }
}

/// Masking configuration for the coordinated-gradient loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CglConfig {
    /// Probability of dropping a maskable loss term.
    pub gamma: f64,
    #[serde(default)]
    pub head_rule: HeadRule,
}

impl CglConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} not in [0,1]", self.gamma)));
        }
        Ok(())
    }
}

/// Realized Bernoulli masks for one batch.
#[derive(Debug, Clone)]
pub struct MaskSample {
    /// Keep-mask on positive terms; zero only on head columns.
    pub h_plus: Tensor,
    /// Keep-mask on negative terms; zero only on (head-instance, tail-column) cells.
    pub h_minus: Tensor,
    pub instance_is_head: Vec<bool>,
}

impl MaskSample {
    /// All-ones masks (no dropping), for tests and the gamma = 0 case.
    pub fn ones(n: usize, g: usize) -> Self {
        Self {
            h_plus: Tensor::full(&[n, g], 1.0),
            h_minus: Tensor::full(&[n, g], 1.0),
            instance_is_head: vec![false; n],
        }
    }
}

/// Draw one Bernoulli(gamma) variable per `(instance, category)` cell and
/// apply it to whichever of the two keep-masks is maskable there.
pub fn sample_masks(
    labels: &Tensor,
    tax: &Taxonomy,
    cfg: &CglConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MaskSample> {
    cfg.validate()?;
    let (n, g) = (labels.rows(), labels.cols());
    if g != tax.num_categories() {
        return Err(Error::Shape(format!(
            "labels have {g} categories, taxonomy has {}",
            tax.num_categories()
        )));
    }
    let instance_is_head: Vec<bool> = (0..n)
        .map(|i| instance_head_membership(labels.row(i), tax, cfg.head_rule))
        .collect();
    let mut h_plus = Tensor::full(&[n, g], 1.0);
    let mut h_minus = Tensor::full(&[n, g], 1.0);
    for i in 0..n {
        for j in 0..g {
            let lambda = rng.random::<f64>() < cfg.gamma;
            if !lambda {
                continue;
            }
            if tax.is_head(j) {
                h_plus.set(i, j, 0.0);
            }
            if tax.is_tail(j) && instance_is_head[i] {
                h_minus.set(i, j, 0.0);
            }
        }
    }
    Ok(MaskSample {
        h_plus,
        h_minus,
        instance_is_head,
    })
}

/// Loss value with its exact per-logit gradient and positive/negative parts.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    /// d(value)/d(logits), same shape as the logits.
    pub grad: Tensor,
    pub pos_loss: f64,
    pub neg_loss: f64,
}

fn check_binary(labels: &Tensor) -> Result<()> {
    if labels.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Config("labels must be binary 0/1".into()));
    }
    Ok(())
}

fn check_same(logits: &Tensor, labels: &Tensor) -> Result<()> {
    if logits.shape() != labels.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} vs labels {:?}",
            logits.shape(),
            labels.shape()
        )));
    }
    Ok(())
}

/// Binary cross-entropy summed over all cells, reported with its positive and
/// negative parts: `-sum[y log s(z) + (1-y) log(1 - s(z))]`.
pub fn decompose_bce(logits: &Tensor, labels: &Tensor) -> Result<LossOutput> {
    check_same(logits, labels)?;
    check_binary(labels)?;
    let mut value = 0.0;
    let mut pos = 0.0;
    let mut neg = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for (i, (&z, &y)) in logits.data().iter().zip(labels.data()).enumerate() {
        // -log s(z) = softplus(-z); -log(1 - s(z)) = softplus(z)
        let lp = y * softplus(-z);
        let ln = (1.0 - y) * softplus(z);
        pos += lp;
        neg += ln;
        value += lp + ln;
        let s = sigmoid_scalar(z);
        grad.data_mut()[i] = if y == 1.0 { s - 1.0 } else { s };
    }
    Ok(LossOutput {
        value,
        grad,
        pos_loss: pos,
        neg_loss: neg,
    })
}

/// The BCE gradient identity: `s(z) - y`, elementwise.
pub fn bce_logit_grad(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    check_same(logits, labels)?;
    check_binary(labels)?;
    let data = logits
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&z, &y)| sigmoid_scalar(z) - y)
        .collect();
    Tensor::new(logits.shape().to_vec(), data)
}

/// Masked BCE under fixed keep-masks:
/// `-sum[h+ y log s(z) + h- (1-y) log(1 - s(z))]`.
///
/// With all-ones masks this reproduces [`decompose_bce`] bit for bit.
pub fn cgl_loss(logits: &Tensor, labels: &Tensor, masks: &MaskSample) -> Result<LossOutput> {
    check_same(logits, labels)?;
    check_binary(labels)?;
    check_same(logits, &masks.h_plus)?;
    check_same(logits, &masks.h_minus)?;
    let mut value = 0.0;
    let mut pos = 0.0;
    let mut neg = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for (i, (&z, &y)) in logits.data().iter().zip(labels.data()).enumerate() {
        let hp = masks.h_plus.data()[i];
        let hn = masks.h_minus.data()[i];
        let lp = hp * (y * softplus(-z));
        let ln = hn * ((1.0 - y) * softplus(z));
        pos += lp;
        neg += ln;
        value += lp + ln;
        let s = sigmoid_scalar(z);
        grad.data_mut()[i] = if y == 1.0 { hp * (s - 1.0) } else { hn * s };
    }
    Ok(LossOutput {
        value,
        grad,
        pos_loss: pos,
        neg_loss: neg,
    })
}

/// Binary focal loss with focusing parameter `gamma_f`:
/// `-sum[y (1-p)^g log p + (1-y) p^g log(1-p)]` with `p = s(z)`.
///
/// `gamma_f = 0` reduces to plain BCE.
pub fn focal_loss(logits: &Tensor, labels: &Tensor, gamma_f: f64) -> Result<LossOutput> {
    check_same(logits, labels)?;
    check_binary(labels)?;
    if gamma_f < 0.0 {
        return Err(Error::Config(format!(
            "focal focusing parameter {gamma_f} must be >= 0"
        )));
    }
    let mut value = 0.0;
    let mut pos = 0.0;
    let mut neg = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for (i, (&z, &y)) in logits.data().iter().zip(labels.data()).enumerate() {
        let p = sigmoid_scalar(z);
        let log_p = -softplus(-z);
        let log_1p = -softplus(z);
        // (1-p)^g and p^g through logs to stay finite in saturation.
        let om_pow = (gamma_f * log_1p).exp();
        let p_pow = (gamma_f * log_p).exp();
        if y == 1.0 {
            let l = -om_pow * log_p;
            pos += l;
            value += l;
            grad.data_mut()[i] = gamma_f * p * om_pow * log_p - om_pow * (1.0 - p);
        } else {
            let l = -p_pow * log_1p;
            neg += l;
            value += l;
            grad.data_mut()[i] = -gamma_f * (1.0 - p) * p_pow * log_1p + p_pow * p;
        }
    }
    Ok(LossOutput {
        value,
        grad,
        pos_loss: pos,
        neg_loss: neg,
    })
}

/// Equalization-style loss: negative terms on tail categories are dropped
/// with probability `suppress`, positives are never touched.
///
/// `suppress = 0` reduces to plain BCE.
pub fn eq_loss(
    logits: &Tensor,
    labels: &Tensor,
    tax: &Taxonomy,
    suppress: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossOutput> {
    check_same(logits, labels)?;
    check_binary(labels)?;
    if !(0.0..=1.0).contains(&suppress) {
        return Err(Error::Config(format!(
            "eq suppression probability {suppress} not in [0,1]"
        )));
    }
    if logits.cols() != tax.num_categories() {
        return Err(Error::Shape(format!(
            "logits have {} categories, taxonomy has {}",
            logits.cols(),
            tax.num_categories()
        )));
    }
    let (n, g) = (logits.rows(), logits.cols());
    let mut value = 0.0;
    let mut pos = 0.0;
    let mut neg = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for i in 0..n {
        for j in 0..g {
            let z = logits.at(i, j);
            let y = labels.at(i, j);
            let keep_neg = if tax.is_tail(j) && rng.random::<f64>() < suppress {
                0.0
            } else {
                1.0
            };
            let lp = y * softplus(-z);
            let ln = keep_neg * ((1.0 - y) * softplus(z));
            pos += lp;
            neg += ln;
            value += lp + ln;
            let s = sigmoid_scalar(z);
            grad.set(i, j, if y == 1.0 { s - 1.0 } else { keep_neg * s });
        }
    }
    Ok(LossOutput {
        value,
        grad,
        pos_loss: pos,
        neg_loss: neg,
    })
}

/// Per-cell statistics for one `(group, sign)` bucket of the trace.
#[derive(Debug, Clone, Copy)]
pub struct CellStat {
    pub mean_prob: f64,
    pub mean_abs_grad: f64,
    pub cells: usize,
}

/// Buckets in trace order: head+, head-, tail+, tail-.
pub const TRACE_CELLS: [(Group, bool); 4] = [
    (Group::Head, true),
    (Group::Head, false),
    (Group::Tail, true),
    (Group::Tail, false),
];

/// Mean predicted probability and mean `|gradient|` over the four
/// head/tail x positive/negative buckets. Empty buckets come back `None`.
pub fn group_cell_stats(
    logits: &Tensor,
    grad: &Tensor,
    labels: &Tensor,
    tax: &Taxonomy,
) -> [Option<CellStat>; 4] {
    let (n, g) = (logits.rows(), logits.cols());
    let mut sums = [(0.0f64, 0.0f64, 0usize); 4];
    for i in 0..n {
        for j in 0..g {
            let group = tax.group(j);
            let positive = labels.at(i, j) == 1.0;
            let slot = match (group, positive) {
                (Group::Head, true) => 0,
                (Group::Head, false) => 1,
                (Group::Tail, true) => 2,
                (Group::Tail, false) => 3,
                (Group::Medium, _) => continue,
            };
            sums[slot].0 += sigmoid_scalar(logits.at(i, j));
            sums[slot].1 += grad.at(i, j).abs();
            sums[slot].2 += 1;
        }
    }
    sums.map(|(p, gr, c)| {
        (c > 0).then(|| CellStat {
            mean_prob: p / c as f64,
            mean_abs_grad: gr / c as f64,
            cells: c,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, rng_for};
    use crate::tensor::{close, finite_diff_grad};
    use proptest::prelude::*;

    fn toy_taxonomy() -> Taxonomy {
        // counts: two head, two medium, two tail
        Taxonomy::build(&[12000, 11000, 5000, 2000, 100, 8], 10_000, 1_000).unwrap()
    }

    fn random_labels(n: usize, g: usize, seed: u64) -> Tensor {
        let mut rng = rng_for(seed, "labels");
        let data = (0..n * g)
            .map(|_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![n, g], data).unwrap()
    }

    #[test]
    fn taxonomy_paper_thresholds() {
        let tax = Taxonomy::build(&[12000, 5000, 100], 10_000, 1_000).unwrap();
        assert_eq!(tax.group(0), Group::Head);
        assert_eq!(tax.group(1), Group::Medium);
        assert_eq!(tax.group(2), Group::Tail);
    }

    #[test]
    fn taxonomy_all_medium_between_thresholds() {
        let tax = Taxonomy::build(&[5000; 7], 10_000, 1_000).unwrap();
        assert_eq!(tax.group_sizes(), (0, 7, 0));
    }

    #[test]
    fn taxonomy_rejects_overlapping_thresholds() {
        assert!(Taxonomy::build(&[1], 100, 100).is_err());
        assert!(Taxonomy::build(&[1], 50, 100).is_err());
    }

    #[test]
    fn head_membership_rules() {
        let tax = toy_taxonomy();
        assert!(!instance_head_membership(&[0.0; 6], &tax, HeadRule::Any));
        assert!(instance_head_membership(
            &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            &tax,
            HeadRule::Any
        ));
        // Mixed head + tail positives: any-rule true, majority-rule tie -> false.
        let row = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        assert!(instance_head_membership(&row, &tax, HeadRule::Any));
        assert!(!instance_head_membership(&row, &tax, HeadRule::Majority));
    }

    #[test]
    fn bce_per_term_values() {
        let z = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let y = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let out = decompose_bce(&z, &y).unwrap();
        assert!((out.value - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((out.pos_loss - std::f64::consts::LN_2).abs() < 1e-12);

        let z = Tensor::matrix(1, 1, vec![40.0]).unwrap();
        let y = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        assert!(decompose_bce(&z, &y).unwrap().value < 1e-15);
    }

    #[test]
    fn bce_rejects_non_binary_labels() {
        let z = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let y = Tensor::matrix(1, 1, vec![0.5]).unwrap();
        assert!(decompose_bce(&z, &y).is_err());
    }

    #[test]
    fn bce_matches_direct_formula_oracle() {
        let mut rng = rng_for(21, "bce-oracle");
        let z = randn(&[3, 4], &mut rng);
        let y = random_labels(3, 4, 22);
        let out = decompose_bce(&z, &y).unwrap();
        // Direct formula with plain logs (safe at these magnitudes).
        let mut want = 0.0;
        for (zi, yi) in z.data().iter().zip(y.data()) {
            let s = 1.0 / (1.0 + (-zi).exp());
            want -= yi * s.ln() + (1.0 - yi) * (1.0 - s).ln();
        }
        assert!((out.value - want).abs() < 1e-12);
    }

    #[test]
    fn logit_grad_identity_and_finite_diff() {
        let z = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let y = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let g = bce_logit_grad(&z, &y).unwrap();
        assert_eq!(g.data(), &[-0.5, 0.5]);

        let mut rng = rng_for(23, "bce-fd");
        let z = randn(&[3, 4], &mut rng);
        let y = random_labels(3, 4, 24);
        let analytic = bce_logit_grad(&z, &y).unwrap();
        let numeric =
            finite_diff_grad(&mut |t| decompose_bce(t, &y).unwrap().value, &z, 1e-6).unwrap();
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!(close(*a, *n, 1e-6, 1e-10), "{a} vs {n}");
        }
    }

    #[test]
    fn masks_gamma_zero_and_one() {
        let tax = toy_taxonomy();
        let labels = random_labels(5, 6, 25);
        let mut rng = rng_for(26, "masks");
        let m0 = sample_masks(
            &labels,
            &tax,
            &CglConfig {
                gamma: 0.0,
                head_rule: HeadRule::Any,
            },
            &mut rng,
        )
        .unwrap();
        assert!(m0.h_plus.data().iter().all(|&v| v == 1.0));
        assert!(m0.h_minus.data().iter().all(|&v| v == 1.0));

        let m1 = sample_masks(
            &labels,
            &tax,
            &CglConfig {
                gamma: 1.0,
                head_rule: HeadRule::Any,
            },
            &mut rng,
        )
        .unwrap();
        for i in 0..5 {
            for j in 0..6 {
                let hp = m1.h_plus.at(i, j);
                let hn = m1.h_minus.at(i, j);
                assert_eq!(hp == 0.0, tax.is_head(j));
                assert_eq!(hn == 0.0, tax.is_tail(j) && m1.instance_is_head[i]);
            }
        }
    }

    #[test]
    fn mask_zero_rate_matches_gamma_monte_carlo() {
        // 100k maskable cells; empirical rate within 3 sigma of gamma.
        let tax = Taxonomy::build(&[20_000, 10], 10_000, 1_000).unwrap();
        let n = 50_000;
        let labels = Tensor::full(&[n, 2], 1.0); // every instance head-class
        let gamma = 0.1;
        let mut rng = rng_for(27, "mask-mc");
        let m = sample_masks(
            &labels,
            &tax,
            &CglConfig {
                gamma,
                head_rule: HeadRule::Any,
            },
            &mut rng,
        )
        .unwrap();
        // h_plus maskable on column 0 (head), h_minus on column 1 (tail).
        let zeros_plus = (0..n).filter(|&i| m.h_plus.at(i, 0) == 0.0).count();
        let zeros_minus = (0..n).filter(|&i| m.h_minus.at(i, 1) == 0.0).count();
        let total = (zeros_plus + zeros_minus) as f64;
        let rate = total / (2.0 * n as f64);
        let sigma = (gamma * (1.0 - gamma) / (2.0 * n as f64)).sqrt();
        assert!(
            (rate - gamma).abs() <= 3.0 * sigma,
            "rate {rate} vs gamma {gamma} (sigma {sigma})"
        );
    }

    #[test]
    fn cgl_gamma_zero_is_bitwise_bce() {
        let mut rng = rng_for(28, "cgl-eq");
        for case in 0..10 {
            let z = randn(&[4, 6], &mut rng);
            let y = random_labels(4, 6, 100 + case);
            let masks = MaskSample::ones(4, 6);
            let a = cgl_loss(&z, &y, &masks).unwrap();
            let b = decompose_bce(&z, &y).unwrap();
            assert_eq!(a.value.to_bits(), b.value.to_bits());
            for (x, w) in a.grad.data().iter().zip(b.grad.data()) {
                assert_eq!(x.to_bits(), w.to_bits());
            }
        }
    }

    #[test]
    fn cgl_all_zero_masks_kill_loss_and_grad() {
        let mut rng = rng_for(29, "cgl-zero");
        let z = randn(&[3, 6], &mut rng);
        let y = random_labels(3, 6, 30);
        let masks = MaskSample {
            h_plus: Tensor::zeros(&[3, 6]),
            h_minus: Tensor::zeros(&[3, 6]),
            instance_is_head: vec![false; 3],
        };
        let out = cgl_loss(&z, &y, &masks).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cgl_grad_matches_finite_diff_under_fixed_masks() {
        let tax = toy_taxonomy();
        let mut rng = rng_for(31, "cgl-fd");
        let z = randn(&[4, 6], &mut rng);
        let y = random_labels(4, 6, 32);
        let masks = sample_masks(
            &y,
            &tax,
            &CglConfig {
                gamma: 0.5,
                head_rule: HeadRule::Any,
            },
            &mut rng,
        )
        .unwrap();
        let analytic = cgl_loss(&z, &y, &masks).unwrap();
        let numeric =
            finite_diff_grad(&mut |t| cgl_loss(t, &y, &masks).unwrap().value, &z, 1e-6).unwrap();
        for (a, n) in analytic.grad.data().iter().zip(numeric.data()) {
            assert!(close(*a, *n, 1e-6, 1e-10), "{a} vs {n}");
        }
    }

    #[test]
    fn focal_zero_focus_equals_bce() {
        let mut rng = rng_for(33, "focal0");
        let z = randn(&[3, 5], &mut rng);
        let y = random_labels(3, 5, 34);
        let f = focal_loss(&z, &y, 0.0).unwrap();
        let b = decompose_bce(&z, &y).unwrap();
        assert!((f.value - b.value).abs() < 1e-12);
        for (a, w) in f.grad.data().iter().zip(b.grad.data()) {
            assert!((a - w).abs() < 1e-12);
        }
    }

    #[test]
    fn eq_zero_suppression_equals_bce() {
        let tax = toy_taxonomy();
        let mut rng = rng_for(35, "eq0");
        let z = randn(&[3, 6], &mut rng);
        let y = random_labels(3, 6, 36);
        let e = eq_loss(&z, &y, &tax, 0.0, &mut rng).unwrap();
        let b = decompose_bce(&z, &y).unwrap();
        assert!((e.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn baseline_grads_match_finite_diff() {
        let tax = toy_taxonomy();
        let mut rng = rng_for(37, "base-fd");
        let z = randn(&[3, 6], &mut rng);
        let y = random_labels(3, 6, 38);

        let focal = focal_loss(&z, &y, 2.0).unwrap();
        let nf =
            finite_diff_grad(&mut |t| focal_loss(t, &y, 2.0).unwrap().value, &z, 1e-6).unwrap();
        for (a, n) in focal.grad.data().iter().zip(nf.data()) {
            assert!(close(*a, *n, 1e-4, 1e-9), "focal {a} vs {n}");
        }

        // EQ with suppression 1 drops all tail negatives deterministically.
        let mut rng2 = rng_for(39, "eq-fd");
        let eq = eq_loss(&z, &y, &tax, 1.0, &mut rng2).unwrap();
        let ne = finite_diff_grad(
            &mut |t| {
                let mut r = rng_for(39, "eq-fd");
                eq_loss(t, &y, &tax, 1.0, &mut r).unwrap().value
            },
            &z,
            1e-6,
        )
        .unwrap();
        for (a, n) in eq.grad.data().iter().zip(ne.data()) {
            assert!(close(*a, *n, 1e-4, 1e-9), "eq {a} vs {n}");
        }
    }

    #[test]
    fn trace_stats_at_zero_logits() {
        let tax = toy_taxonomy();
        let z = Tensor::zeros(&[2, 6]);
        let y = Tensor::matrix(
            2,
            6,
            vec![
                1.0, 0.0, 0.0, 0.0, 1.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        let out = decompose_bce(&z, &y).unwrap();
        let stats = group_cell_stats(&z, &out.grad, &y, &tax);
        for s in stats.into_iter().flatten() {
            assert!((s.mean_prob - 0.5).abs() < 1e-15);
            assert!((s.mean_abs_grad - 0.5).abs() < 1e-15);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn masking_never_touches_protected_terms(seed in 0u64..1000) {
            let tax = toy_taxonomy();
            let mut rng = rng_for(seed, "prop-mask");
            let z = randn(&[4, 6], &mut rng);
            let y = random_labels(4, 6, seed.wrapping_add(7));
            let masks = sample_masks(&y, &tax, &CglConfig { gamma: 0.7, head_rule: HeadRule::Any }, &mut rng).unwrap();
            let masked = cgl_loss(&z, &y, &masks).unwrap();
            let plain = decompose_bce(&z, &y).unwrap();
            for i in 0..4 {
                let head_inst = masks.instance_is_head[i];
                for j in 0..6 {
                    let group = tax.group(j);
                    let positive = y.at(i, j) == 1.0;
                    // h- never masks tail-instance rows; medium positives and
                    // head/medium negatives are always untouched.
                    let protected = (positive && group != Group::Head)
                        || (!positive && (group != Group::Tail || !head_inst));
                    if protected {
                        prop_assert_eq!(masked.grad.at(i, j).to_bits(), plain.grad.at(i, j).to_bits());
                    }
                }
            }
            prop_assert!(masked.value >= 0.0);
            prop_assert!(masked.value <= plain.value + 1e-12);
        }

        #[test]
        fn loss_values_non_negative(seed in 0u64..1000) {
            let tax = toy_taxonomy();
            let mut rng = rng_for(seed, "prop-nonneg");
            let z = randn(&[3, 6], &mut rng).scaled(5.0);
            let y = random_labels(3, 6, seed.wrapping_add(13));
            prop_assert!(decompose_bce(&z, &y).unwrap().value >= 0.0);
            prop_assert!(focal_loss(&z, &y, 2.0).unwrap().value >= 0.0);
            prop_assert!(eq_loss(&z, &y, &tax, 0.3, &mut rng).unwrap().value >= 0.0);
        }
    }
}
