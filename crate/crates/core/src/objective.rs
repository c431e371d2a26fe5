//! Combined action + reasoning objective and training metrics.
//!
//! Logits row `p` predicts label `p + 1`. Supervised targets split by id:
//! action-range labels feed the action loss, every other non-IGNORE label the
//! reasoning loss. Each group is mean-reduced over the whole batch.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::argmax;
use crate::tokenizer::{Vocabulary, IGNORE};
use crate::Scalar;

pub const DEFAULT_LAMBDA_R: f64 = 0.3;
/// L1 charged per dimension when the predicted token is not a bin of that dimension.
pub const OUT_OF_RANGE_L1: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("logits have {rows} rows but labels have {labels} entries")]
    Shape { rows: usize, labels: usize },
    #[error("logits have {cols} columns, vocabulary has {vocab} ids")]
    Width { cols: usize, vocab: usize },
    #[error("lambda_r must be finite and >= 0, got {0}")]
    Lambda(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_total: f64,
    pub loss_action: f64,
    pub loss_reasoning: f64,
    pub n_action_tokens: usize,
    pub n_reasoning_tokens: usize,
    pub lambda_r: f64,
}

/// Accuracies and L1 are `NaN` when their group has no positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub action_accuracy: f64,
    pub reasoning_accuracy: f64,
    pub action_l1: f64,
}

/// `labels[1..]`, the targets of logits rows `0..n-1`.
pub fn shift_labels(labels: &[i32]) -> &[i32] {
    labels.get(1..).unwrap_or(&[])
}

/// (action_mask, reasoning_mask) over already shifted labels.
pub fn split_masks(shifted_labels: &[i32], v: &Vocabulary) -> (Vec<bool>, Vec<bool>) {
    shifted_labels
        .iter()
        .map(|&l| {
            if l == IGNORE || l < 0 {
                (false, false)
            } else if v.is_action(l as u32) {
                (true, false)
            } else {
                (false, true)
            }
        })
        .unzip()
}

/// `-log softmax(row)[target]`, accumulated in f64.
pub fn token_nll<T: Scalar>(row: ArrayView1<'_, T>, target: usize) -> f64 {
    let max = row.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v.to_f64_lossy() - max).exp()).sum();
    max + sum.ln() - row[target].to_f64_lossy()
}

/// Running sums of both groups; [`LossSums::finish`] applies the mean.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossSums {
    pub action: f64,
    pub reasoning: f64,
    pub n_action: usize,
    pub n_reasoning: usize,
}

impl LossSums {
    /// Adds rows whose targets are given directly (`IGNORE` rows are skipped).
    pub fn add_rows<T: Scalar>(&mut self, logits: ArrayView2<'_, T>, targets: &[i32], v: &Vocabulary) {
        for (row, &t) in logits.rows().into_iter().zip(targets) {
            if t == IGNORE || t < 0 {
                continue;
            }
            let nll = token_nll(row, t as usize);
            if v.is_action(t as u32) {
                self.action += nll;
                self.n_action += 1;
            } else {
                self.reasoning += nll;
                self.n_reasoning += 1;
            }
        }
    }

    pub fn finish(&self, lambda_r: f64) -> LossBreakdown {
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        let loss_action = mean(self.action, self.n_action);
        let loss_reasoning = mean(self.reasoning, self.n_reasoning);
        LossBreakdown {
            loss_total: loss_action + lambda_r * loss_reasoning,
            loss_action,
            loss_reasoning,
            n_action_tokens: self.n_action,
            n_reasoning_tokens: self.n_reasoning,
            lambda_r,
        }
    }
}

fn check<T>(logits: &ArrayView2<'_, T>, labels: &[i32], v: &Vocabulary) -> Result<(), ObjectiveError> {
    if logits.nrows() != labels.len() {
        return Err(ObjectiveError::Shape {
            rows: logits.nrows(),
            labels: labels.len(),
        });
    }
    if logits.ncols() != v.size() {
        return Err(ObjectiveError::Width {
            cols: logits.ncols(),
            vocab: v.size(),
        });
    }
    Ok(())
}

/// Loss over a batch of `(logits, labels)` pairs, each logits `len x vocab`
/// and labels unshifted.
pub fn compute_losses<T: Scalar>(
    batch: &[(ArrayView2<'_, T>, &[i32])],
    v: &Vocabulary,
    lambda_r: f64,
) -> Result<LossBreakdown, ObjectiveError> {
    if !lambda_r.is_finite() || lambda_r < 0.0 {
        return Err(ObjectiveError::Lambda(lambda_r));
    }
    let mut sums = LossSums::default();
    for (logits, labels) in batch {
        check(logits, labels, v)?;
        let n = logits.nrows().saturating_sub(1);
        sums.add_rows(logits.slice(ndarray::s![..n, ..]), shift_labels(labels), v);
    }
    Ok(sums.finish(lambda_r))
}

/// Gradient of the batch loss with respect to `logits` rows whose targets
/// are `targets`: `(softmax - onehot) * w`, with `w = 1/n_action` for action
/// targets and `lambda_r/n_reasoning` for reasoning targets (batch counts).
pub fn loss_grad_rows<T: Scalar>(
    logits: ArrayView2<'_, T>,
    targets: &[i32],
    v: &Vocabulary,
    lambda_r: f64,
    batch: &LossSums,
) -> Array2<T> {
    let w_action = if batch.n_action == 0 { 0.0 } else { 1.0 / batch.n_action as f64 };
    let w_reason = if batch.n_reasoning == 0 { 0.0 } else { lambda_r / batch.n_reasoning as f64 };
    let mut grad = Array2::zeros(logits.raw_dim());
    for ((row, mut g), &t) in logits.rows().into_iter().zip(grad.rows_mut()).zip(targets) {
        if t == IGNORE || t < 0 {
            continue;
        }
        let w = if v.is_action(t as u32) { w_action } else { w_reason };
        if w == 0.0 {
            continue;
        }
        let max = row.iter().map(|x| x.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x.to_f64_lossy() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (j, (gj, e)) in g.iter_mut().zip(&exps).enumerate() {
            let onehot = if j == t as usize { 1.0 } else { 0.0 };
            *gj = T::from_f64_lossy(w * (e / sum - onehot));
        }
    }
    grad
}

/// Running counts behind [`MetricSet`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricSums {
    pub action_correct: usize,
    pub n_action: usize,
    pub reasoning_correct: usize,
    pub n_reasoning: usize,
    pub l1_sum: f64,
}

impl MetricSums {
    pub fn add_rows<T: Scalar>(&mut self, logits: ArrayView2<'_, T>, targets: &[i32], v: &Vocabulary) {
        let start = v.translation_token_start_idx();
        let bins = v.bins_per_dim() as u32;
        for (row, &t) in logits.rows().into_iter().zip(targets) {
            if t == IGNORE || t < 0 {
                continue;
            }
            let t = t as u32;
            let pred = argmax(row.iter().copied()) as u32;
            if v.is_action(t) {
                self.n_action += 1;
                self.action_correct += usize::from(pred == t);
                let dim = ((t - start) / bins) as usize;
                let truth = v.decode_action_id(dim, t).expect("label lies in its own dimension");
                self.l1_sum += match v.decode_action_id(dim, pred) {
                    Ok(p) => (p - truth).abs(),
                    Err(_) => OUT_OF_RANGE_L1,
                };
            } else {
                self.n_reasoning += 1;
                self.reasoning_correct += usize::from(pred == t);
            }
        }
    }

    pub fn finish(&self) -> MetricSet {
        let frac = |a: f64, n: usize| if n == 0 { f64::NAN } else { a / n as f64 };
        MetricSet {
            action_accuracy: frac(self.action_correct as f64, self.n_action),
            reasoning_accuracy: frac(self.reasoning_correct as f64, self.n_reasoning),
            action_l1: frac(self.l1_sum, self.n_action),
        }
    }
}

/// Teacher-forced metrics over a batch of `(logits, labels)` pairs.
pub fn compute_metrics<T: Scalar>(
    batch: &[(ArrayView2<'_, T>, &[i32])],
    v: &Vocabulary,
) -> Result<MetricSet, ObjectiveError> {
    let mut sums = MetricSums::default();
    for (logits, labels) in batch {
        check(logits, labels, v)?;
        let n = logits.nrows().saturating_sub(1);
        sums.add_rows(logits.slice(ndarray::s![..n, ..]), shift_labels(labels), v);
    }
    Ok(sums.finish())
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;
    use proptest::prelude::*;

    use super::*;
    use crate::tokenizer::build_vocabulary;

    fn vocab() -> Vocabulary {
        let words: Vec<String> = (0..6).map(|i| format!("w{i}")).collect();
        build_vocabulary(4, &words).unwrap()
    }

    #[test]
    fn mask_example() {
        let v = vocab();
        let t0 = v.translation_token_start_idx() as i32;
        let (a, r) = split_masks(&[IGNORE, 5, t0, IGNORE], &v);
        assert_eq!(a, vec![false, false, true, false]);
        assert_eq!(r, vec![false, true, false, false]);
        let (a, r) = split_masks(&[IGNORE; 5], &v);
        assert!(a.iter().chain(&r).all(|x| !x));
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let v = vocab();
        let t0 = v.translation_token_start_idx() as i32;
        let logits = Array2::<f64>::zeros((4, v.size()));
        let labels = [IGNORE, 5, t0, 6];
        let lb = compute_losses(&[(logits.view(), &labels[..])], &v, 0.3).unwrap();
        let ln_v = (v.size() as f64).ln();
        assert!((lb.loss_action - ln_v).abs() < 1e-12);
        assert!((lb.loss_reasoning - ln_v).abs() < 1e-12);
        assert_eq!(lb.n_action_tokens, 1);
        assert_eq!(lb.n_reasoning_tokens, 2);
        let lb0 = compute_losses(&[(logits.view(), &labels[..])], &v, 0.0).unwrap();
        assert_eq!(lb0.loss_total, lb0.loss_action);
    }

    #[test]
    fn perfect_prediction_metrics() {
        let v = vocab();
        let t0 = v.translation_token_start_idx() as i32;
        let labels = [IGNORE, 5, t0 + 1, t0 + 6];
        let mut logits = Array2::<f32>::zeros((4, v.size()));
        for p in 0..3 {
            logits[[p, labels[p + 1] as usize]] = 10.0;
        }
        let m = compute_metrics(&[(logits.view(), &labels[..])], &v).unwrap();
        assert_eq!(m.action_accuracy, 1.0);
        assert_eq!(m.reasoning_accuracy, 1.0);
        assert_eq!(m.action_l1, 0.0);
    }

    #[test]
    fn empty_action_group_is_nan() {
        let v = vocab();
        let logits = Array2::<f32>::zeros((3, v.size()));
        let m = compute_metrics(&[(logits.view(), &[IGNORE, 5, 6][..])], &v).unwrap();
        assert!(m.action_accuracy.is_nan());
        assert!(m.action_l1.is_nan());
        let lb = compute_losses(&[(logits.view(), &[IGNORE, 5, 6][..])], &v, 0.3).unwrap();
        assert_eq!(lb.loss_action, 0.0);
    }

    #[test]
    fn out_of_range_prediction_costs_two() {
        let v = vocab();
        let t0 = v.translation_token_start_idx() as i32;
        let mut logits = Array2::<f64>::zeros((2, v.size()));
        logits[[0, 5]] = 5.0;
        let m = compute_metrics(&[(logits.view(), &[IGNORE, t0][..])], &v).unwrap();
        assert_eq!(m.action_l1, OUT_OF_RANGE_L1);
    }

    #[test]
    fn shape_errors() {
        let v = vocab();
        let logits = Array2::<f64>::zeros((3, v.size()));
        assert!(matches!(
            compute_losses(&[(logits.view(), &[IGNORE, 5][..])], &v, 0.3),
            Err(ObjectiveError::Shape { .. })
        ));
        let narrow = Array2::<f64>::zeros((2, 3));
        assert!(matches!(
            compute_metrics(&[(narrow.view(), &[IGNORE, 5][..])], &v),
            Err(ObjectiveError::Width { .. })
        ));
        assert!(compute_losses(&[(logits.view(), &[IGNORE, 5, 6][..])], &v, -1.0).is_err());
    }

    #[test]
    fn random_logits_accuracy_band() {
        use rand::{Rng, SeedableRng};
        let v = vocab();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let n = 10_000;
        let logits = Array2::<f64>::from_shape_simple_fn((n + 1, v.size()), || rng.random::<f64>());
        let mut labels = vec![IGNORE];
        let r = v.translation_token_start_idx()..=v.gripper_token_end_idx();
        labels.extend((0..n).map(|_| rng.random_range(r.clone()) as i32));
        let m = compute_metrics(&[(logits.view(), &labels[..])], &v).unwrap();
        let expected = 1.0 / v.size() as f64;
        assert!((m.action_accuracy - expected).abs() < 0.02, "{}", m.action_accuracy);
    }

    proptest! {
        #[test]
        fn masks_partition(labels in prop::collection::vec(prop_oneof![Just(IGNORE), 0i32..42], 0..60)) {
            let v = vocab();
            let (a, r) = split_masks(&labels, &v);
            for (i, &l) in labels.iter().enumerate() {
                prop_assert!(!(a[i] && r[i]));
                prop_assert_eq!(a[i] || r[i], l != IGNORE);
            }
        }

        #[test]
        fn total_is_affine_in_lambda(seed in 0u64..1000, lam in 0.0f64..2.0) {
            use rand::{Rng, SeedableRng};
            let v = vocab();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let logits = Array2::<f64>::from_shape_simple_fn((8, v.size()), || rng.random_range(-3.0..3.0));
            let labels: Vec<i32> = (0..8).map(|_| rng.random_range(0..v.size() as i32)).collect();
            let lb = compute_losses(&[(logits.view(), &labels[..])], &v, lam).unwrap();
            let lb0 = compute_losses(&[(logits.view(), &labels[..])], &v, 0.0).unwrap();
            prop_assert_eq!(lb.loss_total, lb.loss_action + lam * lb.loss_reasoning);
            prop_assert!(lb.loss_total >= lb0.loss_total);
        }
    }
}
