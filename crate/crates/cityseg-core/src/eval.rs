//! Segmentation metrics: confusion matrices, overall accuracy, per-class
//! IoU, and mean IoU.

use crate::error::{Error, Result};

/// K×K counts; rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
    /// Label ids for each row/column index.
    pub labels: Vec<u16>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<u16>) -> Self {
        let k = labels.len();
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
            labels,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulate per-point truth/prediction index pairs.
    pub fn add(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Data(format!(
                "truth has {} points, prediction {}",
                truth.len(),
                pred.len()
            )));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= self.k || p >= self.k {
                return Err(Error::Data(format!(
                    "label index out of range: truth {t}, pred {p}, K = {}",
                    self.k
                )));
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    /// Merge another matrix over the same label set (metric accumulation is
    /// associative and order-independent).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.labels != other.labels {
            return Err(Error::Data("confusion matrices have different label sets".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Build a confusion matrix from parallel truth/prediction index arrays
/// over `k` classes.
pub fn confusion(truth: &[usize], pred: &[usize], labels: Vec<u16>) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(labels);
    cm.add(truth, pred)?;
    Ok(cm)
}

/// OA, mIoU and per-class IoU. Classes absent from both truth and
/// prediction are excluded from the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub oa: f64,
    pub miou: f64,
    /// `(label id, IoU)` for every class included in the mean.
    pub per_class: Vec<(u16, f64)>,
    pub points: u64,
    pub labels: Vec<u16>,
}

/// Compute metrics from a confusion matrix: OA = trace/total,
/// IoU_k = TP/(TP+FP+FN).
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyInput("metrics over zero evaluated points".into()));
    }
    let k = cm.k();
    let mut trace = 0u64;
    let mut per_class = Vec::new();
    for c in 0..k {
        let tp = cm.count(c, c);
        trace += tp;
        let fp: u64 = (0..k).filter(|&t| t != c).map(|t| cm.count(t, c)).sum();
        let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.count(c, p)).sum();
        let denom = tp + fp + fn_;
        if denom > 0 {
            per_class.push((cm.labels[c], tp as f64 / denom as f64));
        }
    }
    let miou = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|&(_, v)| v).sum::<f64>() / per_class.len() as f64
    };
    Ok(MetricsReport {
        oa: trace as f64 / total as f64,
        miou,
        per_class,
        points: total,
        labels: cm.labels.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction_is_diagonal() {
        let truth = vec![0, 1, 2, 1, 0];
        let cm = confusion(&truth, &truth, vec![10, 11, 12]).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                if t != p {
                    assert_eq!(cm.count(t, p), 0);
                }
            }
        }
        let m = metrics(&cm).unwrap();
        assert_eq!(m.oa, 1.0);
        assert_eq!(m.miou, 1.0);
    }

    #[test]
    fn empty_arrays_give_zero_matrix_and_metrics_error() {
        let cm = confusion(&[], &[], vec![0, 1]).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(metrics(&cm), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn hand_counted_two_class_example() {
        let truth = [0usize, 0, 1, 1];
        let pred = [0usize, 1, 1, 0];
        let cm = confusion(&truth, &pred, vec![0, 1]).unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(1, 0), 1);
        assert_eq!(cm.count(1, 1), 1);
    }

    #[test]
    fn hand_evaluated_metrics() {
        // cm [[2,1],[1,2]] → IoU both 0.5, OA 4/6
        let mut cm = ConfusionMatrix::new(vec![0, 1]);
        cm.add(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 1, 0]).unwrap();
        let m = metrics(&cm).unwrap();
        assert!((m.oa - 4.0 / 6.0).abs() < 1e-12);
        assert!((m.miou - 0.5).abs() < 1e-12);
        assert_eq!(m.per_class, vec![(0, 0.5), (1, 0.5)]);
    }

    #[test]
    fn out_of_range_label_is_data_error() {
        assert!(matches!(
            confusion(&[0, 3], &[0, 0], vec![0, 1]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn absent_classes_are_excluded_from_miou() {
        // class 2 never appears in truth or prediction
        let cm = confusion(&[0, 1], &[0, 1], vec![0, 1, 2]).unwrap();
        let m = metrics(&cm).unwrap();
        assert_eq!(m.per_class.len(), 2);
        assert_eq!(m.miou, 1.0);
    }

    /// Brute-force per-point set-intersection oracle.
    fn oracle(truth: &[usize], pred: &[usize], k: usize) -> (f64, f64) {
        let total = truth.len() as f64;
        let correct = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64;
        let mut ious = Vec::new();
        for c in 0..k {
            let t_set: Vec<usize> = truth
                .iter()
                .enumerate()
                .filter(|&(_, &v)| v == c)
                .map(|(i, _)| i)
                .collect();
            let p_set: Vec<usize> = pred
                .iter()
                .enumerate()
                .filter(|&(_, &v)| v == c)
                .map(|(i, _)| i)
                .collect();
            if t_set.is_empty() && p_set.is_empty() {
                continue;
            }
            let inter = t_set.iter().filter(|i| pred[**i] == c).count() as f64;
            let union = (t_set.len() + p_set.len()) as f64 - inter;
            ious.push(inter / union);
        }
        (correct / total, ious.iter().sum::<f64>() / ious.len() as f64)
    }

    #[test]
    fn matches_brute_force_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..30 {
            let k = rng.gen_range(2..9usize);
            let n = rng.gen_range(1..4000usize);
            let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let cm = confusion(&truth, &pred, (0..k as u16).collect()).unwrap();
            let m = metrics(&cm).unwrap();
            let (oa, miou) = oracle(&truth, &pred, k);
            assert!((m.oa - oa).abs() < 1e-12);
            assert!((m.miou - miou).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_invariance_under_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let k = 5;
        let n = 1000;
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let m1 = metrics(&confusion(&truth, &pred, (0..k as u16).collect()).unwrap()).unwrap();
        // relabel classes by a fixed permutation
        let perm = [3usize, 0, 4, 1, 2];
        let truth2: Vec<usize> = truth.iter().map(|&v| perm[v]).collect();
        let pred2: Vec<usize> = pred.iter().map(|&v| perm[v]).collect();
        let m2 = metrics(&confusion(&truth2, &pred2, (0..k as u16).collect()).unwrap()).unwrap();
        assert!((m1.oa - m2.oa).abs() < 1e-12);
        assert!((m1.miou - m2.miou).abs() < 1e-12);
    }

    #[test]
    fn merge_accumulates() {
        let mut a = confusion(&[0, 1], &[0, 1], vec![0, 1]).unwrap();
        let b = confusion(&[1, 1], &[0, 1], vec![0, 1]).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a.total(), 4);
        assert_eq!(a.count(1, 0), 1);
    }
}
