//! Multi-label ranking metrics: per-label average precision and top-k
//! overall / per-class precision, recall and F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApProtocol {
    /// Mean over recall thresholds 0, 0.1, ..., 1 of the best precision at
    /// recall >= threshold.
    Voc11Point,
    /// Mean of the precision at every positive's rank.
    Area,
}

/// Per-sample scores with binary truths, row-major `[samples, labels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f64>,
    pub truth: Vec<u8>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, scores: Vec<f64>, truth: Vec<u8>) -> Result<Self> {
        if scores.len() != rows * cols || truth.len() != rows * cols {
            return Err(Error::shape(
                "score matrix",
                &[rows * cols, rows * cols],
                &[scores.len(), truth.len()],
            ));
        }
        if let Some(pos) = truth.iter().position(|&t| t > 1) {
            return Err(Error::InvalidLabel {
                sample: pos / cols,
                task: pos % cols,
                value: truth[pos] as f64,
            });
        }
        Ok(ScoreMatrix {
            rows,
            cols,
            scores,
            truth,
        })
    }

    pub fn column(&self, c: usize) -> (Vec<f64>, Vec<u8>) {
        (0..self.rows)
            .map(|r| (self.scores[r * self.cols + c], self.truth[r * self.cols + c]))
            .unzip()
    }
}

/// Indices sorted by descending score; equal scores keep input order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

pub fn average_precision(scores: &[f64], labels: &[u8], protocol: ApProtocol) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("average_precision", &[scores.len()], &[labels.len()]));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::Metric("average precision needs at least one positive".into()));
    }
    let mut hits = 0usize;
    let mut curve = Vec::with_capacity(scores.len()); // (recall, precision)
    let mut area = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            area += hits as f64 / (rank + 1) as f64;
        }
        curve.push((hits as f64 / positives as f64, hits as f64 / (rank + 1) as f64));
    }
    Ok(match protocol {
        ApProtocol::Area => area / positives as f64,
        ApProtocol::Voc11Point => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    curve
                        .iter()
                        .filter(|(r, _)| *r >= t - 1e-12)
                        .map(|&(_, p)| p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanAp {
    pub map: f64,
    /// `None` for labels without positives (excluded from the mean).
    pub per_label: Vec<Option<f64>>,
}

pub fn mean_ap(m: &ScoreMatrix, protocol: ApProtocol) -> Result<MeanAp> {
    let mut per_label = Vec::with_capacity(m.cols);
    for c in 0..m.cols {
        let (s, t) = m.column(c);
        per_label.push(if t.contains(&1) {
            Some(average_precision(&s, &t, protocol)?)
        } else {
            log::warn!("label {c} has no positives; excluded from mAP");
            None
        });
    }
    let defined: Vec<f64> = per_label.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Metric("no label has a positive example".into()));
    }
    Ok(MeanAp {
        map: defined.iter().sum::<f64>() / defined.len() as f64,
        per_label,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKMetrics {
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    pub or: f64,
    pub of1: f64,
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Each sample predicts its `k` highest-scoring labels (lower label index
/// first on equal scores). Per-class precision skips classes never
/// predicted; per-class recall skips classes with no positives.
pub fn topk_metrics(m: &ScoreMatrix, k: usize) -> Result<TopKMetrics> {
    if k == 0 || k > m.cols {
        return Err(Error::Metric(format!("k = {k} outside 1..={}", m.cols)));
    }
    let mut predicted = vec![0usize; m.cols];
    let mut correct = vec![0usize; m.cols];
    let mut positives = vec![0usize; m.cols];
    for r in 0..m.rows {
        let row = &m.scores[r * m.cols..(r + 1) * m.cols];
        let truth = &m.truth[r * m.cols..(r + 1) * m.cols];
        for (c, &t) in truth.iter().enumerate() {
            positives[c] += t as usize;
        }
        for &c in ranking(row).iter().take(k) {
            predicted[c] += 1;
            correct[c] += truth[c] as usize;
        }
    }
    let total_correct: usize = correct.iter().sum();
    let total_pos: usize = positives.iter().sum();
    let op = if m.rows == 0 {
        0.0
    } else {
        total_correct as f64 / (k * m.rows) as f64
    };
    let or = if total_pos == 0 {
        0.0
    } else {
        total_correct as f64 / total_pos as f64
    };
    let mean = |num: &[usize], den: &[usize]| {
        let v: Vec<f64> = num
            .iter()
            .zip(den)
            .filter(|(_, &d)| d > 0)
            .map(|(&n, &d)| n as f64 / d as f64)
            .collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let cp = mean(&correct, &predicted);
    let cr = mean(&correct, &positives);
    Ok(TopKMetrics {
        cp,
        cr,
        cf1: f1(cp, cr),
        op,
        or,
        of1: f1(op, or),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        let voc = average_precision(&[0.9, 0.8, 0.3], &[1, 0, 1], ApProtocol::Voc11Point).unwrap();
        assert!((voc - (6.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-12);
        assert!((voc - 0.8485).abs() < 1e-4);
        for p in [ApProtocol::Voc11Point, ApProtocol::Area] {
            assert_eq!(average_precision(&[0.9, 0.7, 0.2], &[1, 1, 0], p).unwrap(), 1.0);
        }
        let last = average_precision(&[0.9, 0.8, 0.7, 0.1], &[0, 0, 0, 1], ApProtocol::Area).unwrap();
        assert!((last - 0.25).abs() < 1e-12);
        assert!(average_precision(&[0.1], &[0], ApProtocol::Area).is_err());
    }

    #[test]
    fn ties_follow_input_order() {
        let a = average_precision(&[0.5, 0.5], &[1, 0], ApProtocol::Area).unwrap();
        let b = average_precision(&[0.5, 0.5], &[0, 1], ApProtocol::Area).unwrap();
        assert_eq!((a, b), (1.0, 0.5));
    }

    #[test]
    fn mean_ap_excludes_empty_labels() {
        let m = ScoreMatrix::new(2, 3, vec![0.9, 0.1, 0.5, 0.2, 0.8, 0.5], vec![1, 0, 0, 0, 1, 0])
            .unwrap();
        let r = mean_ap(&m, ApProtocol::Area).unwrap();
        assert_eq!(r.per_label, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(r.map, 1.0);
        let halves = ScoreMatrix::new(2, 2, vec![0.9, 0.1, 0.2, 0.8], vec![1, 0, 0, 1]).unwrap();
        let empty = ScoreMatrix::new(1, 1, vec![0.3], vec![0]).unwrap();
        assert!(mean_ap(&empty, ApProtocol::Area).is_err());
        // label 1 ranks its positive second of two: AP 0.5
        let mixed = ScoreMatrix::new(2, 2, vec![0.9, 0.9, 0.2, 0.1], vec![1, 0, 0, 1]).unwrap();
        assert_eq!(mean_ap(&halves, ApProtocol::Area).unwrap().map, 1.0);
        assert_eq!(mean_ap(&mixed, ApProtocol::Area).unwrap().map, 0.75);
    }

    #[test]
    fn topk_worked_example() {
        // truths {0,1} and {2,3}; top-3 predictions {0,1,2} and {1,2,3}
        let m = ScoreMatrix::new(
            2,
            4,
            vec![0.9, 0.8, 0.7, 0.1, 0.1, 0.9, 0.8, 0.7],
            vec![1, 1, 0, 0, 0, 0, 1, 1],
        )
        .unwrap();
        let t = topk_metrics(&m, 3).unwrap();
        assert!((t.op - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(t.or, 1.0);
        assert!((t.of1 - 0.8).abs() < 1e-12);
        assert!((t.cp - 0.75).abs() < 1e-12);
        assert_eq!(t.cr, 1.0);
        assert!((t.cf1 - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(topk_metrics(&m, 4).unwrap().or, 1.0);
        assert!(topk_metrics(&m, 5).is_err());
    }
}
